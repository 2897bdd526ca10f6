//! Dataset preparation, metrics and the synthetic benchmark.

pub mod dataset;
pub mod metrics;
pub mod synthetic;

pub use dataset::{
    load_pairs, sample_negative_pairs, save_pairs, scan_relation_names, split_dataset, LabeledPair, Split, TripleSet,
};
pub use metrics::{f1_score, mean_std, render_f1_table, F1Row, Metrics};
pub use synthetic::{check_world_dir, generate_synthetic, RuleLink, SynthConfig, SyntheticWorld};
