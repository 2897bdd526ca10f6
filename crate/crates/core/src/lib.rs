//! Interpretable relation prediction from a corpus co-occurrence graph.
//!
//! The model runs in three stages. Recall learns which entities a term
//! evokes from positive PMI statistics. Recognition scores relational
//! triples between those associations, with a learned NA threshold. The
//! final stage attends over every association pair to predict one target
//! relation and ranks the underlying triples as rationales.
//!
//! All arithmetic is `f64` and every gradient is derived by hand; see
//! [`gradcheck`] for the finite-difference check.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod params;
pub mod rationale;
pub mod recall;
pub mod relational;
pub mod tensor;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use error::{Error, Result};
pub use eval::{
    f1_score, generate_synthetic, render_f1_table, split_dataset, LabeledPair, Metrics, SynthConfig, SyntheticWorld, TripleSet,
    F1Row,
};
pub use graph::{CoocGraph, CoocGraphBuilder, EmpiricalDist, PpmiMatrix, Vocab};
pub use params::{AdamConfig, AdamState, Gradients, ModelDims, ModelParams, ParamId};
pub use rationale::{
    extract_rationales, predict, predict_relation, Mode, PipelineOptions, Prediction, RationaleReport,
};
pub use recall::{association_probability, recall_loss, top_associations, AssociationList};
pub use relational::{
    relation_posterior, relational_loss, triple_score, NaNormalization, RelationPosterior, RelationSchema, Triple,
};
pub use training::{bce_loss, joint_train, TrainConfig, TrainLog, TrainOutcome};
