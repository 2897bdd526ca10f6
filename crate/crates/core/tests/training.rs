use relrec::eval::dataset::Split;
use relrec::params::ParamId;
use relrec::recall::recall_loss;
use relrec::training::{sample_batch, stage_rng, Stages, Stream, TrainData, Trainer};
use relrec::{
    generate_synthetic, joint_train, split_dataset, AdamState, Error, LabeledPair, ModelParams, SynthConfig,
    SyntheticWorld, TrainConfig, TripleSet,
};

fn world() -> SyntheticWorld {
    generate_synthetic(&SynthConfig {
        n_entities: 120,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small(seed: u64) -> TrainConfig {
    TrainConfig {
        d: 8,
        n_c: 4,
        b1: 32,
        b2: 32,
        b3: 16,
        n_neg: 5,
        lr: 0.01,
        max_epochs: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn split(w: &SyntheticWorld) -> Split<LabeledPair> {
    split_dataset(&w.pairs, [0.7, 0.15, 0.15], 1).unwrap()
}

#[test]
fn one_epoch_logs_three_finite_losses() {
    let w = world();
    let ppmi = w.graph.ppmi().unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..small(0)
    };
    let out = joint_train(&w.graph, &ppmi, &w.triples, &split(&w), 4, &cfg).unwrap();
    assert_eq!(out.log.epochs.len(), 1);
    let e = &out.log.epochs[0];
    for l in [e.l_n, e.l_r, e.l_p] {
        assert!(l.unwrap().is_finite());
    }
    assert!(e.dev.is_some());
}

#[test]
fn fixed_seed_reproduces_the_log() {
    let w = world();
    let ppmi = w.graph.ppmi().unwrap();
    let s = split(&w);
    let run = |seed| {
        let mut out = joint_train(&w.graph, &ppmi, &w.triples, &s, 4, &small(seed)).unwrap();
        for e in &mut out.log.epochs {
            e.wall_seconds = 0.0;
        }
        (out.log, out.params)
    };
    let (a, pa) = run(5);
    let (b, pb) = run(5);
    let (c, _) = run(6);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_ne!(a, c);
}

#[test]
fn losses_share_entity_and_relation_tensors() {
    let w = world();
    let ppmi = w.graph.ppmi().unwrap();
    let s = split(&w);
    let cfg = small(0);
    let params = ModelParams::init(cfg.dims(4), w.vocab.len(), 0).unwrap();
    let data = TrainData::new(&ppmi, &w.triples, &s, 4).unwrap();
    let mut t = Trainer::new(cfg, params, data).unwrap();
    let versions = |t: &Trainer| ParamId::ALL.map(|id| t.params.tensor(id).version());

    let v0 = versions(&t);
    t.recall_step().unwrap();
    let v1 = versions(&t);
    assert!(v1[ParamId::EntityEmb.index()] > v0[ParamId::EntityEmb.index()]);
    assert!(v1[ParamId::ContextEmb.index()] > v0[ParamId::ContextEmb.index()]);
    assert_eq!(v1[ParamId::RelationEmb.index()], v0[ParamId::RelationEmb.index()]);

    t.relational_step().unwrap();
    let v2 = versions(&t);
    assert!(v2[ParamId::EntityEmb.index()] > v1[ParamId::EntityEmb.index()]);
    assert!(v2[ParamId::RelationEmb.index()] > v1[ParamId::RelationEmb.index()]);
    assert_eq!(v2[ParamId::ContextEmb.index()], v1[ParamId::ContextEmb.index()]);

    let batch: Vec<LabeledPair> = s.train.iter().copied().take(8).collect();
    t.prediction_step(&batch).unwrap();
    let v3 = versions(&t);
    for id in [ParamId::EntityEmb, ParamId::RelationEmb, ParamId::Wr, ParamId::Wa] {
        assert!(v3[id.index()] > v2[id.index()], "{} not updated by L_p", id.name());
    }
    assert_eq!(v3[ParamId::ContextEmb.index()], v2[ParamId::ContextEmb.index()]);
}

#[test]
fn recall_only_training_is_plain_recall_descent() {
    let w = world();
    let ppmi = w.graph.ppmi().unwrap();
    let s = split(&w);
    let cfg = TrainConfig {
        stages: Stages {
            recall: true,
            relational: false,
            prediction: false,
        },
        max_epochs: 6,
        ..small(3)
    };
    let out = joint_train(&w.graph, &ppmi, &w.triples, &s, 4, &cfg).unwrap();
    assert!(out.log.epochs.iter().all(|e| e.l_r.is_none() && e.l_p.is_none() && e.dev.is_none()));

    // the same optimisation written out by hand
    let mut params = ModelParams::init(cfg.dims(4), w.vocab.len(), cfg.seed).unwrap();
    let mut adam = AdamState::new(cfg.adam(), &params);
    let mut rng = stage_rng(cfg.seed, Stream::Recall);
    let supported = ppmi.supported_entities();
    let steps = s.train.len().div_ceil(cfg.b3);
    let mut means = Vec::new();
    for _ in 0..cfg.max_epochs {
        let (mut sum, mut n) = (0.0, 0);
        for _ in 0..steps {
            let batch = sample_batch(&supported, cfg.b1, &mut rng);
            let (l, g) = recall_loss(&params, &ppmi, &batch);
            adam.step(&mut params, &g).unwrap();
            sum += l;
            n += batch.len();
        }
        means.push(sum / n as f64);
    }
    assert_eq!(out.log.recall_losses(), means);
    assert_eq!(out.params, params);
    let decreasing = means.windows(2).filter(|p| p[1] < p[0]).count();
    assert!(decreasing * 10 >= (means.len() - 1) * 9, "{means:?}");
}

#[test]
fn early_stopping_returns_the_best_dev_epoch() {
    let w = world();
    let ppmi = w.graph.ppmi().unwrap();
    let s = split(&w);
    let cfg = TrainConfig {
        patience: 2,
        max_epochs: 30,
        ..small(2)
    };
    let out = joint_train(&w.graph, &ppmi, &w.triples, &s, 4, &cfg).unwrap();
    let best = out.best_dev.unwrap();
    let f1s: Vec<f64> = out.log.epochs.iter().map(|e| e.dev.unwrap().f1).collect();
    let first_max = f1s.iter().position(|&f| f == f1s.iter().copied().fold(f64::MIN, f64::max)).unwrap();
    assert_eq!(out.best_epoch, first_max + 1);
    assert_eq!(out.log.epochs[first_max].dev, Some(best));
    // stopped by patience, or ran to the cap
    assert!(out.log.epochs.len() == out.best_epoch + cfg.patience || out.log.epochs.len() == cfg.max_epochs);
    let again = relrec::training::evaluate_pairs(&out.params, &s.dev, &cfg.pipeline(), None);
    assert_eq!(again, best);
}

#[test]
fn empty_inputs_are_rejected() {
    let w = world();
    let ppmi = w.graph.ppmi().unwrap();
    let s = split(&w);
    let err = joint_train(&w.graph, &ppmi, &TripleSet::new([]), &s, 4, &small(0)).unwrap_err();
    assert!(matches!(err, Error::Empty(_)), "{err}");
    let no_train = Split {
        train: vec![],
        ..s.clone()
    };
    let err = joint_train(&w.graph, &ppmi, &w.triples, &no_train, 4, &small(0)).unwrap_err();
    assert!(matches!(err, Error::Empty(_)), "{err}");
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let w = world();
    let ppmi = w.graph.ppmi().unwrap();
    let cfg = TrainConfig {
        lr: 1e300,
        ..small(0)
    };
    let err = joint_train(&w.graph, &ppmi, &w.triples, &split(&w), 4, &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}
