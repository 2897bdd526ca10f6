//! Joint optimisation of the recall, relational and prediction losses.
//!
//! One epoch is a pass over the shuffled training pairs in batches of `b3`.
//! Every step first updates the recall loss on `b1` entities, then the
//! relational loss on `b2` augmented triples, then the prediction loss on
//! the next `b3` pairs. Each stage draws from its own random stream, so
//! disabling a stage leaves the others' samples untouched.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::dataset::{LabeledPair, Split, TripleSet};
use crate::eval::metrics::{f1_score, Metrics};
use crate::graph::{CoocGraph, PpmiMatrix};
use crate::params::{AdamConfig, AdamState, Gradients, ModelDims, ModelParams};
use crate::rationale::{backward, predict, Mode, PipelineOptions};
use crate::recall::recall_loss;
use crate::relational::{relational_loss_fixed, sample_corruptions, NaNormalization, Triple};

const LOG_CLAMP: f64 = 1e-12;

/// Which losses take optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub recall: bool,
    pub relational: bool,
    pub prediction: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            recall: true,
            relational: true,
            prediction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    /// Pair representation width; `d` when absent.
    pub d_p: Option<usize>,
    /// Attention hidden width; `d` when absent.
    pub d_a: Option<usize>,
    pub b1: usize,
    pub b2: usize,
    pub b3: usize,
    pub n_neg: usize,
    pub n_c: usize,
    /// Head associations; `n_c` when absent.
    pub n_h: Option<usize>,
    /// Tail associations; `n_c` when absent.
    pub n_t: Option<usize>,
    /// Rationales per report.
    pub k: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub na_normalization: NaNormalization,
    pub stages: Stages,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            d: 128,
            d_p: None,
            d_a: None,
            b1: 256,
            b2: 256,
            b3: 256,
            n_neg: 100,
            n_c: 32,
            n_h: None,
            n_t: None,
            k: 5,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            patience: 10,
            max_epochs: 200,
            seed: 0,
            mode: Mode::Owa,
            na_normalization: NaNormalization::Include,
            stages: Stages::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("b1", self.b1),
            ("b2", self.b2),
            ("b3", self.b3),
            ("n_neg", self.n_neg),
            ("n_c", self.n_c),
            ("n_h", self.n_h()),
            ("n_t", self.n_t()),
            ("k", self.k),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
            ("d_p", self.d_p.unwrap_or(self.d)),
            ("d_a", self.d_a.unwrap_or(self.d)),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        let rates = [("lr", self.lr), ("eps", self.eps)];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn n_h(&self) -> usize {
        self.n_h.unwrap_or(self.n_c)
    }

    pub fn n_t(&self) -> usize {
        self.n_t.unwrap_or(self.n_c)
    }

    pub fn dims(&self, n_rel: usize) -> ModelDims {
        ModelDims {
            d: self.d,
            d_p: self.d_p.unwrap_or(self.d),
            d_a: self.d_a.unwrap_or(self.d),
            n_rel,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            n_h: self.n_h(),
            n_t: self.n_t(),
            norm: self.na_normalization,
            mode: self.mode,
        }
    }
}

/// Summed binary cross-entropy and its gradient with respect to each logit.
/// Probabilities are clamped away from 0 and 1 inside the logarithms only.
pub fn bce_loss(probabilities: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(probabilities.len(), labels.len(), "probabilities and labels differ in length");
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(labels.len());
    for (&p, &y) in probabilities.iter().zip(labels) {
        let pc = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
        loss -= if y { pc.ln() } else { (1.0 - pc).ln() };
        grad.push(p - f64::from(u8::from(y)));
    }
    (loss, grad)
}

/// Summed prediction loss over `batch` with gradients for every parameter it touches.
pub fn prediction_loss(
    params: &ModelParams,
    batch: &[LabeledPair],
    opts: &PipelineOptions,
    kb: Option<&TripleSet>,
) -> (f64, Gradients) {
    let mut grads = Gradients::new();
    let mut loss = 0.0;
    for pair in batch {
        let pred = predict(params, pair.head, pair.tail, opts, kb);
        let (l, g) = bce_loss(&[pred.probability], &[pair.label]);
        loss += l;
        backward(params, &pred, g[0], &mut grads);
    }
    (loss, grads)
}

/// Independent random streams per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Recall = 1,
    Relational = 2,
    Prediction = 3,
}

pub fn stage_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Draws up to `n` distinct items, or all of them when fewer exist.
pub fn sample_batch<T: Copy>(items: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    items.choose_multiple(rng, n).copied().collect()
}

/// Per-epoch record. Losses are means per sample; `None` for disabled stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_n: Option<f64>,
    pub l_r: Option<f64>,
    pub l_p: Option<f64>,
    pub dev: Option<Metrics>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,L_n,L_r,L_p,dev_precision,dev_recall,dev_F1,wall_seconds";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3}",
                e.epoch,
                opt(e.l_n),
                opt(e.l_r),
                opt(e.l_p),
                opt(e.dev.map(|m| m.precision)),
                opt(e.dev.map(|m| m.recall)),
                opt(e.dev.map(|m| m.f1)),
                e.wall_seconds
            );
        }
        out
    }

    /// Epoch-mean recall losses in order.
    pub fn recall_losses(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.l_n).collect()
    }
}

/// Training inputs after splitting and leakage removal.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub ppmi: &'a PpmiMatrix,
    /// Forward knowledge-base triples without held-out target facts.
    pub kb: TripleSet,
    /// `kb` plus reverse triples.
    pub augmented: TripleSet,
    pub train: &'a [LabeledPair],
    pub dev: &'a [LabeledPair],
    pub target_relation: Option<usize>,
    supported: Vec<usize>,
}

impl<'a> TrainData<'a> {
    /// Removes the dev and test positives of the target relation from the
    /// knowledge base so they cannot leak through the relational loss.
    pub fn new(
        ppmi: &'a PpmiMatrix,
        triples: &TripleSet,
        pairs: &'a Split<LabeledPair>,
        n_rel: usize,
    ) -> Result<Self> {
        let target_relation = pairs.train.iter().chain(&pairs.dev).chain(&pairs.test).map(|p| p.relation).next();
        if let Some(r) = target_relation {
            if let Some(p) = pairs.train.iter().chain(&pairs.dev).chain(&pairs.test).find(|p| p.relation != r) {
                return Err(Error::InvalidArgument(format!(
                    "labelled pairs mix relations {r} and {}; one model predicts one relation",
                    p.relation
                )));
            }
        }
        let kb = match target_relation {
            Some(r) => {
                let held: HashSet<(usize, usize)> = pairs
                    .dev
                    .iter()
                    .chain(&pairs.test)
                    .filter(|p| p.label)
                    .map(|p| (p.head, p.tail))
                    .collect();
                triples.without_pairs(r, &held)
            }
            None => triples.clone(),
        };
        let augmented = kb.augmented(n_rel);
        Ok(Self {
            ppmi,
            kb,
            augmented,
            train: &pairs.train,
            dev: &pairs.dev,
            target_relation,
            supported: ppmi.supported_entities(),
        })
    }
}

/// Stateful optimiser over the three stages.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    data: TrainData<'a>,
    rng_recall: ChaCha8Rng,
    rng_relational: ChaCha8Rng,
    rng_prediction: ChaCha8Rng,
}

/// Summed stage losses and sample counts for one epoch.
#[derive(Debug, Clone, Copy, Default)]
struct EpochSums {
    loss: [f64; 3],
    samples: [usize; 3],
}

impl EpochSums {
    fn mean(&self, stage: usize, enabled: bool) -> Option<f64> {
        enabled.then(|| self.loss[stage] / self.samples[stage].max(1) as f64)
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, params: ModelParams, data: TrainData<'a>) -> Result<Self> {
        config.validate()?;
        let s = config.stages;
        if s.recall && data.supported.is_empty() {
            return Err(Error::Empty("co-occurrence support"));
        }
        if s.relational && data.augmented.is_empty() {
            return Err(Error::Empty("knowledge-base triples"));
        }
        if data.train.is_empty() {
            return Err(Error::Empty("training pairs"));
        }
        if s.prediction && data.dev.is_empty() {
            return Err(Error::Empty("dev pairs"));
        }
        if s.relational && params.vocab_size() < 2 {
            return Err(Error::InvalidArgument("relational corruption needs at least two entities".into()));
        }
        let adam = AdamState::new(config.adam(), &params);
        Ok(Self {
            rng_recall: stage_rng(config.seed, Stream::Recall),
            rng_relational: stage_rng(config.seed, Stream::Relational),
            rng_prediction: stage_rng(config.seed, Stream::Prediction),
            config,
            params,
            adam,
            data,
        })
    }

    pub fn data(&self) -> &TrainData<'a> {
        &self.data
    }

    /// One step on the recall loss; returns (summed loss, samples).
    pub fn recall_step(&mut self) -> Result<(f64, usize)> {
        let batch = sample_batch(&self.data.supported, self.config.b1, &mut self.rng_recall);
        let (loss, grads) = recall_loss(&self.params, self.data.ppmi, &batch);
        self.adam.step(&mut self.params, &grads)?;
        Ok((loss, batch.len()))
    }

    /// One step on the relational loss over sampled augmented triples.
    pub fn relational_step(&mut self) -> Result<(f64, usize)> {
        let triples: Vec<Triple> = sample_batch(self.data.augmented.triples(), self.config.b2, &mut self.rng_relational);
        let batch = sample_corruptions(&triples, self.config.n_neg, self.params.vocab_size(), &mut self.rng_relational)?;
        let (loss, grads) = relational_loss_fixed(&self.params, &batch);
        self.adam.step(&mut self.params, &grads)?;
        Ok((loss, triples.len()))
    }

    /// One step on the prediction loss over `batch`.
    pub fn prediction_step(&mut self, batch: &[LabeledPair]) -> Result<(f64, usize)> {
        let kb = (self.config.mode == Mode::Cwa).then_some(&self.data.kb);
        let (loss, grads) = prediction_loss(&self.params, batch, &self.config.pipeline(), kb);
        self.adam.step(&mut self.params, &grads)?;
        Ok((loss, batch.len()))
    }

    /// Runs one epoch and returns per-sample mean losses. Non-finite
    /// gradients are reported as divergence.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
        self.run_epoch_inner(epoch).map_err(|e| match e {
            Error::NonFiniteGradient(tensor) => Error::Divergence {
                epoch,
                detail: format!("non-finite gradient in `{tensor}`"),
            },
            e => e,
        })
    }

    fn run_epoch_inner(&mut self, epoch: usize) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
        let stages = self.config.stages;
        let mut order: Vec<LabeledPair> = self.data.train.to_vec();
        order.shuffle(&mut self.rng_prediction);
        let mut sums = EpochSums::default();
        for batch in order.chunks(self.config.b3) {
            if stages.recall {
                let (l, n) = self.recall_step()?;
                sums.loss[0] += l;
                sums.samples[0] += n;
            }
            if stages.relational {
                let (l, n) = self.relational_step()?;
                sums.loss[1] += l;
                sums.samples[1] += n;
            }
            if stages.prediction {
                let (l, n) = self.prediction_step(batch)?;
                sums.loss[2] += l;
                sums.samples[2] += n;
            }
        }
        for (stage, name) in ["L_n", "L_r", "L_p"].iter().enumerate() {
            if !sums.loss[stage].is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("{name} became {}", sums.loss[stage]),
                });
            }
        }
        if !self.params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: "parameters became non-finite".into(),
            });
        }
        Ok((
            sums.mean(0, stages.recall),
            sums.mean(1, stages.relational),
            sums.mean(2, stages.prediction),
        ))
    }

    /// Precision, recall and F1 of the current parameters on `pairs`.
    pub fn evaluate(&self, pairs: &[LabeledPair]) -> Metrics {
        let kb = (self.config.mode == Mode::Cwa).then_some(&self.data.kb);
        evaluate_pairs(&self.params, pairs, &self.config.pipeline(), kb)
    }
}

/// Metrics at the 0.5 threshold.
pub fn evaluate_pairs(params: &ModelParams, pairs: &[LabeledPair], opts: &PipelineOptions, kb: Option<&TripleSet>) -> Metrics {
    let probs: Vec<f64> = pairs
        .iter()
        .map(|p| predict(params, p.head, p.tail, opts, kb).probability)
        .collect();
    let labels: Vec<bool> = pairs.iter().map(|p| p.label).collect();
    f1_score(&probs, &labels, 0.5)
}

/// Result of [`joint_train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best dev-F1 epoch (the last epoch when the
    /// prediction stage is disabled).
    pub params: ModelParams,
    /// Optimizer state matching `params`.
    pub adam: AdamState,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_dev: Option<Metrics>,
    /// Forward knowledge base seen during training.
    pub kb: TripleSet,
}

/// Trains from a seeded initialisation until dev F1 stops improving for
/// `patience` epochs or `max_epochs` is reached.
pub fn joint_train(
    graph: &CoocGraph,
    ppmi: &PpmiMatrix,
    triples: &TripleSet,
    pairs: &Split<LabeledPair>,
    n_rel: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if graph.num_edges() == 0 {
        return Err(Error::Empty("co-occurrence graph"));
    }
    let dims = config.dims(n_rel);
    let params = ModelParams::init(dims, graph.num_nodes(), config.seed)?;
    let data = TrainData::new(ppmi, triples, pairs, n_rel)?;
    let mut trainer = Trainer::new(config.clone(), params, data)?;

    let started = Instant::now();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ModelParams, AdamState, Metrics)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let (l_n, l_r, l_p) = trainer.run_epoch(epoch)?;
        let dev = config.stages.prediction.then(|| trainer.evaluate(trainer.data.dev));
        let wall_seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: L_n={l_n:?} L_r={l_r:?} L_p={l_p:?} dev_F1={:?} ({wall_seconds:.1}s)",
            dev.map(|m| m.f1)
        );
        log.epochs.push(EpochLog {
            epoch,
            l_n,
            l_r,
            l_p,
            dev,
            wall_seconds,
        });
        if let Some(m) = dev {
            if best.as_ref().is_none_or(|b| m.f1 > b.0) {
                best = Some((m.f1, epoch, trainer.params.clone(), trainer.adam.clone(), m));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    let kb = trainer.data.kb.clone();
    Ok(match best {
        Some((_, best_epoch, params, adam, m)) => TrainOutcome {
            params,
            adam,
            log,
            best_epoch,
            best_dev: Some(m),
            kb,
        },
        None => TrainOutcome {
            best_epoch: log.epochs.len(),
            params: trainer.params,
            adam: trainer.adam,
            log,
            best_dev: None,
            kb,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_half_is_ln2() {
        let (l, g) = bce_loss(&[0.5], &[true]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g, vec![-0.5]);
    }

    #[test]
    fn bce_exact_label_vanishes() {
        let (l, g) = bce_loss(&[1.0, 0.0], &[true, false]);
        assert!(l < 1e-11);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn bce_batch_is_summed() {
        let (l, g) = bce_loss(&[0.75, 0.25], &[true, false]);
        assert!((l - 2.0 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((l - 0.5754).abs() < 1e-4);
        assert_eq!(g, vec![-0.25, 0.25]);
    }

    #[test]
    fn defaults_follow_documented_values() {
        let c = TrainConfig::default();
        assert_eq!((c.b1, c.b2, c.b3), (256, 256, 256));
        assert_eq!((c.n_neg, c.n_c, c.n_h(), c.n_t(), c.k), (100, 32, 32, 32, 5));
        assert_eq!((c.patience, c.max_epochs, c.d), (10, 200, 128));
        assert_eq!(c.adam(), AdamConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { b2: 0, ..Default::default() },
            TrainConfig { lr: -1.0, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
            TrainConfig { n_h: Some(0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn csv_leaves_disabled_stages_blank() {
        let log = TrainLog {
            epochs: vec![EpochLog {
                epoch: 1,
                l_n: Some(1.5),
                l_r: None,
                l_p: None,
                dev: None,
                wall_seconds: 0.25,
            }],
        };
        assert_eq!(log.to_csv(), format!("{}\n1,1.5,,,,,,0.250\n", TrainLog::CSV_HEADER));
    }

    #[test]
    fn stage_streams_differ() {
        use rand::Rng;
        let a: u64 = stage_rng(3, Stream::Recall).random();
        let b: u64 = stage_rng(3, Stream::Relational).random();
        assert_ne!(a, b);
        assert_eq!(a, stage_rng(3, Stream::Recall).random::<u64>());
    }
}
