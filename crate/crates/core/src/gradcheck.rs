//! Central finite-difference check of the hand-written gradients.
//!
//! Discrete choices (association pairs, corruptions) are drawn once from
//! the unperturbed parameters and then frozen, so every loss is a smooth
//! function of the parameters away from L1 kinks and survivor boundaries.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::dataset::LabeledPair;
use crate::graph::{CoocGraphBuilder, PpmiMatrix, Vocab};
use crate::params::{Gradients, ModelDims, ModelParams, ParamId};
use crate::rationale::{association_pairs, backward, predict_with_pairs};
use crate::recall::recall_loss;
use crate::relational::{relational_loss_fixed, sample_corruptions, CorruptedTriple, NaNormalization, Triple};
use crate::training::bce_loss;
use crate::error::Result;

/// Denominator floor of the relative error, so that entries whose true
/// gradient vanishes are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Recall,
    Relational,
    Prediction,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Recall, LossKind::Relational, LossKind::Prediction];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Recall => "L_n",
            LossKind::Relational => "L_r",
            LossKind::Prediction => "L_p",
        }
    }
}

/// Size of the random instance and checker settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSpec {
    pub vocab: usize,
    pub d: usize,
    pub n_rel: usize,
    pub n_h: usize,
    pub n_t: usize,
    pub n_neg: usize,
    pub n_triples: usize,
    pub n_pairs: usize,
    pub norm: NaNormalization,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            vocab: 12,
            d: 4,
            n_rel: 3,
            n_h: 2,
            n_t: 2,
            n_neg: 5,
            n_triples: 8,
            n_pairs: 6,
            norm: NaNormalization::Include,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// A frozen random problem for all three losses.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: ModelParams,
    pub ppmi: PpmiMatrix,
    pub recall_batch: Vec<usize>,
    pub corruptions: Vec<CorruptedTriple>,
    /// Labelled pairs with their frozen association pairs.
    pub predictions: Vec<(LabeledPair, Vec<(usize, usize)>)>,
    pub norm: NaNormalization,
}

/// Parameters uniform in `[−1, 1]`, a random co-occurrence graph, random
/// triples with fixed corruptions and random labelled pairs.
pub fn random_instance(spec: &GradCheckSpec) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = ModelDims::new(spec.d, spec.n_rel);
    let mut params = ModelParams::zeros(dims, spec.vocab);
    for id in ParamId::ALL {
        for x in params.tensor_mut(id).data_mut() {
            *x = rng.random_range(-1.0..=1.0);
        }
    }

    let vocab = Vocab::from((0..spec.vocab).map(|i| format!("e{i}")).collect::<Vec<_>>());
    let mut builder = CoocGraphBuilder::with_vocab(vocab);
    for i in 0..spec.vocab {
        for j in i + 1..spec.vocab {
            if rng.random_bool(0.5) {
                builder.add_ids(i, j, rng.random_range(1..=5));
            }
        }
    }
    let ppmi = builder.build().ppmi()?;
    let recall_batch = ppmi.supported_entities();

    let distinct_pair = |rng: &mut ChaCha8Rng| loop {
        let h = rng.random_range(0..spec.vocab);
        let t = rng.random_range(0..spec.vocab);
        if h != t {
            return (h, t);
        }
    };
    let triples: Vec<Triple> = (0..spec.n_triples)
        .map(|_| {
            let (h, t) = distinct_pair(&mut rng);
            Triple::new(h, rng.random_range(0..dims.n_rel_total() - 1), t)
        })
        .collect();
    let corruptions = sample_corruptions(&triples, spec.n_neg, spec.vocab, &mut rng)?;

    let predictions = (0..spec.n_pairs)
        .map(|i| {
            let (head, tail) = distinct_pair(&mut rng);
            let pair = LabeledPair {
                head,
                tail,
                label: i % 2 == 0,
                relation: 0,
            };
            (pair, association_pairs(&params, head, tail, spec.n_h, spec.n_t))
        })
        .collect();

    Ok(Instance {
        params,
        ppmi,
        recall_batch,
        corruptions,
        predictions,
        norm: spec.norm,
    })
}

impl Instance {
    /// Loss value and analytic gradients at `params`.
    pub fn evaluate(&self, kind: LossKind, params: &ModelParams) -> (f64, Gradients) {
        match kind {
            LossKind::Recall => recall_loss(params, &self.ppmi, &self.recall_batch),
            LossKind::Relational => relational_loss_fixed(params, &self.corruptions),
            LossKind::Prediction => {
                let mut grads = Gradients::new();
                let mut loss = 0.0;
                for (pair, assoc) in &self.predictions {
                    let pred = predict_with_pairs(params, pair.head, pair.tail, assoc, self.norm);
                    let (l, g) = bce_loss(&[pred.probability], &[pair.label]);
                    loss += l;
                    backward(params, &pred, g[0], &mut grads);
                }
                (loss, grads)
            }
        }
    }
}

/// Worst disagreement within one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorReport {
    pub id: ParamId,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry.
    pub worst_entry: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: &'static str,
    pub tolerance: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> Vec<ParamId> {
        self.tensors.iter().filter(|t| !t.passed).map(|t| t.id).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<4} {:<13} max_rel={:.3e} max_abs={:.3e} {}",
                self.loss,
                t.id.name(),
                t.max_rel_error,
                t.max_abs_error,
                if t.passed { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic` against central differences of `loss` at `params`
/// for every entry of every tensor. Missing analytic tensors count as zero.
pub fn compare_gradients<F>(
    name: &'static str,
    loss: F,
    params: &ModelParams,
    analytic: &Gradients,
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: Fn(&ModelParams) -> f64,
{
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(ParamId::ALL.len());
    for id in ParamId::ALL {
        let n = params.tensor(id).len();
        let mut report = TensorReport {
            id,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_entry: 0,
            passed: true,
        };
        for i in 0..n {
            let x = params.tensor(id).data()[i];
            probe.tensor_mut(id).data_mut()[i] = x + step;
            let up = loss(&probe);
            probe.tensor_mut(id).data_mut()[i] = x - step;
            let down = loss(&probe);
            probe.tensor_mut(id).data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * step);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(REL_ERROR_FLOOR);
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst_entry = i;
            }
            report.max_abs_error = report.max_abs_error.max(abs);
        }
        report.passed = report.max_rel_error <= tolerance;
        tensors.push(report);
    }
    GradCheckReport {
        loss: name,
        tolerance,
        tensors,
    }
}

/// Checks one loss on the random instance described by `spec`.
pub fn grad_check(kind: LossKind, spec: &GradCheckSpec) -> Result<GradCheckReport> {
    let inst = random_instance(spec)?;
    Ok(check_instance(kind, &inst, spec.step, spec.tolerance))
}

pub fn check_instance(kind: LossKind, inst: &Instance, step: f64, tolerance: f64) -> GradCheckReport {
    let (_, analytic) = inst.evaluate(kind, &inst.params);
    compare_gradients(kind.name(), |p| inst.evaluate(kind, p).0, &inst.params, &analytic, step, tolerance)
}
