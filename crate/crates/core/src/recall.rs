//! Association recall: a full-softmax model of `p(e_j | e_i)` fit to PPMI
//! neighbourhoods, and top-N retrieval of associated entities.

use std::cmp::Ordering;

use crate::graph::{EmpiricalDist, PpmiMatrix};
use crate::params::{Gradients, ModelParams, ParamId};
use crate::tensor::{axpy, dot, log_sum_exp, softmax};

/// Top associations of one entity, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationList {
    pub entries: Vec<(usize, f64)>,
}

impl AssociationList {
    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(id, _)| id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Recall logits `υ′_k · υ_i` for every entity `k`.
pub fn association_logits(params: &ModelParams, entity: usize) -> Vec<f64> {
    let query = params.entity_emb.row(entity);
    (0..params.vocab_size())
        .map(|k| dot(params.context_emb.row(k), query))
        .collect()
}

/// `p(· | e_i)` over the whole vocabulary.
pub fn association_probability(params: &ModelParams, entity: usize) -> Vec<f64> {
    softmax(&association_logits(params, entity))
}

/// Cross-entropy between the empirical PPMI distribution and the model,
/// summed over `batch`. Entities without empirical support are skipped.
pub fn recall_loss(params: &ModelParams, ppmi: &PpmiMatrix, batch: &[usize]) -> (f64, Gradients) {
    let mut grads = Gradients::new();
    let mut loss = 0.0;
    for &i in batch {
        if let Some(target) = ppmi.empirical(i) {
            loss += accumulate_entity_loss(params, i, &target, &mut grads);
        }
    }
    (loss, grads)
}

/// Loss of a single query entity against `target`; gradients are added to `grads`.
pub fn accumulate_entity_loss(
    params: &ModelParams,
    entity: usize,
    target: &EmpiricalDist,
    grads: &mut Gradients,
) -> f64 {
    let logits = association_logits(params, entity);
    let lse = log_sum_exp(&logits);
    // d loss / d logit_k = p_k − p̂_k, since p̂ sums to one
    let mut dz: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    let mut loss = 0.0;
    for &(j, q) in &target.support {
        loss -= q * (logits[j] - lse);
        dz[j] -= q;
    }

    let mut g_query = vec![0.0; params.dims.d];
    let query = params.entity_emb.row(entity);
    let g_ctx = grads.slot(ParamId::ContextEmb, params);
    for (k, &dzk) in dz.iter().enumerate() {
        if dzk == 0.0 {
            continue;
        }
        axpy(dzk, params.context_emb.row(k), &mut g_query);
        axpy(dzk, query, g_ctx.row_mut(k));
    }
    axpy(1.0, &g_query, grads.slot(ParamId::EntityEmb, params).row_mut(entity));
    loss
}

/// The `n` most probable associations of `entity`, excluding itself.
/// Ties are broken by ascending id.
pub fn top_associations(params: &ModelParams, entity: usize, n: usize) -> AssociationList {
    let probs = association_probability(params, entity);
    top_from_probs(&probs, entity, n)
}

pub(crate) fn top_from_probs(probs: &[f64], exclude: usize, n: usize) -> AssociationList {
    let mut ids: Vec<usize> = (0..probs.len()).filter(|&k| k != exclude).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        probs[*b]
            .partial_cmp(&probs[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let n = n.min(ids.len());
    if n == 0 {
        return AssociationList { entries: Vec::new() };
    }
    if n < ids.len() {
        ids.select_nth_unstable_by(n - 1, cmp);
        ids.truncate(n);
    }
    ids.sort_unstable_by(cmp);
    AssociationList {
        entries: ids.into_iter().map(|k| (k, probs[k])).collect(),
    }
}
