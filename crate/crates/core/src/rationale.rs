//! Assumption formation and representation, attention over association
//! pairs, the binary relation prediction, and rationale extraction.
//!
//! The forward pass keeps every intermediate activation in a [`Prediction`]
//! so that [`backward`] can push the prediction-loss gradient through
//! attention, the pair encoder, the relation posteriors and the triple
//! scores. Membership of the posterior survivor set is held fixed.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::eval::dataset::TripleSet;
use crate::graph::Vocab;
use crate::params::{Gradients, ModelParams, ParamId};
use crate::recall::{association_probability, top_from_probs, AssociationList};
use crate::relational::{
    accumulate_score_grad, relation_posterior_with, NaNormalization, RelationPosterior, RelationSchema, Triple,
};
use crate::tensor::{axpy, dot, sigmoid, softmax, Tensor};

/// Open-world (model-estimated) or closed-world (knowledge-base) assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "OWA", alias = "owa")]
    Owa,
    #[serde(rename = "CWA", alias = "cwa")]
    Cwa,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Owa => "OWA",
            Mode::Cwa => "CWA",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "owa" => Ok(Mode::Owa),
            "cwa" => Ok(Mode::Cwa),
            other => Err(format!("unknown mode `{other}` (expected owa or cwa)")),
        }
    }
}

/// One association pair with everything the model derived for it.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionRecord {
    pub a_h: usize,
    pub a_t: usize,
    pub top_relation: Option<usize>,
    pub posterior: RelationPosterior,
    /// Posterior-weighted relation vector.
    pub a_vec: Vec<f64>,
    /// Pair representation, entries in (−1, 1).
    pub e_vec: Vec<f64>,
    /// Attention weight over all pairs.
    pub attn: f64,
    /// `attn × posterior[top_relation]`, or 0 without a surviving relation.
    pub score: f64,
    /// Forward relations stored in the knowledge base for this pair (CWA only).
    pub kb_relations: Vec<usize>,
}

/// Full forward pass for one target pair.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub head: usize,
    pub tail: usize,
    pub probability: f64,
    pub logit: f64,
    pub records: Vec<AssumptionRecord>,
    /// Attention-pooled representation.
    pub pooled: Vec<f64>,
    /// CWA only: no knowledge-base pair was found and all pairs were used.
    pub fallback: bool,
    hidden: Vec<Vec<f64>>,
}

/// Settings shared by every forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub n_h: usize,
    pub n_t: usize,
    pub norm: NaNormalization,
    pub mode: Mode,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            n_h: 32,
            n_t: 32,
            norm: NaNormalization::Include,
            mode: Mode::Owa,
        }
    }
}

/// `a = Σ_k p(r_k | a_h, a_t) · ξ_k` over forward relations.
pub fn assumption_vector(posterior: &RelationPosterior, relation_emb: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; relation_emb.cols()];
    for &k in &posterior.survivors {
        axpy(posterior.probs[k], relation_emb.row(k), &mut out);
    }
    out
}

/// `e = tanh([υ_{a_h}; υ_{a_t}; a] · W_p + b_p)`
pub fn pair_representation(params: &ModelParams, a_h: usize, a_t: usize, a_vec: &[f64]) -> Vec<f64> {
    let x = concat_input(params, a_h, a_t, a_vec);
    encode(params, &x)
}

fn concat_input(params: &ModelParams, a_h: usize, a_t: usize, a_vec: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(3 * params.dims.d);
    x.extend_from_slice(params.entity_emb.row(a_h));
    x.extend_from_slice(params.entity_emb.row(a_t));
    x.extend_from_slice(a_vec);
    x
}

fn encode(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let mut pre = params.b_p.row(0).to_vec();
    for (r, &xr) in x.iter().enumerate() {
        if xr != 0.0 {
            axpy(xr, params.w_p.row(r), &mut pre);
        }
    }
    pre.iter_mut().for_each(|z| *z = z.tanh());
    pre
}

/// Attention hidden layer `tanh(W_a e + b_a)` and score `g = v · hidden`.
fn attention_score(params: &ModelParams, e_vec: &[f64]) -> (Vec<f64>, f64) {
    let hidden: Vec<f64> = (0..params.dims.d_a)
        .map(|a| (dot(params.w_a.row(a), e_vec) + params.b_a.get(0, a)).tanh())
        .collect();
    let g = dot(params.v.row(0), &hidden);
    (hidden, g)
}

/// Attention distribution over all pair representations.
pub fn attention_weights(params: &ModelParams, e_vecs: &[Vec<f64>]) -> Vec<f64> {
    let g: Vec<f64> = e_vecs.iter().map(|e| attention_score(params, e).1).collect();
    softmax(&g)
}

/// Top-`n_h` × top-`n_t` association pairs of a target pair.
pub fn association_pairs(params: &ModelParams, head: usize, tail: usize, n_h: usize, n_t: usize) -> Vec<(usize, usize)> {
    let ah = top_from_probs(&association_probability(params, head), head, n_h);
    let at = top_from_probs(&association_probability(params, tail), tail, n_t);
    cross(&ah, &at)
}

fn cross(ah: &AssociationList, at: &AssociationList) -> Vec<(usize, usize)> {
    ah.ids().flat_map(|i| at.ids().map(move |j| (i, j))).collect()
}

/// OWA prediction `p(r | e_h, e_t)` from all `n_h × n_t` association pairs.
pub fn predict_relation(params: &ModelParams, head: usize, tail: usize, n_h: usize, n_t: usize) -> Prediction {
    let pairs = association_pairs(params, head, tail, n_h, n_t);
    predict_with_pairs(params, head, tail, &pairs, NaNormalization::Include)
}

/// Runs the configured mode; CWA needs the knowledge base.
pub fn predict(params: &ModelParams, head: usize, tail: usize, opts: &PipelineOptions, kb: Option<&TripleSet>) -> Prediction {
    match (opts.mode, kb) {
        (Mode::Cwa, Some(kb)) => {
            let sel = cwa_pairs(params, kb, head, tail, opts.n_h, opts.n_t);
            let pairs = if sel.fallback {
                association_pairs(params, head, tail, opts.n_h, opts.n_t)
            } else {
                sel.pairs.iter().map(|p| (p.a_h, p.a_t)).collect()
            };
            let mut pred = predict_with_pairs(params, head, tail, &pairs, opts.norm);
            pred.fallback = sel.fallback;
            if !sel.fallback {
                for (rec, sp) in pred.records.iter_mut().zip(&sel.pairs) {
                    rec.kb_relations = sp.relations.clone();
                }
            }
            pred
        }
        _ => {
            let pairs = association_pairs(params, head, tail, opts.n_h, opts.n_t);
            predict_with_pairs(params, head, tail, &pairs, opts.norm)
        }
    }
}

/// Forward pass over an explicit set of association pairs.
pub fn predict_with_pairs(
    params: &ModelParams,
    head: usize,
    tail: usize,
    pairs: &[(usize, usize)],
    norm: NaNormalization,
) -> Prediction {
    assert!(!pairs.is_empty(), "prediction needs at least one association pair");
    let mut records = Vec::with_capacity(pairs.len());
    let mut hidden = Vec::with_capacity(pairs.len());
    let mut g = Vec::with_capacity(pairs.len());
    for &(a_h, a_t) in pairs {
        let posterior = relation_posterior_with(params, a_h, a_t, norm);
        let a_vec = assumption_vector(&posterior, &params.relation_emb);
        let e_vec = pair_representation(params, a_h, a_t, &a_vec);
        let (h, score) = attention_score(params, &e_vec);
        hidden.push(h);
        g.push(score);
        records.push(AssumptionRecord {
            a_h,
            a_t,
            top_relation: posterior.top_relation(),
            posterior,
            a_vec,
            e_vec,
            attn: 0.0,
            score: 0.0,
            kb_relations: Vec::new(),
        });
    }
    let attn = softmax(&g);
    let mut pooled = vec![0.0; params.dims.d_p];
    for (rec, &w) in records.iter_mut().zip(&attn) {
        rec.attn = w;
        rec.score = rec.top_relation.map_or(0.0, |k| w * rec.posterior.probs[k]);
        axpy(w, &rec.e_vec, &mut pooled);
    }
    let logit = dot(params.w_r.row(0), &pooled) + params.b_r.get(0, 0);
    Prediction {
        head,
        tail,
        probability: sigmoid(logit),
        logit,
        records,
        pooled,
        fallback: false,
        hidden,
    }
}

/// Back-propagates `d loss / d logit` through a cached forward pass.
pub fn backward(params: &ModelParams, pred: &Prediction, d_logit: f64, grads: &mut Gradients) {
    let d = params.dims.d;
    let d_p = params.dims.d_p;
    let na = params.dims.na_index();

    axpy(d_logit, &pred.pooled, grads.slot(ParamId::Wr, params).row_mut(0));
    grads.slot(ParamId::Br, params).data_mut()[0] += d_logit;
    let d_pooled: Vec<f64> = params.w_r.row(0).iter().map(|w| w * d_logit).collect();

    // attention softmax
    let d_attn: Vec<f64> = pred.records.iter().map(|r| dot(&r.e_vec, &d_pooled)).collect();
    let mean: f64 = pred.records.iter().zip(&d_attn).map(|(r, da)| r.attn * da).sum();

    let mut d_e = vec![0.0; d_p];
    let mut d_pre = vec![0.0; d_p];
    let mut d_x = vec![0.0; 3 * d];
    for (idx, rec) in pred.records.iter().enumerate() {
        let dg = rec.attn * (d_attn[idx] - mean);
        let hidden = &pred.hidden[idx];

        // e contributes to the pooled vector directly and through g
        d_e.iter_mut().zip(&d_pooled).for_each(|(de, dp)| *de = rec.attn * dp);
        if dg != 0.0 {
            axpy(dg, hidden, grads.slot(ParamId::V, params).row_mut(0));
            let d_u: Vec<f64> = (0..params.dims.d_a)
                .map(|a| dg * params.v.get(0, a) * (1.0 - hidden[a] * hidden[a]))
                .collect();
            {
                let gwa = grads.slot(ParamId::Wa, params);
                for (a, &du) in d_u.iter().enumerate() {
                    axpy(du, &rec.e_vec, gwa.row_mut(a));
                }
            }
            axpy(1.0, &d_u, grads.slot(ParamId::Ba, params).row_mut(0));
            for (a, &du) in d_u.iter().enumerate() {
                axpy(du, params.w_a.row(a), &mut d_e);
            }
        }

        // pair encoder
        for c in 0..d_p {
            d_pre[c] = d_e[c] * (1.0 - rec.e_vec[c] * rec.e_vec[c]);
        }
        let x = concat_input(params, rec.a_h, rec.a_t, &rec.a_vec);
        {
            let gwp = grads.slot(ParamId::Wp, params);
            for (r, &xr) in x.iter().enumerate() {
                if xr != 0.0 {
                    axpy(xr, &d_pre, gwp.row_mut(r));
                }
            }
        }
        axpy(1.0, &d_pre, grads.slot(ParamId::Bp, params).row_mut(0));
        for (r, dx) in d_x.iter_mut().enumerate() {
            *dx = dot(params.w_p.row(r), &d_pre);
        }
        {
            let ge = grads.slot(ParamId::EntityEmb, params);
            axpy(1.0, &d_x[..d], ge.row_mut(rec.a_h));
            axpy(1.0, &d_x[d..2 * d], ge.row_mut(rec.a_t));
        }

        // posterior-weighted relation vector and the thresholded softmax
        let post = &rec.posterior;
        if post.survivors.is_empty() {
            continue;
        }
        let d_a = &d_x[2 * d..];
        let d_prob: Vec<f64> = post
            .survivors
            .iter()
            .map(|&k| dot(params.relation_emb.row(k), d_a))
            .collect();
        {
            let gr = grads.slot(ParamId::RelationEmb, params);
            for &k in &post.survivors {
                axpy(post.probs[k], d_a, gr.row_mut(k));
            }
        }
        let inner: f64 = post
            .survivors
            .iter()
            .zip(&d_prob)
            .map(|(&k, dp)| post.probs[k] * dp)
            .sum();
        for (&k, dp) in post.survivors.iter().zip(&d_prob) {
            let ds = post.probs[k] * (dp - inner);
            accumulate_score_grad(params, grads, rec.a_h, k, rec.a_t, ds);
        }
        // NA sits in the normaliser only; its own weight carries no gradient
        if post.na_prob > 0.0 {
            accumulate_score_grad(params, grads, rec.a_h, na, rec.a_t, -post.na_prob * inner);
        }
    }
}

/// A ranked rationale triple with its scoring parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Rationale {
    pub triple: Triple,
    pub score: f64,
    pub attn: f64,
    pub posterior: f64,
}

/// Ranks `(a_h, k, a_t)` for every surviving relation of every record by
/// `attn × posterior[k]`, drops `target`, keeps the best `k`.
pub fn rank_rationales(records: &[AssumptionRecord], target: Triple, top_k: usize) -> Vec<Rationale> {
    let mut cands: Vec<Rationale> = records
        .iter()
        .flat_map(|rec| {
            rec.posterior.survivors.iter().map(move |&k| Rationale {
                triple: Triple::new(rec.a_h, k, rec.a_t),
                score: rec.attn * rec.posterior.probs[k],
                attn: rec.attn,
                posterior: rec.posterior.probs[k],
            })
        })
        .filter(|r| r.triple != target)
        .collect();
    sort_rationales(&mut cands);
    cands.truncate(top_k);
    cands
}

/// CWA ranking: every knowledge-base relation of a kept pair is a rationale
/// with posterior 1, scored by the pair's attention weight.
pub fn rank_kb_rationales(records: &[AssumptionRecord], target: Triple, top_k: usize) -> Vec<Rationale> {
    let mut cands: Vec<Rationale> = records
        .iter()
        .flat_map(|rec| {
            rec.kb_relations.iter().map(move |&k| Rationale {
                triple: Triple::new(rec.a_h, k, rec.a_t),
                score: rec.attn,
                attn: rec.attn,
                posterior: 1.0,
            })
        })
        .filter(|r| r.triple != target)
        .collect();
    sort_rationales(&mut cands);
    cands.truncate(top_k);
    cands
}

fn sort_rationales(cands: &mut [Rationale]) {
    cands.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.triple.head.cmp(&b.triple.head))
            .then(a.triple.tail.cmp(&b.triple.tail))
            .then(a.triple.relation.cmp(&b.triple.relation))
    });
}

/// Serialized rationale row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleRow {
    pub h: String,
    pub r: String,
    pub t: String,
    pub score: f64,
    pub attn: f64,
    pub posterior: f64,
}

/// Prediction plus ranked rationales for one target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleReport {
    pub head: String,
    pub tail: String,
    pub relation: String,
    pub mode: Mode,
    pub probability: f64,
    pub rationales: Vec<RationaleRow>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

/// Builds the named report for `prediction` of relation `target_relation`.
pub fn extract_rationales(
    prediction: &Prediction,
    target_relation: usize,
    top_k: usize,
    mode: Mode,
    vocab: &Vocab,
    schema: &RelationSchema,
) -> RationaleReport {
    let target = Triple::new(prediction.head, target_relation, prediction.tail);
    let ranked = match mode {
        Mode::Owa => rank_rationales(&prediction.records, target, top_k),
        Mode::Cwa if prediction.fallback => Vec::new(),
        Mode::Cwa => rank_kb_rationales(&prediction.records, target, top_k),
    };
    RationaleReport {
        head: vocab.term(prediction.head).to_owned(),
        tail: vocab.term(prediction.tail).to_owned(),
        relation: schema.name(target_relation),
        mode,
        probability: prediction.probability,
        rationales: ranked
            .into_iter()
            .map(|r| RationaleRow {
                h: vocab.term(r.triple.head).to_owned(),
                r: schema.name(r.triple.relation),
                t: vocab.term(r.triple.tail).to_owned(),
                score: r.score,
                attn: r.attn,
                posterior: r.posterior,
            })
            .collect(),
        fallback: prediction.fallback,
    }
}

impl RationaleReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Two-panel text rendering: the target pair, then the rationale rows.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Target pair ({})", self.mode);
        let _ = writeln!(s, "  head:        {}", self.head);
        let _ = writeln!(s, "  tail:        {}", self.tail);
        let _ = writeln!(s, "  relation:    {}", self.relation);
        let _ = writeln!(s, "  probability: {:.4}", self.probability);
        if self.fallback {
            let _ = writeln!(s, "  note: no knowledge-base pair among associations; predicted from all pairs");
        }
        let _ = writeln!(s, "Rationales");
        if self.rationales.is_empty() {
            let _ = writeln!(s, "  (none)");
            return s;
        }
        let w_h = self.rationales.iter().map(|r| r.h.len()).max().unwrap_or(0).max(4);
        let w_r = self.rationales.iter().map(|r| r.r.len()).max().unwrap_or(0).max(8);
        let w_t = self.rationales.iter().map(|r| r.t.len()).max().unwrap_or(0).max(4);
        let _ = writeln!(
            s,
            "  {:>2}  {:<w_h$}  {:<w_r$}  {:<w_t$}  {:>8}  {:>8}  {:>9}",
            "#", "head", "relation", "tail", "score", "attn", "posterior"
        );
        for (i, r) in self.rationales.iter().enumerate() {
            let _ = writeln!(
                s,
                "  {:>2}  {:<w_h$}  {:<w_r$}  {:<w_t$}  {:>8.4}  {:>8.4}  {:>9.4}",
                i + 1,
                r.h,
                r.r,
                r.t,
                r.score,
                r.attn,
                r.posterior
            );
        }
        s
    }
}

/// A knowledge-base-verified association pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CwaPair {
    pub a_h: usize,
    pub a_t: usize,
    /// `p(a_h | e_h) × p(a_t | e_t)`
    pub retrieval: f64,
    /// Forward relations stored for the pair.
    pub relations: Vec<usize>,
}

/// Kept CWA pairs, best first; `fallback` is set when none matched.
#[derive(Debug, Clone, PartialEq)]
pub struct CwaSelection {
    pub pairs: Vec<CwaPair>,
    pub fallback: bool,
}

/// Ranks every pair `(a_h, a_t)` with a stored forward triple by the product of
/// retrieval probabilities and keeps at most `n_h × n_t`. The target entities
/// themselves never serve as associations.
pub fn cwa_pairs(params: &ModelParams, kb: &TripleSet, head: usize, tail: usize, n_h: usize, n_t: usize) -> CwaSelection {
    let ph = association_probability(params, head);
    let pt = association_probability(params, tail);
    cwa_select(&ph, &pt, kb, head, tail, params.dims.n_rel, n_h * n_t)
}

pub(crate) fn cwa_select(
    ph: &[f64],
    pt: &[f64],
    kb: &TripleSet,
    head: usize,
    tail: usize,
    n_rel: usize,
    cap: usize,
) -> CwaSelection {
    let mut pairs: Vec<CwaPair> = Vec::new();
    for t in kb.triples() {
        if t.relation >= n_rel || t.head == head || t.tail == tail {
            continue;
        }
        if pairs.iter().any(|p| p.a_h == t.head && p.a_t == t.tail) {
            continue;
        }
        let relations: Vec<usize> = kb
            .relations_between(t.head, t.tail)
            .iter()
            .copied()
            .filter(|&k| k < n_rel)
            .collect();
        pairs.push(CwaPair {
            a_h: t.head,
            a_t: t.tail,
            retrieval: ph[t.head] * pt[t.tail],
            relations,
        });
    }
    pairs.sort_by(|a, b| {
        b.retrieval
            .partial_cmp(&a.retrieval)
            .unwrap_or(Ordering::Equal)
            .then(a.a_h.cmp(&b.a_h))
            .then(a.a_t.cmp(&b.a_t))
    });
    pairs.truncate(cap);
    let fallback = pairs.is_empty();
    CwaSelection { pairs, fallback }
}
