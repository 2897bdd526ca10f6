//! Translation-based triple scoring, NA-thresholded relation posteriors and
//! the sampled negative-log-likelihood relational loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ModelParams, ParamId};
use crate::tensor::{log_sum_exp, softmax};

pub const NA_NAME: &str = "NA";
pub const REVERSE_SUFFIX: &str = "_inv";

/// A `(head, relation, tail)` triple over entity ids and relation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// Names of the forward relations; reverse and NA rows are derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    names: Vec<String>,
}

impl RelationSchema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Empty("relation schema"));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::InvalidArgument(format!("duplicate relation `{n}`")));
            }
            if n == NA_NAME || n.ends_with(REVERSE_SUFFIX) {
                return Err(Error::InvalidArgument(format!("reserved relation name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn n_rel(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Row index for a forward, reverse (`name_inv`) or NA relation name.
    pub fn index(&self, name: &str) -> Result<usize> {
        if name == NA_NAME {
            return Ok(2 * self.n_rel());
        }
        if let Some(k) = self.names.iter().position(|n| n == name) {
            return Ok(k);
        }
        if let Some(base) = name.strip_suffix(REVERSE_SUFFIX) {
            if let Some(k) = self.names.iter().position(|n| n == base) {
                return Ok(k + self.n_rel());
            }
        }
        Err(Error::UnknownRelation(name.to_owned()))
    }

    pub fn name(&self, row: usize) -> String {
        let n = self.n_rel();
        match row {
            k if k < n => self.names[k].clone(),
            k if k < 2 * n => format!("{}{}", self.names[k - n], REVERSE_SUFFIX),
            k if k == 2 * n => NA_NAME.to_owned(),
            k => format!("<row {k}>"),
        }
    }
}

/// `f(h, r, t) = −‖υ_h + ξ_r − υ_t‖₁`
pub fn triple_score(params: &ModelParams, head: usize, relation: usize, tail: usize) -> f64 {
    let h = params.entity_emb.row(head);
    let r = params.relation_emb.row(relation);
    let t = params.entity_emb.row(tail);
    -h.iter()
        .zip(r)
        .zip(t)
        .map(|((a, b), c)| (a + b - c).abs())
        .sum::<f64>()
}

/// Adds `coef · ∂f(h,r,t)/∂θ` into `grads`.
pub(crate) fn accumulate_score_grad(
    params: &ModelParams,
    grads: &mut Gradients,
    head: usize,
    relation: usize,
    tail: usize,
    coef: f64,
) {
    if coef == 0.0 {
        return;
    }
    let d = params.dims.d;
    let mut sign = vec![0.0; d];
    {
        let h = params.entity_emb.row(head);
        let r = params.relation_emb.row(relation);
        let t = params.entity_emb.row(tail);
        for c in 0..d {
            let diff = h[c] + r[c] - t[c];
            // subgradient 0 at the kink
            sign[c] = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    let ge = grads.slot(ParamId::EntityEmb, params);
    for (c, s) in sign.iter().enumerate() {
        ge.row_mut(head)[c] -= coef * s;
        ge.row_mut(tail)[c] += coef * s;
    }
    let gr = grads.slot(ParamId::RelationEmb, params).row_mut(relation);
    for c in 0..d {
        gr[c] -= coef * sign[c];
    }
}

/// How the NA score enters the posterior normaliser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaNormalization {
    /// `exp(s_NA)` always appears in the denominator.
    #[default]
    Include,
    /// Only surviving relations are normalised (sensitivity check).
    Exclude,
}

/// Posterior over forward relations for one association pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationPosterior {
    /// Forward-relation scores `s_k`.
    pub scores: Vec<f64>,
    /// `p(r_k | a_h, a_t)`; exactly zero for non-survivors.
    pub probs: Vec<f64>,
    pub na_score: f64,
    /// Mass assigned to NA (zero under [`NaNormalization::Exclude`]).
    pub na_prob: f64,
    /// Relations with `s_k > s_NA`, ascending.
    pub survivors: Vec<usize>,
}

impl RelationPosterior {
    /// Highest-probability surviving relation (lowest index on ties).
    pub fn top_relation(&self) -> Option<usize> {
        self.survivors.iter().copied().fold(None, |best, k| match best {
            Some(b) if self.probs[b] >= self.probs[k] => Some(b),
            _ => Some(k),
        })
    }
}

/// Builds the posterior from raw scores.
pub fn posterior_from_scores(scores: &[f64], na_score: f64, norm: NaNormalization) -> RelationPosterior {
    let survivors: Vec<usize> = (0..scores.len()).filter(|&k| scores[k] > na_score).collect();
    let mut probs = vec![0.0; scores.len()];
    let mut na_prob = 0.0;
    if !survivors.is_empty() {
        let mut logits: Vec<f64> = survivors.iter().map(|&k| scores[k]).collect();
        if norm == NaNormalization::Include {
            logits.push(na_score);
        }
        let p = softmax(&logits);
        for (slot, &k) in survivors.iter().enumerate() {
            probs[k] = p[slot];
        }
        if norm == NaNormalization::Include {
            na_prob = p[survivors.len()];
        }
    } else if norm == NaNormalization::Include {
        na_prob = 1.0;
    }
    RelationPosterior {
        scores: scores.to_vec(),
        probs,
        na_score,
        na_prob,
        survivors,
    }
}

pub fn relation_posterior(params: &ModelParams, a_h: usize, a_t: usize) -> RelationPosterior {
    relation_posterior_with(params, a_h, a_t, NaNormalization::Include)
}

pub fn relation_posterior_with(
    params: &ModelParams,
    a_h: usize,
    a_t: usize,
    norm: NaNormalization,
) -> RelationPosterior {
    let dims = params.dims;
    let scores: Vec<f64> = (0..dims.n_rel)
        .map(|k| triple_score(params, a_h, k, a_t))
        .collect();
    let na = triple_score(params, a_h, dims.na_index(), a_t);
    posterior_from_scores(&scores, na, norm)
}

/// Which argument of a triple to corrupt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
}

/// `n_neg` uniform replacements of one side, never equal to the gold entity.
/// Sampling is with replacement.
pub fn corrupt_triples<R: Rng + ?Sized>(
    triple: Triple,
    n_neg: usize,
    side: Side,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    Ok(corrupt_entities(triple, n_neg, side, vocab_size, rng)?
        .into_iter()
        .map(|x| match side {
            Side::Head => Triple::new(x, triple.relation, triple.tail),
            Side::Tail => Triple::new(triple.head, triple.relation, x),
        })
        .collect())
}

/// Seeded convenience form of [`corrupt_triples`].
pub fn corrupt_triples_seeded(
    triple: Triple,
    n_neg: usize,
    side: Side,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<Triple>> {
    corrupt_triples(triple, n_neg, side, vocab_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn corrupt_entities<R: Rng + ?Sized>(
    triple: Triple,
    n_neg: usize,
    side: Side,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if vocab_size < 2 {
        return Err(Error::InvalidArgument(
            "corruption needs at least two entities".into(),
        ));
    }
    if n_neg == 0 {
        return Err(Error::InvalidArgument("n_neg must be at least 1".into()));
    }
    let gold = match side {
        Side::Head => triple.head,
        Side::Tail => triple.tail,
    };
    Ok((0..n_neg)
        .map(|_| {
            let x = rng.random_range(0..vocab_size - 1);
            if x >= gold {
                x + 1
            } else {
                x
            }
        })
        .collect())
}

/// A gold triple with its sampled head and tail replacements.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedTriple {
    pub gold: Triple,
    pub heads: Vec<usize>,
    pub tails: Vec<usize>,
}

/// Samples corruptions for every triple of the batch.
pub fn sample_corruptions<R: Rng + ?Sized>(
    triples: &[Triple],
    n_neg: usize,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Vec<CorruptedTriple>> {
    triples
        .iter()
        .map(|&gold| {
            Ok(CorruptedTriple {
                gold,
                heads: corrupt_entities(gold, n_neg, Side::Head, vocab_size, rng)?,
                tails: corrupt_entities(gold, n_neg, Side::Tail, vocab_size, rng)?,
            })
        })
        .collect()
}

/// `−Σ ln p(h | t, r) − Σ ln p(t | h, r)`, each a softmax over the gold
/// entity and its corruptions.
pub fn relational_loss(
    params: &ModelParams,
    triples: &[Triple],
    n_neg: usize,
    seed: u64,
) -> Result<(f64, Gradients)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_corruptions(triples, n_neg, params.vocab_size(), &mut rng)?;
    Ok(relational_loss_fixed(params, &batch))
}

/// Relational loss with pre-drawn corruptions.
pub fn relational_loss_fixed(params: &ModelParams, batch: &[CorruptedTriple]) -> (f64, Gradients) {
    let mut grads = Gradients::new();
    let mut loss = 0.0;
    for ct in batch {
        let Triple {
            head,
            relation,
            tail,
        } = ct.gold;
        for side in [Side::Head, Side::Tail] {
            let replacements = match side {
                Side::Head => &ct.heads,
                Side::Tail => &ct.tails,
            };
            let candidates: Vec<(usize, usize)> = std::iter::once((head, tail))
                .chain(replacements.iter().map(|&x| match side {
                    Side::Head => (x, tail),
                    Side::Tail => (head, x),
                }))
                .collect();
            let scores: Vec<f64> = candidates
                .iter()
                .map(|&(h, t)| triple_score(params, h, relation, t))
                .collect();
            loss += log_sum_exp(&scores) - scores[0];
            let q = softmax(&scores);
            for (c, &(h, t)) in candidates.iter().enumerate() {
                let coef = q[c] - if c == 0 { 1.0 } else { 0.0 };
                accumulate_score_grad(params, &mut grads, h, relation, t, coef);
            }
        }
    }
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelDims;
    use proptest::prelude::*;
    use rand::Rng;

    fn params_2d() -> ModelParams {
        ModelParams::zeros(ModelDims::new(2, 1), 3)
    }

    #[test]
    fn identity_translation_scores_zero() {
        let mut p = params_2d();
        p.entity_emb.row_mut(0).copy_from_slice(&[0.3, -0.2]);
        p.entity_emb.row_mut(1).copy_from_slice(&[0.3, -0.2]);
        assert_eq!(triple_score(&p, 0, 0, 1), 0.0);
    }

    #[test]
    fn hand_l1_score() {
        let mut p = params_2d();
        p.relation_emb.row_mut(0).copy_from_slice(&[1.0, -1.0]);
        assert_eq!(triple_score(&p, 0, 0, 1), -2.0);
    }

    #[test]
    fn posterior_with_na_in_denominator() {
        let post = posterior_from_scores(&[2.0, 0.0], 1.0, NaNormalization::Include);
        let e = std::f64::consts::E;
        assert!((post.probs[0] - e * e / (e * e + e)).abs() < 1e-12);
        assert!((post.probs[0] - 0.7311).abs() < 1e-4);
        assert_eq!(post.probs[1], 0.0);
        assert_eq!(post.survivors, vec![0]);
        assert_eq!(post.top_relation(), Some(0));
    }

    #[test]
    fn posterior_all_below_threshold() {
        let post = posterior_from_scores(&[-1.0, -3.0], 0.5, NaNormalization::Include);
        assert_eq!(post.probs, vec![0.0, 0.0]);
        assert_eq!(post.top_relation(), None);
    }

    #[test]
    fn posterior_ties_with_na_do_not_survive() {
        let post = posterior_from_scores(&[0.5, 0.5], 0.5, NaNormalization::Include);
        assert_eq!(post.probs, vec![0.0, 0.0]);
    }

    #[test]
    fn posterior_excluding_na() {
        let post = posterior_from_scores(&[2.0, 0.0], 1.0, NaNormalization::Exclude);
        assert_eq!(post.probs, vec![1.0, 0.0]);
        assert_eq!(post.na_prob, 0.0);
    }

    #[test]
    fn schema_names_and_rows() {
        let s = RelationSchema::new(vec!["may_treat".into(), "causes".into()]).unwrap();
        assert_eq!(s.index("causes").unwrap(), 1);
        assert_eq!(s.index("may_treat_inv").unwrap(), 2);
        assert_eq!(s.index("NA").unwrap(), 4);
        assert_eq!(s.name(3), "causes_inv");
        assert!(s.index("bogus").is_err());
        assert!(RelationSchema::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn corruption_excludes_gold_and_is_seeded() {
        let t = Triple::new(3, 0, 5);
        let heads = corrupt_triples_seeded(t, 500, Side::Head, 10, 42).unwrap();
        assert_eq!(heads.len(), 500);
        assert!(heads.iter().all(|c| c.head != 3 && c.tail == 5 && c.relation == 0));
        assert_eq!(heads, corrupt_triples_seeded(t, 500, Side::Head, 10, 42).unwrap());
        let tails = corrupt_triples_seeded(t, 200, Side::Tail, 10, 1).unwrap();
        assert!(tails.iter().all(|c| c.tail != 5 && c.head == 3));
        // every non-gold entity is reachable
        let mut seen: Vec<usize> = heads.iter().map(|c| c.head).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn corruption_needs_two_entities() {
        assert!(corrupt_triples_seeded(Triple::new(0, 0, 0), 3, Side::Head, 1, 0).is_err());
    }

    #[test]
    fn equal_scores_loss_is_two_ln2() {
        let p = params_2d();
        let batch = [CorruptedTriple {
            gold: Triple::new(0, 0, 1),
            heads: vec![2],
            tails: vec![2],
        }];
        let (loss, _) = relational_loss_fixed(&p, &batch);
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_gold_loss_vanishes() {
        let mut p = params_2d();
        // gold (0, r, 1) exact; corruptions far away
        p.entity_emb.row_mut(2).copy_from_slice(&[500.0, 500.0]);
        let batch = [CorruptedTriple {
            gold: Triple::new(0, 0, 1),
            heads: vec![2],
            tails: vec![2],
        }];
        let (loss, _) = relational_loss_fixed(&p, &batch);
        assert!(loss < 1e-100);
    }

    fn random_params(seed: u64) -> ModelParams {
        let mut p = ModelParams::zeros(ModelDims::new(4, 3), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in [&mut p.entity_emb, &mut p.relation_emb] {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        p
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn scores_are_nonpositive(seed in any::<u64>(), h in 0usize..10, r in 0usize..7, t in 0usize..10) {
            prop_assert!(triple_score(&random_params(seed), h, r, t) <= 0.0);
        }

        #[test]
        fn translation_invariance(seed in any::<u64>(), h in 0usize..10, r in 0usize..7, t in 0usize..10,
                                  shift in prop::collection::vec(-3.0f64..3.0, 4)) {
            let p = random_params(seed);
            let mut q = p.clone();
            for e in 0..q.vocab_size() {
                for (x, s) in q.entity_emb.row_mut(e).iter_mut().zip(&shift) {
                    *x += s;
                }
            }
            prop_assert!((triple_score(&p, h, r, t) - triple_score(&q, h, r, t)).abs() <= 1e-12);
            let (a, b) = (relation_posterior(&p, h, t), relation_posterior(&q, h, t));
            prop_assert_eq!(&a.survivors, &b.survivors);
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn survivor_rule_and_mass(scores in prop::collection::vec(-5.0f64..5.0, 1..8), na in -5.0f64..5.0) {
            let post = posterior_from_scores(&scores, na, NaNormalization::Include);
            for (k, &s) in scores.iter().enumerate() {
                prop_assert_eq!(post.probs[k] > 0.0, s > na);
                prop_assert!(post.probs[k] >= 0.0);
            }
            let mass: f64 = post.probs.iter().sum::<f64>() + post.na_prob;
            prop_assert!((mass - 1.0).abs() < 1e-9);
        }
    }
}
