//! Triple sets, labelled pairs, stratified splits and argument-typed
//! negative sampling.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Vocab;
use crate::io::for_each_record;
use crate::relational::{RelationSchema, Triple};

/// A set of gold triples with per-relation argument pools.
#[derive(Debug, Clone, Default)]
pub struct TripleSet {
    triples: Vec<Triple>,
    members: HashSet<Triple>,
    augmented: bool,
    head_pool: HashMap<usize, Vec<usize>>,
    tail_pool: HashMap<usize, Vec<usize>>,
    by_pair: HashMap<(usize, usize), Vec<usize>>,
}

impl TripleSet {
    /// Deduplicates, keeping first-seen order.
    pub fn new(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut set = TripleSet::default();
        for t in triples {
            set.push(t);
        }
        set
    }

    fn push(&mut self, t: Triple) {
        if !self.members.insert(t) {
            return;
        }
        self.triples.push(t);
        let hp = self.head_pool.entry(t.relation).or_default();
        if let Err(pos) = hp.binary_search(&t.head) {
            hp.insert(pos, t.head);
        }
        let tp = self.tail_pool.entry(t.relation).or_default();
        if let Err(pos) = tp.binary_search(&t.tail) {
            tp.insert(pos, t.tail);
        }
        let rels = self.by_pair.entry((t.head, t.tail)).or_default();
        if let Err(pos) = rels.binary_search(&t.relation) {
            rels.insert(pos, t.relation);
        }
    }

    /// Adds `(t, k + n_rel, h)` for every forward triple `(h, k, t)`.
    pub fn augmented(&self, n_rel: usize) -> TripleSet {
        let mut out = TripleSet::new(self.triples.iter().copied().filter(|t| t.relation < n_rel));
        let forward: Vec<Triple> = out.triples.clone();
        for t in forward {
            out.push(Triple::new(t.tail, t.relation + n_rel, t.head));
        }
        out.augmented = true;
        out
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.members.contains(t)
    }

    /// Relations stored for the ordered pair `(head, tail)`, ascending.
    pub fn relations_between(&self, head: usize, tail: usize) -> &[usize] {
        self.by_pair.get(&(head, tail)).map_or(&[], Vec::as_slice)
    }

    /// Distinct heads seen with `relation`, ascending.
    pub fn head_pool(&self, relation: usize) -> &[usize] {
        self.head_pool.get(&relation).map_or(&[], Vec::as_slice)
    }

    pub fn tail_pool(&self, relation: usize) -> &[usize] {
        self.tail_pool.get(&relation).map_or(&[], Vec::as_slice)
    }

    /// Copy without the `relation` triples whose `(head, tail)` is in `pairs`.
    pub fn without_pairs(&self, relation: usize, pairs: &HashSet<(usize, usize)>) -> TripleSet {
        let mut out = TripleSet::new(
            self.triples
                .iter()
                .copied()
                .filter(|t| !(t.relation == relation && pairs.contains(&(t.head, t.tail)))),
        );
        out.augmented = self.augmented;
        out
    }

    /// Reads `head<TAB>relation<TAB>tail` lines. Unknown terms or relations
    /// are collected and reported together.
    pub fn load(path: &Path, vocab: &Vocab, schema: &RelationSchema) -> Result<TripleSet> {
        let mut triples = Vec::new();
        let mut offenders = BTreeSet::new();
        for_each_record(path, |line, f| {
            if f.len() != 3 {
                return Err(Error::parse(path, line, format!("expected 3 fields, found {}", f.len())));
            }
            let h = vocab.get(f[0]);
            let t = vocab.get(f[2]);
            let r = schema.index(f[1]).ok().filter(|&r| r < schema.n_rel());
            if h.is_none() {
                offenders.insert(format!("term `{}`", f[0]));
            }
            if t.is_none() {
                offenders.insert(format!("term `{}`", f[2]));
            }
            if r.is_none() {
                offenders.insert(format!("relation `{}`", f[1]));
            }
            if let (Some(h), Some(r), Some(t)) = (h, r, t) {
                triples.push(Triple::new(h, r, t));
            }
            Ok(())
        })?;
        if !offenders.is_empty() {
            return Err(Error::UnknownEntries {
                what: path.display().to_string(),
                offenders: offenders.into_iter().collect(),
            });
        }
        Ok(TripleSet::new(triples))
    }

    pub fn save(&self, path: &Path, vocab: &Vocab, schema: &RelationSchema) -> Result<()> {
        let mut out = Vec::new();
        for t in &self.triples {
            writeln!(
                out,
                "{}\t{}\t{}",
                vocab.term(t.head),
                schema.name(t.relation),
                vocab.term(t.tail)
            )
            .expect("write to Vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Relation names in order of first appearance in a triple file.
pub fn scan_relation_names(path: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = Vec::new();
    for_each_record(path, |line, f| {
        if f.len() != 3 {
            return Err(Error::parse(path, line, format!("expected 3 fields, found {}", f.len())));
        }
        if !names.iter().any(|n| n == f[1]) {
            names.push(f[1].to_owned());
        }
        Ok(())
    })?;
    Ok(names)
}

/// A binary-labelled target pair for one relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPair {
    pub head: usize,
    pub tail: usize,
    pub label: bool,
    pub relation: usize,
}

impl LabeledPair {
    pub fn y(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

/// Reads `head<TAB>tail<TAB>label<TAB>relation` lines.
pub fn load_pairs(path: &Path, vocab: &Vocab, schema: &RelationSchema) -> Result<Vec<LabeledPair>> {
    let mut pairs = Vec::new();
    let mut offenders = BTreeSet::new();
    for_each_record(path, |line, f| {
        if f.len() != 4 {
            return Err(Error::parse(path, line, format!("expected 4 fields, found {}", f.len())));
        }
        let label = match f[2].trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::parse(path, line, format!("label must be 0 or 1, got `{other}`"))),
        };
        let h = vocab.get(f[0]);
        let t = vocab.get(f[1]);
        let r = schema.index(f[3]).ok().filter(|&r| r < schema.n_rel());
        if h.is_none() {
            offenders.insert(format!("term `{}`", f[0]));
        }
        if t.is_none() {
            offenders.insert(format!("term `{}`", f[1]));
        }
        if r.is_none() {
            offenders.insert(format!("relation `{}`", f[3]));
        }
        if let (Some(head), Some(tail), Some(relation)) = (h, t, r) {
            pairs.push(LabeledPair {
                head,
                tail,
                label,
                relation,
            });
        }
        Ok(())
    })?;
    if !offenders.is_empty() {
        return Err(Error::UnknownEntries {
            what: path.display().to_string(),
            offenders: offenders.into_iter().collect(),
        });
    }
    Ok(pairs)
}

pub fn save_pairs(path: &Path, pairs: &[LabeledPair], vocab: &Vocab, schema: &RelationSchema) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            vocab.term(p.head),
            vocab.term(p.tail),
            u8::from(p.label),
            schema.name(p.relation)
        )
        .expect("write to Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded stratified train/dev/test split. Overall split sizes are
/// `round(n · ratio)` (test takes the remainder); positives and negatives are
/// allotted proportionally within each split.
pub fn split_dataset(pairs: &[LabeledPair], ratios: [f64; 3], seed: u64) -> Result<Split<LabeledPair>> {
    if pairs.is_empty() {
        return Err(Error::Empty("labelled pairs"));
    }
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<LabeledPair> = pairs.iter().copied().filter(|p| p.label).collect();
    let mut neg: Vec<LabeledPair> = pairs.iter().copied().filter(|p| !p.label).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let totals = allot(pairs.len(), ratios);
    // cumulative rounding keeps every split within one positive of its share
    let share = pos.len() as f64 / pairs.len() as f64;
    let mut pos_sizes = [0; 3];
    let (mut cum_total, mut cum_pos) = (0, 0);
    for s in 0..3 {
        cum_total += totals[s];
        let upto = ((cum_total as f64 * share).round() as usize).min(pos.len()).min(cum_total);
        pos_sizes[s] = upto - cum_pos;
        cum_pos = upto;
    }

    let mut out = Split {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    let (mut pi, mut ni) = (0, 0);
    for s in 0..3 {
        let np = pos_sizes[s];
        let nn = totals[s] - np;
        let bucket = match s {
            0 => &mut out.train,
            1 => &mut out.dev,
            _ => &mut out.test,
        };
        bucket.extend_from_slice(&pos[pi..pi + np]);
        bucket.extend_from_slice(&neg[ni..ni + nn]);
        bucket.shuffle(&mut rng);
        pi += np;
        ni += nn;
    }
    Ok(out)
}

fn allot(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let a = ((n as f64 * ratios[0]).round() as usize).min(n);
    let b = ((n as f64 * ratios[1]).round() as usize).min(n - a);
    [a, b, n - a - b]
}

/// Draws `positives.len()` distinct negatives with heads from `head_pool`
/// and tails from `tail_pool`, none of which is a known positive.
pub fn sample_negative_pairs<R: Rng + ?Sized>(
    positives: &[(usize, usize)],
    head_pool: &[usize],
    tail_pool: &[usize],
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let known: HashSet<(usize, usize)> = positives.iter().copied().collect();
    sample_negative_pairs_where(positives.len(), head_pool, tail_pool, |h, t| !known.contains(&(h, t)), rng)
}

/// Like [`sample_negative_pairs`] with an arbitrary acceptance predicate.
/// Self pairs are never produced.
pub fn sample_negative_pairs_where<R, F>(
    wanted: usize,
    head_pool: &[usize],
    tail_pool: &[usize],
    accept: F,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>>
where
    R: Rng + ?Sized,
    F: Fn(usize, usize) -> bool,
{
    if head_pool.is_empty() || tail_pool.is_empty() {
        return Err(Error::Empty("argument pool"));
    }
    let max_tries = 1000 + 100 * wanted;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(wanted);
    let mut tries = 0;
    while out.len() < wanted {
        if tries == max_tries {
            return Err(Error::PoolExhausted { wanted, tries });
        }
        tries += 1;
        let h = head_pool[rng.random_range(0..head_pool.len())];
        let t = tail_pool[rng.random_range(0..tail_pool.len())];
        if h != t && accept(h, t) && seen.insert((h, t)) {
            out.push((h, t));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(n_pos: usize, n_neg: usize) -> Vec<LabeledPair> {
        (0..n_pos + n_neg)
            .map(|i| LabeledPair {
                head: i,
                tail: i + 1000,
                label: i < n_pos,
                relation: 0,
            })
            .collect()
    }

    #[test]
    fn split_sizes_70_15_15() {
        let s = split_dataset(&pairs(50, 50), [0.7, 0.15, 0.15], 1).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (70, 15, 15));
    }

    #[test]
    fn split_is_partition_and_seeded() {
        let input = pairs(37, 41);
        let s = split_dataset(&input, [0.7, 0.15, 0.15], 9).unwrap();
        let mut all: Vec<_> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
        all.sort_by_key(|p| p.head);
        assert_eq!(all, input);
        assert_eq!(s, split_dataset(&input, [0.7, 0.15, 0.15], 9).unwrap());
        assert_ne!(s, split_dataset(&input, [0.7, 0.15, 0.15], 10).unwrap());
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split_dataset(&[], [0.7, 0.15, 0.15], 0).is_err());
        assert!(split_dataset(&pairs(2, 2), [0.5, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn augmentation_adds_reverse_rows() {
        let set = TripleSet::new([Triple::new(0, 0, 1), Triple::new(2, 1, 3), Triple::new(0, 0, 1)]);
        assert_eq!(set.len(), 2);
        let aug = set.augmented(2);
        assert!(aug.is_augmented());
        assert!(aug.contains(&Triple::new(1, 2, 0)));
        assert!(aug.contains(&Triple::new(3, 3, 2)));
        assert_eq!(aug.len(), 4);
        assert_eq!(set.head_pool(0), &[0]);
        assert_eq!(aug.tail_pool(2), &[0]);
        assert_eq!(set.relations_between(2, 3), &[1]);
    }

    #[test]
    fn negatives_respect_pools_and_exclusion() {
        let positives: Vec<(usize, usize)> = (0..10).map(|i| (i, 10 + i)).collect();
        let heads: Vec<usize> = (0..10).collect();
        let tails: Vec<usize> = (10..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neg = sample_negative_pairs(&positives, &heads, &tails, &mut rng).unwrap();
        assert_eq!(neg.len(), positives.len());
        let uniq: HashSet<_> = neg.iter().collect();
        assert_eq!(uniq.len(), neg.len());
        for (h, t) in &neg {
            assert!(heads.contains(h) && tails.contains(t));
            assert!(!positives.contains(&(*h, *t)));
        }
    }

    #[test]
    fn tiny_pool_exhausts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = sample_negative_pairs(&[(0, 1), (0, 2)], &[0], &[1], &mut rng).unwrap_err();
        assert!(matches!(err, Error::PoolExhausted { .. }));
    }

    proptest! {
        #[test]
        fn stratification_within_one(n_pos in 1usize..80, n_neg in 1usize..80, seed in any::<u64>()) {
            let input = pairs(n_pos, n_neg);
            let s = split_dataset(&input, [0.7, 0.15, 0.15], seed).unwrap();
            for part in [&s.train, &s.dev, &s.test] {
                let p = part.iter().filter(|x| x.label).count() as f64;
                let expected = part.len() as f64 * n_pos as f64 / (n_pos + n_neg) as f64;
                prop_assert!((p - expected).abs() <= 1.0 + 1e-9, "{} vs {}", p, expected);
            }
        }
    }
}
