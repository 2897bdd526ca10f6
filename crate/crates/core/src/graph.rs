//! Co-occurrence graph storage, PPMI weighting and the empirical association
//! distributions that supervise recall.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::for_each_record;

/// Bijection between term strings and dense ids `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    terms: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `term`, inserting it if unseen.
    pub fn intern(&mut self, term: &str) -> usize {
        if let Some(&id) = self.index.get(term) {
            return id;
        }
        let id = self.terms.len();
        self.terms.push(term.to_owned());
        self.index.insert(term.to_owned(), id);
        id
    }

    pub fn id(&self, term: &str) -> Result<usize> {
        self.index
            .get(term)
            .copied()
            .ok_or_else(|| Error::UnknownTerm(term.to_owned()))
    }

    pub fn get(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn term(&self, id: usize) -> &str {
        &self.terms[id]
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// SHA-256 over the newline-joined term list.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for t in &self.terms {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Terms closest to `query` by Levenshtein distance, best first.
    pub fn nearest(&self, query: &str, n: usize) -> Vec<&str> {
        let mut scored: Vec<(usize, &str)> = self
            .terms
            .iter()
            .map(|t| (edit_distance(query, t), t.as_str()))
            .collect();
        scored.sort();
        scored.into_iter().take(n).map(|(_, t)| t).collect()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(terms: Vec<String>) -> Self {
        let mut v = Vocab::new();
        for t in &terms {
            v.intern(t);
        }
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.terms
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Undirected weighted co-occurrence graph.
///
/// Edges are stored once with `i < j`, sorted by `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocGraph {
    vocab: Vocab,
    edges: Vec<(usize, usize, u64)>,
    marginals: Vec<u64>,
    total: u64,
    self_loops_dropped: usize,
}

/// Accumulates raw co-occurrence records into a [`CoocGraph`].
#[derive(Debug, Default)]
pub struct CoocGraphBuilder {
    vocab: Vocab,
    counts: HashMap<(usize, usize), u64>,
    self_loops: usize,
}

impl CoocGraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts from an existing vocabulary so ids line up with other data.
    pub fn with_vocab(vocab: Vocab) -> Self {
        Self {
            vocab,
            ..Self::default()
        }
    }

    pub fn add(&mut self, a: &str, b: &str, count: u64) {
        let i = self.vocab.intern(a);
        let j = self.vocab.intern(b);
        self.add_ids(i, j, count);
    }

    pub fn add_ids(&mut self, i: usize, j: usize, count: u64) {
        if i == j {
            self.self_loops += 1;
            return;
        }
        let key = if i < j { (i, j) } else { (j, i) };
        *self.counts.entry(key).or_insert(0) += count;
    }

    pub fn build(self) -> CoocGraph {
        let mut edges: Vec<(usize, usize, u64)> =
            self.counts.into_iter().map(|((i, j), c)| (i, j, c)).collect();
        edges.sort_unstable();
        let mut marginals = vec![0u64; self.vocab.len()];
        for &(i, j, c) in &edges {
            marginals[i] += c;
            marginals[j] += c;
        }
        let total = marginals.iter().sum();
        CoocGraph {
            vocab: self.vocab,
            edges,
            marginals,
            total,
            self_loops_dropped: self.self_loops,
        }
    }
}

impl CoocGraph {
    /// Reads a `term_a<TAB>term_b<TAB>count` file (optionally gzipped).
    pub fn load(path: &Path) -> Result<Self> {
        let mut builder = CoocGraphBuilder::new();
        for_each_record(path, |line, fields| {
            if fields.len() != 3 {
                return Err(Error::parse(
                    path,
                    line,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            let count: u64 = fields[2]
                .trim()
                .parse()
                .ok()
                .filter(|&c| c > 0)
                .ok_or_else(|| {
                    Error::parse(path, line, format!("count must be a positive integer, got `{}`", fields[2]))
                })?;
            builder.add(fields[0], fields[1], count);
            Ok(())
        })?;
        let graph = builder.build();
        if graph.self_loops_dropped > 0 {
            warn!(
                "{}: dropped {} self-loop line(s)",
                path.display(),
                graph.self_loops_dropped
            );
        }
        Ok(graph)
    }

    /// Writes the merged edge list in `(i, j)` order.
    pub fn dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for &(i, j, c) in &self.edges {
            writeln!(out, "{}\t{}\t{}", self.vocab.term(i), self.vocab.term(j), c)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.dump(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn edges(&self) -> &[(usize, usize, u64)] {
        &self.edges
    }

    pub fn marginals(&self) -> &[u64] {
        &self.marginals
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn self_loops_dropped(&self) -> usize {
        self.self_loops_dropped
    }

    pub fn num_nodes(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Positive pointwise mutual information for every edge:
    /// `max(0, ln(c_ij · C / (m_i · m_j)))`, keeping only positive entries.
    pub fn ppmi(&self) -> Result<PpmiMatrix> {
        if self.edges.is_empty() {
            return Err(Error::Empty("co-occurrence graph has no edges"));
        }
        let total = self.total as f64;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.vocab.len()];
        for &(i, j, c) in &self.edges {
            let ratio = (c as f64 * total) / (self.marginals[i] as f64 * self.marginals[j] as f64);
            let pmi = ratio.ln();
            if pmi > 0.0 {
                rows[i].push((j, pmi));
                rows[j].push((i, pmi));
            }
        }
        for row in &mut rows {
            row.sort_unstable_by_key(|&(j, _)| j);
        }
        Ok(PpmiMatrix { rows })
    }
}

/// Sparse symmetric PPMI rows; only strictly positive entries are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PpmiMatrix {
    rows: Vec<Vec<(usize, f64)>>,
}

impl PpmiMatrix {
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .map(|pos| self.rows[i][pos].1)
            .unwrap_or(0.0)
    }

    /// `p̂(j | i) = ppmi(i, j) / Σ_k ppmi(i, k)`. `None` when row `i` has no
    /// positive entry; such entities contribute nothing to the recall loss.
    pub fn empirical(&self, i: usize) -> Option<EmpiricalDist> {
        let row = &self.rows[i];
        if row.is_empty() {
            return None;
        }
        let z: f64 = row.iter().map(|&(_, v)| v).sum();
        Some(EmpiricalDist {
            support: row.iter().map(|&(j, v)| (j, v / z)).collect(),
        })
    }

    /// Entity ids with nonempty empirical support.
    pub fn supported_entities(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| !self.rows[i].is_empty()).collect()
    }
}

/// Target distribution over neighbours of one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDist {
    pub support: Vec<(usize, f64)>,
}
