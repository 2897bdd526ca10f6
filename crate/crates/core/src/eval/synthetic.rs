//! Planted-cluster synthetic worlds with a known generative relation rule.
//!
//! Entities are split into clusters. Each relation holds between a few
//! ordered cluster pairs ("links"). Entities in linked clusters co-occur
//! often; everything else co-occurs only through noise.
//! Because labels follow from cluster membership alone, the rule is an exact
//! oracle for both predictions and rationales.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::dataset::{load_pairs, sample_negative_pairs_where, save_pairs, LabeledPair, TripleSet};
use crate::graph::{CoocGraph, CoocGraphBuilder, Vocab};
use crate::io::for_each_record;
use crate::relational::{RelationSchema, Triple};

pub const GRAPH_FILE: &str = "graph.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const CLUSTERS_FILE: &str = "clusters.tsv";
pub const RULE_FILE: &str = "rule.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_clusters: usize,
    pub n_rel: usize,
    /// Probability that an entity pair covered by a link is emitted as a fact.
    pub density: f64,
    /// Edge probability between entities of unassociated clusters.
    pub noise: f64,
    pub seed: u64,
    /// Ordered cluster pairs per relation.
    pub links_per_relation: usize,
    /// Edge probability between entities of associated clusters.
    pub signal_prob: f64,
    /// Index of the relation whose labelled pairs are emitted.
    pub target_relation: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 300,
            n_clusters: 6,
            n_rel: 4,
            density: 0.04,
            noise: 0.02,
            seed: 1,
            links_per_relation: 2,
            signal_prob: 0.3,
            target_relation: 0,
        }
    }
}

/// `relation` holds from every entity of `head_cluster` to every entity of `tail_cluster`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleLink {
    pub head_cluster: usize,
    pub relation: usize,
    pub tail_cluster: usize,
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    pub vocab: Vocab,
    pub clusters: Vec<usize>,
    pub rule: Vec<RuleLink>,
    pub schema: RelationSchema,
    pub graph: CoocGraph,
    /// All emitted facts (forward relations).
    pub triples: TripleSet,
    /// Labelled pairs for the target relation: positives are facts, negatives
    /// are argument-typed pairs that violate the rule.
    pub pairs: Vec<LabeledPair>,
    rule_set: HashSet<RuleLink>,
}

impl SyntheticWorld {
    /// Does the generative rule make `(head, relation, tail)` true?
    pub fn holds(&self, head: usize, relation: usize, tail: usize) -> bool {
        self.rule_set.contains(&RuleLink {
            head_cluster: self.clusters[head],
            relation,
            tail_cluster: self.clusters[tail],
        })
    }

    /// Clusters linked by some relation in either direction.
    pub fn associated(&self, a: usize, b: usize) -> bool {
        associated(&self.rule, self.clusters[a], self.clusters[b])
    }

    pub fn target_relation(&self) -> usize {
        self.config.target_relation
    }

    /// Writes graph, triples, pairs and ground-truth files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.graph.save(&dir.join(GRAPH_FILE))?;
        self.triples.save(&dir.join(TRIPLES_FILE), &self.vocab, &self.schema)?;
        save_pairs(&dir.join(PAIRS_FILE), &self.pairs, &self.vocab, &self.schema)?;
        let clusters: String = self
            .clusters
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}\t{}\n", self.vocab.term(i), c))
            .collect();
        let path = dir.join(CLUSTERS_FILE);
        std::fs::write(&path, clusters).map_err(|e| Error::io(&path, e))?;
        let rule: String = self
            .rule
            .iter()
            .map(|l| format!("{}\t{}\t{}\n", l.head_cluster, self.schema.name(l.relation), l.tail_cluster))
            .collect();
        let path = dir.join(RULE_FILE);
        std::fs::write(&path, rule).map_err(|e| Error::io(&path, e))
    }
}

fn associated(rule: &[RuleLink], ca: usize, cb: usize) -> bool {
    rule.iter()
        .any(|l| (l.head_cluster == ca && l.tail_cluster == cb) || (l.head_cluster == cb && l.tail_cluster == ca))
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticWorld> {
    let SynthConfig {
        n_entities,
        n_clusters,
        n_rel,
        density,
        noise,
        seed,
        links_per_relation,
        signal_prob,
        target_relation,
    } = *config;
    if n_clusters < 2 || n_entities < n_clusters {
        return Err(Error::InvalidArgument(format!(
            "need n_entities >= n_clusters >= 2, got {n_entities} and {n_clusters}"
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!("density must lie in (0, 1], got {density}")));
    }
    if !(0.0..=1.0).contains(&noise) || !(signal_prob > 0.0 && signal_prob <= 1.0) {
        return Err(Error::InvalidArgument("noise and signal probabilities must lie in [0, 1]".into()));
    }
    if n_rel == 0 || target_relation >= n_rel || links_per_relation < 2 {
        return Err(Error::InvalidArgument(
            "need n_rel >= 1, a valid target relation and at least 2 links per relation".into(),
        ));
    }
    if n_rel * links_per_relation > n_clusters * (n_clusters - 1) {
        return Err(Error::InvalidArgument(format!(
            "{n_rel} relations × {links_per_relation} links exceed the {} ordered cluster pairs",
            n_clusters * (n_clusters - 1)
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..n_entities).collect();
    order.shuffle(&mut rng);
    let mut clusters = vec![0; n_entities];
    for (slot, &e) in order.iter().enumerate() {
        clusters[e] = slot % n_clusters;
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (e, &c) in clusters.iter().enumerate() {
        members[c].push(e);
    }

    let rule = sample_rule(n_clusters, n_rel, links_per_relation, &mut rng)?;
    let rule_set: HashSet<RuleLink> = rule.iter().copied().collect();

    let width = n_entities.saturating_sub(1).to_string().len().max(3);
    let vocab = Vocab::from((0..n_entities).map(|i| format!("ent_{i:0width$}")).collect::<Vec<_>>());
    let schema = RelationSchema::new((0..n_rel).map(|k| format!("rel_{k}")).collect())?;

    let signal_counts = Poisson::new(4.0).expect("valid rate");
    let noise_counts = Poisson::new(0.5).expect("valid rate");
    let mut builder = CoocGraphBuilder::with_vocab(vocab.clone());
    let mut degree = vec![0usize; n_entities];
    for i in 0..n_entities {
        for j in i + 1..n_entities {
            let (p, counts) = if associated(&rule, clusters[i], clusters[j]) {
                (signal_prob, &signal_counts)
            } else {
                (noise, &noise_counts)
            };
            if p > 0.0 && rng.random_bool(p) {
                let c = 1 + counts.sample(&mut rng) as u64;
                builder.add_ids(i, j, c);
                degree[i] += 1;
                degree[j] += 1;
            }
        }
    }
    // every entity must appear in the graph file
    for e in 0..n_entities {
        if degree[e] == 0 {
            let mates: Vec<usize> = (0..n_entities)
                .filter(|&m| associated(&rule, clusters[e], clusters[m]))
                .collect();
            let other = if mates.is_empty() {
                (e + 1) % n_entities
            } else {
                mates[rng.random_range(0..mates.len())]
            };
            builder.add_ids(e, other, 1 + signal_counts.sample(&mut rng) as u64);
            degree[e] += 1;
            degree[other] += 1;
        }
    }
    let graph = builder.build();

    let mut facts = Vec::new();
    for link in &rule {
        for &h in &members[link.head_cluster] {
            for &t in &members[link.tail_cluster] {
                if rng.random_bool(density) {
                    facts.push(Triple::new(h, link.relation, t));
                }
            }
        }
    }
    let triples = TripleSet::new(facts);

    let positives: Vec<(usize, usize)> = triples
        .triples()
        .iter()
        .filter(|t| t.relation == target_relation)
        .map(|t| (t.head, t.tail))
        .collect();
    if positives.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "density {density} produced only {} positive pair(s)",
            positives.len()
        )));
    }
    let holds = |h: usize, t: usize| {
        rule_set.contains(&RuleLink {
            head_cluster: clusters[h],
            relation: target_relation,
            tail_cluster: clusters[t],
        })
    };
    let negatives = sample_negative_pairs_where(
        positives.len(),
        triples.head_pool(target_relation),
        triples.tail_pool(target_relation),
        |h, t| !holds(h, t),
        &mut rng,
    )?;
    let pairs = positives
        .iter()
        .map(|&(head, tail)| (head, tail, true))
        .chain(negatives.iter().map(|&(head, tail)| (head, tail, false)))
        .map(|(head, tail, label)| LabeledPair {
            head,
            tail,
            label,
            relation: target_relation,
        })
        .collect();

    Ok(SyntheticWorld {
        config: config.clone(),
        vocab,
        clusters,
        rule,
        schema,
        graph,
        triples,
        pairs,
        rule_set,
    })
}

/// Each relation gets `links` distinct ordered cluster pairs with pairwise
/// distinct head clusters and pairwise distinct tail clusters, so that
/// argument-typed negatives exist. Rules are kept only if some placement of
/// cluster centres realises every relation as one translation that maps no
/// other cluster pair, so translation scoring can represent them exactly.
fn sample_rule(n_clusters: usize, n_rel: usize, links: usize, rng: &mut ChaCha8Rng) -> Result<Vec<RuleLink>> {
    let all: Vec<(usize, usize)> = (0..n_clusters)
        .flat_map(|a| (0..n_clusters).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    'attempt: for _ in 0..10_000 {
        let mut pool = all.clone();
        pool.shuffle(rng);
        let mut used = HashSet::new();
        let mut rule = Vec::new();
        for k in 0..n_rel {
            let mut chosen: Vec<(usize, usize)> = Vec::new();
            for &(a, b) in &pool {
                if chosen.len() == links {
                    break;
                }
                if used.contains(&(a, b)) || chosen.iter().any(|&(ca, cb)| ca == a || cb == b) {
                    continue;
                }
                chosen.push((a, b));
            }
            if chosen.len() < links {
                continue 'attempt;
            }
            for (a, b) in chosen {
                used.insert((a, b));
                rule.push(RuleLink {
                    head_cluster: a,
                    relation: k,
                    tail_cluster: b,
                });
            }
        }
        if translation_realisable(&rule, n_clusters, n_rel, rng) {
            return Ok(rule);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place {links} links for each of {n_rel} relations over {n_clusters} clusters"
    )))
}

/// Draws a generic solution of the parallelogram constraints
/// `c_b − c_a = c_d − c_c` (one per extra link) and checks that it keeps
/// clusters apart and that each translation maps exactly its own links.
fn translation_realisable(rule: &[RuleLink], n_clusters: usize, n_rel: usize, rng: &mut ChaCha8Rng) -> bool {
    const TOL: f64 = 1e-6;
    const DIMS: usize = 3;
    let mut rows = Vec::new();
    for k in 0..n_rel {
        let links: Vec<&RuleLink> = rule.iter().filter(|l| l.relation == k).collect();
        for other in &links[1..] {
            let mut row = vec![0.0; n_clusters];
            row[links[0].tail_cluster] += 1.0;
            row[links[0].head_cluster] -= 1.0;
            row[other.tail_cluster] -= 1.0;
            row[other.head_cluster] += 1.0;
            rows.push(row);
        }
    }
    let basis = null_space(rows, n_clusters, TOL);
    let normal = rand_distr::StandardNormal;
    let pos: Vec<[f64; DIMS]> = {
        let coeffs: Vec<[f64; DIMS]> = basis
            .iter()
            .map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(normal)))
            .collect();
        (0..n_clusters)
            .map(|c| std::array::from_fn(|dim| basis.iter().zip(&coeffs).map(|(v, z)| v[c] * z[dim]).sum()))
            .collect()
    };
    let delta = |a: usize, b: usize| -> [f64; DIMS] { std::array::from_fn(|dim| pos[b][dim] - pos[a][dim]) };
    let close = |x: [f64; DIMS], y: [f64; DIMS]| x.iter().zip(&y).all(|(p, q)| (p - q).abs() < TOL);
    for a in 0..n_clusters {
        for b in a + 1..n_clusters {
            if close(pos[a], pos[b]) {
                return false;
            }
        }
    }
    for k in 0..n_rel {
        let first = rule.iter().find(|l| l.relation == k).expect("relation has links");
        let shift = delta(first.head_cluster, first.tail_cluster);
        for a in 0..n_clusters {
            for b in 0..n_clusters {
                let maps = a != b && close(delta(a, b), shift);
                let linked = rule
                    .iter()
                    .any(|l| l.relation == k && l.head_cluster == a && l.tail_cluster == b);
                if maps != linked {
                    return false;
                }
            }
        }
    }
    true
}


/// Orthogonal-free basis of `{x : rows · x = 0}` by Gauss-Jordan elimination.
fn null_space(mut rows: Vec<Vec<f64>>, n: usize, tol: f64) -> Vec<Vec<f64>> {
    let mut pivots = Vec::new();
    let mut r = 0;
    for col in 0..n {
        let Some(best) = (r..rows.len()).max_by(|&i, &j| rows[i][col].abs().total_cmp(&rows[j][col].abs())) else {
            break;
        };
        if rows[best][col].abs() < tol {
            continue;
        }
        rows.swap(r, best);
        let p = rows[r][col];
        rows[r].iter_mut().for_each(|x| *x /= p);
        for i in 0..rows.len() {
            if i != r && rows[i][col].abs() > 0.0 {
                let f = rows[i][col];
                let pivot_row = rows[r].clone();
                rows[i].iter_mut().zip(&pivot_row).for_each(|(x, y)| *x -= f * y);
            }
        }
        pivots.push(col);
        r += 1;
    }
    (0..n)
        .filter(|c| !pivots.contains(c))
        .map(|free| {
            let mut v = vec![0.0; n];
            v[free] = 1.0;
            for (i, &pc) in pivots.iter().enumerate() {
                v[pc] = -rows[i][free];
            }
            v
        })
        .collect()
}

/// Re-derives every label in a written world directory from its ground-truth
/// files and returns the number of disagreeing pairs and triples.
pub fn check_world_dir(dir: &Path) -> Result<usize> {
    let clusters_path = dir.join(CLUSTERS_FILE);
    let mut cluster_of: HashMap<String, usize> = HashMap::new();
    for_each_record(&clusters_path, |line, f| {
        let c = f
            .get(1)
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::parse(&clusters_path, line, "expected `term<TAB>cluster`"))?;
        cluster_of.insert(f[0].to_owned(), c);
        Ok(())
    })?;
    let rule_path = dir.join(RULE_FILE);
    let mut rule: HashSet<(usize, String, usize)> = HashSet::new();
    for_each_record(&rule_path, |line, f| {
        let parse = |s: &str| s.parse::<usize>().ok();
        match (f.len(), parse(f[0]), f.get(2).and_then(|s| parse(s))) {
            (3, Some(a), Some(b)) => {
                rule.insert((a, f[1].to_owned(), b));
                Ok(())
            }
            _ => Err(Error::parse(&rule_path, line, "expected `cluster<TAB>relation<TAB>cluster`")),
        }
    })?;
    let truth = |h: &str, r: &str, t: &str| -> Result<bool> {
        let ch = *cluster_of.get(h).ok_or_else(|| Error::UnknownTerm(h.to_owned()))?;
        let ct = *cluster_of.get(t).ok_or_else(|| Error::UnknownTerm(t.to_owned()))?;
        Ok(rule.contains(&(ch, r.to_owned(), ct)))
    };

    let vocab = Vocab::from(
        {
            let mut terms: Vec<(String, usize)> = cluster_of.iter().map(|(k, v)| (k.clone(), *v)).collect();
            terms.sort();
            terms
        }
        .into_iter()
        .map(|(t, _)| t)
        .collect::<Vec<_>>(),
    );
    let mut names: Vec<String> = rule.iter().map(|(_, r, _)| r.clone()).collect();
    names.sort();
    names.dedup();
    let schema = RelationSchema::new(names)?;

    let mut mismatches = 0;
    for p in load_pairs(&dir.join(PAIRS_FILE), &vocab, &schema)? {
        if truth(vocab.term(p.head), &schema.name(p.relation), vocab.term(p.tail))? != p.label {
            mismatches += 1;
        }
    }
    for t in TripleSet::load(&dir.join(TRIPLES_FILE), &vocab, &schema)?.triples() {
        if !truth(vocab.term(t.head), &schema.name(t.relation), vocab.term(t.tail))? {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}
