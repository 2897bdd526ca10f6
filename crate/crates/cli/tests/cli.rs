use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relrec::eval::dataset::save_pairs;
use relrec::{save_checkpoint, AdamConfig, AdamState, Checkpoint, LabeledPair, ModelDims, ModelParams, RelationSchema, TrainConfig, Vocab};
use serde_json::Value;
use tempfile::TempDir;

fn relrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relrec"))
        .args(args)
        .env("RELREC_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn first_json(o: &Output) -> Value {
    serde_json::from_str(stdout(o).lines().next().expect("a JSON line")).expect("valid JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64) {
    let o = relrec(&["synth", "--out", s(dir), "--seed", &seed.to_string(), "--n-entities", "120"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const SMALL: &str = "[train]\nd = 8\nn_c = 4\nb1 = 32\nb2 = 32\nb3 = 16\nn_neg = 5\nlr = 0.01\nmax_epochs = 3\n";

/// Synthesises a small world and trains on it; returns the checkpoint path.
fn trained(tmp: &TempDir, seed: u64, name: &str) -> PathBuf {
    let world = tmp.path().join("world");
    if !world.exists() {
        synth(&world, 1);
    }
    let cfg = tmp.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join(name);
    let o = relrec(&[
        "train",
        "--config",
        s(&cfg),
        "--graph",
        s(&world.join("graph.tsv")),
        "--triples",
        s(&world.join("triples.tsv")),
        "--pairs",
        s(&world.join("pairs.tsv")),
        "--out",
        s(&out),
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn train_writes_checkpoint_log_and_test_pairs() {
    let tmp = TempDir::new().unwrap();
    let ck = trained(&tmp, 3, "m.ckpt");
    assert!(ck.exists());
    let log = std::fs::read_to_string(tmp.path().join("m.ckpt.log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,L_n,L_r,L_p,dev_precision,dev_recall,dev_F1,wall_seconds"));
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 8);
        for f in &fields[1..4] {
            assert!(f.parse::<f64>().unwrap().is_finite());
        }
    }
    assert!(tmp.path().join("m.ckpt.test.tsv").exists());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let a = trained(&tmp, 7, "a.ckpt");
    let b = trained(&tmp, 7, "b.ckpt");
    let c = trained(&tmp, 8, "c.ckpt");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn missing_file_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("absent-graph.tsv");
    let o = relrec(&["train", "--graph", s(&missing), "--triples", "t", "--pairs", "p", "--out", "m"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent-graph.tsv"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(relrec(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(relrec(&["train"]).status.code(), Some(1));
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = relrec(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn rationalize_reports_in_both_modes() {
    let tmp = TempDir::new().unwrap();
    let ck = trained(&tmp, 1, "m.ckpt");
    let triples = tmp.path().join("world/triples.tsv");
    let kb: Vec<(String, String, String)> = std::fs::read_to_string(&triples)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].into(), f[1].into(), f[2].into())
        })
        .collect();

    let o = relrec(&["rationalize", "--model", s(&ck), "--head", "ent_000", "--tail", "ent_001"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let owa = first_json(&o);
    assert_eq!(owa["mode"], "OWA");
    assert!(owa["rationales"].as_array().unwrap().len() <= 5);
    let p = owa["probability"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert!(stdout(&o).contains("Target pair (OWA)"));

    let o = relrec(&[
        "rationalize", "--model", s(&ck), "--head", "ent_000", "--tail", "ent_001", "--mode", "cwa", "--triples",
        s(&triples), "--topk", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cwa = first_json(&o);
    assert_eq!(cwa["mode"], "CWA");
    let rows = cwa["rationales"].as_array().unwrap();
    assert!(rows.len() <= 3);
    for r in rows {
        let t = (r["h"].as_str().unwrap().to_owned(), r["r"].as_str().unwrap().to_owned(), r["t"].as_str().unwrap().to_owned());
        assert!(kb.contains(&t), "{t:?} not in the knowledge base");
    }

    let o = relrec(&["rationalize", "--model", s(&ck), "--head", "ent_000", "--tail", "ent_001", "--mode", "cwa"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_term_lists_nearest_matches() {
    let tmp = TempDir::new().unwrap();
    let ck = trained(&tmp, 1, "m.ckpt");
    let o = relrec(&["rationalize", "--model", s(&ck), "--head", "ent_0x0", "--tail", "ent_001"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("unknown term `ent_0x0`"), "{err}");
    assert!(err.contains("ent_000"), "{err}");
}

#[test]
fn evaluate_is_finite_and_repeatable() {
    let tmp = TempDir::new().unwrap();
    let ck = trained(&tmp, 1, "m.ckpt");
    let test = tmp.path().join("m.ckpt.test.tsv");
    let dump = tmp.path().join("dump.jsonl");
    let a = relrec(&["evaluate", "--model", s(&ck), "--pairs", s(&test), "--threads", "2", "--dump", s(&dump)]);
    let b = relrec(&["evaluate", "--model", s(&ck), "--pairs", s(&test), "--threads", "1"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let m = first_json(&a);
    for key in ["precision", "recall", "f1"] {
        assert!(m[key].as_f64().unwrap().is_finite());
    }
    let n_test = std::fs::read_to_string(&test).unwrap().lines().count();
    assert_eq!(m["samples"].as_u64().unwrap() as usize, n_test);
    assert_eq!(std::fs::read_to_string(&dump).unwrap().lines().count(), n_test);
    assert!(stdout(&a).contains("| Method"));
}

/// Zero entity embeddings and far-off forward relation rows: every forward
/// score is below the NA score, so no pair keeps a relation.
fn toy_checkpoint(dir: &Path, bias: f64) -> (PathBuf, Vocab, RelationSchema) {
    let vocab = Vocab::from((0..6).map(|i| format!("t{i}")).collect::<Vec<_>>());
    let schema = RelationSchema::new(vec!["treats".into()]).unwrap();
    let dims = ModelDims::new(4, 1);
    let mut params = ModelParams::zeros(dims, vocab.len());
    params.relation_emb.data_mut()[..4].fill(1.0);
    params.b_r.data_mut()[0] = bias;
    let config = TrainConfig {
        d: 4,
        n_c: 2,
        ..TrainConfig::default()
    };
    let ck = Checkpoint {
        adam: AdamState::new(AdamConfig::default(), &params),
        params,
        vocab: vocab.clone(),
        schema: schema.clone(),
        config,
        target_relation: Some(0),
    };
    let path = dir.join("toy.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    (path, vocab, schema)
}

#[test]
fn zero_survivors_give_empty_table_with_probability() {
    let tmp = TempDir::new().unwrap();
    let (ck, _, _) = toy_checkpoint(tmp.path(), 0.0);
    let o = relrec(&["rationalize", "--model", s(&ck), "--head", "t0", "--tail", "t1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = first_json(&o);
    assert!(report["rationales"].as_array().unwrap().is_empty());
    assert_eq!(report["probability"].as_f64().unwrap(), 0.5);
    assert!(stdout(&o).contains("(none)"));
}

#[test]
fn all_correct_toy_model_scores_one() {
    let tmp = TempDir::new().unwrap();
    let (ck, vocab, schema) = toy_checkpoint(tmp.path(), 20.0);
    let pairs: Vec<LabeledPair> = (1..6)
        .map(|t| LabeledPair {
            head: 0,
            tail: t,
            label: true,
            relation: 0,
        })
        .collect();
    let path = tmp.path().join("pairs.tsv");
    save_pairs(&path, &pairs, &vocab, &schema).unwrap();
    let o = relrec(&["evaluate", "--model", s(&ck), "--pairs", s(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(first_json(&o)["f1"].as_f64().unwrap(), 1.0);
}

#[test]
fn synth_is_deterministic_and_passes_the_oracle() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, 5);
    synth(&b, 5);
    synth(&c, 6);
    for f in ["graph.tsv", "triples.tsv", "pairs.tsv", "clusters.tsv", "rule.tsv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("pairs.tsv")).unwrap(), std::fs::read(c.join("pairs.tsv")).unwrap());

    let o = relrec(&["check", "--dir", s(&a)]);
    assert!(o.status.success());
    assert_eq!(first_json(&o)["oracle_mismatches"], 0);

    // flip the first label
    let pairs = std::fs::read_to_string(a.join("pairs.tsv")).unwrap();
    let mut lines: Vec<String> = pairs.lines().map(String::from).collect();
    let mut f: Vec<String> = lines[0].split('\t').map(String::from).collect();
    f[2] = if f[2] == "1" { "0".into() } else { "1".into() };
    lines[0] = f.join("\t");
    std::fs::write(a.join("pairs.tsv"), lines.join("\n") + "\n").unwrap();
    let o = relrec(&["check", "--dir", s(&a)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(first_json(&o)["oracle_mismatches"], 1);
}

#[test]
fn synth_rejects_degenerate_parameters() {
    let tmp = TempDir::new().unwrap();
    let o = relrec(&["synth", "--out", s(&tmp.path().join("w")), "--density", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_passes() {
    let o = relrec(&["grad-check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let lines: Vec<Value> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l["passed"] == true));
}
