use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spknorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spknorm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spknorm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn small_synth(dir: &Path) {
    fs::write(
        dir.join("synth.toml"),
        "n_speakers = 6\nutterances_per_speaker = 8\nsegments_per_utterance = 12\nlexicon_size = 10\n",
    )
    .unwrap();
    ok(&["synth", "--config", &p(dir, "synth.toml"), "--out-dir", &p(dir, "c"), "--tasks", "--n-lexical", "20", "--n-syntactic", "20", "--n-simi", "12"]);
}

#[test]
fn subcommands_chain_on_a_synthetic_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_synth(d);
    let c = d.join("c");
    for f in ["archive.zrfa", "manifest.csv", "alignment.txt", "tasks.zrfa", "lexical.csv", "syntactic.csv", "simi.csv"] {
        assert!(c.join(f).is_file(), "{f}");
    }
    let (arch, man, ali) = (p(&c, "archive.zrfa"), p(&c, "manifest.csv"), p(&c, "alignment.txt"));

    let v: serde_json::Value = serde_json::from_str(&ok(&["verify", "--features", &arch, "--manifest", &man, "--n-enroll", "3"])).unwrap();
    assert_eq!(v["n_speakers"], 6);
    assert_eq!(v["n_trials"], 6 * 6 * 5);

    let std = p(d, "std.zrfa");
    ok(&["normalize", "--in", &arch, "--out", &std]);
    ok(&["normalize", "--in", &arch, "--out", &p(d, "spk.zrfa"), "--per-speaker", &man]);

    let km: serde_json::Value =
        serde_json::from_str(&ok(&["kmeans-fit", "--features", &std, "--manifest", &man, "--out", &p(d, "cb.zrcb"), "--k", "8", "--n-speakers", "4"]))
            .unwrap();
    assert_eq!(km["train_speakers"].as_array().unwrap().len(), 4);
    let units = p(d, "units.txt");
    ok(&["quantize", "--features", &std, "--codebook", &p(d, "cb.zrcb"), "--out", &units]);
    assert_eq!(fs::read_to_string(&units).unwrap().lines().count(), 48);

    let abx: serde_json::Value = serde_json::from_str(&ok(&[
        "abx", "--features", &std, "--alignment", &ali, "--manifest", &man, "--mode", "across", "--cells-csv", &p(d, "cells.csv"),
    ]))
    .unwrap();
    assert_eq!(abx["mode"], "across");
    assert!(abx["cells"].as_array().unwrap().is_empty());
    assert!(fs::read_to_string(d.join("cells.csv")).unwrap().starts_with("triphone_a,"));
    let onehot: serde_json::Value =
        serde_json::from_str(&ok(&["abx", "--onehot", &units, "--K", "8", "--alignment", &ali, "--manifest", &man])).unwrap();
    assert!(onehot["error_rate"].as_f64().unwrap() <= 0.5);

    let cm: serde_json::Value = serde_json::from_str(&ok(&["cluster-metrics", "--units", &units, "--alignment", &ali])).unwrap();
    assert!(cm["ami"].as_f64().unwrap() > 0.0);

    let probe: serde_json::Value = serde_json::from_str(&ok(&[
        "probe", "--task", "phone,speaker", "--features", &std, "--manifest", &man, "--alignment", &ali, "--runs", "2", "--test-utts", "2",
    ]))
    .unwrap();
    assert!(probe["results"]["phone"]["accuracy"].as_f64().unwrap() > 0.9);
    let mlp: serde_json::Value = serde_json::from_str(&ok(&[
        "probe", "--task", "gender", "--kind", "mlp", "--hidden", "16", "--units", &units, "--K", "8", "--manifest", &man, "--runs", "1",
        "--test-utts", "2",
    ]))
    .unwrap();
    assert_eq!(mlp["input"], "units");

    let ranking = p(d, "rank.json");
    ok(&["feature-rank", "--features", &arch, "--manifest", &man, "--out", &ranking, "--n-trees", "5"]);
    ok(&["prune", "--in", &arch, "--ranking", &ranking, "--keep", "4", "--out", &p(d, "pruned.zrfa")]);

    // Task stimuli quantized with the same codebook.
    let task_std = p(d, "task_std.zrfa");
    ok(&["normalize", "--in", &p(&c, "tasks.zrfa"), "--out", &task_std]);
    let task_units = p(d, "task_units.txt");
    ok(&["quantize", "--features", &task_std, "--codebook", &p(d, "cb.zrcb"), "--out", &task_units]);
    let lm = p(d, "lm.json");
    ok(&["lm-train", "--units", &units, "--K", "8", "--out", &lm]);
    let scores: serde_json::Value = serde_json::from_str(&ok(&["lm-score", "--lm", &lm, "--units", &task_units])).unwrap();
    assert!(scores[0]["logprob"].as_f64().unwrap() < 0.0);
    let pairs: serde_json::Value =
        serde_json::from_str(&ok(&["lm-pairs", "--lm", &lm, "--units", &task_units, "--pairs", &p(&c, "lexical.csv")])).unwrap();
    assert_eq!(pairs["n_pairs"], 20);
    let report = p(d, "simi.json");
    ok(&["lm-simi", "--simi", &p(&c, "simi.csv"), "--units", &task_units, "--K", "8", "--report", &report]);
    let simi: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(simi["n_items"], 12);
    ok(&["lm-simi", "--simi", &p(&c, "simi.csv"), "--features", &task_std, "--pooling", "mean"]);
}

#[test]
fn run_and_sweep_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("run.toml"),
        "[synth]\nn_speakers = 5\nutterances_per_speaker = 8\nsegments_per_utterance = 10\n\
         [probe]\nenabled = false\n[abx]\nmodes = [\"within\"]\n[kmeans]\nk = 6\n",
    )
    .unwrap();
    ok(&["run", "--config", &p(d, "run.toml"), "--output-dir", &p(d, "out")]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["toolkit"], "spknorm");
    assert_eq!(report["config"]["kmeans"]["k"], 6);
    assert_eq!(report["config"]["kmeans"]["seed"], 0);

    ok(&["sweep", "--config", &p(d, "run.toml"), "--param", "k", "--values", "4,6", "--output-dir", &p(d, "sw")]);
    let csv = fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("4,ok,"));
    assert!(d.join("sw/k_6/report.json").is_file());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(spknorm(&["--help"]).status.code(), Some(0));
    assert_eq!(spknorm(&["no-such-command"]).status.code(), Some(1));
    // Missing input file: configuration error.
    let out = spknorm(&["verify", "--features", &p(d, "nope.zrfa"), "--manifest", &p(d, "nope.csv")]);
    assert_eq!(out.status.code(), Some(1));
    // Unknown config key.
    fs::write(d.join("bad.toml"), "[kmeans]\nkay = 3\n").unwrap();
    assert_eq!(spknorm(&["run", "--config", &p(d, "bad.toml")]).status.code(), Some(1));
    // Corrupt archive: stage failure.
    fs::write(d.join("junk.zrfa"), b"not an archive").unwrap();
    fs::write(d.join("m.csv"), "utt_id,speaker_id,gender,num_frames\n").unwrap();
    let out = spknorm(&["verify", "--features", &p(d, "junk.zrfa"), "--manifest", &p(d, "m.csv")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}
