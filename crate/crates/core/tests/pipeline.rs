use std::fs;
use std::path::Path;

use spknorm::abx::AbxMode;
use spknorm::corpus::{generate_synthetic, SynthConfig};
use spknorm::pipeline::{run_pipeline, sweep, sweep_csv, PipelineConfig, PipelineError, SweepParam};

fn small_config(out: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::from_toml_str(
        r#"
[synth]
n_speakers = 6
utterances_per_speaker = 8
segments_per_utterance = 12
lexicon_size = 12
seed = 3

[tasks]
n_lexical = 20
n_syntactic = 20
n_simi = 15

[probe]
test_utts_per_speaker = 2
[probe.classifier]
n_runs = 2
epochs = 3

[feature_rank]
enabled = true
n_keep = 12
[feature_rank.forest]
n_trees = 8

[kmeans]
k = 8
"#,
    )
    .unwrap();
    c.output_dir = out.to_path_buf();
    c
}

#[test]
fn all_stages_report_and_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&small_config(dir.path())).unwrap();
    let r = &out.report;
    assert!(r.verify.is_some());
    let probes = r.probes.as_ref().unwrap();
    assert_eq!(probes.features.len(), 3);
    assert_eq!(probes.units.len(), 3);
    assert_eq!(r.feature_rank.as_ref().unwrap().kept_dims.len(), 12);
    assert_eq!(r.kmeans.as_ref().unwrap().k, 8);
    assert_eq!(r.abx.len(), 4);
    assert!(r.abx_error("units", AbxMode::Across).is_some());
    assert!(r.cluster_metrics.is_some());
    let lm = r.lm.as_ref().unwrap();
    assert!(lm.lexical.is_some() && lm.syntactic.is_some() && lm.semantic.is_some());
    for f in ["report.json", "timings.json", "features.zrfa", "codebook.zrcb", "units.txt", "lm.json", "abx_units_across.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert_eq!(r.corpus.dim, 16);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = small_config(a.path());
    let cb = small_config(b.path());
    run_pipeline(&ca).unwrap();
    run_pipeline(&cb).unwrap();
    // The echoed output dir differs; everything else must match.
    let ra = fs::read_to_string(a.path().join("report.json")).unwrap();
    let rb = fs::read_to_string(b.path().join("report.json")).unwrap();
    let strip = |s: &str, p: &Path| s.replace(&p.display().to_string(), "OUT");
    assert_eq!(strip(&ra, a.path()), strip(&rb, b.path()));
    ca.output_dir = b.path().to_path_buf();
    run_pipeline(&ca).unwrap();
    assert_eq!(fs::read_to_string(b.path().join("report.json")).unwrap(), rb);
}

#[test]
fn normalize_switch_changes_only_downstream_stages() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let on = small_config(a.path());
    let mut off = small_config(b.path());
    off.normalize.enabled = false;
    let ron = run_pipeline(&on).unwrap().report;
    let roff = run_pipeline(&off).unwrap().report;
    // Verification runs on raw features in both.
    assert_eq!(ron.verify, roff.verify);
    assert_eq!(ron.corpus, roff.corpus);
    assert_ne!(ron.cluster_metrics, roff.cluster_metrics);
}

#[test]
fn file_inputs_reproduce_synthetic_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut synth_cfg = small_config(&dir.path().join("synth_run"));
    synth_cfg.lm.enabled = false;
    let corpus = generate_synthetic(&synth_cfg.synth).unwrap();
    let d = dir.path();
    corpus.archive.save(d.join("a.zrfa")).unwrap();
    corpus.manifest.save(d.join("m.csv")).unwrap();
    corpus.alignment.save(d.join("ali.txt")).unwrap();

    let mut file_cfg = synth_cfg.clone();
    file_cfg.output_dir = d.join("file_run");
    file_cfg.inputs.archive = Some(d.join("a.zrfa"));
    file_cfg.inputs.manifest = Some(d.join("m.csv"));
    file_cfg.inputs.alignment = Some(d.join("ali.txt"));

    let from_synth = run_pipeline(&synth_cfg).unwrap().report;
    let from_files = run_pipeline(&file_cfg).unwrap().report;
    assert_eq!(from_synth.verify, from_files.verify);
    assert_eq!(from_synth.probes, from_files.probes);
    assert_eq!(from_synth.abx, from_files.abx);
    assert_eq!(from_synth.cluster_metrics, from_files.cluster_metrics);
}

#[test]
fn config_and_stage_errors_are_distinguished() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.inputs.archive = Some(dir.path().join("missing.zrfa"));
    c.inputs.manifest = Some(dir.path().join("missing.csv"));
    assert!(matches!(run_pipeline(&c), Err(PipelineError::Config(_))));

    // Too few utterances per speaker for the verification split.
    let mut c = small_config(dir.path());
    c.verify.n_enroll = 8;
    match run_pipeline(&c) {
        Err(PipelineError::Stage { stage, .. }) => assert_eq!(stage, "verify"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sweep_continues_past_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.probe.enabled = false;
    c.lm.enabled = false;
    c.abx.enabled = false;
    // n_keep = 40 exceeds the 16 dimensions and fails.
    let rows = sweep(&c, SweepParam::NKeep, &[8, 40, 4]).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].result.is_ok() && rows[1].result.is_err() && rows[2].result.is_ok());
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv, sweep_csv(SweepParam::NKeep, &rows));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(2).unwrap().starts_with("40,failed"));
}

#[test]
fn synthetic_lexicon_default_is_documented() {
    // Without a lexicon the language-model stage still trains and says why
    // the task scores are absent.
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.synth = SynthConfig { n_speakers: 4, utterances_per_speaker: 7, ..SynthConfig::default() };
    c.probe.enabled = false;
    c.feature_rank.enabled = false;
    let lm = run_pipeline(&c).unwrap().report.lm.unwrap();
    assert!(lm.lexical.is_none());
    assert!(lm.tasks_skipped.is_some());
}
