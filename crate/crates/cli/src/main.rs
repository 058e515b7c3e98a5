use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use spknorm::abx::{abx_score, extract_items, AbxConfig, AbxMode};
use spknorm::aud::{corpus_cluster_metrics, load_units, one_hot_archive, quantize, save_units, Codebook};
use spknorm::corpus::{generate_synthetic, generate_synthetic_tasks, Alignment, FeatureArchive, Manifest, SynthConfig};
use spknorm::mfcc::{extract_wav_dir, MfccConfig};
use spknorm::normalize::{normalize_archive, NormMode};
use spknorm::pipeline::{
    fit_units, probe_features, probe_units, rank_speaker_importance, run_pipeline, split_by_speaker, sweep,
    KMeansStage, PipelineConfig, PipelineError, ProbeTask, RankStage, SweepParam,
};
use spknorm::probe::{prune, ForestConfig, ImportanceRanking, ProbeConfig, ProbeKind};
use spknorm::slm::{
    load_pairs, load_simi, pairs_to_csv, pairwise_accuracy, prefix_logprob, semantic_similarity, sequence_logprob,
    simi_to_csv, FramePoolRepr, NgramLm, Pooling, UnitCountRepr,
};
use spknorm::verify::verify;

#[derive(Debug, Parser)]
#[command(name = "spknorm", version, about = "Speaker normalization and unit discovery evaluation toolkit")]
struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus (archive, manifest, alignment).
    Synth(SynthArgs),
    /// Compute MFCC features for a directory of WAV files.
    ExtractMfcc(ExtractArgs),
    /// Standardize features per utterance or per speaker.
    Normalize(NormalizeArgs),
    /// Fit a K-means codebook.
    KmeansFit(KmeansArgs),
    /// Map frames to their nearest centroid.
    Quantize(QuantizeArgs),
    /// ABX phone discriminability.
    Abx(AbxArgs),
    /// Speaker verification from utterance means.
    Verify(VerifyArgs),
    /// Linear or MLP probe accuracy.
    Probe(ProbeArgs),
    /// Agreement of units with frame-level phone labels.
    ClusterMetrics(ClusterArgs),
    /// Rank feature dimensions by speaker-classification importance.
    FeatureRank(RankArgs),
    /// Keep the least speaker-informative dimensions.
    Prune(PruneArgs),
    /// Train a Kneser-Ney unit language model.
    LmTrain(LmTrainArgs),
    /// Per-utterance log-probabilities under a unit language model.
    LmScore(LmScoreArgs),
    /// Pairwise preference accuracy on a pairs file.
    LmPairs(LmPairsArgs),
    /// Spearman correlation with human similarity judgments.
    LmSimi(LmSimiArgs),
    /// Run the full pipeline from a config file.
    Run(RunArgs),
    /// Run the pipeline once per value of K or n_keep.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct ReportOut {
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML file with synthetic corpus parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write task stimuli and pair files (needs lexicon_size > 0).
    #[arg(long)]
    tasks: bool,
    #[arg(long, default_value_t = 200)]
    n_lexical: usize,
    #[arg(long, default_value_t = 200)]
    n_syntactic: usize,
    #[arg(long, default_value_t = 100)]
    n_simi: usize,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    wav_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with MFCC parameters.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct NormalizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pool statistics per speaker using this manifest.
    #[arg(long)]
    per_speaker: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct KmeansArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Comma-separated training speakers.
    #[arg(long, value_delimiter = ',')]
    speakers: Vec<String>,
    /// Random subset of this many training speakers.
    #[arg(long, default_value_t = 0)]
    n_speakers: usize,
    #[arg(long, default_value_t = 0)]
    max_frames: usize,
    #[command(flatten)]
    out_report: ReportOut,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AbxArgs {
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    alignment: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "within")]
    mode: AbxMode,
    /// Score one-hot codes of these units instead of features.
    #[arg(long)]
    onehot: Option<PathBuf>,
    #[arg(long = "K", alias = "k")]
    k: Option<usize>,
    #[arg(long, default_value_t = 10)]
    x_cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep per-cell results in the report.
    #[arg(long)]
    cells: bool,
    /// Also write per-cell results as CSV.
    #[arg(long)]
    cells_csv: Option<PathBuf>,
    #[command(flatten)]
    out_report: ReportOut,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_enroll: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out_report: ReportOut,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long, value_delimiter = ',', default_value = "phone")]
    task: Vec<ProbeTask>,
    #[arg(long, default_value = "linear")]
    kind: ProbeKind,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Probe one-hot codes of these units instead of features.
    #[arg(long)]
    units: Option<PathBuf>,
    #[arg(long = "K", alias = "k")]
    k: Option<usize>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    alignment: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    test_utts: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1024)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out_report: ReportOut,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    alignment: PathBuf,
    #[arg(long)]
    include_silence: bool,
    #[command(flatten)]
    out_report: ReportOut,
}

#[derive(Debug, Args)]
struct RankArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    max_frames: usize,
    #[arg(long, default_value_t = 100)]
    n_trees: usize,
    #[arg(long, default_value_t = 12)]
    max_depth: usize,
    #[arg(long, default_value_t = 5)]
    min_samples_leaf: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ranking: PathBuf,
    #[arg(long)]
    keep: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LmTrainArgs {
    #[arg(long)]
    units: PathBuf,
    #[arg(long = "K", alias = "k")]
    k: usize,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0.75)]
    discount: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LmScoreArgs {
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    units: PathBuf,
    /// Score without the end symbol.
    #[arg(long)]
    prefix: bool,
    #[command(flatten)]
    out_report: ReportOut,
}

#[derive(Debug, Args)]
struct LmPairsArgs {
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    length_normalized: bool,
    #[command(flatten)]
    out_report: ReportOut,
}

#[derive(Debug, Args)]
struct LmSimiArgs {
    #[arg(long)]
    simi: PathBuf,
    /// Unit sequences pooled as count vectors.
    #[arg(long)]
    units: Option<PathBuf>,
    #[arg(long = "K", alias = "k")]
    k: Option<usize>,
    /// Feature frames pooled over time.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value = "min")]
    pooling: Pooling,
    #[command(flatten)]
    out_report: ReportOut,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Stage(String),
}

fn config_err(e: impl Display) -> CliError {
    CliError::Config(e.to_string())
}

fn stage_err(e: impl Display) -> CliError {
    CliError::Stage(e.to_string())
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => CliError::Config(m),
            e => CliError::Stage(e.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{} does not exist", path.display())))
    }
}

fn emit<T: Serialize>(value: &T, out: &ReportOut) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    match &out.report {
        Some(p) => fs::write(p, text).map_err(stage_err),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_archive(path: &Path) -> Result<FeatureArchive, CliError> {
    require_file(path)?;
    FeatureArchive::load(path).map_err(stage_err)
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    require_file(path)?;
    Manifest::load(path).map_err(stage_err)
}

fn load_alignment(path: &Path) -> Result<Alignment, CliError> {
    require_file(path)?;
    Alignment::load(path).map_err(stage_err)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(config_err)?;
    if a.tasks && cfg.lexicon_size == 0 {
        return Err(config_err("--tasks needs lexicon_size > 0"));
    }
    let corpus = generate_synthetic(&cfg).map_err(stage_err)?;
    fs::create_dir_all(&a.out_dir).map_err(stage_err)?;
    let d = &a.out_dir;
    corpus.archive.save(d.join("archive.zrfa")).map_err(stage_err)?;
    corpus.manifest.save(d.join("manifest.csv")).map_err(stage_err)?;
    corpus.alignment.save(d.join("alignment.txt")).map_err(stage_err)?;
    if a.tasks {
        let t = generate_synthetic_tasks(&cfg, &corpus.truth, a.n_lexical, a.n_syntactic, a.n_simi).map_err(stage_err)?;
        t.archive.save(d.join("tasks.zrfa")).map_err(stage_err)?;
        t.manifest.save(d.join("tasks_manifest.csv")).map_err(stage_err)?;
        t.alignment.save(d.join("tasks_alignment.txt")).map_err(stage_err)?;
        fs::write(d.join("lexical.csv"), pairs_to_csv(&t.lexical)).map_err(stage_err)?;
        fs::write(d.join("syntactic.csv"), pairs_to_csv(&t.syntactic)).map_err(stage_err)?;
        fs::write(d.join("simi.csv"), simi_to_csv(&t.simi)).map_err(stage_err)?;
    }
    fs::write(d.join("synth.toml"), toml::to_string(&cfg).expect("serializes")).map_err(stage_err)?;
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> CliResult {
    let cfg: MfccConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => MfccConfig::default(),
    };
    cfg.validate().map_err(config_err)?;
    if !a.wav_dir.is_dir() {
        return Err(config_err(format!("{} is not a directory", a.wav_dir.display())));
    }
    let archive = extract_wav_dir(&a.wav_dir, &cfg).map_err(stage_err)?;
    archive.save(&a.out).map_err(stage_err)
}

fn cmd_normalize(a: NormalizeArgs) -> CliResult {
    let archive = load_archive(&a.input)?;
    let (mode, manifest) = match &a.per_speaker {
        Some(p) => (NormMode::Speaker, Some(load_manifest(p)?)),
        None => (NormMode::Utterance, None),
    };
    let out = normalize_archive(&archive, mode, manifest.as_ref()).map_err(stage_err)?;
    out.save(&a.out).map_err(stage_err)
}

fn cmd_kmeans(a: KmeansArgs) -> CliResult {
    let features = load_archive(&a.features)?;
    let manifest = load_manifest(&a.manifest)?;
    let st = KMeansStage {
        enabled: true,
        k: a.k,
        seed: a.seed,
        max_iters: a.max_iters,
        tol: a.tol,
        train_speakers: a.n_speakers,
        train_speaker_list: a.speakers,
        max_train_frames: a.max_frames,
    };
    let (report, codebook) = fit_units(&features, &manifest, &st)?;
    codebook.save(&a.out).map_err(stage_err)?;
    emit(&report, &a.out_report)
}

fn cmd_quantize(a: QuantizeArgs) -> CliResult {
    let features = load_archive(&a.features)?;
    require_file(&a.codebook)?;
    let codebook = Codebook::load(&a.codebook).map_err(stage_err)?;
    let seqs = quantize(&features, &codebook).map_err(stage_err)?;
    save_units(&seqs, &a.out).map_err(stage_err)
}

fn cmd_abx(a: AbxArgs) -> CliResult {
    let alignment = load_alignment(&a.alignment)?;
    let manifest = load_manifest(&a.manifest)?;
    let archive = match (&a.features, &a.onehot) {
        (Some(f), None) => load_archive(f)?,
        (None, Some(u)) => {
            let k = a.k.ok_or_else(|| config_err("--onehot needs --K"))?;
            require_file(u)?;
            let seqs = load_units(u).map_err(stage_err)?;
            one_hot_archive(&seqs, k, 10_000).map_err(stage_err)?
        }
        _ => return Err(config_err("give exactly one of --features and --onehot")),
    };
    let items = extract_items(&alignment, &manifest).map_err(stage_err)?;
    let cfg = AbxConfig { mode: a.mode, x_cap: a.x_cap, seed: a.seed };
    let report = abx_score(&items, &archive, &cfg).map_err(stage_err)?;
    if let Some(p) = &a.cells_csv {
        let mut csv = String::from("triphone_a,triphone_b,speaker_ab,speaker_x,error,n_triples\n");
        for c in &report.cells {
            csv.push_str(&format!(
                "{},{},{},{},{:.6},{}\n",
                c.triphone_a.join("-"),
                c.triphone_b.join("-"),
                c.speaker_ab,
                c.speaker_x,
                c.error,
                c.n_triples
            ));
        }
        fs::write(p, csv).map_err(stage_err)?;
    }
    if a.cells {
        emit(&report, &a.out_report)
    } else {
        emit(&report.summary(), &a.out_report)
    }
}

fn cmd_verify(a: VerifyArgs) -> CliResult {
    let features = load_archive(&a.features)?;
    let manifest = load_manifest(&a.manifest)?;
    let report = verify(&features, &manifest, a.n_enroll, a.seed).map_err(stage_err)?;
    emit(&report, &a.out_report)
}

#[derive(Serialize)]
struct ProbeCliReport {
    input: String,
    classifier: ProbeConfig,
    test_utts_per_speaker: usize,
    split_seed: u64,
    n_train_utterances: usize,
    n_test_utterances: usize,
    results: std::collections::BTreeMap<String, spknorm::probe::ProbeResult>,
}

fn cmd_probe(a: ProbeArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    let alignment = a.alignment.as_deref().map(load_alignment).transpose()?;
    if a.task.contains(&ProbeTask::Phone) && alignment.is_none() {
        return Err(config_err("phone probes need --alignment"));
    }
    let classifier = ProbeConfig {
        kind: a.kind,
        hidden_units: a.hidden,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        n_runs: a.runs,
    };
    classifier.validate().map_err(config_err)?;
    let (train, test) = split_by_speaker(&manifest, a.test_utts, a.split_seed).map_err(config_err)?;
    let (input, results) = match (&a.features, &a.units) {
        (Some(f), None) => {
            let features = load_archive(f)?;
            let r = probe_features(&features, &manifest, alignment.as_ref(), &a.task, &classifier, &train, &test);
            ("features", r.map_err(stage_err)?)
        }
        (None, Some(u)) => {
            let k = a.k.ok_or_else(|| config_err("--units needs --K"))?;
            require_file(u)?;
            let seqs = load_units(u).map_err(stage_err)?;
            let r = probe_units(&seqs, k, &manifest, alignment.as_ref(), &a.task, &classifier, &train, &test);
            ("units", r.map_err(stage_err)?)
        }
        _ => return Err(config_err("give exactly one of --features and --units")),
    };
    let report = ProbeCliReport {
        input: input.to_string(),
        classifier,
        test_utts_per_speaker: a.test_utts,
        split_seed: a.split_seed,
        n_train_utterances: train.len(),
        n_test_utterances: test.len(),
        results,
    };
    emit(&report, &a.out_report)
}

fn cmd_cluster(a: ClusterArgs) -> CliResult {
    require_file(&a.units)?;
    let seqs = load_units(&a.units).map_err(stage_err)?;
    let alignment = load_alignment(&a.alignment)?;
    let report = corpus_cluster_metrics(&seqs, &alignment, !a.include_silence).map_err(stage_err)?;
    emit(&report, &a.out_report)
}

fn cmd_rank(a: RankArgs) -> CliResult {
    let features = load_archive(&a.features)?;
    let manifest = load_manifest(&a.manifest)?;
    let st = RankStage {
        enabled: true,
        max_frames: a.max_frames,
        sample_seed: a.seed,
        n_keep: None,
        forest: ForestConfig {
            n_trees: a.n_trees,
            max_depth: a.max_depth,
            min_samples_leaf: a.min_samples_leaf,
            seed: a.seed,
            ..ForestConfig::default()
        },
    };
    let report = rank_speaker_importance(&features, &manifest, &st)?;
    let text = serde_json::to_string_pretty(&report.ranking).expect("serializes") + "\n";
    fs::write(&a.out, text).map_err(stage_err)
}

fn cmd_prune(a: PruneArgs) -> CliResult {
    let archive = load_archive(&a.input)?;
    require_file(&a.ranking)?;
    let text = fs::read_to_string(&a.ranking).map_err(stage_err)?;
    let ranking: ImportanceRanking = serde_json::from_str(&text).map_err(config_err)?;
    let out = prune(&archive, &ranking, a.keep).map_err(stage_err)?;
    out.save(&a.out).map_err(stage_err)
}

fn units_map(path: &Path) -> Result<HashMap<String, Vec<u32>>, CliError> {
    require_file(path)?;
    Ok(load_units(path).map_err(stage_err)?.into_iter().map(|s| (s.utt_id, s.units)).collect())
}

fn load_lm(path: &Path) -> Result<NgramLm, CliError> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(stage_err)?;
    NgramLm::from_json(&text).map_err(stage_err)
}

fn cmd_lm_train(a: LmTrainArgs) -> CliResult {
    require_file(&a.units)?;
    let seqs = load_units(&a.units).map_err(stage_err)?;
    let lm = NgramLm::train(seqs.iter().map(|s| s.units.as_slice()), a.k, a.order, a.discount).map_err(stage_err)?;
    fs::write(&a.out, lm.to_json()).map_err(stage_err)
}

#[derive(Serialize)]
struct ScoreRow {
    utt_id: String,
    n_units: usize,
    logprob: f64,
}

fn cmd_lm_score(a: LmScoreArgs) -> CliResult {
    let lm = load_lm(&a.lm)?;
    require_file(&a.units)?;
    let seqs = load_units(&a.units).map_err(stage_err)?;
    let rows = seqs
        .iter()
        .map(|s| {
            let lp = if a.prefix { prefix_logprob(&lm, &s.units) } else { sequence_logprob(&lm, &s.units) };
            lp.map(|logprob| ScoreRow { utt_id: s.utt_id.clone(), n_units: s.units.len(), logprob })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(stage_err)?;
    emit(&rows, &a.out_report)
}

fn cmd_lm_pairs(a: LmPairsArgs) -> CliResult {
    let lm = load_lm(&a.lm)?;
    let units = units_map(&a.units)?;
    require_file(&a.pairs)?;
    let pairs = load_pairs(&a.pairs).map_err(stage_err)?;
    let report = pairwise_accuracy(&lm, &pairs, &units, a.length_normalized).map_err(stage_err)?;
    emit(&report, &a.out_report)
}

fn cmd_lm_simi(a: LmSimiArgs) -> CliResult {
    require_file(&a.simi)?;
    let items = load_simi(&a.simi).map_err(stage_err)?;
    let report = match (&a.units, &a.features) {
        (Some(u), None) => {
            let k = a.k.ok_or_else(|| config_err("--units needs --K"))?;
            let map = units_map(u)?;
            semantic_similarity(&UnitCountRepr { sequences: &map, k }, &items)
        }
        (None, Some(f)) => {
            let archive = load_archive(f)?;
            semantic_similarity(&FramePoolRepr { archive: &archive, pooling: a.pooling }, &items)
        }
        _ => return Err(config_err("give exactly one of --units and --features")),
    };
    emit(&report.map_err(stage_err)?, &a.out_report)
}

fn cmd_run(a: RunArgs) -> CliResult {
    let mut config = PipelineConfig::load(&a.config)?;
    if let Some(d) = a.output_dir {
        config.output_dir = d;
    }
    let out = run_pipeline(&config)?;
    eprintln!(
        "wrote {} ({:.1} s)",
        config.output_dir.join("report.json").display(),
        out.timings.total()
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let mut config = PipelineConfig::load(&a.config)?;
    if let Some(d) = a.output_dir {
        config.output_dir = d;
    }
    let rows = sweep(&config, a.param, &a.values)?;
    for row in &rows {
        if let Err(e) = &row.result {
            eprintln!("{} = {}: {e}", a.param.name(), row.value);
        }
    }
    eprintln!("wrote {}", config.output_dir.join("sweep.csv").display());
    Ok(())
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::ExtractMfcc(a) => cmd_extract(a),
        Command::Normalize(a) => cmd_normalize(a),
        Command::KmeansFit(a) => cmd_kmeans(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Abx(a) => cmd_abx(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Probe(a) => cmd_probe(a),
        Command::ClusterMetrics(a) => cmd_cluster(a),
        Command::FeatureRank(a) => cmd_rank(a),
        Command::Prune(a) => cmd_prune(a),
        Command::LmTrain(a) => cmd_lm_train(a),
        Command::LmScore(a) => cmd_lm_score(a),
        Command::LmPairs(a) => cmd_lm_pairs(a),
        Command::LmSimi(a) => cmd_lm_simi(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
