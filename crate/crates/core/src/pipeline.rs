//! End-to-end runs: features, speaker verification, standardization,
//! probes, optional dimension pruning, K-means units, ABX, clustering
//! metrics and unit language modeling, driven by one TOML config.
//!
//! `report.json` holds metrics and the full config echo only, so reruns with
//! the same config are byte-identical; wall-clock times go to
//! `timings.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abx::{abx_score, extract_items, AbxConfig, AbxMode, AbxReport};
use crate::aud::{
    corpus_cluster_metrics, fit_codebook, one_hot_archive, quantize, save_units, stack_frames, ClusterMetricsReport,
    Codebook, KMeansConfig, UnitSequence,
};
use crate::corpus::{
    generate_synthetic, generate_synthetic_tasks, Alignment, FeatureArchive, Manifest, Provenance, SynthConfig,
};
use crate::normalize::{normalize_archive, NormMode};
use crate::probe::{
    forest_importance, probe_accuracy, probe_on_units, prune, ForestConfig, ImportanceRanking, LabelEncoder,
    ProbeConfig, ProbeResult,
};
use crate::rng::{fnv1a, substream, tag};
use crate::slm::{
    load_pairs, load_simi, pairwise_accuracy, semantic_similarity, FramePoolRepr, NgramLm, PairwiseReport, Pooling,
    SimiItem, SimiReport, TaskPair, UnitCountRepr,
};
use crate::verify::{verify, VerifyReport};

pub const TOOLKIT_NAME: &str = "spknorm";
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: BoxError },
}

fn stage_err<E: Into<BoxError>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, source: e.into() }
}

/// Input files; when `archive` is unset the corpus is synthesized.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub archive: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub alignment: Option<PathBuf>,
    /// Features of the task stimuli referenced by the pair files.
    pub task_archive: Option<PathBuf>,
    pub task_manifest: Option<PathBuf>,
    pub lexical: Option<PathBuf>,
    pub syntactic: Option<PathBuf>,
    pub simi: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGenConfig {
    pub n_lexical: usize,
    pub n_syntactic: usize,
    pub n_simi: usize,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self { n_lexical: 200, n_syntactic: 200, n_simi: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyStage {
    pub enabled: bool,
    pub n_enroll: usize,
    pub seed: u64,
}

impl Default for VerifyStage {
    fn default() -> Self {
        Self { enabled: true, n_enroll: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeStage {
    pub enabled: bool,
    pub mode: NormMode,
}

impl Default for NormalizeStage {
    fn default() -> Self {
        Self { enabled: true, mode: NormMode::Utterance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Phone,
    Speaker,
    Gender,
}

impl ProbeTask {
    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::Phone => "phone",
            ProbeTask::Speaker => "speaker",
            ProbeTask::Gender => "gender",
        }
    }
}

impl std::str::FromStr for ProbeTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "phone" => Ok(ProbeTask::Phone),
            "speaker" => Ok(ProbeTask::Speaker),
            "gender" => Ok(ProbeTask::Gender),
            other => Err(format!("unknown probe task `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeStage {
    pub enabled: bool,
    pub tasks: Vec<ProbeTask>,
    /// Held-out test utterances per speaker.
    pub test_utts_per_speaker: usize,
    pub split_seed: u64,
    /// Also probe one-hot unit codes.
    pub on_units: bool,
    pub classifier: ProbeConfig,
}

impl Default for ProbeStage {
    fn default() -> Self {
        Self {
            enabled: true,
            tasks: vec![ProbeTask::Phone, ProbeTask::Speaker, ProbeTask::Gender],
            test_utts_per_speaker: 5,
            split_seed: 0,
            on_units: true,
            classifier: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankStage {
    pub enabled: bool,
    /// Frames sampled for the forest; 0 uses all.
    pub max_frames: usize,
    pub sample_seed: u64,
    /// Keep this many least speaker-important dimensions; unset keeps all.
    pub n_keep: Option<usize>,
    pub forest: ForestConfig,
}

impl Default for RankStage {
    fn default() -> Self {
        Self { enabled: false, max_frames: 20_000, sample_seed: 0, n_keep: None, forest: ForestConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansStage {
    pub enabled: bool,
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Fit on this many speakers chosen at random; 0 uses all.
    pub train_speakers: usize,
    /// Explicit training speakers; overrides `train_speakers`.
    pub train_speaker_list: Vec<String>,
    /// Uniform subsample cap on training frames; 0 uses all.
    pub max_train_frames: usize,
}

impl Default for KMeansStage {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 50,
            seed: 0,
            max_iters: 300,
            tol: 1e-4,
            train_speakers: 0,
            train_speaker_list: Vec::new(),
            max_train_frames: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbxStage {
    pub enabled: bool,
    pub modes: Vec<AbxMode>,
    pub on_features: bool,
    pub on_units: bool,
    pub x_cap: usize,
    pub seed: u64,
}

impl Default for AbxStage {
    fn default() -> Self {
        Self {
            enabled: true,
            modes: vec![AbxMode::Within, AbxMode::Across],
            on_features: true,
            on_units: true,
            x_cap: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterStage {
    pub enabled: bool,
    pub exclude_silence: bool,
}

impl Default for ClusterStage {
    fn default() -> Self {
        Self { enabled: true, exclude_silence: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticSource {
    /// Unit count vectors.
    #[default]
    Units,
    /// Pooled feature frames.
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmStage {
    pub enabled: bool,
    pub order: usize,
    pub discount: f64,
    pub length_normalized: bool,
    pub semantic_source: SemanticSource,
    pub pooling: Pooling,
}

impl Default for LmStage {
    fn default() -> Self {
        Self {
            enabled: true,
            order: 3,
            discount: 0.75,
            length_normalized: false,
            semantic_source: SemanticSource::Units,
            pooling: Pooling::Min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub inputs: InputConfig,
    pub synth: SynthConfig,
    pub tasks: TaskGenConfig,
    pub verify: VerifyStage,
    pub normalize: NormalizeStage,
    pub probe: ProbeStage,
    pub feature_rank: RankStage,
    pub kmeans: KMeansStage,
    pub abx: AbxStage,
    pub cluster_metrics: ClusterStage,
    pub lm: LmStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            inputs: InputConfig::default(),
            synth: SynthConfig::default(),
            tasks: TaskGenConfig::default(),
            verify: VerifyStage::default(),
            normalize: NormalizeStage::default(),
            probe: ProbeStage::default(),
            feature_rank: RankStage::default(),
            kmeans: KMeansStage::default(),
            abx: AbxStage::default(),
            cluster_metrics: ClusterStage::default(),
            lm: LmStage::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks cross-field constraints and that referenced files exist.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| Err(PipelineError::Config(m));
        let inp = &self.inputs;
        if inp.archive.is_some() != inp.manifest.is_some() {
            return cfg("inputs.archive and inputs.manifest must be given together".into());
        }
        if inp.archive.is_none() && (inp.alignment.is_some() || inp.task_archive.is_some()) {
            return cfg("inputs.alignment and inputs.task_archive need inputs.archive".into());
        }
        let has_pair_files = inp.lexical.is_some() || inp.syntactic.is_some() || inp.simi.is_some();
        if has_pair_files && inp.task_archive.is_none() {
            return cfg("task pair files need inputs.task_archive".into());
        }
        for p in [
            &inp.archive,
            &inp.manifest,
            &inp.alignment,
            &inp.task_archive,
            &inp.task_manifest,
            &inp.lexical,
            &inp.syntactic,
            &inp.simi,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return cfg(format!("input file {} does not exist", p.display()));
            }
        }
        if inp.archive.is_none() {
            self.synth.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if self.probe.enabled {
            self.probe.classifier.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
            if self.probe.test_utts_per_speaker == 0 {
                return cfg("probe.test_utts_per_speaker must be >= 1".into());
            }
        }
        if self.verify.enabled && self.verify.n_enroll == 0 {
            return cfg("verify.n_enroll must be >= 1".into());
        }
        if self.kmeans.k == 0 {
            return cfg("kmeans.k must be >= 1".into());
        }
        if self.lm.order == 0 || !(self.lm.discount > 0.0 && self.lm.discount <= 1.0) {
            return cfg("lm.order must be >= 1 and lm.discount in (0, 1]".into());
        }
        if self.feature_rank.n_keep == Some(0) {
            return cfg("feature_rank.n_keep must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub source: String,
    pub n_utterances: usize,
    pub n_speakers: usize,
    pub n_frames: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStageReport {
    pub n_train_utterances: usize,
    pub n_test_utterances: usize,
    pub features: BTreeMap<String, ProbeResult>,
    pub units: BTreeMap<String, ProbeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub ranking: ImportanceRanking,
    pub n_frames: usize,
    pub kept_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansReport {
    pub k: usize,
    pub seed: u64,
    pub n_train_frames: usize,
    pub train_speakers: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbxEntry {
    /// `features` or `units`.
    pub input: String,
    pub report: AbxReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub order: usize,
    pub discount: f64,
    pub n_train_sequences: usize,
    pub lexical: Option<PairwiseReport>,
    pub syntactic: Option<PairwiseReport>,
    pub semantic: Option<SimiReport>,
    /// Why the task evaluations did not run, if they did not.
    pub tasks_skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub toolkit: String,
    pub version: String,
    pub config: PipelineConfig,
    pub corpus: CorpusSummary,
    pub verify: Option<VerifyReport>,
    pub probes: Option<ProbeStageReport>,
    pub feature_rank: Option<RankReport>,
    pub kmeans: Option<KMeansReport>,
    pub abx: Vec<AbxEntry>,
    pub cluster_metrics: Option<ClusterMetricsReport>,
    pub lm: Option<LmReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn abx_error(&self, input: &str, mode: AbxMode) -> Option<f64> {
        self.abx.iter().find(|e| e.input == input && e.report.mode == mode).map(|e| e.report.error_rate)
    }
}

/// Wall-clock seconds per stage, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

impl Timings {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stages.push((name.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|(_, s)| s).sum()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub timings: Timings,
}

struct Corpus {
    source: &'static str,
    archive: FeatureArchive,
    manifest: Manifest,
    alignment: Option<Alignment>,
    tasks: Option<TaskInputs>,
}

struct TaskInputs {
    archive: FeatureArchive,
    manifest: Option<Manifest>,
    lexical: Vec<TaskPair>,
    syntactic: Vec<TaskPair>,
    simi: Vec<SimiItem>,
}

fn load_corpus(config: &PipelineConfig) -> Result<Corpus, PipelineError> {
    let inp = &config.inputs;
    let Some(archive_path) = &inp.archive else {
        let synth = generate_synthetic(&config.synth).map_err(stage_err("synth"))?;
        let tasks = if config.synth.lexicon_size > 0 && config.lm.enabled {
            let t = generate_synthetic_tasks(
                &config.synth,
                &synth.truth,
                config.tasks.n_lexical,
                config.tasks.n_syntactic,
                config.tasks.n_simi,
            )
            .map_err(stage_err("synth"))?;
            Some(TaskInputs {
                archive: t.archive,
                manifest: Some(t.manifest),
                lexical: t.lexical,
                syntactic: t.syntactic,
                simi: t.simi,
            })
        } else {
            None
        };
        return Ok(Corpus {
            source: "synthetic",
            archive: synth.archive,
            manifest: synth.manifest,
            alignment: Some(synth.alignment),
            tasks,
        });
    };
    let load = stage_err::<crate::corpus::CorpusError>("load");
    let archive = FeatureArchive::load(archive_path).map_err(load)?.with_provenance(Provenance::Raw);
    let manifest_path = inp.manifest.as_ref().expect("validated");
    let manifest = Manifest::load(manifest_path).map_err(stage_err("load"))?;
    manifest.validate_against(&archive).map_err(stage_err("load"))?;
    let alignment = match &inp.alignment {
        Some(p) => {
            let a = Alignment::load(p).map_err(stage_err("load"))?;
            a.validate_against(&archive).map_err(stage_err("load"))?;
            Some(a)
        }
        None => None,
    };
    let tasks = match &inp.task_archive {
        Some(p) => Some(TaskInputs {
            archive: FeatureArchive::load(p).map_err(stage_err("load"))?.with_provenance(Provenance::Raw),
            manifest: inp.task_manifest.as_ref().map(Manifest::load).transpose().map_err(stage_err("load"))?,
            lexical: inp.lexical.as_ref().map(load_pairs).transpose().map_err(stage_err("load"))?.unwrap_or_default(),
            syntactic: inp.syntactic.as_ref().map(load_pairs).transpose().map_err(stage_err("load"))?.unwrap_or_default(),
            simi: inp.simi.as_ref().map(load_simi).transpose().map_err(stage_err("load"))?.unwrap_or_default(),
        }),
        None => None,
    };
    Ok(Corpus { source: "files", archive, manifest, alignment, tasks })
}

/// Per speaker, `n_test` utterances chosen at random are held out.
pub fn split_by_speaker(manifest: &Manifest, n_test: usize, seed: u64) -> Result<(Vec<String>, Vec<String>), String> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (spk, utts) in manifest.by_speaker() {
        if utts.len() <= n_test {
            return Err(format!("speaker `{spk}` has {} utterances, need more than {n_test}", utts.len()));
        }
        let mut order = utts.clone();
        order.shuffle(&mut substream(seed, tag::SPLIT, fnv1a(spk.as_bytes())));
        let held: std::collections::BTreeSet<&str> = order[..n_test].iter().copied().collect();
        for u in utts {
            if held.contains(u) {
                test.push(u.to_string());
            } else {
                train.push(u.to_string());
            }
        }
    }
    Ok((train, test))
}

/// Per-frame labels of one task for the given utterances.
pub fn frame_labels(
    task: ProbeTask,
    ids: &[String],
    manifest: &Manifest,
    alignment: Option<&Alignment>,
) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for id in ids {
        let rec = manifest.get(id).ok_or_else(|| format!("utterance `{id}` not in manifest"))?;
        match task {
            ProbeTask::Phone => {
                let a = alignment.ok_or("phone probes need an alignment")?;
                let labels = a.frame_labels(id).ok_or_else(|| format!("no alignment for `{id}`"))?;
                out.extend(labels.into_iter().map(String::from));
            }
            ProbeTask::Speaker => out.extend(std::iter::repeat_n(rec.speaker_id.clone(), rec.num_frames)),
            ProbeTask::Gender => out.extend(std::iter::repeat_n(rec.gender.to_string(), rec.num_frames)),
        }
    }
    Ok(out)
}

fn encode(encoder: &LabelEncoder, labels: &[String]) -> Result<Vec<u32>, String> {
    labels
        .iter()
        .map(|l| encoder.encode(l).ok_or_else(|| format!("label `{l}` absent from training data")))
        .collect()
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(dir.join(name), contents).map_err(stage_err("write"))
}

fn units_of(seqs: &[UnitSequence], ids: &[String]) -> Result<Vec<u32>, String> {
    let map: HashMap<&str, &Vec<u32>> = seqs.iter().map(|s| (s.utt_id.as_str(), &s.units)).collect();
    let mut out = Vec::new();
    for id in ids {
        out.extend(map.get(id.as_str()).ok_or_else(|| format!("no units for `{id}`"))?.iter().copied());
    }
    Ok(out)
}

/// Runs every enabled stage and writes artifacts and reports to
/// `config.output_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    let out_dir = &config.output_dir;
    fs::create_dir_all(out_dir).map_err(stage_err("write"))?;
    let mut timings = Timings::default();

    let corpus = timings.time("load", || load_corpus(config))?;
    let raw = &corpus.archive;
    let manifest = &corpus.manifest;
    let alignment = corpus.alignment.as_ref();
    let corpus_summary = CorpusSummary {
        source: corpus.source.to_string(),
        n_utterances: raw.len(),
        n_speakers: manifest.speakers().len(),
        n_frames: raw.total_frames(),
        dim: raw.dim(),
    };

    let verify_report = if config.verify.enabled {
        Some(timings.time("verify", || {
            verify(raw, manifest, config.verify.n_enroll, config.verify.seed).map_err(stage_err("verify"))
        })?)
    } else {
        None
    };

    let normalize = |a: &FeatureArchive, m: Option<&Manifest>| -> Result<FeatureArchive, PipelineError> {
        if config.normalize.enabled {
            normalize_archive(a, config.normalize.mode, m).map_err(stage_err("normalize"))
        } else {
            Ok(a.clone())
        }
    };
    let mut features = timings.time("normalize", || normalize(raw, Some(manifest)))?;

    let rank_report = if config.feature_rank.enabled {
        Some(timings.time("feature_rank", || rank_speaker_importance(&features, manifest, &config.feature_rank))?)
    } else {
        None
    };
    if let Some(r) = &rank_report {
        if r.kept_dims.len() != features.dim() {
            features = prune(&features, &r.ranking, r.kept_dims.len()).map_err(stage_err("prune"))?;
        }
    }
    features.save(out_dir.join("features.zrfa")).map_err(stage_err("write"))?;

    let split = if config.probe.enabled {
        Some(
            split_by_speaker(manifest, config.probe.test_utts_per_speaker, config.probe.split_seed)
                .map_err(stage_err::<String>("probe"))?,
        )
    } else {
        None
    };
    let mut probes = match &split {
        Some((train, test)) => Some(timings.time("probe", || {
            let p = &config.probe;
            let features = probe_features(&features, manifest, alignment, &p.tasks, &p.classifier, train, test)
                .map_err(stage_err::<String>("probe"))?;
            Ok::<_, PipelineError>(ProbeStageReport {
                n_train_utterances: train.len(),
                n_test_utterances: test.len(),
                features,
                units: BTreeMap::new(),
            })
        })?),
        None => None,
    };

    // Units.
    let mut kmeans_report = None;
    let mut codebook = None;
    let mut units = None;
    if config.kmeans.enabled {
        let (report, cb) = timings.time("kmeans", || fit_units(&features, manifest, &config.kmeans))?;
        cb.save(out_dir.join("codebook.zrcb")).map_err(stage_err("write"))?;
        let seqs = timings.time("quantize", || quantize(&features, &cb).map_err(stage_err("quantize")))?;
        save_units(&seqs, out_dir.join("units.txt")).map_err(stage_err("write"))?;
        kmeans_report = Some(report);
        codebook = Some(cb);
        units = Some(seqs);
    }

    if let (Some(probes), Some((train, test)), Some(seqs)) = (probes.as_mut(), &split, &units) {
        if config.probe.on_units {
            timings.time("probe_units", || {
                let p = &config.probe;
                probes.units = probe_units(seqs, config.kmeans.k, manifest, alignment, &p.tasks, &p.classifier, train, test)
                    .map_err(stage_err::<String>("probe_units"))?;
                Ok::<_, PipelineError>(())
            })?;
        }
    }

    let mut abx = Vec::new();
    if config.abx.enabled {
        let alignment = alignment.ok_or_else(|| stage_err::<&str>("abx")("ABX needs an alignment"))?;
        timings.time("abx", || -> Result<(), PipelineError> {
            let items = extract_items(alignment, manifest).map_err(stage_err("abx"))?;
            let mut inputs: Vec<(&str, FeatureArchive)> = Vec::new();
            if config.abx.on_features {
                inputs.push(("features", features.clone()));
            }
            if let (true, Some(seqs)) = (config.abx.on_units, &units) {
                let onehot = one_hot_archive(seqs, config.kmeans.k, features.frame_period_us()).map_err(stage_err("abx"))?;
                inputs.push(("units", onehot));
            }
            for (input, archive) in &inputs {
                for &mode in &config.abx.modes {
                    let cfg = AbxConfig { mode, x_cap: config.abx.x_cap, seed: config.abx.seed };
                    let report = abx_score(&items, archive, &cfg).map_err(stage_err("abx"))?;
                    let name = format!("abx_{input}_{}.json", if mode == AbxMode::Within { "within" } else { "across" });
                    write_file(out_dir, &name, serde_json::to_string(&report).expect("serializes"))?;
                    abx.push(AbxEntry { input: input.to_string(), report: report.summary() });
                }
            }
            Ok(())
        })?;
    }

    let cluster_metrics = match (&units, alignment, config.cluster_metrics.enabled) {
        (Some(seqs), Some(a), true) => Some(timings.time("cluster_metrics", || {
            corpus_cluster_metrics(seqs, a, config.cluster_metrics.exclude_silence).map_err(stage_err("cluster_metrics"))
        })?),
        _ => None,
    };

    let lm = match (&units, &codebook, config.lm.enabled) {
        (Some(seqs), Some(cb), true) => Some(timings.time("lm", || {
            lm_stage(config, seqs, cb, corpus.tasks.as_ref(), rank_report.as_ref(), &normalize, out_dir)
        })?),
        _ => None,
    };

    let report = RunReport {
        toolkit: TOOLKIT_NAME.to_string(),
        version: TOOLKIT_VERSION.to_string(),
        config: config.clone(),
        corpus: corpus_summary,
        verify: verify_report,
        probes,
        feature_rank: rank_report,
        kmeans: kmeans_report,
        abx,
        cluster_metrics,
        lm,
    };
    write_file(out_dir, "report.json", report.to_json())?;
    write_file(out_dir, "timings.json", serde_json::to_string_pretty(&timings).expect("serializes") + "\n")?;
    Ok(RunOutput { report, timings })
}

/// Speaker-classification forest importance of each feature dimension,
/// and the dimensions kept under `st.n_keep`.
pub fn rank_speaker_importance(
    features: &FeatureArchive,
    manifest: &Manifest,
    st: &RankStage,
) -> Result<RankReport, PipelineError> {
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (u, utt) in features.utterances().iter().enumerate() {
        rows.extend((0..utt.num_frames()).map(|t| (u, t)));
    }
    if st.max_frames > 0 && rows.len() > st.max_frames {
        rows.shuffle(&mut substream(st.sample_seed, tag::SUBSAMPLE, 0));
        rows.truncate(st.max_frames);
        rows.sort_unstable();
    }
    let utts = features.utterances();
    let speakers: Vec<&str> = utts
        .iter()
        .map(|u| manifest.get(&u.id).map(|r| r.speaker_id.as_str()).ok_or_else(|| u.id.clone()))
        .collect::<Result<_, _>>()
        .map_err(|id| stage_err::<String>("feature_rank")(format!("utterance `{id}` not in manifest")))?;
    let encoder = LabelEncoder::fit(speakers.iter().copied());
    let x = ndarray::Array2::from_shape_fn((rows.len(), features.dim()), |(i, j)| {
        let (u, t) = rows[i];
        utts[u].frames[[t, j]]
    });
    let y: Vec<u32> = rows.iter().map(|&(u, _)| encoder.encode(speakers[u]).expect("fitted")).collect();
    let ranking = forest_importance(x.view(), &y, encoder.len(), &st.forest).map_err(stage_err("feature_rank"))?;
    let n_keep = st.n_keep.unwrap_or(features.dim());
    let kept_dims = ranking.keep(n_keep).map_err(stage_err("feature_rank"))?;
    Ok(RankReport { ranking, n_frames: rows.len(), kept_dims })
}

/// Probe accuracy per task on feature frames, trained on the `train`
/// utterances and tested on `test`.
pub fn probe_features(
    features: &FeatureArchive,
    manifest: &Manifest,
    alignment: Option<&Alignment>,
    tasks: &[ProbeTask],
    classifier: &ProbeConfig,
    train: &[String],
    test: &[String],
) -> Result<BTreeMap<String, ProbeResult>, String> {
    let train_x = stack_frames(features, train.iter().map(String::as_str)).map_err(|e| e.to_string())?;
    let test_x = stack_frames(features, test.iter().map(String::as_str)).map_err(|e| e.to_string())?;
    let mut results = BTreeMap::new();
    for &task in tasks {
        let train_l = frame_labels(task, train, manifest, alignment)?;
        let test_l = frame_labels(task, test, manifest, alignment)?;
        let enc = LabelEncoder::fit(train_l.iter().map(String::as_str));
        let r = probe_accuracy(
            train_x.view(),
            &encode(&enc, &train_l)?,
            test_x.view(),
            &encode(&enc, &test_l)?,
            enc.len(),
            classifier,
        )
        .map_err(|e| format!("{} probe: {e}", task.name()))?;
        results.insert(task.name().to_string(), r);
    }
    Ok(results)
}

/// Probe accuracy per task on one-hot unit codes.
#[allow(clippy::too_many_arguments)]
pub fn probe_units(
    seqs: &[UnitSequence],
    k: usize,
    manifest: &Manifest,
    alignment: Option<&Alignment>,
    tasks: &[ProbeTask],
    classifier: &ProbeConfig,
    train: &[String],
    test: &[String],
) -> Result<BTreeMap<String, ProbeResult>, String> {
    let train_u = units_of(seqs, train)?;
    let test_u = units_of(seqs, test)?;
    let mut results = BTreeMap::new();
    for &task in tasks {
        let train_l = frame_labels(task, train, manifest, alignment)?;
        let test_l = frame_labels(task, test, manifest, alignment)?;
        let enc = LabelEncoder::fit(train_l.iter().map(String::as_str));
        let r = probe_on_units(
            &train_u,
            &encode(&enc, &train_l)?,
            &test_u,
            &encode(&enc, &test_l)?,
            k,
            enc.len(),
            classifier,
        )
        .map_err(|e| format!("{} unit probe: {e}", task.name()))?;
        results.insert(task.name().to_string(), r);
    }
    Ok(results)
}

/// Fits the unit codebook on the configured training speakers and frames.
pub fn fit_units(
    features: &FeatureArchive,
    manifest: &Manifest,
    st: &KMeansStage,
) -> Result<(KMeansReport, Codebook), PipelineError> {
    let mut speakers: Vec<String> = manifest.speakers().into_iter().map(String::from).collect();
    if !st.train_speaker_list.is_empty() {
        for s in &st.train_speaker_list {
            if !speakers.contains(s) {
                return Err(stage_err::<String>("kmeans")(format!("unknown training speaker `{s}`")));
            }
        }
        speakers = st.train_speaker_list.clone();
        speakers.sort();
    } else if st.train_speakers > 0 && st.train_speakers < speakers.len() {
        speakers.shuffle(&mut substream(st.seed, tag::SUBSAMPLE, 1));
        speakers.truncate(st.train_speakers);
        speakers.sort();
    }
    let by_speaker = manifest.by_speaker();
    let ids: Vec<&str> = speakers.iter().flat_map(|s| by_speaker[s.as_str()].iter().copied()).collect();
    let mut frames = stack_frames(features, ids).map_err(stage_err("kmeans"))?;
    if st.max_train_frames > 0 && frames.nrows() > st.max_train_frames {
        let mut rows: Vec<usize> = (0..frames.nrows()).collect();
        rows.shuffle(&mut substream(st.seed, tag::SUBSAMPLE, 2));
        rows.truncate(st.max_train_frames);
        rows.sort_unstable();
        frames = frames.select(ndarray::Axis(0), &rows);
    }
    let kcfg = KMeansConfig { k: st.k, seed: st.seed, max_iters: st.max_iters, tol: st.tol };
    let standardized = features.provenance() == Provenance::Standardized;
    let fit = fit_codebook(frames.view(), standardized, &kcfg).map_err(stage_err("kmeans"))?;
    let report = KMeansReport {
        k: st.k,
        seed: st.seed,
        n_train_frames: frames.nrows(),
        train_speakers: speakers,
        iterations: fit.iterations,
        converged: fit.converged,
        inertia: fit.inertia(),
    };
    Ok((report, fit.codebook))
}

fn lm_stage(
    config: &PipelineConfig,
    seqs: &[UnitSequence],
    codebook: &Codebook,
    tasks: Option<&TaskInputs>,
    rank: Option<&RankReport>,
    normalize: &dyn Fn(&FeatureArchive, Option<&Manifest>) -> Result<FeatureArchive, PipelineError>,
    out_dir: &Path,
) -> Result<LmReport, PipelineError> {
    let st = &config.lm;
    let lm = NgramLm::train(seqs.iter().map(|s| s.units.as_slice()), codebook.k(), st.order, st.discount)
        .map_err(stage_err("lm"))?;
    write_file(out_dir, "lm.json", lm.to_json())?;
    let mut report = LmReport {
        order: st.order,
        discount: st.discount,
        n_train_sequences: seqs.len(),
        lexical: None,
        syntactic: None,
        semantic: None,
        tasks_skipped: None,
    };
    let Some(tasks) = tasks else {
        report.tasks_skipped = Some("no task stimuli (synthetic corpus without a lexicon, or no task files)".into());
        return Ok(report);
    };
    let mut feats = normalize(&tasks.archive, tasks.manifest.as_ref())?;
    if let Some(r) = rank {
        if r.kept_dims.len() != feats.dim() {
            feats = prune(&feats, &r.ranking, r.kept_dims.len()).map_err(stage_err("lm"))?;
        }
    }
    let task_units = quantize(&feats, codebook).map_err(stage_err("lm"))?;
    let map: HashMap<String, Vec<u32>> = task_units.into_iter().map(|s| (s.utt_id, s.units)).collect();
    if !tasks.lexical.is_empty() {
        report.lexical = Some(pairwise_accuracy(&lm, &tasks.lexical, &map, st.length_normalized).map_err(stage_err("lm"))?);
    }
    if !tasks.syntactic.is_empty() {
        report.syntactic =
            Some(pairwise_accuracy(&lm, &tasks.syntactic, &map, st.length_normalized).map_err(stage_err("lm"))?);
    }
    if !tasks.simi.is_empty() {
        let r = match st.semantic_source {
            SemanticSource::Units => semantic_similarity(&UnitCountRepr { sequences: &map, k: codebook.k() }, &tasks.simi),
            SemanticSource::Features => semantic_similarity(&FramePoolRepr { archive: &feats, pooling: st.pooling }, &tasks.simi),
        };
        report.semantic = Some(r.map_err(stage_err("lm"))?);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    K,
    NKeep,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::NKeep => "n_keep",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "k" | "K" => Ok(SweepParam::K),
            "n_keep" | "n-keep" => Ok(SweepParam::NKeep),
            other => Err(format!("unknown sweep parameter `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: usize,
    pub result: Result<RunReport, String>,
}

/// One pipeline run per value in `<output_dir>/<param>_<value>`; a failing
/// value is recorded and the sweep continues. Writes `sweep.csv`.
pub fn sweep(config: &PipelineConfig, param: SweepParam, values: &[usize]) -> Result<Vec<SweepRow>, PipelineError> {
    if values.is_empty() {
        return Err(PipelineError::Config("sweep needs at least one value".into()));
    }
    config.validate()?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut c = config.clone();
        c.output_dir = config.output_dir.join(format!("{}_{value}", param.name()));
        match param {
            SweepParam::K => c.kmeans.k = value,
            SweepParam::NKeep => {
                c.feature_rank.enabled = true;
                c.feature_rank.n_keep = Some(value);
            }
        }
        let result = run_pipeline(&c).map(|o| o.report).map_err(|e| e.to_string());
        rows.push(SweepRow { value, result });
    }
    fs::create_dir_all(&config.output_dir).map_err(stage_err("write"))?;
    write_file(&config.output_dir, "sweep.csv", sweep_csv(param, &rows))?;
    Ok(rows)
}

const SWEEP_METRICS: [&str; 13] = [
    "verify_eer",
    "verify_accuracy",
    "abx_features_within",
    "abx_features_across",
    "abx_units_within",
    "abx_units_across",
    "ari",
    "ami",
    "homogeneity",
    "completeness",
    "lexical",
    "syntactic",
    "semantic",
];

fn sweep_metrics(r: &RunReport) -> [Option<f64>; 13] {
    let cm = r.cluster_metrics.as_ref();
    let lm = r.lm.as_ref();
    [
        r.verify.as_ref().map(|v| v.eer),
        r.verify.as_ref().map(|v| v.accuracy),
        r.abx_error("features", AbxMode::Within),
        r.abx_error("features", AbxMode::Across),
        r.abx_error("units", AbxMode::Within),
        r.abx_error("units", AbxMode::Across),
        cm.map(|c| c.ari),
        cm.map(|c| c.ami),
        cm.map(|c| c.homogeneity),
        cm.map(|c| c.completeness),
        lm.and_then(|l| l.lexical.as_ref()).map(|p| p.accuracy),
        lm.and_then(|l| l.syntactic.as_ref()).map(|p| p.accuracy),
        lm.and_then(|l| l.semantic.as_ref()).map(|s| s.spearman),
    ]
}

/// Summary table, one row per value; empty cells for metrics not computed.
pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = format!("{},status,{}\n", param.name(), SWEEP_METRICS.join(","));
    for row in rows {
        match &row.result {
            Ok(r) => {
                let cells: Vec<String> =
                    sweep_metrics(r).iter().map(|m| m.map(|v| format!("{v:.6}")).unwrap_or_default()).collect();
                out.push_str(&format!("{},ok,{}\n", row.value, cells.join(",")));
            }
            Err(_) => out.push_str(&format!("{},failed{}\n", row.value, ",".repeat(SWEEP_METRICS.len()))),
        }
    }
    out
}
