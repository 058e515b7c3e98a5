//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances are fixed constants below.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use spknorm::abx::{abx_score, dtw_distance, extract_items, AbxConfig, AbxMode};
use spknorm::aud::{clustering_metrics, fit_codebook, KMeansConfig};
use spknorm::corpus::{generate_synthetic, FeatureArchive, Gender, Manifest, ManifestRecord, SynthConfig, Utterance};
use spknorm::normalize::{normalize_archive, NormMode};
use spknorm::pipeline::{probe_features, run_pipeline, split_by_speaker, PipelineConfig, ProbeTask};
use spknorm::probe::{Classifier, ProbeConfig, ProbeKind};
use spknorm::slm::{spearman, NgramLm};
use spknorm::verify::{compute_eer, verify};
use spknorm_oracles as oracle;

const DTW_TOL: f64 = 1e-9;
const CLUSTER_TOL: f64 = 1e-9;
const SPEARMAN_TOL: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-4;
const NGRAM_SUM_TOL: f64 = 1e-9;
const RAW_SPEAKER_MIN: f64 = 0.80;
const STD_SPEAKER_MAX: f64 = 0.15;
const PHONE_SHIFT_MAX: f64 = 0.05;
const PROBE_SECONDS: f64 = 120.0;
const UNIT_SECONDS: f64 = 180.0;
const MIN_TRIPLES: usize = 2000;
const ONEHOT_ABX_MAX: f64 = 0.01;
const CHANCE_TOL: f64 = 0.02;
const PIPELINE_SECONDS: f64 = 300.0;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(name: &str, outcome: Outcome, all: &mut Vec<bool>) {
    println!("{} {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
    all.push(outcome.pass);
}

fn rows(rng: &mut ChaCha8Rng, t: usize, d: usize, grid: bool) -> Vec<Vec<f32>> {
    (0..t)
        .map(|_| {
            (0..d)
                .map(|_| if grid { f32::from(rng.random_range(-2i8..=2)) } else { rng.random_range(-1.0f32..1.0) })
                .collect()
        })
        .collect()
}

fn to_array(r: &[Vec<f32>]) -> Array2<f32> {
    Array2::from_shape_fn((r.len(), r[0].len()), |(i, j)| r[i][j])
}

fn oracle_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut dtw_worst: f64 = 0.0;
    for case in 0..600 {
        let d = rng.random_range(1..=4);
        let (tx, ty) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let x = rows(&mut rng, tx, d, case % 2 == 0);
        let y = rows(&mut rng, ty, d, case % 2 == 0);
        let fast = dtw_distance(to_array(&x).view(), to_array(&y).view()).unwrap();
        dtw_worst = dtw_worst.max((fast - oracle::dtw_bruteforce(&x, &y)).abs());
    }

    let mut cl_worst: f64 = 0.0;
    for _ in 0..3000 {
        let n = rng.random_range(2..=12);
        let nc = rng.random_range(1..=6);
        let nk = rng.random_range(1..=6);
        let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..nc)).collect();
        let b: Vec<u32> = (0..n).map(|_| rng.random_range(0..nk)).collect();
        let r = clustering_metrics(&a, &b).unwrap();
        for (x, y) in [
            (r.ari, oracle::ari_pairs(&a, &b)),
            (r.ami, oracle::ami(&a, &b)),
            (r.homogeneity, oracle::homogeneity(&a, &b)),
            (r.completeness, oracle::completeness(&a, &b)),
        ] {
            cl_worst = cl_worst.max((x - y).abs());
        }
    }

    let mut eer_mismatch = 0;
    let mut eer_cases = 0;
    while eer_cases < 200 {
        let n = rng.random_range(2..=1000);
        let levels = rng.random_range(2..200);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 7.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        if !labels.iter().any(|&t| t) || labels.iter().all(|&t| t) {
            continue;
        }
        eer_cases += 1;
        let fast = compute_eer(&scores, &labels).unwrap();
        let slow = oracle::eer_sweep(&scores, &labels);
        if fast.0.to_bits() != slow.0.to_bits() || fast.1.to_bits() != slow.1.to_bits() {
            eer_mismatch += 1;
        }
    }

    let mut sp_worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(3..80);
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8))).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        if x.iter().all(|&v| v == x[0]) {
            continue;
        }
        sp_worst = sp_worst.max((spearman(&x, &y).unwrap() - oracle::spearman(&x, &y)).abs());
    }

    Outcome {
        pass: dtw_worst <= DTW_TOL && cl_worst <= CLUSTER_TOL && eer_mismatch == 0 && sp_worst <= SPEARMAN_TOL,
        detail: format!(
            "dtw max|d|={dtw_worst:.1e} (600 pairs, T<=6); ARI/AMI/H/C max|d|={cl_worst:.1e} (3000 labelings, n<=12); \
             EER {eer_mismatch}/{eer_cases} mismatches (n<=1000, bitwise); spearman max|d|={sp_worst:.1e}"
        ),
    }
}

fn numerical_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut grad_worst: f64 = 0.0;
    for (kind, seed) in [(ProbeKind::Linear, 0), (ProbeKind::Linear, 1), (ProbeKind::Mlp, 2), (ProbeKind::Mlp, 3)] {
        let (d, h, c, n) = (6, 9, 5, 16);
        let mut clf = Classifier::init(kind, d, h, c, seed);
        for p in clf.params.iter_mut() {
            *p = rng.random_range(-0.5..0.5);
        }
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<u32> = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
        let (_, grad) = clf.loss_and_grad(&clf.params, &xs, &ys);
        let eps = 1e-5;
        for i in 0..clf.params.len() {
            let mut plus = clf.params.clone();
            plus[i] += eps;
            let mut minus = clf.params.clone();
            minus[i] -= eps;
            let num = (clf.loss_and_grad(&plus, &xs, &ys).0 - clf.loss_and_grad(&minus, &xs, &ys).0) / (2.0 * eps);
            let scale = grad[i].abs().max(num.abs());
            if scale > 1e-8 {
                grad_worst = grad_worst.max((grad[i] - num).abs() / scale);
            }
        }
    }

    let mut ngram_worst: f64 = 0.0;
    let mut contexts = 0usize;
    for &(k, order) in &[(2usize, 3usize), (8, 3), (20, 2), (64, 1), (64, 2), (64, 3)] {
        let seqs: Vec<Vec<u32>> = (0..60)
            .map(|_| (0..rng.random_range(0..40)).map(|_| rng.random_range(0..k as u32)).collect())
            .collect();
        let lm = NgramLm::train(seqs.iter().map(Vec::as_slice), k, order, 0.75).unwrap();
        let n = order - 1;
        for n_bos in 0..=n {
            let free = n - n_bos;
            for code in 0..k.pow(free as u32) {
                let mut h = vec![lm.bos(); n_bos];
                let mut c = code;
                for _ in 0..free {
                    h.push((c % k) as u32);
                    c /= k;
                }
                let total: f64 = (0..lm.n_outcomes() as u32).map(|w| lm.prob(&h, w)).sum();
                ngram_worst = ngram_worst.max((total - 1.0).abs());
                contexts += 1;
            }
        }
    }

    let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
    let frames = corpus.archive.stacked();
    let mut increases = 0;
    let mut fits = 0;
    for seed in 0..3 {
        for k in [5, 10, 50] {
            let fit = fit_codebook(frames.view(), false, &KMeansConfig { k, seed, ..Default::default() }).unwrap();
            fits += 1;
            increases += fit.inertia_history.windows(2).filter(|w| w[1] > w[0]).count();
        }
    }

    Outcome {
        pass: grad_worst <= GRAD_REL_TOL && ngram_worst <= NGRAM_SUM_TOL && increases == 0,
        detail: format!(
            "gradient max rel err={grad_worst:.1e}; n-gram max|sum-1|={ngram_worst:.1e} over {contexts} contexts (K<=64); \
             k-means inertia increases={increases} over {fits} fits"
        ),
    }
}

fn probe_pair(archive: &FeatureArchive, manifest: &Manifest, alignment: &spknorm::corpus::Alignment) -> (f64, f64) {
    let (train, test) = split_by_speaker(manifest, 5, 0).unwrap();
    let tasks = [ProbeTask::Speaker, ProbeTask::Phone];
    let r = probe_features(archive, manifest, Some(alignment), &tasks, &ProbeConfig::default(), &train, &test).unwrap();
    (r["speaker"].accuracy, r["phone"].accuracy)
}

fn probe_direction() -> Outcome {
    let start = Instant::now();
    let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
    let std = normalize_archive(&corpus.archive, NormMode::Utterance, None).unwrap();
    let (raw_spk, raw_phone) = probe_pair(&corpus.archive, &corpus.manifest, &corpus.alignment);
    let (std_spk, std_phone) = probe_pair(&std, &corpus.manifest, &corpus.alignment);
    let secs = start.elapsed().as_secs_f64();
    let shift = (std_phone - raw_phone).abs();
    Outcome {
        pass: raw_spk >= RAW_SPEAKER_MIN && std_spk <= STD_SPEAKER_MAX && shift <= PHONE_SHIFT_MAX && secs <= PROBE_SECONDS,
        detail: format!(
            "speaker probe raw={raw_spk:.3} std={std_spk:.3}; phone probe raw={raw_phone:.3} std={std_phone:.3} \
             (shift {:.1} pts); {secs:.1}s",
            100.0 * shift
        ),
    }
}

struct UnitRun {
    abx_across: f64,
    n_triples: usize,
    metrics: [f64; 4],
}

fn unit_run(seed: u64, normalize: bool, out: &Path) -> UnitRun {
    let mut c = PipelineConfig::default();
    c.output_dir = out.to_path_buf();
    c.synth.seed = seed;
    c.verify.enabled = false;
    c.probe.enabled = false;
    c.lm.enabled = false;
    c.normalize.enabled = normalize;
    c.kmeans.k = 10;
    c.kmeans.seed = seed;
    c.abx.modes = vec![AbxMode::Across];
    c.abx.on_features = false;
    c.abx.seed = seed;
    let r = run_pipeline(&c).unwrap().report;
    let abx = r.abx.iter().find(|e| e.input == "units").unwrap();
    let m = r.cluster_metrics.unwrap();
    UnitRun {
        abx_across: abx.report.error_rate,
        n_triples: abx.report.n_triples,
        metrics: [m.ari, m.ami, m.homogeneity, m.completeness],
    }
}

fn unit_directions() -> (Outcome, Outcome) {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let runs: Vec<(u64, UnitRun, UnitRun)> = SEEDS
        .iter()
        .map(|&s| (s, unit_run(s, false, &tmp.path().join(format!("raw{s}"))), unit_run(s, true, &tmp.path().join(format!("std{s}")))))
        .collect();
    let secs = start.elapsed().as_secs_f64();

    let abx_wins = runs.iter().filter(|(_, raw, std)| std.abx_across < raw.abx_across).count();
    let min_triples = runs.iter().flat_map(|(_, a, b)| [a.n_triples, b.n_triples]).min().unwrap();
    let abx_detail: Vec<String> =
        runs.iter().map(|(s, raw, std)| format!("s{s}: {:.3}->{:.3}", raw.abx_across, std.abx_across)).collect();
    let t3 = Outcome {
        pass: abx_wins == SEEDS.len() && min_triples >= MIN_TRIPLES && secs <= UNIT_SECONDS,
        detail: format!(
            "K=10 across ABX raw->std {}; std lower {abx_wins}/{}; min triples {min_triples}; {secs:.1}s",
            abx_detail.join(", "),
            SEEDS.len()
        ),
    };

    let names = ["ARI", "AMI", "homogeneity", "completeness"];
    let metric_wins = runs.iter().filter(|(_, raw, std)| (0..4).all(|i| std.metrics[i] > raw.metrics[i])).count();
    let worst: Vec<String> = (0..4)
        .map(|i| {
            let gap = runs.iter().map(|(_, raw, std)| std.metrics[i] - raw.metrics[i]).fold(f64::INFINITY, f64::min);
            format!("{} min gain {gap:+.3}", names[i])
        })
        .collect();
    let t4 = Outcome {
        pass: metric_wins == SEEDS.len(),
        detail: format!("all four metrics higher with standardization in {metric_wins}/{} seeds; {}", SEEDS.len(), worst.join(", ")),
    };
    (t3, t4)
}

fn sanity_bounds() -> Outcome {
    let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
    let items = extract_items(&corpus.alignment, &corpus.manifest).unwrap();
    let phones = corpus.alignment.phone_set();
    let period = corpus.archive.frame_period_us();

    let mut onehot = FeatureArchive::new(phones.len(), period).unwrap();
    let mut gaussian = FeatureArchive::new(16, period).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for utt in corpus.archive.utterances() {
        let labels = corpus.alignment.frame_labels(&utt.id).unwrap();
        let oh = Array2::from_shape_fn((labels.len(), phones.len()), |(t, j)| if phones[j] == labels[t] { 1.0 } else { 0.0 });
        onehot.push(Utterance::new(utt.id.clone(), oh)).unwrap();
        let g = Array2::from_shape_fn((labels.len(), 16), |_| StandardNormal.sample(&mut rng));
        gaussian.push(Utterance::new(utt.id.clone(), g)).unwrap();
    }
    let mut onehot_err: f64 = 0.0;
    let mut gauss = Vec::new();
    for mode in [AbxMode::Within, AbxMode::Across] {
        let cfg = AbxConfig { mode, ..Default::default() };
        onehot_err = onehot_err.max(abx_score(&items, &onehot, &cfg).unwrap().error_rate);
        gauss.push(abx_score(&items, &gaussian, &cfg).unwrap().error_rate);
    }

    // Random labels: i.i.d. frames, speaker ids carry no information.
    let (n_spk, n_utt, t, d) = (50, 105, 5, 8);
    let mut archive = FeatureArchive::new(d, period).unwrap();
    let mut records = Vec::new();
    for s in 0..n_spk {
        for u in 0..n_utt {
            let id = format!("r{s:02}_{u:03}");
            archive.push(Utterance::new(id.clone(), Array2::from_shape_fn((t, d), |_| StandardNormal.sample(&mut rng)))).unwrap();
            records.push(ManifestRecord { utt_id: id, speaker_id: format!("r{s:02}"), gender: Gender::F, num_frames: t });
        }
    }
    let manifest = Manifest::from_records(records).unwrap();
    let eer = verify(&archive, &manifest, 5, 0).unwrap().eer;

    let gauss_ok = gauss.iter().all(|g| (g - 0.5).abs() <= CHANCE_TOL);
    Outcome {
        pass: onehot_err <= ONEHOT_ABX_MAX && gauss_ok && (eer - 0.5).abs() <= CHANCE_TOL,
        detail: format!(
            "one-hot phone ABX max={onehot_err:.4}; gaussian ABX within={:.4} across={:.4}; random-label EER={eer:.4}",
            gauss[0], gauss[1]
        ),
    }
}

fn full_pipeline_and_determinism() -> (Outcome, Outcome) {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let out_dir = tmp.path().join("out");
    let run = |workers: &str| -> (bool, f64, Vec<u8>) {
        let start = Instant::now();
        let status = Command::new(env!("CARGO_BIN_EXE_spknorm"))
            .args(["--workers", workers, "run", "--config"])
            .arg(&config_path)
            .arg("--output-dir")
            .arg(&out_dir)
            .status()
            .expect("binary runs");
        let secs = start.elapsed().as_secs_f64();
        let bytes = fs::read(out_dir.join("report.json")).unwrap_or_default();
        (status.success(), secs, bytes)
    };
    let (ok1, secs1, r1) = run("1");
    let (ok2, _, r2) = run("8");
    let (ok3, _, r3) = run("8");

    let stages: HashSet<String> = fs::read_to_string(out_dir.join("timings.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .map(|v| v["stages"].as_array().unwrap().iter().map(|s| s[0].as_str().unwrap().to_string()).collect())
        .unwrap_or_default();
    let expected = ["verify", "normalize", "feature_rank", "probe", "kmeans", "quantize", "probe_units", "abx", "cluster_metrics", "lm"];
    let missing: Vec<&str> = expected.iter().copied().filter(|s| !stages.contains(*s)).collect();
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap_or_default();
    let lm_ok = !report["lm"]["lexical"].is_null() && !report["lm"]["semantic"].is_null();
    let full = Outcome {
        pass: ok1 && missing.is_empty() && lm_ok && secs1 <= PIPELINE_SECONDS,
        detail: format!("configs/synthetic.toml, {} stages, missing {missing:?}, {secs1:.1}s with 1 worker", stages.len()),
    };
    let det = Outcome {
        pass: ok1 && ok2 && ok3 && !r1.is_empty() && r1 == r2 && r2 == r3,
        detail: format!(
            "report.json {} bytes; workers 1 vs 8 identical={}; repeated run identical={}",
            r1.len(),
            r1 == r2,
            r2 == r3
        ),
    };
    (full, det)
}

fn main() {
    // Honor `cargo test -- --list` and filters from the default harness.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results = Vec::new();
    report("oracle equivalences", oracle_equivalences(), &mut results);
    report("numerical checks", numerical_checks(), &mut results);
    report("probe direction (speaker down, phone kept)", probe_direction(), &mut results);
    let (abx_dir, metric_dir) = unit_directions();
    report("unit ABX direction (across, K=10)", abx_dir, &mut results);
    report("clustering metric direction", metric_dir, &mut results);
    report("sanity bounds", sanity_bounds(), &mut results);
    let (full, det) = full_pipeline_and_determinism();
    report("determinism", det, &mut results);
    report("full synthetic pipeline", full, &mut results);
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
