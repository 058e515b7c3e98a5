//! Softmax-regression and one-hidden-layer ReLU probes trained by
//! mini-batch gradient descent on the cross-entropy loss.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::normalize::STD_EPS;
use crate::rng::{derive_seed, substream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[default]
    Linear,
    Mlp,
}

impl std::str::FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ProbeKind::Linear),
            "mlp" => Ok(ProbeKind::Mlp),
            other => Err(format!("unknown probe kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// Hidden layer width, MLP only.
    pub hidden_units: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub n_runs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Linear,
            hidden_units: 1024,
            epochs: 10,
            batch_size: 256,
            learning_rate: 0.01,
            seed: 0,
            n_runs: 10,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |what: &str| Err(ProbeError::InvalidConfig(format!("{what} must be positive")));
        if self.kind == ProbeKind::Mlp && self.hidden_units == 0 {
            return bad("hidden_units");
        }
        if self.epochs == 0 {
            return bad("epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if self.n_runs == 0 {
            return bad("n_runs");
        }
        Ok(())
    }
}

/// A trained probe. Inputs are standardized with the training-set statistics
/// before the network is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub kind: ProbeKind,
    pub dim: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Linear: `W (C x d)`, `b (C)`. MLP: `W1 (H x d)`, `b1 (H)`, `W2 (C x H)`, `b2 (C)`.
    pub params: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(d).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl Classifier {
    pub fn n_params(kind: ProbeKind, dim: usize, hidden: usize, n_classes: usize) -> usize {
        match kind {
            ProbeKind::Linear => n_classes * dim + n_classes,
            ProbeKind::Mlp => hidden * dim + hidden + n_classes * hidden + n_classes,
        }
    }

    /// Untrained probe with identity input scaling. Linear weights start at
    /// zero; MLP weights are He-initialized from `seed`.
    pub fn init(kind: ProbeKind, dim: usize, hidden: usize, n_classes: usize, seed: u64) -> Self {
        let hidden = if kind == ProbeKind::Mlp { hidden } else { 0 };
        let mut params = vec![0.0; Self::n_params(kind, dim, hidden, n_classes)];
        if kind == ProbeKind::Mlp {
            let mut rng = substream(seed, tag::PROBE, u64::MAX);
            let n1 = Normal::new(0.0, (2.0 / dim as f64).sqrt()).expect("valid std");
            for p in &mut params[..hidden * dim] {
                *p = n1.sample(&mut rng);
            }
            let n2 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).expect("valid std");
            let w2 = hidden * dim + hidden;
            for p in &mut params[w2..w2 + n_classes * hidden] {
                *p = n2.sample(&mut rng);
            }
        }
        Self {
            kind,
            dim,
            n_classes,
            hidden,
            input_mean: vec![0.0; dim],
            input_scale: vec![1.0; dim],
            params,
        }
    }

    fn scaled(&self, frame: &[f32], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = (f64::from(frame[j]) - self.input_mean[j]) * self.input_scale[j];
        }
    }

    /// Class probabilities for one already-scaled input.
    fn forward(&self, params: &[f64], x: &[f64], hidden: &mut [f64], probs: &mut [f64]) {
        let (d, h, c) = (self.dim, self.hidden, self.n_classes);
        match self.kind {
            ProbeKind::Linear => affine(&params[..c * d], &params[c * d..], x, probs),
            ProbeKind::Mlp => {
                affine(&params[..h * d], &params[h * d..h * d + h], x, hidden);
                for v in hidden.iter_mut() {
                    *v = v.max(0.0);
                }
                let w2 = h * d + h;
                affine(&params[w2..w2 + c * h], &params[w2 + c * h..], hidden, probs);
            }
        }
        softmax_in_place(probs);
    }

    /// Mean cross-entropy over `(x, y)` at `params`, and its gradient.
    /// Inputs are the already-scaled feature rows.
    pub fn loss_and_grad<X: AsRef<[f64]>>(&self, params: &[f64], xs: &[X], ys: &[u32]) -> (f64, Vec<f64>) {
        let (d, h, c) = (self.dim, self.hidden, self.n_classes);
        let mut grad = vec![0.0; params.len()];
        let mut hidden = vec![0.0; h];
        let mut probs = vec![0.0; c];
        let mut dh = vec![0.0; h];
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let x = x.as_ref();
            self.forward(params, x, &mut hidden, &mut probs);
            loss -= probs[y as usize].max(f64::MIN_POSITIVE).ln();
            // dL/dlogits = p - onehot(y)
            probs[y as usize] -= 1.0;
            match self.kind {
                ProbeKind::Linear => {
                    for k in 0..c {
                        let g = probs[k];
                        for (gw, xv) in grad[k * d..(k + 1) * d].iter_mut().zip(x) {
                            *gw += g * xv;
                        }
                        grad[c * d + k] += g;
                    }
                }
                ProbeKind::Mlp => {
                    let w2 = h * d + h;
                    dh.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        let g = probs[k];
                        let row = w2 + k * h;
                        for j in 0..h {
                            grad[row + j] += g * hidden[j];
                            dh[j] += g * params[row + j];
                        }
                        grad[w2 + c * h + k] += g;
                    }
                    for j in 0..h {
                        if hidden[j] <= 0.0 {
                            continue;
                        }
                        let g = dh[j];
                        for (gw, xv) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *gw += g * xv;
                        }
                        grad[h * d + j] += g;
                    }
                }
            }
        }
        let inv = 1.0 / xs.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        (loss * inv, grad)
    }

    pub fn predict_one(&self, frame: &[f32]) -> u32 {
        let mut x = vec![0.0; self.dim];
        let mut hidden = vec![0.0; self.hidden];
        let mut probs = vec![0.0; self.n_classes];
        self.scaled(frame, &mut x);
        self.forward(&self.params, &x, &mut hidden, &mut probs);
        let mut best = 0;
        for (k, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = k;
            }
        }
        best as u32
    }

    pub fn predict(&self, frames: ArrayView2<'_, f32>) -> Vec<u32> {
        let rows: Vec<_> = frames.rows().into_iter().collect();
        rows.par_iter()
            .map(|r| match r.as_slice() {
                Some(s) => self.predict_one(s),
                None => self.predict_one(&r.to_vec()),
            })
            .collect()
    }
}

fn check_inputs(frames: ArrayView2<'_, f32>, labels: &[u32], n_classes: usize) -> Result<(), ProbeError> {
    if frames.nrows() != labels.len() {
        return Err(ProbeError::LengthMismatch { frames: frames.nrows(), labels: labels.len() });
    }
    if frames.nrows() == 0 {
        return Err(ProbeError::Empty);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(ProbeError::LabelOutOfRange { label: bad, n_classes });
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite);
    }
    Ok(())
}

/// Trains one probe; `run` selects the seeded substream for initialization
/// and batch order.
pub fn train_probe_run(
    frames: ArrayView2<'_, f32>,
    labels: &[u32],
    n_classes: usize,
    config: &ProbeConfig,
    run: u64,
) -> Result<Classifier, ProbeError> {
    config.validate()?;
    check_inputs(frames, labels, n_classes)?;
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(ProbeError::SingleClass);
    }
    let (n, d) = frames.dim();
    let run_seed = derive_seed(config.seed, tag::PROBE, run);
    let mut clf = Classifier::init(config.kind, d, config.hidden_units, n_classes, run_seed);

    // Global input standardization.
    let mut mean = vec![0.0; d];
    for row in frames.rows() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in frames.rows() {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row.iter()) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    clf.input_scale = var.iter().map(|s| 1.0 / (s / n as f64).sqrt().max(STD_EPS)).collect();
    clf.input_mean = mean;

    let xs: Vec<Vec<f64>> = frames
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().map(|(j, &v)| (f64::from(v) - clf.input_mean[j]) * clf.input_scale[j]).collect())
        .collect();

    let mut rng = substream(run_seed, tag::PROBE, 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut params = std::mem::take(&mut clf.params);
    let mut bx: Vec<&[f64]> = Vec::with_capacity(config.batch_size);
    let mut by: Vec<u32> = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            bx.clear();
            by.clear();
            for &i in batch {
                bx.push(&xs[i]);
                by.push(labels[i]);
            }
            let (_, grad) = clf.loss_and_grad(&params, &bx, &by);
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
        }
    }
    clf.params = params;
    Ok(clf)
}

pub fn train_probe(
    frames: ArrayView2<'_, f32>,
    labels: &[u32],
    n_classes: usize,
    config: &ProbeConfig,
) -> Result<Classifier, ProbeError> {
    train_probe_run(frames, labels, n_classes, config, 0)
}

/// Top-1 accuracy.
pub fn evaluate_probe(clf: &Classifier, frames: ArrayView2<'_, f32>, labels: &[u32]) -> Result<f64, ProbeError> {
    if frames.ncols() != clf.dim {
        return Err(ProbeError::DimMismatch { expected: clf.dim, found: frames.ncols() });
    }
    check_inputs(frames, labels, usize::MAX)?;
    let pred = clf.predict(frames);
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}
