//! Diagonal-covariance Gaussian mixtures, EM training and the maximum
//! likelihood dialect classifier.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialectLabel, DialectPair};
use crate::error::{Error, Result};
use crate::featext::FrameView;

const FORMAT_TAG: &str = "dialect-id/gmm";
const FORMAT_VERSION: u32 = 1;
const WEIGHT_TOLERANCE: f64 = 1e-10;
/// Frames per E-step partition. Fixed so that merge order, and therefore the
/// floating point result, does not depend on the thread count.
const CHUNK_FRAMES: usize = 4096;
/// Default mean perturbation for splitting, in standard deviations.
pub const SPLIT_EPSILON: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmFile", into = "GmmFile")]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    dim: usize,
    label: String,
    /// `log w_i - 0.5 * (D log 2pi + sum_d log var_id)`
    log_consts: Vec<f64>,
    inv_vars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GmmFile {
    format: String,
    version: u32,
    label: String,
    num_components: usize,
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl From<GmmModel> for GmmFile {
    fn from(m: GmmModel) -> Self {
        GmmFile {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            num_components: m.num_components(),
            dim: m.dim,
            means: m.means.chunks(m.dim).map(<[f64]>::to_vec).collect(),
            variances: m.variances.chunks(m.dim).map(<[f64]>::to_vec).collect(),
            weights: m.weights,
            label: m.label,
        }
    }
}

impl TryFrom<GmmFile> for GmmModel {
    type Error = Error;

    fn try_from(f: GmmFile) -> Result<Self> {
        if f.format != FORMAT_TAG || f.version != FORMAT_VERSION {
            return Err(Error::InvalidModel(format!(
                "expected {FORMAT_TAG} version {FORMAT_VERSION}, found {} version {}",
                f.format, f.version
            )));
        }
        if f.weights.len() != f.num_components
            || f.means.len() != f.num_components
            || f.variances.len() != f.num_components
            || f.means.iter().chain(&f.variances).any(|r| r.len() != f.dim)
        {
            return Err(Error::InvalidModel(format!(
                "GMM `{}` arrays do not match M={} D={}",
                f.label, f.num_components, f.dim
            )));
        }
        GmmModel::new(f.weights, f.means.concat(), f.variances.concat(), f.dim, f.label)
            .map_err(|e| Error::InvalidModel(e.to_string()))
    }
}

impl GmmModel {
    /// Builds a model from row-major `M x D` means and variances.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, dim: usize, label: impl Into<String>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || dim == 0 {
            return Err(Error::EmptyInput("mixture components"));
        }
        if means.len() != m * dim || variances.len() != m * dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{m}x{dim}"),
                found: format!("{} means, {} variances", means.len(), variances.len()),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidModel("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidModel(format!("weights sum to {total}, not 1")));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GMM mean".into()));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidModel("variances must be finite and positive".into()));
        }
        let mut model = GmmModel {
            weights,
            means,
            variances,
            dim,
            label: label.into(),
            log_consts: Vec::new(),
            inv_vars: Vec::new(),
        };
        model.refresh_cache();
        Ok(model)
    }

    /// One Gaussian with the sample mean and (floored) sample variance.
    pub fn single_gaussian(frames: FrameView<'_>, floor: &[f64], label: impl Into<String>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("frames"));
        }
        let d = frames.dim();
        check_floor(floor, d)?;
        let (mean, var) = mean_and_variance(frames);
        let var = var.iter().zip(floor).map(|(v, f)| v.max(*f)).collect();
        GmmModel::new(vec![1.0], mean, var, d, label)
    }

    fn refresh_cache(&mut self) {
        let d = self.dim;
        self.inv_vars = self.variances.iter().map(|v| 1.0 / v).collect();
        self.log_consts = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let log_det: f64 = self.variances[i * d..(i + 1) * d].iter().map(|v| v.ln()).sum();
                w.ln() - 0.5 * (d as f64 * (2.0 * PI).ln() + log_det)
            })
            .collect();
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    pub fn variance(&self, i: usize) -> &[f64] {
        &self.variances[i * self.dim..(i + 1) * self.dim]
    }

    /// `log w_i + log g(x; mu_i, Sigma_i)`
    fn component_log(&self, i: usize, x: &[f64]) -> f64 {
        let d = self.dim;
        let mu = &self.means[i * d..(i + 1) * d];
        let iv = &self.inv_vars[i * d..(i + 1) * d];
        let mut q = 0.0;
        for k in 0..d {
            let z = x[k] - mu[k];
            q += z * z * iv[k];
        }
        self.log_consts[i] - 0.5 * q
    }

    pub fn log_density(&self, frame: &[f64]) -> Result<f64> {
        if frame.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: frame.len(),
            });
        }
        Ok(self.log_density_unchecked(frame))
    }

    /// Log-sum-exp over components in a single pass.
    pub(crate) fn log_density_unchecked(&self, frame: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for i in 0..self.weights.len() {
            let l = self.component_log(i, frame);
            if l == f64::NEG_INFINITY {
                continue;
            }
            if l > max {
                sum = sum * (max - l).exp() + 1.0;
                max = l;
            } else {
                sum += (l - max).exp();
            }
        }
        max + sum.ln()
    }

    /// Sum of frame log densities.
    pub fn utterance_loglik(&self, feat: FrameView<'_>) -> Result<f64> {
        if feat.is_empty() {
            return Err(Error::EmptyInput("feature matrix"));
        }
        if feat.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: feat.dim(),
            });
        }
        Ok(feat.iter_rows().map(|x| self.log_density_unchecked(x)).sum())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("GMM serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidModel(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::InvalidModel(format!("{}: {e}", path.display())))
    }
}

fn check_floor(floor: &[f64], dim: usize) -> Result<()> {
    if floor.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: floor.len(),
        });
    }
    if floor.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::InvalidConfig("variance floor must be positive".into()));
    }
    Ok(())
}

fn mean_and_variance(frames: FrameView<'_>) -> (Vec<f64>, Vec<f64>) {
    let d = frames.dim();
    let n = frames.rows() as f64;
    let mut mean = vec![0.0; d];
    for x in frames.iter_rows() {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for x in frames.iter_rows() {
        for k in 0..d {
            let z = x[k] - mean[k];
            var[k] += z * z;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Per-dimension variance floor: `scale` times the global variance of the
/// data, never below 1e-10.
pub fn variance_floor(frames: FrameView<'_>, scale: f64) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("frames"));
    }
    let (_, var) = mean_and_variance(frames);
    Ok(var.iter().map(|v| (v * scale).max(1e-10)).collect())
}

/// EM sufficient statistics for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmAccumulator {
    dim: usize,
    occupancy: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    loglik: f64,
    frames: usize,
}

impl GmmAccumulator {
    pub fn new(model: &GmmModel) -> Self {
        let m = model.num_components();
        let d = model.dim();
        GmmAccumulator {
            dim: d,
            occupancy: vec![0.0; m],
            sum: vec![0.0; m * d],
            sum_sq: vec![0.0; m * d],
            loglik: 0.0,
            frames: 0,
        }
    }

    /// Adds one frame with soft component posteriors; returns its log density.
    pub fn add_frame(&mut self, model: &GmmModel, x: &[f64]) -> f64 {
        let m = model.num_components();
        let d = self.dim;
        let mut post = [0.0f64; 32];
        let mut heap;
        let post: &mut [f64] = if m <= post.len() {
            &mut post[..m]
        } else {
            heap = vec![0.0; m];
            &mut heap
        };
        let mut max = f64::NEG_INFINITY;
        for (i, p) in post.iter_mut().enumerate() {
            *p = model.component_log(i, x);
            max = max.max(*p);
        }
        let mut total = 0.0;
        for p in post.iter_mut() {
            *p = (*p - max).exp();
            total += *p;
        }
        let ll = max + total.ln();
        for (i, p) in post.iter().enumerate() {
            let g = p / total;
            if g == 0.0 {
                continue;
            }
            self.occupancy[i] += g;
            let s = &mut self.sum[i * d..(i + 1) * d];
            let q = &mut self.sum_sq[i * d..(i + 1) * d];
            for k in 0..d {
                s[k] += g * x[k];
                q[k] += g * x[k] * x[k];
            }
        }
        self.loglik += ll;
        self.frames += 1;
        ll
    }

    pub fn merge(&mut self, other: &GmmAccumulator) {
        for (a, b) in self.occupancy.iter_mut().zip(&other.occupancy) {
            *a += b;
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.loglik += other.loglik;
        self.frames += other.frames;
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// M-step. Components with no occupancy keep their parameters with weight 0;
    /// an accumulator with no frames returns the model unchanged.
    pub fn finalize(&self, model: &GmmModel, floor: &[f64]) -> Result<GmmModel> {
        check_floor(floor, self.dim)?;
        let total: f64 = self.occupancy.iter().sum();
        if self.frames == 0 || total <= 0.0 {
            return Ok(model.clone());
        }
        let d = self.dim;
        let m = self.occupancy.len();
        let mut weights = Vec::with_capacity(m);
        let mut means = Vec::with_capacity(m * d);
        let mut vars = Vec::with_capacity(m * d);
        for i in 0..m {
            let occ = self.occupancy[i];
            if occ <= 0.0 {
                weights.push(0.0);
                means.extend_from_slice(model.mean(i));
                vars.extend(model.variance(i).iter().zip(floor).map(|(v, f)| v.max(*f)));
                continue;
            }
            weights.push(occ / total);
            for k in 0..d {
                let mu = self.sum[i * d + k] / occ;
                let var = self.sum_sq[i * d + k] / occ - mu * mu;
                means.push(mu);
                vars.push(var.max(floor[k]));
            }
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
        GmmModel::new(weights, means, vars, d, model.label.clone())
    }
}

/// Accumulates statistics over all frames in fixed-size chunks, merged in
/// chunk order.
pub fn accumulate(model: &GmmModel, frames: FrameView<'_>) -> GmmAccumulator {
    let n = frames.rows();
    let chunks: Vec<GmmAccumulator> = (0..n.div_ceil(CHUNK_FRAMES))
        .into_par_iter()
        .map(|c| {
            let mut acc = GmmAccumulator::new(model);
            let end = ((c + 1) * CHUNK_FRAMES).min(n);
            for x in frames.slice(c * CHUNK_FRAMES..end).iter_rows() {
                acc.add_frame(model, x);
            }
            acc
        })
        .collect();
    let mut total = GmmAccumulator::new(model);
    for c in &chunks {
        total.merge(c);
    }
    total
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GmmModel,
    /// Total data log-likelihood under the model entering each iteration,
    /// followed by the value under the returned model.
    pub trace: Vec<f64>,
}

/// Runs EM until the gain in average per-frame log-likelihood drops below
/// `tol` or `max_iters` iterations have run.
pub fn em_fit(init: &GmmModel, frames: FrameView<'_>, max_iters: usize, tol: f64, floor: &[f64]) -> Result<EmFit> {
    if frames.dim() != init.dim() {
        return Err(Error::DimensionMismatch {
            expected: init.dim(),
            found: frames.dim(),
        });
    }
    if frames.rows() < init.num_components() {
        return Err(Error::TooFewFrames {
            components: init.num_components(),
            frames: frames.rows(),
        });
    }
    check_floor(floor, init.dim())?;
    let n = frames.rows() as f64;
    let mut model = init.clone();
    let mut trace = Vec::with_capacity(max_iters + 1);
    for _ in 0..max_iters {
        let acc = accumulate(&model, frames);
        if !acc.loglik().is_finite() {
            return Err(Error::NonFinite(format!("EM log-likelihood for `{}`", model.label)));
        }
        trace.push(acc.loglik());
        model = acc.finalize(&model, floor)?;
        if trace.len() >= 2 {
            let k = trace.len();
            if (trace[k - 1] - trace[k - 2]) / n < tol {
                break;
            }
        }
    }
    let last = accumulate(&model, frames).loglik();
    if !last.is_finite() {
        return Err(Error::NonFinite(format!("EM log-likelihood for `{}`", model.label)));
    }
    trace.push(last);
    Ok(EmFit { model, trace })
}

fn split_component(model: &GmmModel, i: usize, eps: f64, out: &mut (Vec<f64>, Vec<f64>, Vec<f64>)) {
    let mu = model.mean(i);
    let var = model.variance(i);
    let w = model.weights[i] / 2.0;
    for sign in [1.0, -1.0] {
        out.0.push(w);
        out.1.extend(mu.iter().zip(var).map(|(m, v)| m + sign * eps * v.sqrt()));
        out.2.extend_from_slice(var);
    }
}

/// Doubles the component count: each component becomes two with means at
/// `mu +/- eps * sigma`, the original variance and half the weight.
pub fn split_mixtures(model: &GmmModel, eps: f64) -> GmmModel {
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..model.num_components() {
        split_component(model, i, eps, &mut out);
    }
    GmmModel::new(out.0, out.1, out.2, model.dim, model.label.clone()).expect("split preserves invariants")
}

/// Splits the heaviest components until the model has `target` components
/// (ties go to the lower index). A model already at or above `target` is
/// returned unchanged.
pub fn grow_mixtures(model: &GmmModel, target: usize, eps: f64) -> GmmModel {
    let mut current = model.clone();
    while current.num_components() < target {
        let m = current.num_components();
        let n_split = (target - m).min(m);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| current.weights[b].total_cmp(&current.weights[a]).then(a.cmp(&b)));
        let chosen: std::collections::BTreeSet<usize> = order[..n_split].iter().copied().collect();
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..m {
            if chosen.contains(&i) {
                split_component(&current, i, eps, &mut out);
            } else {
                out.0.push(current.weights[i]);
                out.1.extend_from_slice(current.mean(i));
                out.2.extend_from_slice(current.variance(i));
            }
        }
        current = GmmModel::new(out.0, out.1, out.2, current.dim, current.label.clone())
            .expect("split preserves invariants");
    }
    current
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmTrainConfig {
    pub num_components: usize,
    pub iters_per_stage: usize,
    pub tol: f64,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub floor_scale: f64,
}

impl Default for GmmTrainConfig {
    fn default() -> Self {
        GmmTrainConfig {
            num_components: 128,
            iters_per_stage: 8,
            tol: 1e-4,
            floor_scale: 1e-3,
        }
    }
}

/// Trains by binary splitting from a single Gaussian, running EM after
/// every split.
pub fn train_gmm(frames: FrameView<'_>, cfg: &GmmTrainConfig, label: &str) -> Result<GmmModel> {
    if cfg.num_components == 0 {
        return Err(Error::InvalidConfig("num_components must be positive".into()));
    }
    if frames.rows() < cfg.num_components {
        return Err(Error::TooFewFrames {
            components: cfg.num_components,
            frames: frames.rows(),
        });
    }
    let floor = variance_floor(frames, cfg.floor_scale)?;
    let mut model = GmmModel::single_gaussian(frames, &floor, label)?;
    loop {
        model = em_fit(&model, frames, cfg.iters_per_stage, cfg.tol, &floor)?.model;
        if model.num_components() >= cfg.num_components {
            return Ok(model);
        }
        let next = (model.num_components() * 2).min(cfg.num_components);
        model = grow_mixtures(&model, next, SPLIT_EPSILON);
    }
}

/// Maximum likelihood decision between the two dialect models; ties go to LT.
pub fn classify_gmm(models: &DialectPair<GmmModel>, feat: FrameView<'_>) -> Result<(DialectLabel, DialectPair<f64>)> {
    let scores = models.try_map(|_, m| m.utterance_loglik(feat))?;
    Ok((argmax_lt_ties(&scores), scores))
}

/// `Ct` only if its score is strictly higher.
pub fn argmax_lt_ties(scores: &DialectPair<f64>) -> DialectLabel {
    if scores.ct > scores.lt {
        DialectLabel::Ct
    } else {
        DialectLabel::Lt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featext::FeatureMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_model(m: usize, d: usize, rng: &mut ChaCha8Rng) -> GmmModel {
        let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let means = (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let vars = (0..m * d).map(|_| rng.random_range(0.3..2.0)).collect();
        GmmModel::new(w, means, vars, d, "r").unwrap()
    }

    /// Linear-domain density written out component by component.
    fn brute_density(m: &GmmModel, x: &[f64]) -> f64 {
        (0..m.num_components())
            .map(|i| {
                let mut g = m.weights()[i];
                for k in 0..m.dim() {
                    let v = m.variance(i)[k];
                    let z = x[k] - m.mean(i)[k];
                    g *= (-z * z / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
                }
                g
            })
            .sum()
    }

    fn sample_frames(rng: &mut ChaCha8Rng, centers: &[(f64, f64)], n_each: usize) -> FeatureMatrix {
        let mut data = Vec::new();
        for &(cx, cy) in centers {
            let nx = Normal::new(cx, 0.3).unwrap();
            let ny = Normal::new(cy, 0.3).unwrap();
            for _ in 0..n_each {
                data.push(nx.sample(rng));
                data.push(ny.sample(rng));
            }
        }
        FeatureMatrix::new(data, 2, 0.01, "s").unwrap()
    }

    #[test]
    fn standard_normal_at_origin() {
        let m = GmmModel::new(vec![1.0], vec![0.0, 0.0], vec![1.0, 1.0], 2, "n").unwrap();
        let ld = m.log_density(&[0.0, 0.0]).unwrap();
        assert!((ld + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((ld + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn log_density_matches_linear_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = random_model(2, 3, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let want = brute_density(&m, &x).ln();
            assert!((m.log_density(&x).unwrap() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn far_frame_is_finite() {
        let m = GmmModel::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 1.0], 1, "f").unwrap();
        let ld = m.log_density(&[100.0]).unwrap();
        assert!(ld.is_finite());
        // The nearer component dominates: log(0.5) + log N(100; 1, 1).
        let near = 0.5f64.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * 99.0 * 99.0;
        assert!((ld - near).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let m = GmmModel::new(vec![1.0], vec![0.0], vec![1.0], 1, "x").unwrap();
        assert!(matches!(m.log_density(&[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn utterance_loglik_sums_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(3, 4, &mut rng);
        let data: Vec<f64> = (0..50 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = FeatureMatrix::new(data, 4, 0.01, "u").unwrap();
        let mut oracle = 0.0;
        for t in 0..50 {
            oracle += brute_density(&m, f.row(t)).ln();
        }
        let total = m.utterance_loglik(f.view()).unwrap();
        assert!((total - oracle).abs() < 1e-9);
        let a = m.utterance_loglik(f.slice(0..20)).unwrap();
        let b = m.utterance_loglik(f.slice(20..50)).unwrap();
        assert!((total - a - b).abs() < 1e-9);
        let one = m.utterance_loglik(f.slice(3..4)).unwrap();
        assert_eq!(one, m.log_density(f.row(3)).unwrap());
    }

    #[test]
    fn single_component_em_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = sample_frames(&mut rng, &[(1.0, -1.0)], 200);
        let floor = vec![0.5, 1e-6];
        let init = GmmModel::new(vec![1.0], vec![0.0, 0.0], vec![1.0, 1.0], 2, "one").unwrap();
        let fit = em_fit(&init, f.view(), 1, 0.0, &floor).unwrap();
        let (mean, var) = mean_and_variance(f.view());
        for k in 0..2 {
            assert!((fit.model.mean(0)[k] - mean[k]).abs() < 1e-12);
            assert!((fit.model.variance(0)[k] - var[k].max(floor[k])).abs() < 1e-9);
        }
        assert_eq!(fit.model.variance(0)[0], 0.5);
    }

    #[test]
    fn recovers_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = sample_frames(&mut rng, &[(-3.0, 0.0), (3.0, 2.0)], 500);
        let floor = variance_floor(f.view(), 1e-3).unwrap();
        let init = split_mixtures(&GmmModel::single_gaussian(f.view(), &floor, "c").unwrap(), SPLIT_EPSILON);
        let fit = em_fit(&init, f.view(), 50, 1e-9, &floor).unwrap();
        let mut means: Vec<Vec<f64>> = (0..2).map(|i| fit.model.mean(i).to_vec()).collect();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((means[0][0] + 3.0).abs() < 0.05 && means[0][1].abs() < 0.05);
        assert!((means[1][0] - 3.0).abs() < 0.05 && (means[1][1] - 2.0).abs() < 0.05);
    }

    #[test]
    fn em_trace_is_monotone() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let f = sample_frames(&mut rng, &[(0.0, 0.0), (1.0, 1.5), (-2.0, 1.0)], 60);
            let floor = variance_floor(f.view(), 1e-3).unwrap();
            let init = random_model(4, 2, &mut rng);
            let fit = em_fit(&init, f.view(), 20, f64::NEG_INFINITY, &floor).unwrap();
            assert_eq!(fit.trace.len(), 21);
            for w in fit.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {} -> {}", w[0], w[1]);
            }
            let wsum: f64 = fit.model.weights().iter().sum();
            assert!((wsum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn too_few_frames() {
        let f = FeatureMatrix::new(vec![0.0, 1.0], 1, 0.01, "t").unwrap();
        let init = GmmModel::new(vec![0.25, 0.25, 0.5], vec![0.0; 3], vec![1.0; 3], 1, "x").unwrap();
        assert!(matches!(
            em_fit(&init, f.view(), 5, 0.0, &[1e-3]),
            Err(Error::TooFewFrames { .. })
        ));
    }

    #[test]
    fn split_one_component() {
        let m = GmmModel::new(vec![1.0], vec![0.0], vec![4.0], 1, "s").unwrap();
        let s = split_mixtures(&m, 0.2);
        assert_eq!(s.weights(), &[0.5, 0.5]);
        assert_eq!(s.mean(0), &[0.4]);
        assert_eq!(s.mean(1), &[-0.4]);
    }

    #[test]
    fn split_density_close_to_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(3, 2, &mut rng);
        let s = split_mixtures(&m, 0.2);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = m.log_density(&x).unwrap();
            let b = s.log_density(&x).unwrap();
            assert!(((b - a) / a).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn repeated_splits_reach_128() {
        let mut m = GmmModel::new(vec![1.0], vec![0.0; 39], vec![1.0; 39], 39, "big").unwrap();
        for _ in 0..7 {
            m = split_mixtures(&m, SPLIT_EPSILON);
        }
        assert_eq!(m.num_components(), 128);
        let g = grow_mixtures(&GmmModel::new(vec![1.0], vec![0.0], vec![1.0], 1, "g").unwrap(), 12, 0.2);
        assert_eq!(g.num_components(), 12);
        assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_models_tie_to_lt() {
        let m = GmmModel::new(vec![1.0], vec![0.0], vec![1.0], 1, "m").unwrap();
        let f = FeatureMatrix::new(vec![0.3, -0.2], 1, 0.01, "x").unwrap();
        let (label, scores) = classify_gmm(&DialectPair::new(m.clone(), m), f.view()).unwrap();
        assert_eq!(label, DialectLabel::Lt);
        assert_eq!(scores.lt, scores.ct);
    }

    #[test]
    fn shifted_scores_keep_argmax() {
        let s = DialectPair::new(-10.0, -9.0);
        let shifted = s.map(|_, v| v + 1234.5);
        assert_eq!(argmax_lt_ties(&s), argmax_lt_ties(&shifted));
        assert_eq!(argmax_lt_ties(&s), DialectLabel::Ct);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_model(4, 3, &mut rng);
        assert_eq!(GmmModel::from_json(&m.to_json()).unwrap(), m);
        let broken = m.to_json().replace("\"version\": 1", "\"version\": 9");
        assert!(GmmModel::from_json(&broken).is_err());
        assert!(GmmModel::new(vec![0.6, 0.6], vec![0.0; 2], vec![1.0; 2], 1, "w").is_err());
        assert!(GmmModel::new(vec![1.0], vec![0.0], vec![0.0], 1, "v").is_err());
    }

    proptest::proptest! {
        #[test]
        fn training_keeps_invariants(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = sample_frames(&mut rng, &[(0.0, 0.0), (2.0, -1.0)], 40);
            let cfg = GmmTrainConfig { num_components: 4, iters_per_stage: 3, ..Default::default() };
            let m = train_gmm(f.view(), &cfg, "p").unwrap();
            let floor = variance_floor(f.view(), cfg.floor_scale).unwrap();
            proptest::prop_assert_eq!(m.num_components(), 4);
            proptest::prop_assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for i in 0..4 {
                for k in 0..2 {
                    proptest::prop_assert!(m.variance(i)[k] >= floor[k]);
                }
            }
        }
    }
}
