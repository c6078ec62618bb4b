//! Removal metrics. Reference-free: Fréchet distance and linear-classifier
//! inseparability between class-wise removal outputs and target-free images.
//! Full-reference: PSNR, SSIM and a feature-space distance against paired
//! object-free ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{class_mask, class_pixel_count, mask_coverage, Image, Mask, SceneSample};
use crate::error::{Error, Result};
use crate::losses::two_stage_mean_values;
use crate::manifest::DatasetManifest;
use crate::nets::{Embedder, FeatureNet, Generator};
use crate::rng::{rng_for, stream};
use crate::training::{remove_objects_batch, stack_images, Checkpoint};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Eigenvalues below this (relative to the largest) count as zero in matrix
/// square roots.
pub const EIGEN_TOLERANCE: f64 = 1e-10;
pub const SVM_C: f64 = 1.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Maps image batches to fixed-length feature vectors.
pub trait FeatureExtractor {
    fn id(&self) -> String;

    /// Stable hash of everything that determines the features.
    fn config_hash(&self) -> String;

    fn dim(&self) -> usize;

    /// `[N, 3, H, W]` batch → `N` rows.
    fn extract(&self, images: &decouple_tensor::Tensor) -> Vec<Vec<f64>>;
}

impl FeatureExtractor for Embedder {
    fn id(&self) -> String {
        format!("conv-embedder-{}", self.dim())
    }

    fn config_hash(&self) -> String {
        short_hash(&[self.params.checksum().as_bytes()])
    }

    fn dim(&self) -> usize {
        Embedder::dim(self)
    }

    fn extract(&self, images: &decouple_tensor::Tensor) -> Vec<Vec<f64>> {
        self.embed(images)
    }
}

fn short_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Rows of extractor activations, one per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub matrix: DMatrix<f64>,
    pub extractor: String,
    pub config_hash: String,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>], extractor: impl Into<String>, config_hash: impl Into<String>) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or_else(|| Error::EmptySelection("no feature rows".into()))?;
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows of unequal length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature".into()));
        }
        Ok(Self {
            matrix: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
            extractor: extractor.into(),
            config_hash: config_hash.into(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Sample mean and unbiased covariance.
    pub fn statistics(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.n_samples();
        if n < 2 {
            return Err(Error::InvalidValue(format!("Fréchet statistics need at least 2 samples, got {n}")));
        }
        let mean = self.matrix.row_mean().transpose();
        let mut centred = self.matrix.clone();
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature statistics".into()));
        }
        Ok((mean, cov))
    }
}

pub fn extract_features(extractor: &dyn FeatureExtractor, images: &[Image]) -> Result<FeatureSet> {
    if images.is_empty() {
        return Err(Error::EmptySelection("no images to embed".into()));
    }
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        rows.extend(extractor.extract(&stack_images(chunk)));
    }
    FeatureSet::from_rows(&rows, extractor.id(), extractor.config_hash())
}

fn check_same_dim(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dimensions {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Symmetric positive semidefinite square root with small or negative
/// eigenvalues clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let floor = EIGEN_TOLERANCE * eig.eigenvalues.amax().max(1.0);
    let roots = eig.eigenvalues.map(|l| if l > floor { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `Tr((A·B)^½)` for covariance matrices, via `(√A·B·√A)^½`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sqrt_psd(a);
    let inner = &ra * b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let floor = EIGEN_TOLERANCE * eig.eigenvalues.amax().max(1.0);
    eig.eigenvalues.iter().map(|&l| if l > floor { l.sqrt() } else { 0.0 }).sum()
}

/// Fréchet distance between Gaussians given by mean and covariance.
pub fn frechet_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let diff = (mu_a - mu_b).norm_squared();
    // The product's square root is evaluated from both sides and averaged so
    // the result does not depend on argument order.
    let cross = 0.5 * (trace_sqrt_product(cov_a, cov_b) + trace_sqrt_product(cov_b, cov_a));
    (diff + (cov_a.trace() + cov_b.trace()) - 2.0 * cross).max(0.0)
}

pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_same_dim(a, b)?;
    let (ma, ca) = a.statistics()?;
    let (mb, cb) = b.statistics()?;
    let d = frechet_from_stats(&ma, &ca, &mb, &cb);
    if !d.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(d)
}

/// Soft-margin linear classifier (hinge loss) trained by dual coordinate
/// descent. Rows carry a trailing constant 1 for the bias.
struct LinearSvm {
    w: Vec<f64>,
}

impl LinearSvm {
    const MAX_EPOCHS: usize = 1000;
    const TOLERANCE: f64 = 1e-3;

    fn fit(x: &[Vec<f64>], y: &[f64], c: f64, seed: u64) -> Self {
        let d = x[0].len();
        let mut w = vec![0.0; d];
        let mut alpha = vec![0.0; x.len()];
        let q: Vec<f64> = x.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
        let mut order: Vec<usize> = (0..x.len()).collect();
        let mut rng = rng_for(seed, stream::UIDS);
        for _ in 0..Self::MAX_EPOCHS {
            order.shuffle(&mut rng);
            let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
            for &i in &order {
                if q[i] == 0.0 {
                    continue;
                }
                let margin: f64 = x[i].iter().zip(&w).map(|(a, b)| a * b).sum();
                let grad = y[i] * margin - 1.0;
                let pg = if alpha[i] == 0.0 {
                    grad.min(0.0)
                } else if alpha[i] == c {
                    grad.max(0.0)
                } else {
                    grad
                };
                pg_max = pg_max.max(pg);
                pg_min = pg_min.min(pg);
                if pg != 0.0 {
                    let old = alpha[i];
                    alpha[i] = (old - grad / q[i]).clamp(0.0, c);
                    let step = (alpha[i] - old) * y[i];
                    w.iter_mut().zip(&x[i]).for_each(|(wv, xv)| *wv += step * xv);
                }
            }
            if pg_max - pg_min < Self::TOLERANCE {
                break;
            }
        }
        Self { w }
    }

    fn decision(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.w).map(|(a, b)| a * b).sum()
    }
}

fn set_order(a: &FeatureSet, b: &FeatureSet) -> std::cmp::Ordering {
    a.n_samples()
        .cmp(&b.n_samples())
        .then_with(|| {
            a.matrix
                .iter()
                .zip(b.matrix.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// Inseparability of two feature sets: a linear classifier is fit to tell
/// them apart on standardised features and the mean of the two per-set
/// training error rates is returned. About 0.5 for identical distributions,
/// 0 for linearly separable ones.
pub fn u_ids(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_same_dim(a, b)?;
    if a.n_samples() == 0 || b.n_samples() == 0 {
        return Err(Error::EmptySelection("inseparability needs samples from both sets".into()));
    }
    // Fixed processing order keeps the result symmetric in its arguments.
    let (a, b) = if set_order(a, b).is_gt() { (b, a) } else { (a, b) };
    let d = a.dim();
    let n = a.n_samples() + b.n_samples();
    let all = || a.matrix.row_iter().chain(b.matrix.row_iter());
    let mut mean = vec![0.0; d];
    for row in all() {
        mean.iter_mut().zip(row.iter()).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut std = vec![0.0; d];
    for row in all() {
        std.iter_mut()
            .zip(row.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m).powi(2) / n as f64);
    }
    let std: Vec<f64> = std.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    let x: Vec<Vec<f64>> = all()
        .map(|row| {
            row.iter()
                .zip(mean.iter().zip(&std))
                .map(|(v, (m, s))| (v - m) / s)
                .chain(std::iter::once(1.0))
                .collect()
        })
        .collect();
    let y: Vec<f64> = (0..n).map(|i| if i < a.n_samples() { 1.0 } else { -1.0 }).collect();
    let svm = LinearSvm::fit(&x, &y, SVM_C, 0);
    let wrong = |range: std::ops::Range<usize>| {
        let len = range.len() as f64;
        range.filter(|&i| y[i] * svm.decision(&x[i]) <= 0.0).count() as f64 / len
    };
    Ok(0.5 * (wrong(0..a.n_samples()) + wrong(a.n_samples()..n)))
}

/// Fails unless every comparison sample is free of `target_class` pixels.
pub fn check_comparison_purity(comparison: &[SceneSample], target_class: u16) -> Result<()> {
    for s in comparison {
        let count = class_pixel_count(&s.seg, target_class);
        if count > 0 {
            return Err(Error::PurityViolation(format!(
                "{} has {count} pixels of class {target_class}",
                s.id
            )));
        }
    }
    Ok(())
}

/// Removes every target instance of each sample at once.
pub fn class_wise_removal(generator: &Generator, samples: &[SceneSample], target_class: u16, batch: usize) -> Result<Vec<Image>> {
    let masks: Vec<Mask> = samples.iter().map(|s| class_mask(&s.seg, target_class)).collect();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    remove_objects_batch(generator, &images, &masks.iter().collect::<Vec<_>>(), batch)
}

fn comparison_features(extractor: &dyn FeatureExtractor, comparison: &[SceneSample], target_class: u16) -> Result<FeatureSet> {
    check_comparison_purity(comparison, target_class)?;
    let images: Vec<Image> = comparison.iter().map(|s| s.image.clone()).collect();
    extract_features(extractor, &images)
}

/// Fréchet distance between class-wise removal outputs of `query` and the
/// target-free `comparison` images.
pub fn fid_star(
    generator: &Generator,
    query: &[SceneSample],
    comparison: &[SceneSample],
    target_class: u16,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let cmp = comparison_features(extractor, comparison, target_class)?;
    let outputs = class_wise_removal(generator, query, target_class, 16)?;
    frechet_distance(&extract_features(extractor, &outputs)?, &cmp)
}

/// Inseparability counterpart of [`fid_star`].
pub fn u_ids_star(
    generator: &Generator,
    query: &[SceneSample],
    comparison: &[SceneSample],
    target_class: u16,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let cmp = comparison_features(extractor, comparison, target_class)?;
    let outputs = class_wise_removal(generator, query, target_class, 16)?;
    u_ids(&extract_features(extractor, &outputs)?, &cmp)
}

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("images {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with peak value 1; `+∞` for identical
/// images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..k).map(|j| g[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|i| g[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    (out, oh, ow)
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), averaged
/// over the valid region and the colour channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} images")));
    }
    let g = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let x = &a.data()[c * plane..(c + 1) * plane];
        let y = &b.data()[c * plane..(c + 1) * plane];
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let (mx, _, _) = filter_valid(x, h, w, &g);
        let (my, _, _) = filter_valid(y, h, w, &g);
        let (sxx, _, _) = filter_valid(&prod(x, x), h, w, &g);
        let (syy, _, _) = filter_valid(&prod(y, y), h, w, &g);
        let (sxy, oh, ow) = filter_valid(&prod(x, y), h, w, &g);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}

/// Two-stage mean of squared feature differences under `phi`.
pub fn perceptual_distance(phi: &FeatureNet, a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    Ok(perceptual_distances(phi, std::slice::from_ref(a), std::slice::from_ref(b))?[0])
}

/// Per-pair [`perceptual_distance`], batched.
pub fn perceptual_distances(phi: &FeatureNet, a: &[Image], b: &[Image]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} images", a.len(), b.len())));
    }
    let mut out = Vec::with_capacity(a.len());
    for (ca, cb) in a.chunks(16).zip(b.chunks(16)) {
        let fa = phi.features(&stack_images(ca));
        let fb = phi.features(&stack_images(cb));
        for i in 0..ca.len() {
            let diffs: Vec<_> = fa
                .iter()
                .zip(&fb)
                .map(|(x, y)| {
                    let [_, c, h, w] = x.shape();
                    let d = x.item(i).iter().zip(y.item(i)).map(|(u, v)| (u - v).powi(2)).collect();
                    decouple_tensor::Tensor::from_vec([1, c, h, w], d)
                })
                .collect();
            out.push(two_stage_mean_values(&diffs)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub target_class: u16,
    /// Test scenes are kept only when the target class covers a fraction of
    /// the image inside this band.
    pub coverage_range: [f64; 2],
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            target_class: 1,
            coverage_range: [0.05, 0.40],
            batch_size: 16,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.coverage_range;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::Config(format!("coverage range [{lo}, {hi}] is not a sub-interval of [0, 1]")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("evaluation batch_size is 0".into()));
        }
        Ok(())
    }
}

/// A metric value together with the sample counts behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricValue {
    pub value: f64,
    pub n_query: usize,
    pub n_comparison: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, MetricValue>,
    pub query_id: String,
    pub comparison_id: String,
    pub checkpoint_id: String,
    pub extractor: String,
    /// Left empty by [`evaluate_run`]; callers stamp it when writing.
    pub timestamp: String,
    pub config_hash: String,
    /// Full-reference scores per paired test scene.
    pub per_sample: Vec<SampleScore>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|m| m.value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report is serialisable");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Aligned `metric  value  n_query  n_comparison` table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>12} {:>8} {:>8}\n", "metric", "value", "n_query", "n_cmp");
        for (k, m) in &self.metrics {
            out += &format!("{k:<12} {:>12.6} {:>8} {:>8}\n", m.value, m.n_query, m.n_comparison);
        }
        out
    }
}

/// Identifier of a sample set, derived from its ids in order.
pub fn sample_set_id(samples: &[SceneSample]) -> String {
    let ids: Vec<&[u8]> = samples.iter().map(|s| s.id.as_bytes()).collect();
    short_hash(&ids)
}

pub fn checkpoint_id(ckpt: &Checkpoint) -> String {
    format!(
        "{}-{}-{}",
        ckpt.phase,
        ckpt.step,
        &ckpt.generator.params.checksum()[..16]
    )
}

/// Test scenes whose target coverage lies inside the settings' band.
pub fn coverage_filter<'a>(test: &'a [SceneSample], settings: &EvalSettings) -> Vec<&'a SceneSample> {
    let [lo, hi] = settings.coverage_range;
    test.iter()
        .filter(|s| {
            let c = mask_coverage(&class_mask(&s.seg, settings.target_class));
            c >= lo && c <= hi
        })
        .collect()
}

/// Evaluates `generator` on in-memory samples. See [`evaluate_run`].
pub fn evaluate_samples(
    generator: &Generator,
    checkpoint_id: &str,
    test: &[SceneSample],
    comparison: &[SceneSample],
    extractor: &dyn FeatureExtractor,
    phi: &FeatureNet,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    settings.validate()?;
    let cmp = comparison_features(extractor, comparison, settings.target_class)?;
    let query: Vec<SceneSample> = coverage_filter(test, settings).into_iter().cloned().collect();
    if query.is_empty() {
        return Err(Error::EmptySelection(format!(
            "no test scene has target coverage in [{}, {}]",
            settings.coverage_range[0], settings.coverage_range[1]
        )));
    }
    let outputs = class_wise_removal(generator, &query, settings.target_class, settings.batch_size)?;
    let qf = extract_features(extractor, &outputs)?;
    let (nq, nc) = (query.len(), comparison.len());
    let mv = |value: f64, n_query: usize, n_comparison: usize| MetricValue {
        value,
        n_query,
        n_comparison,
    };
    let mut metrics = BTreeMap::new();
    metrics.insert("fid_star".to_string(), mv(frechet_distance(&qf, &cmp)?, nq, nc));
    metrics.insert("u_ids_star".to_string(), mv(u_ids(&qf, &cmp)?, nq, nc));

    let paired: Vec<(usize, &Image)> = query
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.gt_removal.as_ref().map(|g| (i, g)))
        .collect();
    let mut per_sample = Vec::with_capacity(paired.len());
    if !paired.is_empty() {
        let outs: Vec<Image> = paired.iter().map(|&(i, _)| outputs[i].clone()).collect();
        let gts: Vec<Image> = paired.iter().map(|&(_, g)| g.clone()).collect();
        let dists = perceptual_distances(phi, &outs, &gts)?;
        for ((&(i, gt), out), d) in paired.iter().zip(&outs).zip(dists) {
            per_sample.push(SampleScore {
                id: query[i].id.clone(),
                psnr: psnr(out, gt)?.min(PSNR_CAP),
                ssim: ssim(out, gt)?,
                perceptual: d,
            });
        }
        let n = per_sample.len();
        let mean = |f: fn(&SampleScore) -> f64| per_sample.iter().map(f).sum::<f64>() / n as f64;
        metrics.insert("psnr".to_string(), mv(mean(|s| s.psnr), n, n));
        metrics.insert("ssim".to_string(), mv(mean(|s| s.ssim), n, n));
        metrics.insert("perceptual".to_string(), mv(mean(|s| s.perceptual), n, n));
    }
    let settings_json = serde_json::to_vec(settings).expect("settings are serialisable");
    Ok(EvalReport {
        metrics,
        query_id: sample_set_id(&query),
        comparison_id: sample_set_id(comparison),
        checkpoint_id: checkpoint_id.to_string(),
        extractor: extractor.id(),
        timestamp: String::new(),
        config_hash: short_hash(&[&settings_json, extractor.config_hash().as_bytes(), phi.params.checksum().as_bytes()]),
        per_sample,
    })
}

/// Class-wise removal on the coverage-filtered test scenes, then FID*,
/// U-IDS* against the target-free comparison set and, for paired scenes,
/// PSNR, SSIM and perceptual distance to the removal ground truth.
pub fn evaluate_run(
    ckpt: &Checkpoint,
    test: &DatasetManifest,
    comparison: &DatasetManifest,
    extractor: &dyn FeatureExtractor,
    phi: &FeatureNet,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let comparison = comparison.load_all()?;
    check_comparison_purity(&comparison, settings.target_class)?;
    let test = test.load_all()?;
    evaluate_samples(&ckpt.generator, &checkpoint_id(ckpt), &test, &comparison, extractor, phi, settings)
}
