//! SSIM, mean intersection-over-union, and a Fréchet distance over a fixed
//! random convolutional embedding ("FD-r").
//!
//! FD-r values are comparable between models evaluated here but are not FID
//! values: the embedding is an untrained, seeded network rather than Inception.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{RgbImage, SemanticMap};
use crate::error::{Error, Result};
use crate::graph::conv2d_forward;
use crate::nn::{init_conv, ParamStore};
use crate::tensor::Tensor;

/// Label used wherever the Fréchet feature distance is reported.
pub const FD_LABEL: &str = "FD-r";

/// Seed of the fixed feature extractor weights.
pub const FD_FEATURE_SEED: u64 = 0x00FD_5EED;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Added to both covariances before the matrix square root.
pub const FRECHET_EPS: f64 = 1e-6;

// ---- SSIM ----------------------------------------------------------------------

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur of one plane with mirror padding.
fn blur(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM over one pair of planes.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let kernel = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, mu_b) = (blur(a, w, h, &kernel), blur(b, w, h, &kernel));
    let (e_aa, e_bb, e_ab) = (blur(&aa, w, h, &kernel), blur(&bb, w, h, &kernel), blur(&ab, w, h, &kernel));
    let mut total = 0.0;
    for i in 0..w * h {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (w * h) as f64
}

/// Windowed SSIM averaged over windows and channels (dynamic range 1).
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::config(format!(
            "ssim: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let plane = |img: &RgbImage, c: usize| -> Vec<f64> { (0..w * h).map(|p| img.data[p * 3 + c] as f64).collect() };
    let total: f64 = (0..3).map(|c| ssim_plane(&plane(a, c), &plane(b, c), w, h)).sum();
    Ok(total / 3.0)
}

// ---- mIOU ----------------------------------------------------------------------

/// Accumulates per-class intersections and unions over many maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        IouAccumulator {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &SemanticMap, gt: &SemanticMap) -> Result<()> {
        if pred.width != gt.width || pred.height != gt.height {
            return Err(Error::config("miou: prediction and ground truth differ in size"));
        }
        let c = self.intersection.len();
        pred.validate(c)?;
        gt.validate(c)?;
        for (&p, &g) in pred.classes.iter().zip(&gt.classes) {
            let (p, g) = (p as usize, g as usize);
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// Per-class IoU (`None` for classes absent from both maps) and the mean
    /// over present classes, in percent.
    pub fn finish(&self) -> (f64, Vec<Option<f64>>) {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            100.0
        } else {
            100.0 * present.iter().sum::<f64>() / present.len() as f64
        };
        (miou, per_class)
    }
}

/// Mean intersection-over-union in percent for a single pair of maps.
pub fn miou(pred: &SemanticMap, gt: &SemanticMap, num_classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut acc = IouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok(acc.finish())
}

// ---- Fréchet distance ------------------------------------------------------------

/// Untrained convolutional embedding with weights fixed by [`FD_FEATURE_SEED`]:
/// three 3x3 convolutions (strides 1, 2, 2) with ReLU, then global average pooling.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    params: ParamStore<f64>,
}

pub const FEATURE_DIM: usize = 64;

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(FD_FEATURE_SEED);
        let mut params = ParamStore::new();
        init_conv(&mut params, "l0", 3, 32, 3, 1.0, &mut rng);
        init_conv(&mut params, "l1", 32, 64, 3, 1.0, &mut rng);
        init_conv(&mut params, "l2", 64, FEATURE_DIM, 3, 1.0, &mut rng);
        FeatureExtractor { params }
    }

    pub fn embed(&self, img: &RgbImage) -> Vec<f64> {
        let chw: Vec<f64> = img.to_chw::<f64>().into_iter().map(|v| 2.0 * v - 1.0).collect();
        let mut x = Tensor::from_vec(&[1, 3, img.height, img.width], chw).unwrap();
        for (layer, stride) in [("l0", 1), ("l1", 2), ("l2", 2)] {
            let w = self.params.get(&format!("{layer}.w")).unwrap();
            let b = self.params.get(&format!("{layer}.b")).unwrap();
            x = conv2d_forward(&x, w, b, stride, 1).map(|v| v.max(0.0));
        }
        let plane = x.dim(2) * x.dim(3);
        x.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect()
    }
}

fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::config("Fréchet distance needs at least two samples per set"));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::config("Fréchet distance needs equal-length, non-empty features"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite feature"));
    }
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})` over feature vectors.
///
/// The square-root trace is taken as `Tr sqrt(S_a^{1/2} S_b S_a^{1/2})` with
/// both square roots from symmetric eigendecompositions, negative eigenvalues
/// clamped to zero. The result is clamped at zero.
pub fn frechet_distance_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::config("feature dimensions differ between sets"));
    }
    let d = mu_a.len();
    let eye = DMatrix::<f64>::identity(d, d) * FRECHET_EPS;
    let cov_a = cov_a + &eye;
    let cov_b = cov_b + &eye;
    let root_a = sym_sqrt(&cov_a);
    let mut inner = &root_a * &cov_b * &root_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let trace_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .sum();
    let diff = &mu_a - &mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
    Ok(value.max(0.0))
}

/// FD-r between two image sets.
pub fn frechet_distance(set_a: &[RgbImage], set_b: &[RgbImage]) -> Result<f64> {
    let fx = FeatureExtractor::new();
    let fa: Vec<Vec<f64>> = set_a.iter().map(|i| fx.embed(i)).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|i| fx.embed(i)).collect();
    frechet_distance_features(&fa, &fb)
}

/// Aggregate evaluation of generated images and semantic reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ssim_mean: f64,
    pub frechet_distance: f64,
    pub miou_percent: f64,
    pub n_samples: usize,
    pub per_class_iou: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn is_finite(&self) -> bool {
        self.ssim_mean.is_finite() && self.frechet_distance.is_finite() && self.miou_percent.is_finite()
    }

    /// Tab-separated `key<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("n_samples\t{}\n", self.n_samples));
        s.push_str(&format!("{FD_LABEL}\t{:.6}\n", self.frechet_distance));
        s.push_str(&format!("SSIM\t{:.6}\n", self.ssim_mean));
        s.push_str(&format!("mIOU\t{:.4}\n", self.miou_percent));
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("IoU[{c}]\t{:.4}\n", 100.0 * v)),
                None => s.push_str(&format!("IoU[{c}]\tn/a\n")),
            }
        }
        s
    }
}
