//! Reconstruction and distribution metrics, plus corpus evaluation reports.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::data::MaskSpec;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::Generator;
use crate::sample::ImageSample;
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Exponents of the five scales, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Regularizer added to covariance diagonals when there are fewer samples
/// than embedding dimensions.
pub const FID_EPS: f64 = 1e-6;

fn check_pair(z: &Tensor, x: &Tensor) -> Result<()> {
    if z.shape() != x.shape() || z.shape().len() != 4 {
        return Err(Error::shape(format!(
            "metric inputs {:?} and {:?} differ",
            z.shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// Mean absolute error on the `[0, 1]` scale, times 100. Inputs are in `[-1, 1]`.
pub fn l1_metric(z: &ImageSample, x: &ImageSample) -> Result<f64> {
    l1_metric_tensors(z.pixels(), x.pixels())
}

pub fn l1_metric_tensors(z: &Tensor, x: &Tensor) -> Result<f64> {
    check_pair(z, x)?;
    let total: f64 = z
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs() / 2.0)
        .sum();
    Ok(100.0 * total / z.numel() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid positions of an `h`×`w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean luminance term and mean contrast-structure term for one plane pair
/// on the `[0, 1]` scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64]) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect()
    };
    let (mu_a, _, _) = filter_valid(a, h, w, win);
    let (mu_b, _, _) = filter_valid(b, h, w, win);
    let (aa, _, _) = filter_valid(&prod(&|p, _| p * p), h, w, win);
    let (bb, _, _) = filter_valid(&prod(&|_, q| q * q), h, w, win);
    let (ab, _, _) = filter_valid(&prod(&|p, q| p * q), h, w, win);
    let n = mu_a.len() as f64;
    let (mut lum, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    (lum / n, cs / n)
}

fn pool2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = 0.25
                * (plane[2 * y * w + 2 * x]
                    + plane[2 * y * w + 2 * x + 1]
                    + plane[(2 * y + 1) * w + 2 * x]
                    + plane[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, oh, ow)
}

/// Number of scales that keep the coarsest level at least one window wide.
pub fn ms_ssim_scales(size: usize) -> usize {
    let mut scales = 0;
    let mut s = size;
    while scales < MS_SSIM_WEIGHTS.len() && s >= SSIM_WINDOW {
        scales += 1;
        s /= 2;
    }
    scales
}

/// Multi-scale structural similarity of two `[1, C, H, W]` images in `[-1, 1]`,
/// computed per channel on the `[0, 1]` scale and averaged over channels.
/// Small images use fewer scales with the remaining weights renormalized.
pub fn ms_ssim(z: &Tensor, x: &Tensor) -> Result<f64> {
    check_pair(z, x)?;
    let (n, c, h, w) = z.dims4();
    if n != 1 {
        return Err(Error::shape("ms_ssim compares one image pair at a time"));
    }
    let scales = ms_ssim_scales(h.min(w));
    if scales == 0 {
        return Err(Error::shape(format!(
            "images of {h}x{w} are smaller than the {SSIM_WINDOW}-pixel window"
        )));
    }
    if scales < MS_SSIM_WEIGHTS.len() {
        warn!(scales, height = h, width = w, "ms_ssim using fewer scales");
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let norm: f64 = weights.iter().sum();
    let win = gaussian_window();
    let plane = h * w;
    let to_unit = |t: &Tensor, ch: usize| -> Vec<f64> {
        t.data()[ch * plane..(ch + 1) * plane]
            .iter()
            .map(|v| (v + 1.0) / 2.0)
            .collect()
    };
    let mut total = 0.0;
    for ch in 0..c {
        let (mut a, mut b) = (to_unit(z, ch), to_unit(x, ch));
        let (mut hh, mut ww) = (h, w);
        let mut value = 1.0;
        for (s, &wt) in weights.iter().enumerate() {
            let (lum, cs) = ssim_terms(&a, &b, hh, ww, &win);
            let term = if s + 1 == scales { lum * cs } else { cs };
            value *= term.max(0.0).powf(wt / norm);
            if s + 1 < scales {
                let (pa, nh, nw) = pool2(&a, hh, ww);
                let (pb, _, _) = pool2(&b, hh, ww);
                a = pa;
                b = pb;
                hh = nh;
                ww = nw;
            }
        }
        total += value;
    }
    Ok(total / c as f64)
}

/// External feature extractor used by the distribution metrics.
pub trait EmbeddingProvider: Send + Sync {
    /// One feature vector per image.
    fn embed(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>>;
    /// One class probability vector per image; rows sum to one.
    fn classify(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>>;
}

/// `exp(mean KL(p(y|z) ‖ p(y)))` over the given class distributions.
pub fn inception_score_from_probs(probs: &[Vec<f64>]) -> Result<f64> {
    let k = probs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::shape("inception score needs at least one image"))?;
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::shape("class distributions differ in length"));
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..k).map(|j| probs.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let mean_kl = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(&pi, _)| pi > 0.0)
                .map(|(&pi, &mi)| pi * (pi / mi).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

pub fn inception_score(images: &[Tensor], provider: &dyn EmbeddingProvider) -> Result<f64> {
    inception_score_from_probs(&provider.classify(images)?)
}

fn gaussian_fit(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::shape("FID needs at least one embedding per set"))?;
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("embeddings differ in length"));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = centered.transpose() * &centered / denom;
    if n <= d {
        warn!(samples = n, dim = d, "regularizing covariance with {FID_EPS}·I");
        for i in 0..d {
            cov[(i, i)] += FID_EPS;
        }
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fit to two embedding sets.
pub fn fid_from_embeddings(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (mr, cr) = gaussian_fit(real)?;
    let (mf, cf) = gaussian_fit(fake)?;
    if mr.len() != mf.len() {
        return Err(Error::shape("embedding sets differ in dimension"));
    }
    // tr((Σr Σf)^½) equals tr((Σr^½ Σf Σr^½)^½), which stays symmetric.
    let s = sym_sqrt(&cr);
    let inner = &s * &cf * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = &mr - &mf;
    Ok((diff.dot(&diff) + cr.trace() + cf.trace() - 2.0 * cross).max(0.0))
}

pub fn fid(real: &[Tensor], fake: &[Tensor], provider: &dyn EmbeddingProvider) -> Result<f64> {
    fid_from_embeddings(&provider.embed(real)?, &provider.embed(fake)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub l1: f64,
    pub ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub checkpoint_id: String,
    pub mask: MaskSpec,
    pub records: Vec<ImageRecord>,
    pub mean_l1: f64,
    pub mean_ms_ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inception_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
}

impl EvalReport {
    /// Builds a report whose means are recomputed from `records`.
    pub fn from_records(checkpoint_id: &str, mask: MaskSpec, records: Vec<ImageRecord>) -> Self {
        let n = records.len().max(1) as f64;
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            checkpoint_id: checkpoint_id.to_string(),
            mask,
            mean_l1: records.iter().map(|r| r.l1).sum::<f64>() / n,
            mean_ms_ssim: records.iter().map(|r| r.ms_ssim).sum::<f64>() / n,
            records,
            inception_score: None,
            fid: None,
        }
    }
}

/// Composes every sample with a mask drawn from `masks` and scores the
/// composite against the original. Distribution metrics are filled in only
/// when a provider is given.
pub fn evaluate(
    generator: &Generator,
    samples: &[ImageSample],
    masks: &[BinaryMask],
    mask_spec: &MaskSpec,
    checkpoint_id: &str,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    if samples.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} samples but {} masks",
            samples.len(),
            masks.len()
        )));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = samples.len().div_ceil(workers);
    let mut results: Vec<Result<(ImageRecord, Tensor)>> = Vec::with_capacity(samples.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .zip(masks.chunks(chunk))
            .map(|(ss, ms)| {
                scope.spawn(move || {
                    ss.iter()
                        .zip(ms)
                        .map(|(s, m)| {
                            let (_, z) = generator.generate(s.pixels(), &[m])?;
                            let record = ImageRecord {
                                id: s.id.clone(),
                                l1: l1_metric_tensors(&z, s.pixels())?,
                                ms_ssim: ms_ssim(&z, s.pixels())?,
                            };
                            Ok((record, z))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            results.extend(h.join().expect("evaluation worker panicked"));
        }
    });
    let (records, composites): (Vec<_>, Vec<_>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let mut report = EvalReport::from_records(checkpoint_id, mask_spec.clone(), records);
    if let Some(p) = provider {
        let reals: Vec<Tensor> = samples.iter().map(|s| s.pixels().clone()).collect();
        report.inception_score = Some(inception_score(&composites, p)?);
        report.fid = Some(fid(&reals, &composites, p)?);
    }
    Ok(report)
}
