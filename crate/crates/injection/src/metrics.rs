//! Quantitative evaluation: Fréchet distance between Gaussian fits of
//! feature distributions, and mean pairwise feature distance as a diversity
//! score. The feature extractor is pluggable; the built-in one is a frozen
//! random convolutional network so evaluations are self-contained and
//! reproducible. Extractor identity is recorded in every report.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::rng::RandomSource;
use crate::tensor::{avg_pool2, conv2d_raw, leaky_relu_raw, Tensor};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least {need} samples, got {got}")]
    NotEnoughSamples { need: usize, got: usize },
    #[error("dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("all-pairs diversity supports at most 200 samples, got {0}")]
    TooManyForAllPairs(usize),
    #[error("cannot write metric report: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic map from images to feature vectors.
pub trait FeatureExtractor {
    /// Identifier recorded in metric reports.
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// One feature vector per `[C,H,W]` image.
    fn extract(&self, images: &[Tensor]) -> Vec<Vec<f64>>;
}

/// A frozen, seed-built random convolutional feature extractor.
///
/// Three conv/pool stages then global average pooling. Weights never train;
/// the identifier encodes the seed and dimensions so reports pin down the
/// feature space they were computed in.
pub struct FrozenConvExtractor {
    layers: Vec<(Tensor, Tensor)>,
    id: String,
    in_channels: usize,
    dim: usize,
}

impl FrozenConvExtractor {
    pub const DEFAULT_SEED: u64 = 977;

    pub fn new(in_channels: usize, seed: u64) -> Self {
        let widths = [16usize, 32, 32];
        let mut rng = RandomSource::new(seed, "feature-extractor");
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for &cout in &widths {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let mut w = vec![0.0; cout * cin * 9];
            rng.fill_normal(&mut w);
            for v in &mut w {
                *v *= std;
            }
            layers.push((
                Tensor::new(vec![cout, cin, 3, 3], w),
                Tensor::zeros(vec![cout]),
            ));
            cin = cout;
        }
        FrozenConvExtractor {
            layers,
            id: format!("frozen-conv-v1/c{in_channels}/f{cin}/seed{seed}"),
            in_channels,
            dim: cin,
        }
    }

    fn forward_batch(&self, batch: &Tensor) -> Vec<Vec<f64>> {
        let mut x = batch.clone();
        for (w, b) in &self.layers {
            let mut y = conv2d_raw(&x, w, 1);
            let (n, c, h, wd) = y.dim4();
            {
                let data = y.make_mut();
                for s in 0..n {
                    for ci in 0..c {
                        let base = (s * c + ci) * h * wd;
                        let bias = b.data()[ci];
                        for v in &mut data[base..base + h * wd] {
                            *v += bias;
                        }
                    }
                }
            }
            x = leaky_relu_raw(&y, 0.2);
            let (_, _, h, wd) = x.dim4();
            if h % 2 == 0 && wd % 2 == 0 && h > 1 && wd > 1 {
                x = avg_pool2(&x);
            }
        }
        let (n, c, h, w) = x.dim4();
        let mut out = Vec::with_capacity(n);
        for s in 0..n {
            let mut row = vec![0.0; c];
            for (ci, item) in row.iter_mut().enumerate() {
                let base = (s * c + ci) * h * w;
                *item = x.data()[base..base + h * w].iter().sum::<f64>() / (h * w) as f64;
            }
            out.push(row);
        }
        out
    }
}

impl FeatureExtractor for FrozenConvExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, images: &[Tensor]) -> Vec<Vec<f64>> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let (c, h, w) = match chunk[0].shape() {
                [c, h, w] => (*c, *h, *w),
                other => panic!("expected [C,H,W], got {other:?}"),
            };
            assert_eq!(c, self.in_channels, "extractor channel mismatch");
            let mut data = Vec::with_capacity(chunk.len() * c * h * w);
            for img in chunk {
                assert_eq!(img.shape(), &[c, h, w], "extractor needs equal shapes");
                data.extend_from_slice(img.data());
            }
            rows.extend(self.forward_batch(&Tensor::new(vec![chunk.len(), c, h, w], data)));
        }
        rows
    }
}

/// Sufficient statistics for the Fréchet distance.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` covariance.
    pub cov: Vec<f64>,
    pub dim: usize,
}

/// Sample mean and unbiased sample covariance.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats, MetricError> {
    if features.len() < 2 {
        return Err(MetricError::NotEnoughSamples {
            need: 2,
            got: features.len(),
        });
    }
    let n = features.len();
    let dim = features[0].len();
    for f in features {
        if f.len() != dim {
            return Err(MetricError::DimensionMismatch { a: dim, b: f.len() });
        }
    }
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    for f in features {
        for i in 0..dim {
            let di = f[i] - mean[i];
            for j in 0..dim {
                cov[i * dim + j] += di * (f[j] - mean[j]);
            }
        }
    }
    for v in &mut cov {
        *v /= (n - 1) as f64;
    }
    Ok(GaussianStats { mean, cov, dim })
}

// ---------------------------------------------------------------------------
// small symmetric linear algebra

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns `(values, vectors)` with vectors in columns: `A = V D V^T`.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[i * n + p];
                    let miq = m[i * n + q];
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[p * n + j];
                    let mqj = m[q * n + j];
                    m[p * n + j] = c * mpj - s * mqj;
                    m[q * n + j] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[i * n + i]).collect();
    (values, v)
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
fn sqrtm_psd(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = jacobi_eigen(a, n);
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // V diag(roots) V^T
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += vecs[i * n + k] * roots[k] * vecs[j * n + k];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Fréchet distance between two Gaussians:
/// `||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca Cb)^(1/2))`.
///
/// The cross term is computed as `tr sqrt(S Cb S)` with `S = sqrt(Ca)`,
/// which is symmetric PSD and shares the trace with `sqrt(Ca Cb)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricError> {
    if a.dim != b.dim {
        return Err(MetricError::DimensionMismatch { a: a.dim, b: b.dim });
    }
    let n = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let s = sqrtm_psd(&a.cov, n);
    let mut inner = mat_mul(&mat_mul(&s, &b.cov, n), &s, n);
    // enforce symmetry before the eigensolve
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (inner[i * n + j] + inner[j * n + i]);
            inner[i * n + j] = avg;
            inner[j * n + i] = avg;
        }
    }
    let (vals, _) = jacobi_eigen(&inner, n);
    let tr_cross: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..n).map(|i| a.cov[i * n + i]).sum();
    let tr_b: f64 = (0..n).map(|i| b.cov[i * n + i]).sum();
    let raw = mean_term + tr_a + tr_b - 2.0 * tr_cross;
    debug_assert!(raw > -1e-6, "frechet distance {raw} below tolerance");
    Ok(raw.max(0.0))
}

fn sample_indices(
    len: usize,
    n: usize,
    replace: bool,
    rng: &mut RandomSource,
) -> Result<Vec<usize>, MetricError> {
    if replace {
        return Ok((0..n).map(|_| rng.below(len)).collect());
    }
    if n > len {
        return Err(MetricError::NotEnoughSamples { need: n, got: len });
    }
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = i + rng.below(len - i);
        idx.swap(i, j);
    }
    idx.truncate(n);
    Ok(idx)
}

/// Fréchet distance between feature Gaussians of `n` images sampled from
/// each set. `replace` declares sampling with replacement (required when
/// `n` exceeds a set size).
pub fn fid(
    real: &[Tensor],
    fake: &[Tensor],
    fx: &dyn FeatureExtractor,
    n: usize,
    replace: bool,
    rng: &mut RandomSource,
) -> Result<f64, MetricError> {
    if real.is_empty() || fake.is_empty() {
        return Err(MetricError::NotEnoughSamples { need: 1, got: 0 });
    }
    let pick = |set: &[Tensor], rng: &mut RandomSource| -> Result<Vec<Tensor>, MetricError> {
        Ok(sample_indices(set.len(), n, replace, rng)?
            .into_iter()
            .map(|i| set[i].clone())
            .collect())
    };
    let real_pick = pick(real, rng)?;
    let fake_pick = pick(fake, rng)?;
    let ga = fit_gaussian(&fx.extract(&real_pick))?;
    let gb = fit_gaussian(&fx.extract(&fake_pick))?;
    frechet_distance(&ga, &gb)
}

fn unit_normalize(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for row in &mut rows {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v /= norm;
            }
        }
    }
    rows
}

fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean feature distance over `num_pairs` random distinct pairs, features
/// unit-normalized. Pairs are drawn without replacement within a pair and
/// with replacement across pairs.
pub fn diversity_score(
    samples: &[Tensor],
    fx: &dyn FeatureExtractor,
    num_pairs: usize,
    rng: &mut RandomSource,
) -> Result<f64, MetricError> {
    if samples.len() < 2 {
        return Err(MetricError::NotEnoughSamples {
            need: 2,
            got: samples.len(),
        });
    }
    let feats = unit_normalize(fx.extract(samples));
    let n = feats.len();
    let mut total = 0.0;
    for _ in 0..num_pairs {
        let i = rng.below(n);
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        total += pair_distance(&feats[i], &feats[j]);
    }
    Ok(total / num_pairs as f64)
}

/// Exact all-pairs variant for sets of at most 200 samples; invariant under
/// sample permutation.
pub fn diversity_all_pairs(
    samples: &[Tensor],
    fx: &dyn FeatureExtractor,
) -> Result<f64, MetricError> {
    if samples.len() < 2 {
        return Err(MetricError::NotEnoughSamples {
            need: 2,
            got: samples.len(),
        });
    }
    if samples.len() > 200 {
        return Err(MetricError::TooManyForAllPairs(samples.len()));
    }
    let feats = unit_normalize(fx.extract(samples));
    let n = feats.len();
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += pair_distance(&feats[i], &feats[j]);
            count += 1.0;
        }
    }
    Ok(total / count)
}

/// One evaluation record, appended to the report file as CSV.
#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub extractor_id: String,
    pub n: usize,
    pub num_pairs: usize,
    pub seed: u64,
    pub fid: f64,
    pub diversity: f64,
}

pub const METRIC_REPORT_HEADER: &str = "extractor_id,n,num_pairs,seed,fid,diversity";

/// Append a record to `path`, writing the header when the file is new.
pub fn append_metric_record(path: &Path, record: &MetricRecord) -> Result<(), MetricError> {
    let fresh = !path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(file, "{METRIC_REPORT_HEADER}")?;
    }
    writeln!(
        file,
        "{},{},{},{},{:.6},{:.6}",
        record.extractor_id, record.n, record.num_pairs, record.seed, record.fid, record.diversity
    )?;
    Ok(())
}
