//! Dataset ingestion, augmentation, label encoding, and the synthetic toy
//! dataset used for desk-scale verification.
//!
//! Directory layout is folder-per-domain: `<root>/<domain>/*.png|jpg`, with
//! domain indices assigned in lexicographic subdirectory order. Images are
//! kept at their decoded resolution; augmentation resizes and crops per
//! sample.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::ModelConfig;
use crate::rng::RandomSource;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("need at least 2 domain directories, found {found}")]
    TooFewDomains { found: usize },
    #[error("domain `{0}` contains no decodable images")]
    EmptyDomain(String),
    #[error("cannot decode image {path}: {reason}")]
    Undecodable { path: PathBuf, reason: String },
    #[error("cannot encode image {path}: {reason}")]
    Unencodable { path: PathBuf, reason: String },
    #[error("domain index {index} out of range for K={k}")]
    LabelOutOfRange { index: usize, k: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid toy spec: {0}")]
    BadToySpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_owned(),
        source,
    }
}

/// One domain: a name and its image collection, each image `[C,H,W]`
/// in [-1, 1].
#[derive(Debug, Clone)]
pub struct Domain {
    pub name: String,
    pub images: Vec<Tensor>,
}

/// An unpaired multi-domain image collection.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub domains: Vec<Domain>,
    pub image_size: usize,
    pub in_channels: usize,
}

impl Dataset {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(|d| d.images.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image by global index (domains concatenated in order).
    pub fn image(&self, index: usize) -> (&Tensor, usize) {
        let mut i = index;
        for (k, d) in self.domains.iter().enumerate() {
            if i < d.images.len() {
                return (&d.images[i], k);
            }
            i -= d.images.len();
        }
        panic!("image index {index} out of range");
    }
}

// ---------------------------------------------------------------------------
// image <-> tensor

/// Decode an image file to a `[C,H,W]` tensor in [-1, 1].
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor, DataError> {
    let img = image::open(path).map_err(|e| DataError::Undecodable {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    Ok(dynimage_to_tensor(&img, channels))
}

fn dynimage_to_tensor(img: &image::DynamicImage, channels: usize) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; channels * h * w];
    if channels == 1 {
        let gray = img.to_luma8();
        for (i, p) in gray.pixels().enumerate() {
            data[i] = p.0[0] as f64 / 255.0 * 2.0 - 1.0;
        }
    } else {
        let rgb = img.to_rgb8();
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..channels.min(3) {
                data[c * h * w + i] = p.0[c] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Encode a `[C,H,W]` tensor in [-1, 1] as 8-bit pixels.
pub fn tensor_to_rgb(t: &Tensor) -> image::RgbImage {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        other => panic!("expected [C,H,W], got {other:?}"),
    };
    let d = t.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |ch: usize| {
            let v = d[ch.min(c - 1) * h * w + i];
            (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Write a `[C,H,W]` tensor as a lossless PNG.
pub fn save_png(t: &Tensor, path: &Path) -> Result<(), DataError> {
    tensor_to_rgb(t)
        .save(path)
        .map_err(|e| DataError::Unencodable {
            path: path.to_owned(),
            reason: e.to_string(),
        })
}

/// Tile rows of equally sized `[C,H,W]` images into one `[C,?,?]` image.
pub fn image_grid(rows: &[Vec<Tensor>]) -> Tensor {
    assert!(!rows.is_empty() && !rows[0].is_empty());
    let (c, h, w) = match rows[0][0].shape() {
        [c, h, w] => (*c, *h, *w),
        other => panic!("expected [C,H,W], got {other:?}"),
    };
    let cols = rows.iter().map(|r| r.len()).max().unwrap();
    let (gh, gw) = (h * rows.len(), w * cols);
    let mut out = vec![0.0; c * gh * gw];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            assert_eq!(img.shape(), &[c, h, w], "grid cells must match");
            for ch in 0..c {
                for y in 0..h {
                    let src = &img.data()[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                    let dst_off = ch * gh * gw + (ri * h + y) * gw + ci * w;
                    out[dst_off..dst_off + w].copy_from_slice(src);
                }
            }
        }
    }
    Tensor::new(vec![c, gh, gw], out)
}

/// Bilinear resize of `[C,H,W]` to `oh x ow` (half-pixel centers).
pub fn bilinear_resize(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        other => panic!("expected [C,H,W], got {other:?}"),
    };
    if (h, w) == (oh, ow) {
        return t.clone();
    }
    let d = t.data();
    let mut out = vec![0.0; c * oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| d[ch * h * w + yy * w + xx];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out[ch * oh * ow + y * ow + x] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn hflip(t: &Tensor) -> Tensor {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        other => panic!("expected [C,H,W], got {other:?}"),
    };
    let d = t.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = d[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

fn crop(t: &Tensor, oy: usize, ox: usize, size: usize) -> Tensor {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        other => panic!("expected [C,H,W], got {other:?}"),
    };
    assert!(oy + size <= h && ox + size <= w);
    let d = t.data();
    let mut out = vec![0.0; c * size * size];
    for ch in 0..c {
        for y in 0..size {
            let src = ch * h * w + (oy + y) * w + ox;
            out[ch * size * size + y * size..ch * size * size + (y + 1) * size]
                .copy_from_slice(&d[src..src + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

// ---------------------------------------------------------------------------
// loading and augmentation

/// Load a folder-per-domain dataset rooted at `root`. Domain indices follow
/// lexicographic subdirectory order; file order within a domain is also
/// lexicographic so loads are reproducible.
pub fn load_folders(root: &Path, cfg: &ModelConfig) -> Result<Dataset, DataError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.len() < 2 {
        return Err(DataError::TooFewDomains { found: dirs.len() });
    }
    let mut domains = Vec::new();
    for dir in dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase),
                    Some(ref ext) if ext == "png" || ext == "jpg" || ext == "jpeg"
                )
            })
            .collect();
        files.sort();
        let mut images = Vec::new();
        for f in files {
            images.push(load_image(&f, cfg.in_channels)?);
        }
        if images.is_empty() {
            return Err(DataError::EmptyDomain(name));
        }
        domains.push(Domain { name, images });
    }
    Ok(Dataset {
        domains,
        image_size: cfg.image_size,
        in_channels: cfg.in_channels,
    })
}

/// The pre-crop edge length: `image_size` scaled by the 138/128 training
/// convention, rounded.
pub fn augment_intermediate_size(image_size: usize) -> usize {
    (image_size as f64 * 138.0 / 128.0).round() as usize
}

fn augment_to(img: &Tensor, rng: &mut RandomSource, size: usize) -> Tensor {
    let inter = augment_intermediate_size(size);
    let resized = bilinear_resize(img, inter, inter);
    // Draw order: crop y, crop x, flip.
    let oy = rng.below(inter - size + 1);
    let ox = rng.below(inter - size + 1);
    let cropped = crop(&resized, oy, ox, size);
    if rng.uniform() < 0.5 {
        hflip(&cropped)
    } else {
        cropped
    }
}

/// Training augmentation: resize to the intermediate size, random square
/// crop back to `image_size`, horizontal flip with probability one half.
pub fn augment(img: &Tensor, rng: &mut RandomSource, cfg: &ModelConfig) -> Tensor {
    augment_to(img, rng, cfg.image_size)
}

/// Deterministic evaluation preprocessing: same geometry as [`augment`]
/// but center crop and no flip.
pub fn center_prepare(img: &Tensor, image_size: usize) -> Tensor {
    let inter = augment_intermediate_size(image_size);
    let resized = bilinear_resize(img, inter, inter);
    let off = (inter - image_size) / 2;
    crop(&resized, off, off, image_size)
}

/// One-hot domain label of length `k`.
pub fn encode_label(index: usize, k: usize) -> Result<Tensor, DataError> {
    if index >= k {
        return Err(DataError::LabelOutOfRange { index, k });
    }
    let mut data = vec![0.0; k];
    data[index] = 1.0;
    Ok(Tensor::new(vec![k], data))
}

/// Stack per-row one-hot labels into `[N,K]`.
pub fn onehot_batch(labels: &[usize], k: usize) -> Result<Tensor, DataError> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(DataError::LabelOutOfRange { index: l, k });
        }
        data[i * k + l] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), k], data))
}

/// One training batch: augmented images with their source domains and
/// uniformly drawn target domains.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub source_labels: Vec<usize>,
    pub target_labels: Vec<usize>,
}

/// Draw `n` images uniformly over the dataset (augmented), then `n` target
/// labels uniformly over `[0, K)` — independent of the sources.
pub fn sample_batch(ds: &Dataset, n: usize, rng: &mut RandomSource) -> Result<Batch, DataError> {
    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    assert!(n >= 1, "batch size must be >= 1");
    let total = ds.len();
    let size = ds.image_size;
    let mut images = vec![0.0; n * ds.in_channels * size * size];
    let mut source_labels = Vec::with_capacity(n);
    let per = ds.in_channels * size * size;
    for i in 0..n {
        let (img, dom) = ds.image(rng.below(total));
        let aug = augment_to(img, rng, size);
        images[i * per..(i + 1) * per].copy_from_slice(aug.data());
        source_labels.push(dom);
    }
    let k = ds.num_domains();
    let target_labels = (0..n).map(|_| rng.below(k)).collect();
    Ok(Batch {
        images: Tensor::new(vec![n, ds.in_channels, size, size], images),
        source_labels,
        target_labels,
    })
}

// ---------------------------------------------------------------------------
// toy dataset

/// Shapes drawn by the toy renderer.
pub const TOY_SHAPES: [&str; 3] = ["circle", "square", "triangle"];

/// Spec of the synthetic dataset: K palette/texture-separable domains with
/// per-sample shape, position, and size variation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub num_domains: usize,
    pub per_domain: usize,
    pub image_size: usize,
}

impl ToySpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_domains < 2 {
            return Err(DataError::BadToySpec(format!(
                "need at least 2 domains, got {}",
                self.num_domains
            )));
        }
        if self.per_domain < 1 {
            return Err(DataError::BadToySpec("per_domain must be >= 1".into()));
        }
        if self.image_size < 8 {
            return Err(DataError::BadToySpec("image_size must be >= 8".into()));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, t],
    }
}

/// Render one toy sample. Domains differ by base hue and stripe texture;
/// samples within a domain differ by shape kind, position, size, and small
/// color jitter.
fn render_toy_sample(domain: usize, spec: &ToySpec, rng: &mut RandomSource) -> Tensor {
    let s = spec.image_size;
    let k = spec.num_domains;
    let hue = domain as f64 / k as f64;
    // Draw order: shape kind, center x, center y, radius, hue jitter,
    // value jitter.
    let kind = rng.below(3);
    let cx = s as f64 * (0.5 + 0.3 * (rng.uniform() - 0.5));
    let cy = s as f64 * (0.5 + 0.3 * (rng.uniform() - 0.5));
    // Shape area stays small enough that the mean color remains dominated
    // by the domain palette (the separability invariant).
    let radius = s as f64 * (0.12 + 0.08 * rng.uniform());
    let hue_jitter = 0.04 * (rng.uniform() - 0.5);
    let val_jitter = 0.08 * (rng.uniform() - 0.5);

    let bg = hsv_to_rgb(hue, 0.75, 0.5 + val_jitter);
    let fg = hsv_to_rgb(hue + 0.5 + hue_jitter, 0.9, 0.9);
    let freq = (3 + 2 * domain) as f64;
    let vertical = domain % 2 == 1;

    let mut data = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let coord = if vertical { x } else { y } as f64;
            let stripe = 0.14 * (2.0 * std::f64::consts::PI * freq * coord / s as f64).sin();
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let inside = match kind {
                0 => dx * dx + dy * dy <= radius * radius,
                1 => dx.abs() <= radius && dy.abs() <= radius,
                _ => dy >= -radius && dy <= radius && dx.abs() <= (dy + radius) / 2.0,
            };
            for c in 0..3 {
                let base = if inside { fg[c] } else { bg[c] + stripe };
                data[c * s * s + y * s + x] = (base.clamp(0.0, 1.0)) * 2.0 - 1.0;
            }
        }
    }
    Tensor::new(vec![3, s, s], data)
}

/// Generate the toy dataset in memory; content is a pure function of
/// `(spec, rng seed)`.
pub fn make_toy_dataset(spec: &ToySpec, rng: &mut RandomSource) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut domains = Vec::with_capacity(spec.num_domains);
    for k in 0..spec.num_domains {
        let images = (0..spec.per_domain)
            .map(|_| render_toy_sample(k, spec, rng))
            .collect();
        domains.push(Domain {
            name: format!("domain{k:02}"),
            images,
        });
    }
    Ok(Dataset {
        domains,
        image_size: spec.image_size,
        in_channels: 3,
    })
}

/// Render the toy dataset and write it in the folder-per-domain layout,
/// plus a `manifest.txt` recording the spec and seed.
pub fn write_toy_dataset(
    spec: &ToySpec,
    seed: u64,
    out: &Path,
) -> Result<Dataset, DataError> {
    let mut rng = RandomSource::new(seed, "toy");
    let ds = make_toy_dataset(spec, &mut rng)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for domain in &ds.domains {
        let dir = out.join(&domain.name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (i, img) in domain.images.iter().enumerate() {
            save_png(img, &dir.join(format!("img{i:04}.png")))?;
        }
    }
    let manifest = format!(
        "num_domains={}\nper_domain={}\nimage_size={}\nseed={}\nshapes={}\n",
        spec.num_domains,
        spec.per_domain,
        spec.image_size,
        seed,
        TOY_SHAPES.join(",")
    );
    let mpath = out.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    Ok(ds)
}
