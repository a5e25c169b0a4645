//! Image I/O, bicubic resampling, augmentation, and patch sampling.
//!
//! Images travel as `[B, 3, H, W]` tensors with values in `[0, 1]`.
//! Low-resolution inputs are produced by bicubic downsampling of the
//! full high-resolution image once (so every patch cut from it sees the
//! same degradation), and training pairs are aligned crops: the HR corner
//! is always `scale` times the LR corner.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Loading and saving

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Load a PNG (8- or 16-bit, gray or color) or binary PPM as
/// `[1, 3, H, W]` in `[0, 1]`. 8-bit samples map to exact multiples of
/// `1/255`, 16-bit to multiples of `1/65535`.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    // Widening to 16 bits is exact for 8-bit sources (v * 257), so a
    // single 1/65535 scale is correct for both depths.
    let rgb = img.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(image_err(path, "empty image"));
    }
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[(c * h + y) * w + x] = T::from_c(f64::from(p.0[c]) / 65535.0);
        }
    }
    Tensor::from_vec(data, &[1, 3, h, w])
}

/// Save `[1, 3, H, W]` (clamped to `[0, 1]`) as an 8-bit image; the format
/// follows the extension (`.png` or `.ppm`).
pub fn save_image<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    if t.ndim() != 4 || t.shape()[0] != 1 || t.shape()[1] != 3 {
        return Err(Error::contract(
            "save_image",
            format!("expected [1, 3, H, W], got {:?}", t.shape()),
        ));
    }
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let data = t.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let v = data[(c * h + y as usize) * w + x as usize].to_c();
            *out = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        image::Rgb(px)
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// All supported images directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "ppm")) && p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Bicubic resampling

/// Keys cubic kernel with a = -1/2.
fn keys_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t.powi(3) - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t.powi(3) - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Weights for the four taps around a source position with fractional
/// offset `f` in `[0, 1)`, ordered `floor-1 ..= floor+2`.
pub(crate) fn keys_weights(f: f64) -> [f64; 4] {
    [
        keys_kernel(1.0 + f),
        keys_kernel(f),
        keys_kernel(1.0 - f),
        keys_kernel(2.0 - f),
    ]
}

/// Resample one axis: for each output index, the source position uses
/// half-pixel centers (`(i + 0.5) * in/out - 0.5`) and out-of-range taps
/// replicate the edge sample.
fn resize_axis<T: Scalar>(
    data: &[T],
    outer: usize, // product of axes before the resized one
    n_in: usize,  // length of the resized axis
    inner: usize, // product of axes after it
    n_out: usize,
) -> Vec<T> {
    let ratio = n_in as f64 / n_out as f64;
    // Precompute taps and weights per output index.
    let plan: Vec<([usize; 4], [f64; 4])> = (0..n_out)
        .map(|i| {
            let s = (i as f64 + 0.5) * ratio - 0.5;
            let base = s.floor();
            let f = s - base;
            let w = keys_weights(f);
            let mut taps = [0usize; 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let idx = base as i64 - 1 + k as i64;
                *tap = idx.clamp(0, n_in as i64 - 1) as usize;
            }
            (taps, w)
        })
        .collect();
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        for (i, (taps, w)) in plan.iter().enumerate() {
            for j in 0..inner {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w[k] * data[(o * n_in + taps[k]) * inner + j].to_c();
                }
                out[(o * n_out + i) * inner + j] = T::from_c(acc);
            }
        }
    }
    out
}

/// Bicubic resize of `[B, C, H, W]` to `out_h x out_w` (separable Keys
/// cubic, half-pixel centers, edge replication).
pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::contract(
            "bicubic_resize",
            "input must be [B, C, H, W]",
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract(
            "bicubic_resize",
            "output extents must be positive",
        ));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h == 0 || w == 0 {
        return Err(Error::contract(
            "bicubic_resize",
            "input has an empty spatial extent",
        ));
    }
    let rows = resize_axis(x.data(), b * c, h, w, out_h);
    let cols = resize_axis(&rows, b * c * out_h, w, 1, out_w);
    Tensor::from_vec(cols, &[b, c, out_h, out_w])
}

// ---------------------------------------------------------------------------
// Dihedral augmentation

/// Number of elements in the dihedral group of the square.
pub const DIHEDRAL_CODES: u8 = 8;

/// Apply dihedral element `code` (0..8) to `[B, C, H, W]`: bit 2 flips
/// horizontally first, then bits 0-1 rotate by that many quarter turns
/// counterclockwise.
pub fn dihedral_apply<T: Scalar>(x: &Tensor<T>, code: u8) -> Result<Tensor<T>> {
    if code >= DIHEDRAL_CODES {
        return Err(Error::contract(
            "dihedral",
            format!("code {code} out of range 0..{DIHEDRAL_CODES}"),
        ));
    }
    if x.ndim() != 4 {
        return Err(Error::contract("dihedral", "input must be [B, C, H, W]"));
    }
    let mut y = if code & 4 != 0 {
        x.reverse(3)?
    } else {
        x.clone()
    };
    for _ in 0..(code & 3) {
        // 90 deg counterclockwise: y[i, j] = x[j, W-1-i].
        y = y.permute(&[0, 1, 3, 2])?.reverse(2)?;
    }
    Ok(y)
}

/// The code that undoes `dihedral_apply(_, code)`.
pub fn dihedral_inverse(code: u8) -> u8 {
    let (k, flip) = (code & 3, code & 4 != 0);
    if flip {
        // (R^k F)^-1 = F R^-k = R^k F.
        code
    } else {
        (4 - k) % 4
    }
}

// ---------------------------------------------------------------------------
// Patch sampling

/// Where a training patch came from, for failure reports.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub image: String,
    pub lr_x: usize,
    pub lr_y: usize,
    pub augment_code: u8,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} @ lr({}, {}) aug {}",
            self.image, self.lr_x, self.lr_y, self.augment_code
        )
    }
}

struct FullPair<T: Scalar> {
    name: String,
    hr: Tensor<T>,
    lr: Tensor<T>,
}

/// One sampled training example.
pub struct PatchPair<T: Scalar> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub provenance: Provenance,
}

/// Eagerly-loaded training corpus. Every HR image is cropped to a
/// multiple of the scale, degraded once by bicubic downsampling, and
/// kept in memory; batches are aligned random crops of those pairs.
pub struct PatchSampler<T: Scalar> {
    pairs: Vec<FullPair<T>>,
    skipped: Vec<String>,
    scale: usize,
    lr_patch: usize,
}

/// Crop `[1, 3, H, W]` to extents divisible by `scale` and return it with
/// its bicubic LR counterpart.
pub fn degrade<T: Scalar>(hr: &Tensor<T>, scale: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if scale == 0 {
        return Err(Error::contract("degrade", "scale must be positive"));
    }
    let (h, w) = (hr.shape()[2], hr.shape()[3]);
    let (ch, cw) = (h - h % scale, w - w % scale);
    if ch == 0 || cw == 0 {
        return Err(Error::contract(
            "degrade",
            format!("{h}x{w} image smaller than the scale factor {scale}"),
        ));
    }
    let cropped = hr.narrow(2, 0, ch)?.narrow(3, 0, cw)?;
    let lr = bicubic_resize(&cropped, ch / scale, cw / scale)?;
    Ok((cropped, lr))
}

impl<T: Scalar> PatchSampler<T> {
    /// Load every image in `hr_dir`. Images whose LR side would be
    /// smaller than `lr_patch` are skipped with a warning; if nothing
    /// usable remains, that is an error.
    pub fn from_dir(hr_dir: &Path, scale: usize, lr_patch: usize) -> Result<Self> {
        let paths = list_images(hr_dir)?;
        if paths.is_empty() {
            return Err(Error::config(format!(
                "no .png or .ppm images in {}",
                hr_dir.display()
            )));
        }
        Self::from_paths(&paths, scale, lr_patch)
    }

    pub fn from_paths(paths: &[PathBuf], scale: usize, lr_patch: usize) -> Result<Self> {
        if lr_patch == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        let mut pairs = Vec::new();
        let mut skipped = Vec::new();
        for path in paths {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            let hr = load_image::<T>(path)?;
            let (h, w) = (hr.shape()[2], hr.shape()[3]);
            if h / scale < lr_patch || w / scale < lr_patch {
                eprintln!(
                    "warning: skipping {name}: {h}x{w} too small for {lr_patch}x{lr_patch} patches at x{scale}"
                );
                skipped.push(name);
                continue;
            }
            let (hr, lr) = degrade(&hr, scale)?;
            pairs.push(FullPair { name, hr, lr });
        }
        if pairs.is_empty() {
            return Err(Error::config(format!(
                "every image is smaller than {0}x{0} at x{scale}",
                lr_patch
            )));
        }
        Ok(PatchSampler {
            pairs,
            skipped,
            scale,
            lr_patch,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    /// Draw one aligned pair. Consumes exactly four RNG draws (image,
    /// row, column, augmentation code) so sampling is reproducible from
    /// the RNG state alone.
    pub fn sample<R: Rng>(&self, rng: &mut R, augment: bool) -> Result<PatchPair<T>> {
        let idx = rng.gen_range(0..self.pairs.len());
        let pair = &self.pairs[idx];
        let (lh, lw) = (pair.lr.shape()[2], pair.lr.shape()[3]);
        let p = self.lr_patch;
        let lr_y = rng.gen_range(0..=lh - p);
        let lr_x = rng.gen_range(0..=lw - p);
        let code = rng.gen_range(0..DIHEDRAL_CODES);
        let code = if augment { code } else { 0 };
        let r = self.scale;
        let lr = pair.lr.narrow(2, lr_y, p)?.narrow(3, lr_x, p)?;
        let hr = pair
            .hr
            .narrow(2, r * lr_y, r * p)?
            .narrow(3, r * lr_x, r * p)?;
        Ok(PatchPair {
            lr: dihedral_apply(&lr, code)?,
            hr: dihedral_apply(&hr, code)?,
            provenance: Provenance {
                image: pair.name.clone(),
                lr_x,
                lr_y,
                augment_code: code,
            },
        })
    }

    /// Stack `batch` draws into `([B,3,p,p], [B,3,rp,rp])` plus their
    /// provenance.
    pub fn sample_batch<R: Rng>(
        &self,
        rng: &mut R,
        batch: usize,
        augment: bool,
    ) -> Result<(Tensor<T>, Tensor<T>, Vec<Provenance>)> {
        if batch == 0 {
            return Err(Error::contract("sample_batch", "batch must be positive"));
        }
        let mut lrs = Vec::with_capacity(batch);
        let mut hrs = Vec::with_capacity(batch);
        let mut prov = Vec::with_capacity(batch);
        for _ in 0..batch {
            let p = self.sample(rng, augment)?;
            lrs.push(p.lr);
            hrs.push(p.hr);
            prov.push(p.provenance);
        }
        Ok((Tensor::concat(&lrs, 0)?, Tensor::concat(&hrs, 0)?, prov))
    }
}

/// Deterministic RNG for data sampling; `stream` separates independent
/// uses of one seed (parameter init vs. patch sampling).
pub fn sampling_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
