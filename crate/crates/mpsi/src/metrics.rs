//! Fidelity metrics (PSNR, SSIM) and difference-map visualization.
//!
//! Both metrics follow the standard super-resolution protocol: convert to
//! BT.601 luma, crop a border of `scale` pixels, and compare against a
//! peak of 1.0. All accumulation runs in `f64` regardless of the tensor
//! scalar type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How to compare two images.
#[derive(Debug, Clone, Copy)]
pub struct EvalProtocol {
    /// Pixels stripped from every side before comparison (conventionally
    /// the upscaling factor).
    pub border_crop: usize,
    /// Compare BT.601 luma instead of raw RGB channels.
    pub on_luma: bool,
    /// Dynamic range ceiling.
    pub peak: f64,
}

impl EvalProtocol {
    pub fn for_scale(scale: usize) -> Self {
        EvalProtocol {
            border_crop: scale,
            on_luma: true,
            peak: 1.0,
        }
    }
}

/// BT.601 luma of `[B, 3, H, W]`: `0.299 R + 0.587 G + 0.114 B`,
/// returned as `[B][H][W]` planes in `f64`.
fn luma_planes<T: Scalar>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let d = x.data();
    (0..b)
        .map(|bi| {
            let base = bi * 3 * hw;
            (0..hw)
                .map(|i| {
                    0.299 * d[base + i].to_c()
                        + 0.587 * d[base + hw + i].to_c()
                        + 0.114 * d[base + 2 * hw + i].to_c()
                })
                .collect()
        })
        .collect()
}

/// Channel planes of `[B, C, H, W]` as `f64`.
fn raw_planes<T: Scalar>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let d = x.data();
    (0..b * c)
        .map(|p| d[p * hw..(p + 1) * hw].iter().map(|v| v.to_c()).collect())
        .collect()
}

/// Per-plane pixel rows for both images, plus the cropped plane extents.
type PlanePairs = (Vec<Vec<f64>>, Vec<Vec<f64>>, usize, usize);

fn comparison_planes<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    protocol: EvalProtocol,
) -> Result<PlanePairs> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.ndim() != 4 || a.shape()[1] != 3 {
        return Err(Error::contract(op, "images must be [B, 3, H, W]"));
    }
    let (h, w) = (a.shape()[2], a.shape()[3]);
    let crop = protocol.border_crop;
    if h <= 2 * crop || w <= 2 * crop {
        return Err(Error::contract(
            op,
            format!("{h}x{w} image vanishes after cropping {crop} from each side"),
        ));
    }
    let (ch, cw) = (h - 2 * crop, w - 2 * crop);
    let crop_plane = |planes: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        planes
            .into_iter()
            .map(|p| {
                let mut out = Vec::with_capacity(ch * cw);
                for y in 0..ch {
                    let row = (y + crop) * w + crop;
                    out.extend_from_slice(&p[row..row + cw]);
                }
                out
            })
            .collect()
    };
    let (pa, pb) = if protocol.on_luma {
        (luma_planes(a), luma_planes(b))
    } else {
        (raw_planes(a), raw_planes(b))
    };
    Ok((crop_plane(pa), crop_plane(pb), ch, cw))
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, protocol: EvalProtocol) -> Result<f64> {
    let (pa, pb, _, _) = comparison_planes("psnr", a, b, protocol)?;
    let mut se = 0.0;
    let mut n = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y) {
            se += (u - v) * (u - v);
        }
        n += x.len();
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (protocol.peak * protocol.peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 11-tap Gaussian, sigma 1.5.
fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// Mean structural similarity over all valid 11x11 windows (no padding).
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, protocol: EvalProtocol) -> Result<f64> {
    let (pa, pb, h, w) = comparison_planes("ssim", a, b, protocol)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!("cropped image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let taps = ssim_taps();
    let c1 = (SSIM_K1 * protocol.peak).powi(2);
    let c2 = (SSIM_K2 * protocol.peak).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);

    // Separable weighted moments: blur rows then columns for each of the
    // five fields (x, y, x^2, y^2, xy).
    let blur = |p: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    acc += t * p[y * w + x + k];
                }
                rows[y * ow + x] = acc;
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    acc += t * rows[(y + k) * ow + x];
                }
                out[y * ow + x] = acc;
            }
        }
        out
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let mx = blur(x);
        let my = blur(y);
        let mxx = blur(&xx);
        let myy = blur(&yy);
        let mxy = blur(&xy);
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            let num = (2.0 * ux * uy + c1) * (2.0 * cxy + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            total += num / den;
        }
        count += oh * ow;
    }
    Ok(total / count as f64)
}

/// Color-ramp stops for the difference map: cool (small error) through
/// white to warm (large error).
const RAMP_LOW: [f64; 3] = [0.10, 0.15, 0.60];
const RAMP_MID: [f64; 3] = [0.95, 0.95, 0.95];
const RAMP_HIGH: [f64; 3] = [0.55, 0.05, 0.05];

fn ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let mix = |a: [f64; 3], b: [f64; 3], u: f64| {
        [
            a[0] + (b[0] - a[0]) * u,
            a[1] + (b[1] - a[1]) * u,
            a[2] + (b[2] - a[2]) * u,
        ]
    };
    if t <= 0.5 {
        mix(RAMP_LOW, RAMP_MID, 2.0 * t)
    } else {
        mix(RAMP_MID, RAMP_HIGH, 2.0 * t - 1.0)
    }
}

/// Visualize per-pixel luma error of `sr` against `hr` as `[1, 3, H, W]`.
/// Errors are normalized by the 99th percentile (so a few outliers cannot
/// wash out the map) and mapped through a blue-white-red ramp.
pub fn difference_map<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>) -> Result<Tensor<T>> {
    if sr.shape() != hr.shape() {
        return Err(Error::ShapeMismatch {
            op: "difference_map",
            lhs: sr.shape().to_vec(),
            rhs: hr.shape().to_vec(),
        });
    }
    if sr.ndim() != 4 || sr.shape()[0] != 1 || sr.shape()[1] != 3 {
        return Err(Error::contract("difference_map", "expected [1, 3, H, W]"));
    }
    let (h, w) = (sr.shape()[2], sr.shape()[3]);
    let la = &luma_planes(sr)[0];
    let lb = &luma_planes(hr)[0];
    let diff: Vec<f64> = la.iter().zip(lb).map(|(a, b)| (a - b).abs()).collect();
    let mut sorted = diff.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite differences"));
    let p99 = sorted[((sorted.len() - 1) as f64 * 0.99).floor() as usize];
    let mut out = vec![T::zero(); 3 * h * w];
    for (i, d) in diff.iter().enumerate() {
        let t = if p99 > 0.0 { d / p99 } else { 0.0 };
        let rgb = ramp(t);
        for c in 0..3 {
            out[c * h * w + i] = T::from_c(rgb[c]);
        }
    }
    Tensor::from_vec(out, &[1, 3, h, w])
}

/// One scored image in an evaluation run.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// TSV report: header, one row per image, and an `average` summary row.
pub fn render_eval_tsv(rows: &[EvalRow]) -> String {
    let mut out = String::from("image\tpsnr\tssim\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.4}\t{:.6}\n", r.name, r.psnr, r.ssim));
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mp = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let ms = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        out.push_str(&format!("average\t{mp:.4}\t{ms:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(values: &[f64], h: usize, w: usize) -> Tensor<f64> {
        assert_eq!(values.len(), 3 * h * w);
        Tensor::from_vec(values.to_vec(), &[1, 3, h, w]).unwrap()
    }

    fn constant(v: f64, h: usize, w: usize) -> Tensor<f64> {
        img(&vec![v; 3 * h * w], h, w)
    }

    fn no_crop() -> EvalProtocol {
        EvalProtocol {
            border_crop: 0,
            on_luma: true,
            peak: 1.0,
        }
    }

    #[test]
    fn psnr_of_half_offset_is_6_0206_db() {
        let a = constant(0.0, 8, 8);
        let b = constant(0.5, 8, 8);
        let got = psnr(&a, &b, no_crop()).unwrap();
        assert!((got - 6.020599913279624).abs() < 1e-12, "psnr = {got}");
    }

    #[test]
    fn psnr_of_tenth_offset_is_20_db() {
        let a = constant(0.4, 6, 9);
        let b = constant(0.5, 6, 9);
        let got = psnr(&a, &b, no_crop()).unwrap();
        assert!((got - 20.0).abs() < 1e-12, "psnr = {got}");
    }

    #[test]
    fn psnr_identical_images_is_infinite() {
        let a = constant(0.77, 5, 5);
        assert_eq!(psnr(&a, &a, no_crop()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn border_crop_excludes_frame_errors() {
        // Corrupt only the outermost ring; a 1-pixel crop must hide it.
        let h = 6;
        let mut vals = vec![0.5; 3 * h * h];
        for c in 0..3 {
            for i in 0..h {
                vals[c * h * h + i] = 0.9; // top row
                vals[c * h * h + (h - 1) * h + i] = 0.9; // bottom row
                vals[c * h * h + i * h] = 0.9; // left col
                vals[c * h * h + i * h + h - 1] = 0.9; // right col
            }
        }
        let dirty = img(&vals, h, h);
        let clean = constant(0.5, h, h);
        let cropped = EvalProtocol {
            border_crop: 1,
            on_luma: true,
            peak: 1.0,
        };
        assert_eq!(psnr(&dirty, &clean, cropped).unwrap(), f64::INFINITY);
        assert!(psnr(&dirty, &clean, no_crop()).unwrap() < 30.0);
    }

    #[test]
    fn luma_weights_are_bt601() {
        // Pure-channel images: PSNR against black reveals each weight.
        let h = 4;
        let mut r = vec![0.0; 3 * h * h];
        r[..h * h].iter_mut().for_each(|v| *v = 1.0);
        let red = img(&r, h, h);
        let black = constant(0.0, h, h);
        // luma of pure red = 0.299 everywhere -> mse = 0.299^2.
        let got = psnr(&black, &red, no_crop()).unwrap();
        let want = 10.0 * (1.0 / (0.299_f64 * 0.299)).log10();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_identical_images_is_one() {
        let mut vals = vec![0.0; 3 * 16 * 16];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f64 / 101.0;
        }
        let a = img(&vals, 16, 16);
        let got = ssim(&a, &a, no_crop()).unwrap();
        assert!((got - 1.0).abs() < 1e-12, "ssim = {got}");
    }

    #[test]
    fn ssim_constant_pair_closed_form() {
        // mu_x = 0.3, mu_y = 0.7, all variances zero:
        // ssim = (2 mu_x mu_y + C1) C2 / ((mu_x^2 + mu_y^2 + C1)(C2))
        //      = 0.4201 / 0.5801 = 0.72418548526116...
        let a = constant(0.3, 16, 16);
        let b = constant(0.7, 16, 16);
        let got = ssim(&a, &b, no_crop()).unwrap();
        assert!((got - 0.724185485261162).abs() < 1e-9, "ssim = {got}");
    }

    #[test]
    fn ssim_rejects_too_small_images() {
        let a = constant(0.5, 8, 8);
        assert!(ssim(&a, &a, no_crop()).is_err());
        let b = constant(0.5, 14, 14);
        let crop2 = EvalProtocol {
            border_crop: 2,
            on_luma: true,
            peak: 1.0,
        };
        assert!(ssim(&b, &b, crop2).is_err()); // 10x10 after crop
    }

    #[test]
    fn metrics_reject_mismatched_shapes() {
        let a = constant(0.5, 8, 8);
        let b = constant(0.5, 8, 9);
        assert!(psnr(&a, &b, no_crop()).is_err());
        assert!(ssim(&a, &b, no_crop()).is_err());
    }

    #[test]
    fn difference_map_ramp_endpoints_and_monotonicity() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(ramp(0.0), RAMP_LOW));
        assert!(close(ramp(0.5), RAMP_MID));
        assert!(close(ramp(1.0), RAMP_HIGH));
        // Both halves pass through white, so no single channel is monotone;
        // the red-minus-blue "warmth" is, rising with the error.
        let mut prev = ramp(0.0);
        for i in 1..=20 {
            let cur = ramp(i as f64 / 20.0);
            assert!(
                cur[0] - cur[2] >= prev[0] - prev[2] - 1e-12,
                "warmth not monotone at {i}"
            );
            prev = cur;
        }
    }

    #[test]
    fn difference_map_normalizes_by_p99() {
        // One large outlier plus small errors: the p99 normalization keeps
        // the small errors visible (above the ramp floor).
        let h = 10;
        let mut sr = vec![0.5; 3 * h * h];
        for c in 0..3 {
            sr[c * h * h] = 1.0; // single big error
            for i in 1..h * h {
                sr[c * h * h + i] = 0.5 + 0.02; // uniform small error
            }
        }
        let sr = img(&sr, h, h);
        let hr = constant(0.5, h, h);
        let map = difference_map(&sr, &hr).unwrap();
        assert_eq!(map.shape(), &[1, 3, h, h]);
        // p99 is the small error level, so ordinary pixels sit at ramp(1).
        let hw = h * h;
        let last = map.data()[hw - 1];
        assert!((last - RAMP_HIGH[0]).abs() < 1e-9, "got {last}");
        for v in map.data() {
            assert!(v.is_finite());
        }
        // Identical images: map is the ramp floor everywhere.
        let flat = difference_map(&hr, &hr).unwrap();
        for y in 0..h {
            assert!((flat.data()[y] - RAMP_LOW[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_tsv_layout() {
        let rows = vec![
            EvalRow {
                name: "a.png".into(),
                psnr: 31.25,
                ssim: 0.91,
            },
            EvalRow {
                name: "b.png".into(),
                psnr: 28.75,
                ssim: 0.89,
            },
        ];
        let tsv = render_eval_tsv(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "image\tpsnr\tssim");
        assert_eq!(lines[1], "a.png\t31.2500\t0.910000");
        assert_eq!(lines[3], "average\t30.0000\t0.900000");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn eval_tsv_with_infinite_psnr() {
        let rows = vec![EvalRow {
            name: "x.png".into(),
            psnr: f64::INFINITY,
            ssim: 1.0,
        }];
        let tsv = render_eval_tsv(&rows);
        assert!(tsv.contains("x.png\tinf\t1.000000"));
    }
}
