use serde::{Deserialize, Serialize};

use crate::datapipe::ImageRecord;
use crate::error::{Error, Result};
use crate::metrics::psnr::check_dims;

pub const C1: f64 = (255.0 * 0.01) * (255.0 * 0.01);
pub const C2: f64 = (255.0 * 0.03) * (255.0 * 0.03);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimWindow {
    /// One uniform window covering the whole image.
    Global,
    /// Normalized Gaussian window slid over every fully contained position.
    Gaussian { size: usize, sigma: f64 },
}

impl Default for SsimWindow {
    fn default() -> Self {
        SsimWindow::Gaussian {
            size: 11,
            sigma: 1.5,
        }
    }
}

/// ITU-R BT.601 luma, or the single channel of a grayscale image.
pub fn luma(image: &ImageRecord) -> Vec<f64> {
    if image.channels == 1 {
        return image.pixels.iter().map(|&v| v as f64).collect();
    }
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    (0..r.len())
        .map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64)
        .collect()
}

fn index(mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable correlation of a `h x w` plane with `k x k`
/// weights `kernel[i] * kernel[j]`.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| kernel[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| kernel[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM of two `h x w` planes. Window statistics are weighted moments
/// `E[a]`, `E[a^2] - E[a]^2`, `E[ab] - E[a]E[b]`.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, window: SsimWindow) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w || a.is_empty() {
        return Err(Error::invalid("ssim", "plane sizes disagree"));
    }
    match window {
        SsimWindow::Global => {
            let n = a.len() as f64;
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (&x, &y) in a.iter().zip(b) {
                sa += x;
                sb += y;
                saa += x * x;
                sbb += y * y;
                sab += x * y;
            }
            let (ma, mb) = (sa / n, sb / n);
            Ok(index(
                ma,
                mb,
                saa / n - ma * ma,
                sbb / n - mb * mb,
                sab / n - ma * mb,
            ))
        }
        SsimWindow::Gaussian { size, sigma } => {
            if size == 0 || size > h || size > w {
                return Err(Error::invalid(
                    "ssim",
                    format!("{size}x{size} window does not fit a {h}x{w} image"),
                ));
            }
            if sigma.is_nan() || sigma <= 0.0 {
                return Err(Error::invalid("ssim", "window sigma must be positive"));
            }
            let kern = gaussian_kernel(size, sigma);
            let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
                a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
            };
            let ma = filter_valid(a, h, w, &kern);
            let mb = filter_valid(b, h, w, &kern);
            let maa = filter_valid(&prod(|x, _| x * x), h, w, &kern);
            let mbb = filter_valid(&prod(|_, y| y * y), h, w, &kern);
            let mab = filter_valid(&prod(|x, y| x * y), h, w, &kern);
            let total: f64 = (0..ma.len())
                .map(|i| {
                    let (x, y) = (ma[i], mb[i]);
                    index(x, y, maa[i] - x * x, mbb[i] - y * y, mab[i] - x * y)
                })
                .sum();
            Ok(total / ma.len() as f64)
        }
    }
}

/// SSIM on luma; RGB inputs are converted first.
pub fn ssim(x: &ImageRecord, y: &ImageRecord, window: SsimWindow) -> Result<f64> {
    check_dims("ssim", x, y)?;
    ssim_plane(&luma(x), &luma(y), x.height, x.width, window)
}
