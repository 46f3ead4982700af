//! No-reference underwater image quality: colorfulness (UICM), sharpness
//! (UISM), and contrast (UIConM), combined linearly.

use serde::{Deserialize, Serialize};

use crate::datapipe::ImageRecord;
use crate::error::{Error, Result};

pub const UICM_WEIGHT: f64 = 0.0282;
pub const UISM_WEIGHT: f64 = 0.2953;
pub const UICONM_WEIGHT: f64 = 3.5753;
pub const BLOCK: usize = 8;
/// Fraction trimmed from each tail of the sorted color-difference signals.
pub const TRIM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UiqmParts {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

/// Mean of `values` after dropping `ceil(TRIM K)` smallest and
/// `floor(TRIM K)` largest entries.
fn trimmed_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    let lo = (TRIM * k as f64).ceil() as usize;
    let hi = (TRIM * k as f64).floor() as usize;
    let kept = &values[lo..k - hi];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn spread(values: &[f64], center: f64) -> f64 {
    values.iter().map(|v| (v - center).powi(2)).sum::<f64>() / values.len() as f64
}

/// `-0.0268 |mu| + 0.1586 sqrt(sigma^2)` over the opponent signals
/// `RG = R - G` and `YB = (R + G) / 2 - B`.
pub fn uicm(image: &ImageRecord) -> Result<f64> {
    check_rgb(image)?;
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    let mut rg: Vec<f64> = r
        .iter()
        .zip(g)
        .map(|(&r, &g)| r as f64 - g as f64)
        .collect();
    let mut yb: Vec<f64> = (0..r.len())
        .map(|i| (r[i] as f64 + g[i] as f64) / 2.0 - b[i] as f64)
        .collect();
    let mu_rg = trimmed_mean(&mut rg);
    let mu_yb = trimmed_mean(&mut yb);
    let s_rg = spread(&rg, mu_rg);
    let s_yb = spread(&yb, mu_yb);
    Ok(-0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * (s_rg + s_yb).sqrt())
}

/// Sobel gradient magnitude with replicated borders, rescaled so the
/// maximum is 255 (left at zero for flat planes).
fn sobel_magnitude(plane: &[u8], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        plane[y * w + x] as f64
    };
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        mag.iter_mut().for_each(|v| *v *= 255.0 / peak);
    }
    mag
}

/// Blocks of `BLOCK x BLOCK` tiling the top-left of an `h x w` plane.
fn blocks(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let (k1, k2) = (h / BLOCK, w / BLOCK);
    (0..k1).flat_map(move |by| (0..k2).map(move |bx| (by * BLOCK, bx * BLOCK)))
}

fn block_extrema(planes: &[&[f64]], w: usize, y0: usize, x0: usize) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in planes {
        for y in y0..y0 + BLOCK {
            for &v in &p[y * w + x0..y * w + x0 + BLOCK] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    (lo, hi)
}

/// `2 / (k1 k2) * sum ln(max / min)` over blocks; blocks with a zero
/// extremum contribute 0.
fn eme(plane: &[f64], h: usize, w: usize) -> f64 {
    let n = (h / BLOCK) * (w / BLOCK);
    let total: f64 = blocks(h, w)
        .map(|(y0, x0)| {
            let (lo, hi) = block_extrema(&[plane], w, y0, x0);
            if lo <= 0.0 || hi <= 0.0 {
                0.0
            } else {
                (hi / lo).ln()
            }
        })
        .sum();
    2.0 / n as f64 * total
}

/// Luma-weighted EME of the Sobel edge maps `sobel(c) * c`.
pub fn uism(image: &ImageRecord) -> Result<f64> {
    check_rgb(image)?;
    let (h, w) = (image.height, image.width);
    let weights = [0.299, 0.587, 0.114];
    Ok((0..3)
        .map(|c| {
            let plane = image.plane(c);
            let edges: Vec<f64> = sobel_magnitude(plane, h, w)
                .iter()
                .zip(plane)
                .map(|(&m, &v)| m * v as f64)
                .collect();
            weights[c] * eme(&edges, h, w)
        })
        .sum())
}

/// `-1 / (k1 k2) * sum t ln t` with the per-block contrast
/// `t = (max - min) / (max + min)` taken jointly over the three channels;
/// blocks where `t` or the denominator is 0 contribute 0.
pub fn uiconm(image: &ImageRecord) -> Result<f64> {
    check_rgb(image)?;
    let (h, w) = (image.height, image.width);
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|c| image.plane(c).iter().map(|&v| v as f64).collect())
        .collect();
    let refs: Vec<&[f64]> = planes.iter().map(Vec::as_slice).collect();
    let n = (h / BLOCK) * (w / BLOCK);
    let total: f64 = blocks(h, w)
        .map(|(y0, x0)| {
            let (lo, hi) = block_extrema(&refs, w, y0, x0);
            let (top, bot) = (hi - lo, hi + lo);
            if top == 0.0 || bot == 0.0 {
                0.0
            } else {
                let t = top / bot;
                t * t.ln()
            }
        })
        .sum();
    Ok(-total / n as f64)
}

pub fn uiqm_parts(image: &ImageRecord) -> Result<UiqmParts> {
    let (uicm, uism, uiconm) = (uicm(image)?, uism(image)?, uiconm(image)?);
    Ok(UiqmParts {
        uicm,
        uism,
        uiconm,
        uiqm: UICM_WEIGHT * uicm + UISM_WEIGHT * uism + UICONM_WEIGHT * uiconm,
    })
}

pub fn uiqm(image: &ImageRecord) -> Result<f64> {
    Ok(uiqm_parts(image)?.uiqm)
}

fn check_rgb(image: &ImageRecord) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::invalid("uiqm", format!("`{}` is not RGB", image.id)));
    }
    if image.height < BLOCK || image.width < BLOCK {
        return Err(Error::invalid(
            "uiqm",
            format!(
                "`{}` is {}x{}, smaller than one {BLOCK}x{BLOCK} block",
                image.id, image.height, image.width
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize, lo: u8, hi: u8) -> ImageRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..3 * h * w).map(|_| rng.random_range(lo..=hi)).collect();
        ImageRecord::new("r", 3, h, w, px).unwrap()
    }

    #[test]
    fn constant_gray_is_zero() {
        for v in [0u8, 1, 128, 255] {
            let img = ImageRecord::new("g", 3, 16, 16, vec![v; 768]).unwrap();
            let p = uiqm_parts(&img).unwrap();
            assert_eq!(
                (p.uicm, p.uism, p.uiconm, p.uiqm),
                (0.0, 0.0, 0.0, 0.0),
                "gray {v}"
            );
        }
    }

    #[test]
    fn uicm_is_shift_invariant() {
        let img = random(3, 16, 16, 0, 200);
        let shifted =
            ImageRecord::new("s", 3, 16, 16, img.pixels.iter().map(|v| v + 40).collect()).unwrap();
        assert_eq!(uicm(&img).unwrap(), uicm(&shifted).unwrap());
    }

    #[test]
    fn neutral_opponent_signals_give_zero_uicm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plane: Vec<u8> = (0..256).map(|_| rng.random()).collect();
        let px = [plane.clone(), plane.clone(), plane].concat();
        let img = ImageRecord::new("n", 3, 16, 16, px).unwrap();
        assert_eq!(uicm(&img).unwrap(), 0.0);
    }

    #[test]
    fn combination_is_definitional() {
        for seed in 0..4 {
            let p = uiqm_parts(&random(seed, 24, 32, 0, 255)).unwrap();
            let direct = 0.0282 * p.uicm + 0.2953 * p.uism + 3.5753 * p.uiconm;
            assert!((p.uiqm - direct).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn trimmed_mean_drops_tails() {
        let mut v: Vec<f64> = (1..=10).map(f64::from).collect();
        v[9] = 1000.0;
        // ceil(1) = 1 dropped low, floor(1) = 1 dropped high.
        assert_eq!(trimmed_mean(&mut v), 5.5);
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(uiqm(&random(1, 7, 16, 0, 255)).is_err());
    }
}
