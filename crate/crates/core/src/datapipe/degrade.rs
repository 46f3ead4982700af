//! Attenuation-plus-backscatter degradation.
//!
//! With scene distance `d = 1 - depth`, channel `c` transmits
//! `t = exp(-beta_c * d)` and the observed value is
//! `clean * t + B_c * (1 - t)`. A per-channel contrast squeeze toward the
//! channel mean and seeded Gaussian sensor noise follow.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attnmask::DepthMap;
use crate::datapipe::{quantize, ImageRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeParams {
    /// Attenuation per unit distance for R, G, B.
    pub beta: [f64; 3],
    /// Veil color approached by fully attenuated pixels, in 8-bit units.
    pub backscatter: [f64; 3],
    /// In (0, 1]; 1 keeps contrast.
    pub contrast_gain: f64,
    /// Gaussian noise standard deviation, in 8-bit units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradeParams {
    /// The blue-green "default" preset.
    fn default() -> Self {
        DegradeParams {
            beta: [1.8, 0.9, 0.4],
            backscatter: [20.0, 120.0, 140.0],
            contrast_gain: 0.7,
            noise_sigma: 2.0,
            seed: 0,
        }
    }
}

impl DegradeParams {
    pub const PRESETS: [&'static str; 3] = ["default", "mild", "clear"];

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "mild" => Some(DegradeParams {
                beta: [0.9, 0.45, 0.2],
                backscatter: [30.0, 110.0, 120.0],
                contrast_gain: 0.85,
                noise_sigma: 1.0,
                seed: 0,
            }),
            "clear" => Some(DegradeParams {
                beta: [0.0; 3],
                backscatter: [0.0; 3],
                contrast_gain: 1.0,
                noise_sigma: 0.0,
                seed: 0,
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [r, g, b] = self.beta;
        if !(r >= g && g >= b && b >= 0.0) {
            return Err(Error::Config(format!(
                "attenuation must satisfy beta_R >= beta_G >= beta_B >= 0, got {:?}",
                self.beta
            )));
        }
        if self.backscatter.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::Config(format!(
                "backscatter {:?} outside [0, 255]",
                self.backscatter
            )));
        }
        if !(self.contrast_gain > 0.0 && self.contrast_gain <= 1.0) {
            return Err(Error::Config(format!(
                "contrast_gain {} outside (0, 1]",
                self.contrast_gain
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma {} invalid",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Attenuated and veiled values before contrast and noise, as `f64`.
pub(crate) fn transmit(clean: &ImageRecord, depth: &DepthMap, params: &DegradeParams) -> Vec<f64> {
    let n = clean.height * clean.width;
    let mut out = Vec::with_capacity(clean.pixels.len());
    for c in 0..clean.channels {
        let (beta, veil) = (params.beta[c], params.backscatter[c]);
        for (i, &p) in clean.plane(c).iter().enumerate().take(n) {
            let distance = 1.0 - depth.values()[i] as f64;
            let t = (-beta * distance).exp();
            out.push(p as f64 * t + veil * (1.0 - t));
        }
    }
    out
}

pub fn degrade(
    clean: &ImageRecord,
    depth: &DepthMap,
    params: &DegradeParams,
) -> Result<ImageRecord> {
    params.validate()?;
    if (depth.height(), depth.width()) != (clean.height, clean.width) {
        return Err(Error::invalid(
            "degrade",
            format!(
                "image {}x{} vs depth {}x{}",
                clean.height,
                clean.width,
                depth.height(),
                depth.width()
            ),
        ));
    }
    if clean.channels != 3 {
        return Err(Error::invalid("degrade", "expected an RGB image"));
    }
    let n = clean.height * clean.width;
    let mut values = transmit(clean, depth, params);
    for plane in values.chunks_mut(n) {
        let mean = plane.iter().sum::<f64>() / n as f64;
        plane
            .iter_mut()
            .for_each(|v| *v = mean + params.contrast_gain * (*v - mean));
    }
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let noise = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
        values.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let pixels = values.into_iter().map(quantize).collect();
    let mut out = ImageRecord::new(clean.id.clone(), 3, clean.height, clean.width, pixels)?;
    out.source = None;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(value: u8, h: usize, w: usize) -> ImageRecord {
        ImageRecord::new("f", 3, h, w, vec![value; 3 * h * w]).unwrap()
    }

    #[test]
    fn zero_attenuation_is_identity() {
        let clean = ImageRecord::new("c", 3, 2, 2, (0..12).map(|v| v * 20).collect()).unwrap();
        let depth = DepthMap::constant(2, 2, 0.3).unwrap();
        let out = degrade(&clean, &depth, &DegradeParams::preset("clear").unwrap()).unwrap();
        assert_eq!(out.pixels, clean.pixels);
    }

    #[test]
    fn half_transmission() {
        let ln2 = std::f64::consts::LN_2;
        let params = DegradeParams {
            beta: [ln2; 3],
            backscatter: [50.0; 3],
            contrast_gain: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        };
        let depth = DepthMap::constant(1, 1, 0.0).unwrap();
        let v = transmit(&flat(200, 1, 1), &depth, &params);
        assert!(v.iter().all(|&x| (x - 125.0).abs() < 1e-9));
        let out = degrade(&flat(200, 1, 1), &depth, &params).unwrap();
        assert_eq!(out.pixels, vec![125; 3]);
    }

    #[test]
    fn heavy_attenuation_reaches_veil() {
        let params = DegradeParams {
            beta: [60.0, 50.0, 40.0],
            backscatter: [20.0, 120.0, 140.0],
            contrast_gain: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        };
        let out = degrade(
            &flat(250, 2, 2),
            &DepthMap::constant(2, 2, 0.0).unwrap(),
            &params,
        )
        .unwrap();
        assert_eq!(out.plane(0), &[20; 4]);
        assert_eq!(out.plane(1), &[120; 4]);
        assert_eq!(out.plane(2), &[140; 4]);
    }

    #[test]
    fn larger_beta_moves_toward_veil() {
        let clean =
            ImageRecord::new("c", 3, 1, 3, vec![200, 10, 90, 30, 250, 60, 255, 0, 100]).unwrap();
        let depth = DepthMap::from_values(1, 3, vec![0.0, 0.4, 0.8], Default::default()).unwrap();
        let base = DegradeParams {
            noise_sigma: 0.0,
            contrast_gain: 1.0,
            ..DegradeParams::default()
        };
        let mut more = base.clone();
        more.beta = [2.5, 0.9, 0.4];
        let (a, b) = (
            transmit(&clean, &depth, &base),
            transmit(&clean, &depth, &more),
        );
        for i in 0..3 {
            let veil = base.backscatter[0];
            assert!((b[i] - veil).abs() < (a[i] - veil).abs());
        }
    }

    #[test]
    fn rejects_misordered_attenuation() {
        let p = DegradeParams {
            beta: [0.1, 0.9, 0.4],
            ..DegradeParams::default()
        };
        assert!(p.validate().is_err());
    }
}
