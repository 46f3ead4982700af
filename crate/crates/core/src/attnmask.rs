//! Depth-driven foreground/background separation.
//!
//! A depth map `D` in `[0, 1]` (1 = nearest) acts as a soft attention mask:
//! the foreground is `I * D` and the background `I * (1 - D)`, broadcast over
//! channels. Depth is a constant of the computation and never receives a
//! gradient.

use crate::datapipe::ImageRecord;
use crate::diffcore::{Graph, Shape, Tensor4, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Foreground,
    Background,
}

impl Region {
    pub const BOTH: [Region; 2] = [Region::Foreground, Region::Background];

    pub fn tag(self) -> &'static str {
        match self {
            Region::Foreground => "fg",
            Region::Background => "bg",
        }
    }
}

/// What to do with float depth values outside `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RangePolicy {
    Clamp,
    #[default]
    Reject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DepthMap {
    /// Builds a depth map from row-major floats, applying `policy` to values
    /// outside `[0, 1]`.
    pub fn from_values(
        height: usize,
        width: usize,
        mut values: Vec<f32>,
        policy: RangePolicy,
    ) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::invalid(
                "depth",
                format!("{} values for a {height}x{width} map", values.len()),
            ));
        }
        for (i, v) in values.iter_mut().enumerate() {
            if (0.0..=1.0).contains(v) {
                continue;
            }
            match policy {
                RangePolicy::Clamp if !v.is_nan() => *v = v.clamp(0.0, 1.0),
                _ => {
                    return Err(Error::DepthOutOfRange {
                        row: i / width,
                        col: i % width,
                        value: *v,
                    })
                }
            }
        }
        Ok(DepthMap {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::from_values(
            height,
            width,
            vec![value; height * width],
            RangePolicy::Reject,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// `1 - D`.
    pub fn complement(&self) -> DepthMap {
        DepthMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// 8-bit quantization, for writing depth maps as grayscale images.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Converts a single-channel 8-bit image into a depth map (`v / 255`).
pub fn validate_depth(raw: &ImageRecord) -> Result<DepthMap> {
    if raw.channels != 1 {
        return Err(Error::invalid(
            "validate_depth",
            format!(
                "depth image `{}` has {} channels, expected 1",
                raw.id, raw.channels
            ),
        ));
    }
    let values = raw.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    DepthMap::from_values(raw.height, raw.width, values, RangePolicy::Reject)
}

/// Converts a single-channel float field into a depth map under `policy`.
pub fn validate_depth_f32(
    channels: usize,
    height: usize,
    width: usize,
    values: &[f32],
    policy: RangePolicy,
) -> Result<DepthMap> {
    if channels != 1 {
        return Err(Error::invalid(
            "validate_depth",
            format!("depth field has {channels} channels, expected 1"),
        ));
    }
    DepthMap::from_values(height, width, values.to_vec(), policy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPair {
    pub foreground: Tensor4,
    pub background: Tensor4,
}

/// Per-sample foreground and background weights for a batch, as
/// `N x 1 x H x W` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    fg: Tensor4,
    bg: Tensor4,
}

impl AttentionMask {
    pub fn from_depths(depths: &[DepthMap]) -> Result<Self> {
        let first = depths
            .first()
            .ok_or_else(|| Error::invalid("attention_mask", "no depth maps"))?;
        let (h, w) = (first.height, first.width);
        let mut fg = Vec::with_capacity(depths.len() * h * w);
        for d in depths {
            if (d.height, d.width) != (h, w) {
                return Err(Error::invalid(
                    "attention_mask",
                    format!("depth maps of size {h}x{w} and {}x{}", d.height, d.width),
                ));
            }
            fg.extend_from_slice(&d.values);
        }
        let shape = Shape::new(depths.len(), 1, h, w);
        let fg = Tensor4::new(shape, fg)?;
        let bg = fg.map(|v| 1.0 - v);
        Ok(AttentionMask { fg, bg })
    }

    /// The same depth map for each of `batch` samples.
    pub fn broadcast(depth: &DepthMap, batch: usize) -> Result<Self> {
        Self::from_depths(&vec![depth.clone(); batch])
    }

    pub fn region(&self, region: Region) -> &Tensor4 {
        match region {
            Region::Foreground => &self.fg,
            Region::Background => &self.bg,
        }
    }

    pub fn batch(&self) -> usize {
        self.fg.shape().batch
    }

    fn check(&self, image: Shape) -> Result<()> {
        let m = self.fg.shape();
        if (image.batch, image.height, image.width) != (m.batch, m.height, m.width) {
            return Err(Error::ShapeMismatch {
                op: "split",
                left: image,
                right: m,
            });
        }
        Ok(())
    }

    pub fn split(&self, image: &Tensor4) -> Result<MaskedPair> {
        self.check(image.shape())?;
        let mut g = Graph::new();
        let v = g.constant(image.clone());
        let (fg, bg) = self.split_var(&mut g, v)?;
        Ok(MaskedPair {
            foreground: g.value(fg).clone(),
            background: g.value(bg).clone(),
        })
    }

    /// Masks a recorded image; gradients reach `image` weighted by the mask.
    pub fn mask_var(&self, graph: &mut Graph, image: Var, region: Region) -> Result<Var> {
        self.check(graph.shape(image))?;
        graph.mul_const(image, self.region(region))
    }

    pub fn split_var(&self, graph: &mut Graph, image: Var) -> Result<(Var, Var)> {
        Ok((
            self.mask_var(graph, image, Region::Foreground)?,
            self.mask_var(graph, image, Region::Background)?,
        ))
    }
}

/// Splits every sample of `image` with one shared depth map.
pub fn split(image: &Tensor4, depth: &DepthMap) -> Result<MaskedPair> {
    let s = image.shape();
    if (s.height, s.width) != (depth.height, depth.width) {
        return Err(Error::invalid(
            "split",
            format!(
                "image {s} does not match depth map {}x{}",
                depth.height, depth.width
            ),
        ));
    }
    AttentionMask::broadcast(depth, s.batch)?.split(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::rand_uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut rng)
    }

    #[test]
    fn full_foreground_limit() {
        let img = image(1);
        let pair = split(&img, &DepthMap::constant(4, 5, 1.0).unwrap()).unwrap();
        assert_eq!(pair.foreground, img);
        assert!(pair.background.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_split_is_symmetric() {
        let img = image(2);
        let pair = split(&img, &DepthMap::constant(4, 5, 0.5).unwrap()).unwrap();
        assert_eq!(pair.foreground, pair.background);
        assert_eq!(pair.foreground, img.map(|v| v / 2.0));
    }

    #[test]
    fn dimension_mismatch_errors() {
        let img = image(3);
        assert!(split(&img, &DepthMap::constant(4, 4, 0.5).unwrap()).is_err());
    }

    #[test]
    fn depth_policies() {
        let reject = DepthMap::from_values(1, 2, vec![0.3, 1.2], RangePolicy::Reject).unwrap_err();
        assert!(matches!(
            reject,
            Error::DepthOutOfRange { row: 0, col: 1, .. }
        ));
        let clamped = DepthMap::from_values(1, 2, vec![0.3, 1.2], RangePolicy::Clamp).unwrap();
        assert_eq!(clamped.values(), &[0.3, 1.0]);
    }

    #[test]
    fn eight_bit_depth_scaling() {
        let raw = ImageRecord::new("d", 1, 1, 2, vec![255, 0]).unwrap();
        let d = validate_depth(&raw).unwrap();
        assert_eq!(d.values(), &[1.0, 0.0]);
        let rgb = ImageRecord::new("c", 3, 1, 1, vec![1, 2, 3]).unwrap();
        assert!(validate_depth(&rgb).is_err());
    }

    #[test]
    fn mask_gradient_is_depth_weighted() {
        let depth = DepthMap::from_values(1, 2, vec![0.25, 0.9], RangePolicy::Reject).unwrap();
        let mask = AttentionMask::broadcast(&depth, 1).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor4::new(Shape::new(1, 1, 1, 2), vec![0.4, -0.7]).unwrap(),
            true,
        );
        let (fg, bg) = mask.split_var(&mut g, x).unwrap();
        let lf = g.mean(fg);
        let lb = g.mean(bg);
        let gf = g.backward(lf).unwrap();
        let gb = g.backward(lb).unwrap();
        assert_eq!(gf.get(x).unwrap().data(), &[0.125, 0.45]);
        let b = gb.get(x).unwrap().data();
        assert!((b[0] - 0.375).abs() < 1e-7 && (b[1] - 0.05).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn partition_identity(seed in 0u64..1000, d in proptest::collection::vec(0.0f32..=1.0, 20)) {
            let img = image(seed);
            let depth = DepthMap::from_values(4, 5, d, RangePolicy::Reject).unwrap();
            let pair = split(&img, &depth).unwrap();
            for ((f, b), x) in pair.foreground.data().iter().zip(pair.background.data()).zip(img.data()) {
                prop_assert!((f + b - x).abs() <= 1e-6);
            }
            let swapped = split(&img, &depth.complement()).unwrap();
            prop_assert_eq!(swapped.foreground, pair.background);
            // 1 - (1 - d) can differ from d by one rounding step.
            for (s, f) in swapped.background.data().iter().zip(pair.foreground.data()) {
                prop_assert!((s - f).abs() <= 1e-7);
            }
        }
    }
}
