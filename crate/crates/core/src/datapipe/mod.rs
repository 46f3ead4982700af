//! Image I/O, dataset layouts, and the synthetic underwater degradation
//! generator.

mod degrade;
mod manifest;
mod pnm;
mod synth;

use std::path::{Path, PathBuf};

pub use degrade::{degrade, DegradeParams};
pub use manifest::{
    load_euvp_layout, DatasetManifest, DepthFallback, Layout, SampleFiles, Split, Splits,
    MANIFEST_FILE,
};
pub use synth::{generate_synthetic_dataset, render_scene};

use crate::attnmask::DepthMap;
use crate::diffcore::{Shape, Tensor4};
use crate::error::{Error, Result};

/// An 8-bit image stored planar (`channels x height x width`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub source: Option<PathBuf>,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if !matches!(channels, 1 | 3) || height == 0 || width == 0 {
            return Err(Error::invalid(
                "image",
                format!("unsupported geometry {channels}x{height}x{width}"),
            ));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::invalid(
                "image",
                format!(
                    "{} pixels for a {channels}x{height}x{width} image",
                    pixels.len()
                ),
            ));
        }
        Ok(ImageRecord {
            id: id.into(),
            channels,
            height,
            width,
            pixels,
            source: None,
        })
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &ImageRecord) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    fn from_interleaved(
        id: String,
        channels: usize,
        height: usize,
        width: usize,
        samples: &[u8],
    ) -> Self {
        let n = height * width;
        let mut pixels = vec![0u8; channels * n];
        for (i, px) in samples.chunks_exact(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                pixels[c * n + i] = v;
            }
        }
        ImageRecord {
            id,
            channels,
            height,
            width,
            pixels,
            source: None,
        }
    }

    fn interleaved(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(self.pixels.len());
        for i in 0..n {
            for c in 0..self.channels {
                out.push(self.pixels[c * n + i]);
            }
        }
        out
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a PGM/PPM file, or PNG/JPEG through the `image` crate.
pub fn load_image(path: &Path) -> Result<ImageRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut record = if pnm::is_pnm(&bytes) {
        let r = pnm::decode(&bytes, path)?;
        ImageRecord::from_interleaved(stem(path), r.channels, r.height, r.width, &r.samples)
    } else if bytes.starts_with(b"\x89PNG") || bytes.starts_with(&[0xff, 0xd8, 0xff]) {
        let img = image::load_from_memory(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: e.to_string(),
        })?;
        let (channels, samples, w, h) = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                (1, g.as_raw().clone(), g.width(), g.height())
            }
            _ => {
                let rgb = img.to_rgb8();
                (3, rgb.as_raw().clone(), rgb.width(), rgb.height())
            }
        };
        ImageRecord::from_interleaved(stem(path), channels, h as usize, w as usize, &samples)
    } else {
        let magic = bytes
            .iter()
            .take(4)
            .map(|b| format!("{b:02x}"))
            .collect::<Vec<_>>()
            .join(" ");
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            magic,
        });
    };
    record.source = Some(path.to_path_buf());
    Ok(record)
}

/// Writes PGM/PPM (`.pgm`, `.ppm`, `.pnm`) losslessly, or PNG for `.png`.
pub fn save_image(record: &ImageRecord, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "pgm" | "ppm" | "pnm" => pnm::encode(&pnm::Raster {
            channels: record.channels,
            width: record.width,
            height: record.height,
            samples: record.interleaved(),
        }),
        "png" => {
            let color = if record.channels == 1 {
                image::ExtendedColorType::L8
            } else {
                image::ExtendedColorType::Rgb8
            };
            let mut buf = std::io::Cursor::new(Vec::new());
            image::write_buffer_with_format(
                &mut buf,
                &record.interleaved(),
                record.width as u32,
                record.height as u32,
                color,
                image::ImageFormat::Png,
            )
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
            buf.into_inner()
        }
        other => {
            return Err(Error::invalid(
                "save_image",
                format!("unsupported output extension `{other}`"),
            ))
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One paired training example.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// Degraded domain-X image.
    pub distorted: ImageRecord,
    /// Clean domain-Y image.
    pub clean: ImageRecord,
    pub depth: DepthMap,
}

impl PairedSample {
    pub fn new(distorted: ImageRecord, clean: ImageRecord, depth: DepthMap) -> Result<Self> {
        if !distorted.same_dims(&clean)
            || (depth.height(), depth.width()) != (clean.height, clean.width)
        {
            return Err(Error::Dataset(format!(
                "sample `{}`: distorted {}x{}, clean {}x{}, depth {}x{} disagree",
                clean.id,
                distorted.height,
                distorted.width,
                clean.height,
                clean.width,
                depth.height(),
                depth.width()
            )));
        }
        Ok(PairedSample {
            distorted,
            clean,
            depth,
        })
    }
}

/// `v / 127.5 - 1`, as a `1 x C x H x W` tensor.
pub fn to_model_space(record: &ImageRecord) -> Tensor4 {
    let shape = Shape::new(1, record.channels, record.height, record.width);
    let data = record
        .pixels
        .iter()
        .map(|&p| p as f32 / 127.5 - 1.0)
        .collect();
    Tensor4::new(shape, data).expect("record geometry is validated")
}

/// Inverse of [`to_model_space`] for batch item `index`:
/// `round((v + 1) * 127.5)` with halves rounded up, clipped to `[0, 255]`.
pub fn from_model_space(t: &Tensor4, index: usize, id: impl Into<String>) -> Result<ImageRecord> {
    let s = t.shape();
    if index >= s.batch {
        return Err(Error::invalid(
            "from_model_space",
            format!("batch index {index} out of range for {s}"),
        ));
    }
    let pixels = t
        .item(index)
        .iter()
        .map(|&v| quantize((v as f64 + 1.0) * 127.5))
        .collect();
    ImageRecord::new(id, s.channels, s.height, s.width, pixels)
}

pub(crate) fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn model_space_endpoints() {
        let r = ImageRecord::new("e", 1, 1, 2, vec![0, 255]).unwrap();
        assert_eq!(to_model_space(&r).data(), &[-1.0, 1.0]);
        let mid = from_model_space(&Tensor4::scalar(0.0), 0, "m").unwrap();
        assert_eq!(mid.pixels, vec![128]);
    }

    #[test]
    fn pnm_round_trip_and_gray_channels() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = ImageRecord::new("a", 3, 2, 3, (0..18).map(|v| v * 14).collect()).unwrap();
        let p = dir.path().join("a.ppm");
        save_image(&rgb, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.pixels, rgb.pixels);
        assert_eq!(back.id, "a");

        let gray = ImageRecord::new("g", 1, 2, 2, vec![0, 1, 2, 255]).unwrap();
        let p = dir.path().join("g.pgm");
        save_image(&gray, &p).unwrap();
        assert_eq!(load_image(&p).unwrap().channels, 1);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = ImageRecord::new("p", 3, 3, 2, (0..18).map(|v| v * 9).collect()).unwrap();
        let p = dir.path().join("p.png");
        save_image(&rgb, &p).unwrap();
        assert_eq!(load_image(&p).unwrap().pixels, rgb.pixels);
    }

    #[test]
    fn unknown_magic_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"GIF89a").unwrap();
        match load_image(&p) {
            Err(Error::UnsupportedFormat { magic, .. }) => assert_eq!(magic, "47 49 46 38"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        std::fs::write(&p, b"P6\n4 4\n255\n\x00\x00").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn model_space_round_trip(pixels in proptest::collection::vec(any::<u8>(), 12)) {
            let r = ImageRecord::new("r", 3, 2, 2, pixels).unwrap();
            let back = from_model_space(&to_model_space(&r), 0, "r").unwrap();
            prop_assert_eq!(back.pixels, r.pixels);
        }
    }
}
