//! Procedural scenes: a smooth background gradient with a few colored
//! shapes in front of it, plus the matching depth map.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attnmask::{DepthMap, RangePolicy};
use crate::datapipe::manifest::{DatasetManifest, Layout, SampleFiles, Splits};
use crate::datapipe::{degrade, save_image, DegradeParams, ImageRecord};
use crate::error::{Error, Result};

/// Depth of the background at the bottom row; the top row is 0.
const FLOOR_DEPTH: f32 = 0.35;

#[derive(Clone, Copy)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let cx = rng.random_range(0.15..0.85) * size;
        let cy = rng.random_range(0.15..0.85) * size;
        match rng.random_range(0..3) {
            0 => Shape::Disc {
                cx,
                cy,
                r: rng.random_range(0.08..0.22) * size,
            },
            1 => {
                let hw = rng.random_range(0.06..0.2) * size;
                let hh = rng.random_range(0.06..0.2) * size;
                Shape::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                }
            }
            _ => Shape::Ellipse {
                cx,
                cy,
                rx: rng.random_range(0.08..0.25) * size,
                ry: rng.random_range(0.05..0.16) * size,
            },
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

/// Renders one clean scene and its depth map, fully determined by `seed`.
///
/// Shape `k` sits at depth `1 - 0.1 k`; shapes are painted farthest first
/// so nearer ones occlude.
pub fn render_scene(size: usize, seed: u64) -> Result<(ImageRecord, DepthMap)> {
    if size == 0 {
        return Err(Error::invalid(
            "render_scene",
            "image size must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let top = random_color(&mut rng, 60.0, 230.0);
    let bottom = random_color(&mut rng, 30.0, 200.0);
    let n_shapes = rng.random_range(2..=5);
    let shapes: Vec<(Shape, [f64; 3], f64)> = (0..n_shapes)
        .map(|_| {
            let shape = Shape::random(&mut rng, s);
            let color = random_color(&mut rng, 20.0, 255.0);
            let shade = rng.random_range(-0.35..0.35);
            (shape, color, shade)
        })
        .collect();

    let n = size * size;
    let mut rgb = vec![0.0f64; 3 * n];
    let mut depth = vec![0.0f32; n];
    for y in 0..size {
        let fy = if size > 1 { y as f64 / (s - 1.0) } else { 0.0 };
        for x in 0..size {
            let i = y * size + x;
            for c in 0..3 {
                rgb[c * n + i] = top[c] + (bottom[c] - top[c]) * fy;
            }
            depth[i] = FLOOR_DEPTH * fy as f32;
        }
    }
    for (k, (shape, color, shade)) in shapes.iter().enumerate().rev() {
        let d = 1.0 - 0.1 * k as f32;
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if !shape.contains(px, py) {
                    continue;
                }
                let i = y * size + x;
                let light = 1.0 + shade * (px + py - s) / s;
                for c in 0..3 {
                    rgb[c * n + i] = color[c] * light;
                }
                depth[i] = d;
            }
        }
    }

    let pixels = rgb.into_iter().map(super::quantize).collect();
    let clean = ImageRecord::new(format!("{seed:016x}"), 3, size, size, pixels)?;
    let depth = DepthMap::from_values(size, size, depth, RangePolicy::Clamp)?;
    Ok((clean, depth))
}

fn write_sample(
    root: &Path,
    id: &str,
    files: &SampleFiles,
    size: usize,
    params: &DegradeParams,
    sample_seed: u64,
) -> Result<()> {
    let (mut clean, depth) = render_scene(size, sample_seed)?;
    clean.id = id.to_string();
    let noise = DegradeParams {
        seed: params.seed ^ sample_seed.rotate_left(17),
        ..params.clone()
    };
    let distorted = degrade(&clean, &depth, &noise)?;
    let depth_img = ImageRecord::new(id, 1, size, size, depth.to_u8())?;
    save_image(&clean, &root.join(&files.clean))?;
    save_image(&distorted, &root.join(&files.distorted))?;
    let depth_path = files.depth.as_ref().expect("synthetic samples carry depth");
    save_image(&depth_img, &root.join(depth_path))
}

/// Writes `count` (distorted, clean, depth) triples under `out_root` and a
/// `manifest.json` beside them. Sample `i` is rendered from `seed ^ i`, so
/// the tree does not depend on thread scheduling.
pub fn generate_synthetic_dataset(
    count: usize,
    image_size: usize,
    params: &DegradeParams,
    seed: u64,
    out_root: &Path,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::invalid(
            "generate_synthetic_dataset",
            "count must be positive",
        ));
    }
    if image_size == 0 {
        return Err(Error::invalid(
            "generate_synthetic_dataset",
            "image size must be positive",
        ));
    }
    params.validate()?;
    for dir in ["clean", "distorted", "depth"] {
        let p = out_root.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let samples: Vec<SampleFiles> = (0..count)
        .map(|i| {
            let id = format!("{i:05}");
            SampleFiles {
                distorted: format!("distorted/{id}.ppm").into(),
                clean: format!("clean/{id}.ppm").into(),
                depth: Some(format!("depth/{id}.pgm").into()),
                id,
            }
        })
        .collect();
    samples.par_iter().enumerate().try_for_each(|(i, f)| {
        write_sample(out_root, &f.id, f, image_size, params, seed ^ i as u64)
    })?;

    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let manifest = DatasetManifest {
        root: out_root.to_path_buf(),
        layout: Layout::Synthetic,
        image_size: Some(image_size),
        seed: Some(seed),
        params: Some(params.clone()),
        depth_missing: false,
        splits: Splits::partition(&ids),
        samples,
    };
    manifest.save()?;
    Ok(manifest)
}
