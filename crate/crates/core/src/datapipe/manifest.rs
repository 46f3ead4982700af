//! Dataset manifests for the synthetic tree and for EUVP-style paired
//! directories.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attnmask::{validate_depth, DepthMap, RangePolicy};
use crate::datapipe::{load_image, DegradeParams, PairedSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Synthetic,
    EuvpDirs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    /// The last `n / 10` ids go to test, the `n / 20` before them to val,
    /// the rest to train.
    pub fn partition(ids: &[String]) -> Splits {
        let n = ids.len();
        let test = n / 10;
        let val = n / 20;
        let train = n - test - val;
        Splits {
            train: ids[..train].to_vec(),
            val: ids[train..train + val].to_vec(),
            test: ids[train + val..].to_vec(),
        }
    }

    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Paths relative to the manifest root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFiles {
    pub id: String,
    pub distorted: PathBuf,
    pub clean: PathBuf,
    pub depth: Option<PathBuf>,
}

/// Depth used for samples that have no depth file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthFallback {
    Constant(f32),
    /// 0 at the top row rising linearly to 1 at the bottom.
    VerticalRamp,
}

impl DepthFallback {
    pub fn depth_map(&self, height: usize, width: usize) -> Result<DepthMap> {
        match *self {
            DepthFallback::Constant(v) => DepthMap::constant(height, width, v),
            DepthFallback::VerticalRamp => {
                let denom = height.saturating_sub(1).max(1) as f32;
                let values = (0..height * width)
                    .map(|i| (i / width) as f32 / denom)
                    .collect();
                DepthMap::from_values(height, width, values, RangePolicy::Clamp)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Directory holding the manifest; filled in on load.
    #[serde(skip)]
    pub root: PathBuf,
    pub layout: Layout,
    pub image_size: Option<usize>,
    pub seed: Option<u64>,
    pub params: Option<DegradeParams>,
    pub depth_missing: bool,
    pub splits: Splits,
    pub samples: Vec<SampleFiles>,
}

impl DatasetManifest {
    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads `root/manifest.json` and checks it.
    pub fn load(root: &Path) -> Result<DatasetManifest> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    /// Uses `root/manifest.json` when present, otherwise scans `root` as
    /// an EUVP-style paired layout.
    pub fn open(root: &Path) -> Result<DatasetManifest> {
        if root.join(MANIFEST_FILE).is_file() {
            Self::load(root)
        } else {
            load_euvp_layout(root)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut files = BTreeSet::new();
        for s in &self.samples {
            if !files.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sample id `{}`", s.id)));
            }
            if s.depth.is_none() && !self.depth_missing {
                return Err(Error::Dataset(format!(
                    "sample `{}` has no depth file",
                    s.id
                )));
            }
            let mut paths = vec![&s.distorted, &s.clean];
            paths.extend(s.depth.as_ref());
            for p in paths {
                if !self.root.join(p).is_file() {
                    return Err(Error::Dataset(format!(
                        "sample `{}`: missing file {}",
                        s.id,
                        self.root.join(p).display()
                    )));
                }
            }
        }
        let mut seen = BTreeMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.splits.get(split) {
                if !files.contains(id.as_str()) {
                    return Err(Error::Dataset(format!(
                        "split {split:?} lists unknown id `{id}`"
                    )));
                }
                if let Some(prev) = seen.insert(id.clone(), split) {
                    return Err(Error::Dataset(format!(
                        "id `{id}` appears in both {prev:?} and {split:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn all_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn ids(&self, split: Split) -> &[String] {
        self.splits.get(split)
    }

    pub fn files(&self, id: &str) -> Result<&SampleFiles> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Dataset(format!("unknown sample id `{id}`")))
    }

    /// Loads one sample. Samples without a depth file need `fallback`.
    pub fn load_sample(&self, id: &str, fallback: Option<DepthFallback>) -> Result<PairedSample> {
        let f = self.files(id)?;
        let mut distorted = load_image(&self.root.join(&f.distorted))?;
        let mut clean = load_image(&self.root.join(&f.clean))?;
        distorted.id = id.to_string();
        clean.id = id.to_string();
        let depth = match (&f.depth, fallback) {
            (Some(p), _) => validate_depth(&load_image(&self.root.join(p))?)?,
            (None, Some(fb)) => fb.depth_map(clean.height, clean.width)?,
            (None, None) => {
                return Err(Error::Dataset(format!(
                    "sample `{id}` has no depth map and no depth fallback was configured"
                )))
            }
        };
        PairedSample::new(distorted, clean, depth)
    }

    pub fn load_split(
        &self,
        split: Split,
        fallback: Option<DepthFallback>,
    ) -> Result<Vec<PairedSample>> {
        self.ids(split)
            .iter()
            .map(|id| self.load_sample(id, fallback))
            .collect()
    }
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() || entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        out.insert(name, path);
    }
    Ok(out)
}

fn first_dir(root: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| root.join(n)).find(|p| p.is_dir())
}

fn relative(root: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(root).unwrap_or(p).to_path_buf()
}

/// Pairs `A/` (or `trainA/`) distorted images with `B/` (or `trainB/`)
/// clean images by identical file name. An optional `depth/` directory is
/// matched by file stem.
pub fn load_euvp_layout(root: &Path) -> Result<DatasetManifest> {
    let a_dir = first_dir(root, &["A", "trainA"])
        .ok_or_else(|| Error::Dataset(format!("{}: no A/ or trainA/ directory", root.display())))?;
    let b_dir = first_dir(root, &["B", "trainB"])
        .ok_or_else(|| Error::Dataset(format!("{}: no B/ or trainB/ directory", root.display())))?;
    let a = image_files(&a_dir)?;
    let b = image_files(&b_dir)?;
    if a.is_empty() && b.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: paired directories are empty",
            root.display()
        )));
    }
    let mut orphans: Vec<String> = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .map(|k| {
            format!(
                "{}/{k}",
                a_dir.file_name().unwrap_or_default().to_string_lossy()
            )
        })
        .collect();
    orphans.extend(b.keys().filter(|k| !a.contains_key(*k)).map(|k| {
        format!(
            "{}/{k}",
            b_dir.file_name().unwrap_or_default().to_string_lossy()
        )
    }));

    let depth_dir = first_dir(root, &["depth"]);
    let depths: BTreeMap<String, PathBuf> = match &depth_dir {
        Some(d) => image_files(d)?
            .into_values()
            .map(|p| (super::stem(&p), p))
            .collect(),
        None => BTreeMap::new(),
    };

    let mut samples = Vec::new();
    for (name, pa) in &a {
        let Some(pb) = b.get(name) else { continue };
        let id = super::stem(pa);
        let depth = match &depth_dir {
            Some(_) => match depths.get(&id) {
                Some(p) => Some(relative(root, p)),
                None => {
                    orphans.push(format!("{name} (no depth/{id}.*)"));
                    None
                }
            },
            None => None,
        };
        samples.push(SampleFiles {
            id,
            distorted: relative(root, pa),
            clean: relative(root, pb),
            depth,
        });
    }
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!(
            "unpaired files: {}",
            orphans.join(", ")
        )));
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return Err(Error::Dataset(
            "file stems collide across extensions".into(),
        ));
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        layout: Layout::EuvpDirs,
        image_size: None,
        seed: None,
        params: None,
        depth_missing: depth_dir.is_none(),
        splits: Splits::partition(&ids),
        samples,
    };
    manifest.validate()?;
    Ok(manifest)
}
