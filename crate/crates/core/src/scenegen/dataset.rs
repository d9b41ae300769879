//! On-disk datasets: generation, manifest, and audited loading.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{default_class_names, generate_scene, Domain, DomainParams, Sample};
use crate::autodiff::IGNORE_LABEL;
use crate::error::{config_check, contract, Error, Result};
use crate::maps::{BoundaryMap, LabelMap};
use crate::netpbm;
use crate::rng;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    pub seed: u64,
    pub class_names: Option<Vec<String>>,
    pub source: DomainParams,
    pub target: DomainParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 6,
            n_source: 512,
            n_target_train: 128,
            n_target_test: 64,
            seed: 0,
            class_names: None,
            source: DomainParams::source(6),
            target: DomainParams::target(6),
        }
    }
}

impl DatasetConfig {
    pub fn class_names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| default_class_names(self.classes))
    }

    pub fn validate(&self) -> Result<()> {
        config_check!(
            (4..=254).contains(&self.classes),
            "class count {} outside 4..=254",
            self.classes
        );
        config_check!(
            self.height >= 32 && self.width >= 32 && self.height % 8 == 0 && self.width % 8 == 0,
            "image size {}x{} must be at least 32x32 and divisible by 8",
            self.height,
            self.width
        );
        if let Some(names) = &self.class_names {
            config_check!(
                names.len() == self.classes,
                "{} class names given for {} classes",
                names.len(),
                self.classes
            );
        }
        self.source.validate(self.classes)?;
        self.target.validate(self.classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SourceTrain, Split::TargetTrain, Split::TargetTest];

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain => Domain::Source,
            _ => Domain::Target,
        }
    }

    pub fn part(self) -> Part {
        match self {
            Split::TargetTest => Part::Test,
            _ => Part::Train,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Split::SourceTrain => "source/train",
            Split::TargetTrain => "target/train",
            Split::TargetTest => "target/test",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Split::SourceTrain => "src",
            Split::TargetTrain => "tgt_train",
            Split::TargetTest => "tgt_test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// Paths relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub rgb: String,
    pub depth: String,
    pub hha: String,
    pub labels: String,
    pub boundaries: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: Domain,
    pub split: Part,
    pub files: SampleFiles,
    /// Labels exist on disk for evaluation but must never reach training.
    #[serde(default)]
    pub unused_for_training: bool,
}

impl ManifestEntry {
    pub fn split_kind(&self) -> Split {
        match (self.domain, self.split) {
            (Domain::Source, _) => Split::SourceTrain,
            (Domain::Target, Part::Train) => Split::TargetTrain,
            (Domain::Target, Part::Test) => Split::TargetTest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    #[serde(rename = "K")]
    pub classes: usize,
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split_kind() == split)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn interleave(t: &Tensor, h: usize, w: usize) -> Vec<u8> {
    let d = t.data();
    let plane = h * w;
    (0..plane)
        .flat_map(|i| (0..3).map(move |c| to_u8(d[c * plane + i])))
        .collect()
}

fn planar(bytes: &[u8], h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], out).expect("3×H×W")
}

fn write_sample(root: &Path, files: &SampleFiles, s: &Sample) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    netpbm::write_ppm(&root.join(&files.rgb), w, h, &interleave(&s.rgb, h, w))?;
    netpbm::write_ppm(&root.join(&files.hha), w, h, &interleave(&s.hha, h, w))?;
    let mm: Vec<u16> = s
        .depth
        .iter()
        .map(|&d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    netpbm::write_pgm16(&root.join(&files.depth), w, h, &mm)?;
    netpbm::write_pgm8(&root.join(&files.labels), w, h, &s.labels.values)?;
    let edges: Vec<u8> = s
        .boundaries
        .values
        .iter()
        .map(|&b| if b >= 0.5 { 255 } else { 0 })
        .collect();
    netpbm::write_pgm8(&root.join(&files.boundaries), w, h, &edges)
}

fn files_for(split: Split, id: &str) -> SampleFiles {
    let f = |kind: &str, ext: &str| format!("{}/{id}_{kind}.{ext}", split.dir());
    SampleFiles {
        rgb: f("rgb", "ppm"),
        depth: f("depth", "pgm"),
        hha: f("hha", "ppm"),
        labels: f("labels", "pgm"),
        boundaries: f("boundaries", "pgm"),
    }
}

/// Renders the scene behind a manifest entry.
pub fn render_entry(config: &DatasetConfig, id: &str, domain: Domain) -> Result<Sample> {
    let params = match domain {
        Domain::Source => &config.source,
        Domain::Target => &config.target,
    };
    let mut rng = rng::stream(config.seed, &format!("scene/{id}"));
    let mut s = generate_scene(
        &mut rng,
        params,
        domain,
        (config.height, config.width),
        config.classes,
    )?;
    s.id = id.to_string();
    Ok(s)
}

/// Generates every split under `out_dir` and writes `manifest.json`.
pub fn write_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    for split in Split::ALL {
        let dir = out_dir.join(split.dir());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let counts = [
        (Split::SourceTrain, config.n_source),
        (Split::TargetTrain, config.n_target_train),
        (Split::TargetTest, config.n_target_test),
    ];
    let samples: Vec<ManifestEntry> = counts
        .iter()
        .flat_map(|&(split, n)| {
            (0..n).map(move |i| {
                let id = format!("{}_{i:06}", split.id_prefix());
                ManifestEntry {
                    files: files_for(split, &id),
                    id,
                    domain: split.domain(),
                    split: split.part(),
                    unused_for_training: split == Split::TargetTrain,
                }
            })
        })
        .collect();

    samples.par_iter().try_for_each(|e| {
        let s = render_entry(config, &e.id, e.domain)?;
        write_sample(out_dir, &e.files, &s)
    })?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        classes: config.classes,
        class_names: config.class_names(),
        height: config.height,
        width: config.width,
        samples,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    log::info!(
        "wrote {} samples to {}",
        manifest.samples.len(),
        out_dir.display()
    );
    Ok(manifest)
}

/// Which files of a sample to read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Parts {
    pub hha: bool,
    pub depth: bool,
    pub labels: bool,
    pub boundaries: bool,
}

impl Parts {
    pub const RGB_ONLY: Parts = Parts {
        hha: false,
        depth: false,
        labels: false,
        boundaries: false,
    };
    pub const ALL: Parts = Parts {
        hha: true,
        depth: true,
        labels: true,
        boundaries: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub domain: Domain,
    /// `3×H×W`.
    pub rgb: Tensor,
    pub hha: Option<Tensor>,
    pub depth: Option<Vec<f32>>,
    pub labels: Option<LabelMap>,
    pub boundaries: Option<BoundaryMap>,
}

/// One file read through a [`Dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Access {
    pub id: String,
    pub domain: Domain,
    pub kind: &'static str,
}

/// A dataset on disk. Every sample file read is recorded for auditing.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: Manifest,
    accesses: Mutex<Vec<Access>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported manifest version {}", manifest.version),
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            accesses: Mutex::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.manifest.entries(split).collect()
    }

    /// Every file read so far, in read order.
    pub fn accesses(&self) -> Vec<Access> {
        self.accesses.lock().expect("audit log").clone()
    }

    /// Ids whose label maps have been read so far, in read order.
    pub fn label_reads(&self) -> Vec<String> {
        self.accesses()
            .into_iter()
            .filter(|a| a.kind == "labels")
            .map(|a| a.id)
            .collect()
    }

    fn record(&self, entry: &ManifestEntry, kind: &'static str) {
        self.accesses.lock().expect("audit log").push(Access {
            id: entry.id.clone(),
            domain: entry.domain,
            kind,
        });
    }

    fn check_size(&self, path: &Path, w: usize, h: usize) -> Result<()> {
        if (h, w) != (self.manifest.height, self.manifest.width) {
            return Err(Error::format(
                path,
                format!(
                    "image is {w}x{h}, manifest says {}x{}",
                    self.manifest.width, self.manifest.height
                ),
            ));
        }
        Ok(())
    }

    pub fn load(&self, entry: &ManifestEntry, parts: Parts) -> Result<LoadedSample> {
        let (h, w) = (self.manifest.height, self.manifest.width);
        self.record(entry, "rgb");
        let rgb_path = self.root.join(&entry.files.rgb);
        let rgb = netpbm::read_ppm(&rgb_path)?;
        self.check_size(&rgb_path, rgb.width, rgb.height)?;
        let hha = if parts.hha {
            self.record(entry, "hha");
            let p = self.root.join(&entry.files.hha);
            let img = netpbm::read_ppm(&p)?;
            self.check_size(&p, img.width, img.height)?;
            Some(planar(&img.data, h, w))
        } else {
            None
        };
        let depth = if parts.depth {
            self.record(entry, "depth");
            let p = self.root.join(&entry.files.depth);
            let img = netpbm::read_pgm16(&p)?;
            self.check_size(&p, img.width, img.height)?;
            Some(img.data.iter().map(|&mm| mm as f32 / 1000.0).collect())
        } else {
            None
        };
        let labels = if parts.labels {
            self.record(entry, "labels");
            let p = self.root.join(&entry.files.labels);
            let img = netpbm::read_pgm8(&p)?;
            self.check_size(&p, img.width, img.height)?;
            let map = LabelMap::new(h, w, img.data)?;
            map.check_classes(self.manifest.classes)
                .map_err(|e| Error::format(&p, e.to_string()))?;
            Some(map)
        } else {
            None
        };
        let boundaries = if parts.boundaries {
            self.record(entry, "boundaries");
            let p = self.root.join(&entry.files.boundaries);
            let img = netpbm::read_pgm8(&p)?;
            self.check_size(&p, img.width, img.height)?;
            let mask: Vec<bool> = img.data.iter().map(|&v| v >= 128).collect();
            Some(BoundaryMap::from_mask(h, w, &mask))
        } else {
            None
        };
        Ok(LoadedSample {
            id: entry.id.clone(),
            domain: entry.domain,
            rgb: planar(&rgb.data, h, w),
            hha,
            depth,
            labels,
            boundaries,
        })
    }
}

/// Fraction of non-ignored pixels per class over one split.
pub fn class_distribution(dataset_dir: &Path, split: Split) -> Result<Vec<f64>> {
    let ds = Dataset::open(dataset_dir)?;
    let entries = ds.entries(split);
    contract!(!entries.is_empty(), "split {} is empty", split.name());
    let mut counts = vec![0u64; ds.manifest.classes];
    for e in entries {
        let p = ds.root.join(&e.files.labels);
        let img = netpbm::read_pgm8(&p)?;
        for &v in &img.data {
            if v != IGNORE_LABEL {
                let slot = counts
                    .get_mut(v as usize)
                    .ok_or_else(|| Error::format(&p, format!("class id {v} out of range")))?;
                *slot += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    contract!(total > 0, "split {} has no labelled pixels", split.name());
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}
