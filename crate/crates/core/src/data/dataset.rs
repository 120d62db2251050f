//! On-disk synthetic datasets and their JSONL manifest.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{read_gray, write_gray};
use super::synth::{generate_normal, inject_anomaly, LabeledSample, SynthConfig};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One manifest line. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub path: String,
    pub label: u8,
    pub mask: Option<String>,
    pub seed: u64,
    pub index: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
    pub val_normal: usize,
    pub val_abnormal: usize,
}

impl SplitCounts {
    pub fn new(train: usize, test_normal: usize, test_abnormal: usize) -> Self {
        Self { train, test_normal, test_abnormal, val_normal: 0, val_abnormal: 0 }
    }

    pub fn with_val(mut self, normal: usize, abnormal: usize) -> Self {
        self.val_normal = normal;
        self.val_abnormal = abnormal;
        self
    }
}

/// Plans entries without touching the disk. Sample indices are consecutive
/// across splits so that every image has its own generator stream.
pub fn plan(counts: &SplitCounts, seed: u64) -> Vec<ManifestEntry> {
    let mut out = Vec::new();
    let mut index = 0u64;
    let mut push = |split: Split, n: usize, label: u8, out: &mut Vec<ManifestEntry>| {
        for i in 0..n {
            let stem = format!("{}_{i:05}", if label == 0 { "normal" } else { "abnormal" });
            out.push(ManifestEntry {
                split,
                path: format!("{}/{stem}.png", split.dir()),
                label,
                mask: (label == 1).then(|| format!("{}/masks/{stem}_mask.png", split.dir())),
                seed,
                index,
            });
            index += 1;
        }
    };
    push(Split::Train, counts.train, 0, &mut out);
    push(Split::Val, counts.val_normal, 0, &mut out);
    push(Split::Val, counts.val_abnormal, 1, &mut out);
    push(Split::Test, counts.test_normal, 0, &mut out);
    push(Split::Test, counts.test_abnormal, 1, &mut out);
    out
}

/// Generates the sample an entry describes.
pub fn render(entry: &ManifestEntry, cfg: &SynthConfig) -> Result<LabeledSample> {
    let normal = generate_normal(cfg, entry.seed, entry.index);
    if entry.label == 0 {
        Ok(normal)
    } else {
        inject_anomaly(&normal, cfg, entry.seed, entry.index)
    }
}

/// Writes all images, masks and the manifest under `root`.
pub fn build_dataset(root: &Path, cfg: &SynthConfig, counts: &SplitCounts, seed: u64) -> Result<Vec<ManifestEntry>> {
    if counts.train == 0 || counts.test_normal == 0 || counts.test_abnormal == 0 {
        return Err(Error::InvalidArgument(format!("dataset counts must be >= 1: {counts:?}")));
    }
    cfg.validate()?;
    let entries = plan(counts, seed);
    for split in [Split::Train, Split::Val, Split::Test] {
        let masks = root.join(split.dir()).join("masks");
        std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    }
    entries.par_iter().try_for_each(|e| -> Result<()> {
        let s = render(e, cfg)?;
        write_gray(&root.join(&e.path), s.size, s.size, &s.image)?;
        if let Some(m) = &e.mask {
            let v: Vec<f64> = s.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            write_gray(&root.join(m), s.size, s.size, &v)?;
        }
        Ok(())
    })?;
    write_manifest(&root.join(MANIFEST), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entry serializes");
        writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Image (and mask) loaded from disk for one entry.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub entry: ManifestEntry,
    pub image: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

/// Dataset root plus its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self { root: root.to_path_buf(), entries: read_manifest(&root.join(MANIFEST))? })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Loads every entry of `split`, resized to `size x size`.
    pub fn load(&self, split: Split, size: usize) -> Result<Vec<LoadedSample>> {
        self.split(split)
            .par_iter()
            .map(|e| {
                let img = read_gray(&self.root.join(&e.path), Some((size, size)))?;
                let mask = match &e.mask {
                    Some(m) => Some(read_gray(&self.root.join(m), Some((size, size)))?.data.iter().map(|&v| v >= 0.5).collect()),
                    None => None,
                };
                Ok(LoadedSample { entry: (*e).clone(), image: img.data, mask })
            })
            .collect()
    }
}
