//! Dataset manifests: one JSON record per cell, paths relative to the
//! manifest file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tbf::{self, Blob};
use crate::volume::{BinaryMask, CellCrop};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub cell_id: String,
    /// Crop volume TBF, relative to the manifest.
    pub crop: PathBuf,
    /// Binary crop mask TBF, relative to the manifest.
    pub mask: PathBuf,
    pub label: usize,
    pub well: String,
    pub site: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

/// Checks the leave-wells-out rule: a well that contributes training cells
/// contributes nothing to validation or test, and each (well, site) belongs
/// to exactly one split.
pub fn check_well_splits<'a>(
    entries: impl IntoIterator<Item = (&'a str, u32, Split)>,
) -> Result<()> {
    let mut well_splits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut site_split: BTreeMap<(&str, u32), Split> = BTreeMap::new();
    for (well, site, split) in entries {
        well_splits.entry(well).or_default().insert(split);
        if let Some(prev) = site_split.insert((well, site), split) {
            if prev != split {
                return Err(Error::Manifest(format!(
                    "well {well} site {site} appears in both {prev} and {split}"
                )));
            }
        }
    }
    for (well, splits) in well_splits {
        if splits.contains(&Split::Train) && splits.len() > 1 {
            let other = splits.iter().find(|&&s| s != Split::Train).unwrap();
            return Err(Error::Manifest(format!("well {well} appears in both train and {other}")));
        }
    }
    Ok(())
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.cell_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate cell id {}", r.cell_id)));
            }
        }
        check_well_splits(self.records.iter().map(|r| (r.well.as_str(), r.site, r.split)))
    }

    /// Loads and validates a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        let base = base_dir(path);
        for r in &m.records {
            for p in [&r.crop, &r.mask] {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!(
                        "{}: referenced file {} does not exist",
                        r.cell_id,
                        full.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.split(split).next().is_some()
    }

    /// Reads the crops of one split, in manifest order.
    pub fn load_crops(&self, manifest_path: &Path, split: Split) -> Result<Vec<CellCrop>> {
        let base = base_dir(manifest_path);
        self.split(split).map(|r| load_record(&base, r)).collect()
    }
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_record(base: &Path, r: &ManifestRecord) -> Result<CellCrop> {
    let vol_path = base.join(&r.crop);
    let volume = tbf::read_f32(&vol_path)?;
    let dims = volume.spatial()?;
    let mask_path = base.join(&r.mask);
    let mask = match Blob::read(&mask_path)? {
        Blob::U8(s, d) if s == dims => BinaryMask::new(dims, d)?,
        Blob::U8(s, _) => {
            return Err(Error::Format {
                path: mask_path,
                reason: format!("mask shape {s:?} does not match crop {dims:?}"),
            })
        }
        _ => return Err(Error::Format { path: mask_path, reason: "mask must be u8".into() }),
    };
    if mask.count() == 0 {
        return Err(Error::Manifest(format!("{}: empty mask", r.cell_id)));
    }
    let channels = volume.shape()[0];
    Ok(CellCrop {
        volume,
        mask,
        cell_id: r.cell_id.clone(),
        label: r.label,
        well: r.well.clone(),
        site: r.site,
        center: (0, 0),
        degenerate_channels: vec![false; channels],
    })
}

/// Writes a crop's volume and mask as TBF and returns its manifest record.
pub fn write_crop(dir: &Path, crop: &CellCrop, split: Split) -> Result<ManifestRecord> {
    let crop_rel = PathBuf::from("crops").join(format!("{}.tbf", crop.cell_id));
    let mask_rel = PathBuf::from("masks").join(format!("{}.tbf", crop.cell_id));
    tbf::write_f32(&dir.join(&crop_rel), &crop.volume)?;
    Blob::U8(crop.mask.dims.to_vec(), crop.mask.data.clone()).write(&dir.join(&mask_rel))?;
    Ok(ManifestRecord {
        cell_id: crop.cell_id.clone(),
        crop: crop_rel,
        mask: mask_rel,
        label: crop.label,
        well: crop.well.clone(),
        site: crop.site,
        split,
    })
}
