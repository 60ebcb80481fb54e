//! Dataset directory layout: `manifest.tsv` plus one container file per
//! slice under `slices/`. Manifest lines are
//! `id<TAB>split<TAB>relative_path<TAB>sha256`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Ix3;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::container::ArrayData;
use super::split::Split;
use super::LabeledSlice;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Test,
    /// Test-side slices with empty ground truth, kept on disk but not evaluated.
    Excluded,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
            SplitName::Excluded => "excluded",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "test" => Ok(SplitName::Test),
            "excluded" => Ok(SplitName::Excluded),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub split: SplitName,
    pub path: String,
    pub sha256: String,
}

impl fmt::Display for ManifestRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.id, self.split, self.path, self.sha256)
    }
}

impl FromStr for ManifestRecord {
    type Err = Error;
    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!("manifest line needs 4 fields: {line:?}")));
        }
        Ok(ManifestRecord {
            id: fields[0].to_string(),
            split: fields[1].parse()?,
            path: fields[2].to_string(),
            sha256: fields[3].to_string(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    text.lines().filter(|l| !l.is_empty()).map(str::parse).collect()
}

/// Write every slice of `split` under `dir`. Fails if a manifest already
/// exists unless `force` is set.
pub fn write_dataset(dir: &Path, split: &Split, force: bool) -> Result<Vec<ManifestRecord>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists (pass --force to overwrite)",
            manifest_path.display()
        )));
    }
    let slices_dir = dir.join("slices");
    fs::create_dir_all(&slices_dir).map_err(|e| Error::io(&slices_dir, e))?;

    let mut tagged: Vec<(&LabeledSlice, SplitName)> = Vec::new();
    tagged.extend(split.train.iter().map(|s| (s, SplitName::Train)));
    tagged.extend(split.test.iter().map(|s| (s, SplitName::Test)));
    tagged.extend(split.dropped.iter().map(|s| (s, SplitName::Excluded)));
    tagged.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let mut records = tagged
        .par_iter()
        .map(|(slice, split)| {
            slice.validate()?;
            let rel = format!("slices/{}.dsa", slice.id);
            let bytes = ArrayData::F32(slice.to_stacked().into_dyn()).to_bytes();
            let path = dir.join(&rel);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            Ok(ManifestRecord {
                id: slice.id.clone(),
                split: *split,
                path: rel,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.id.cmp(&b.id));

    let text: String = records.iter().map(|r| format!("{r}\n")).collect();
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text)
}

/// Load and checksum-verify one slice.
pub fn load_slice(dir: &Path, record: &ManifestRecord) -> Result<LabeledSlice> {
    let path: PathBuf = dir.join(&record.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let digest = sha256_hex(&bytes);
    if digest != record.sha256 {
        return Err(Error::Data(format!("{}: checksum mismatch", record.id)));
    }
    let stacked = ArrayData::from_bytes(&bytes)?
        .into_f32()?
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Data(format!("{}: {e}", record.id)))?;
    LabeledSlice::from_stacked(record.id.clone(), stacked)
}

/// All slices assigned to `split`, in manifest (id) order.
pub fn load_split(dir: &Path, split: SplitName) -> Result<Vec<LabeledSlice>> {
    read_manifest(dir)?
        .par_iter()
        .filter(|r| r.split == split)
        .map(|r| load_slice(dir, r))
        .collect()
}
