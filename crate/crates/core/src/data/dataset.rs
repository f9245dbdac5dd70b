//! Dataset directory layout:
//!
//! ```text
//! <root>/manifest.json          {"num_classes", "in_channels", "cases": [{"id", "spacing", "split"}]}
//! <root>/cases/<id>_img.mft     f32 [C, H, W]
//! <root>/cases/<id>_lbl.mft     u8  [H, W]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mft::{read_mft, write_mft, MftData, MftFile};
use super::sample::SegSample;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub spacing: [f64; 2],
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub in_channels: usize,
    pub cases: Vec<CaseEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

fn case_paths(root: &Path, id: &str) -> (PathBuf, PathBuf) {
    let dir = root.join("cases");
    (dir.join(format!("{id}_img.mft")), dir.join(format!("{id}_lbl.mft")))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Writes `samples` with their split names and the manifest.
pub fn write_dataset(root: &Path, num_classes: usize, samples: &[(SegSample, String)]) -> Result<Dataset> {
    let in_channels = samples.first().map_or(1, |(s, _)| s.channels);
    std::fs::create_dir_all(root.join("cases")).map_err(|e| Error::io(root, e))?;
    let mut cases = Vec::with_capacity(samples.len());
    for (s, split) in samples {
        if !valid_id(&s.id) {
            return Err(Error::Data(format!("case id `{}` must be [A-Za-z0-9_-]+", s.id)));
        }
        s.label.check_classes(num_classes)?;
        if s.channels != in_channels {
            return Err(Error::Data(format!("case {} has {} channels, expected {in_channels}", s.id, s.channels)));
        }
        let (img, lbl) = case_paths(root, &s.id);
        write_mft(
            &img,
            &MftFile {
                shape: vec![s.channels, s.height(), s.width()],
                data: MftData::F32(s.image.clone()),
            },
        )?;
        write_mft(&lbl, &MftFile::from_labels(&s.label))?;
        cases.push(CaseEntry {
            id: s.id.clone(),
            spacing: [s.spacing.0, s.spacing.1],
            split: split.clone(),
        });
    }
    let manifest = DatasetManifest {
        num_classes,
        in_channels,
        cases,
    };
    let path = root.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.cases.is_empty() {
            return Err(Error::Data(format!("{} lists no cases", path.display())));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn entries(&self, split: &str) -> Vec<&CaseEntry> {
        self.manifest.cases.iter().filter(|c| c.split == split).collect()
    }

    pub fn load_case(&self, entry: &CaseEntry) -> Result<SegSample> {
        let (img, lbl) = case_paths(&self.root, &entry.id);
        let image = read_mft(&img)?;
        let label = read_mft(&lbl)?.into_labels()?;
        label.check_classes(self.num_classes())?;
        let (channels, data) = match (image.shape.as_slice(), image.data) {
            (&[c, h, w], MftData::F32(v)) if (h, w) == (label.height, label.width) => (c, v),
            (s, _) => {
                return Err(Error::Data(format!(
                    "case {}: image must be f32 [C, {}, {}], got {s:?}",
                    entry.id, label.height, label.width
                )))
            }
        };
        SegSample::new(entry.id.clone(), channels, data, label, (entry.spacing[0], entry.spacing[1]))
    }

    /// All cases of `split`, in manifest order. Errors when there are none.
    pub fn load_split(&self, split: &str) -> Result<Vec<SegSample>> {
        let entries = self.entries(split);
        if entries.is_empty() {
            return Err(Error::Data(format!(
                "dataset {} has no `{split}` cases",
                self.root.display()
            )));
        }
        entries.into_iter().map(|e| self.load_case(e)).collect()
    }
}
