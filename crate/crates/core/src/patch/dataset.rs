use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::synthetic::{generate, SyntheticSpec};
use super::{darlpack, pnm, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetFormat {
    PgmDir,
    PpmDir,
    Darlpack,
    Synthetic,
}

impl DatasetFormat {
    pub const ALL: [DatasetFormat; 4] = [
        DatasetFormat::PgmDir,
        DatasetFormat::PpmDir,
        DatasetFormat::Darlpack,
        DatasetFormat::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetFormat::PgmDir => "pgm_dir",
            DatasetFormat::PpmDir => "ppm_dir",
            DatasetFormat::Darlpack => "darlpack",
            DatasetFormat::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown dataset format `{s}`")))
    }
}

/// An in-memory list of images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    /// Class names by label index, when known.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        Dataset {
            records,
            class_names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.label.is_some())
    }

    pub fn num_classes(&self) -> usize {
        let from_labels = self
            .records
            .iter()
            .filter_map(|r| r.label)
            .max()
            .map_or(0, |m| m as usize + 1);
        from_labels.max(self.class_names.len())
    }

    /// Splits off every `every`-th record of each class (every `every`-th
    /// record overall when unlabeled) as a held-out set.
    pub fn split_holdout(&self, every: usize) -> (Dataset, Dataset) {
        let every = every.max(2);
        let mut seen: std::collections::HashMap<Option<u32>, usize> = Default::default();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for r in &self.records {
            let n = seen.entry(r.label).or_default();
            *n += 1;
            if *n % every == 0 {
                test.push(r.clone());
            } else {
                train.push(r.clone());
            }
        }
        let names = self.class_names.clone();
        (
            Dataset {
                records: train,
                class_names: names.clone(),
            },
            Dataset {
                records: test,
                class_names: names,
            },
        )
    }
}

/// Record visiting order for `epoch`: a shuffle that depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, &[0x0e90c, epoch]).shuffle(&mut order);
    order
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn has_extension(p: &Path, ext: &str) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Loads a directory of images. Sub-directories (in sorted order) become
/// classes; image files directly inside `dir` are unlabeled.
fn load_image_dir(dir: &Path, ext: &str) -> Result<Dataset> {
    let entries = sorted_entries(dir)?;
    let mut ds = Dataset::default();
    let subdirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    if subdirs.is_empty() {
        for p in entries.iter().filter(|p| has_extension(p, ext)) {
            ds.records.push(pnm::read_record(p, None)?);
        }
    } else {
        for (label, sub) in subdirs.iter().enumerate() {
            ds.class_names
                .push(sub.file_name().unwrap_or_default().to_string_lossy().into_owned());
            for p in sorted_entries(sub)?.iter().filter(|p| has_extension(p, ext)) {
                ds.records.push(pnm::read_record(p, Some(label as u32))?);
            }
        }
    }
    if ds.is_empty() {
        return Err(Error::invalid(format!(
            "no .{ext} images found under {}",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Loads a dataset in `format`. `path` is required except for `synthetic`,
/// which is generated from `synthetic`.
pub fn load_dataset(
    format: DatasetFormat,
    path: Option<&Path>,
    synthetic: &SyntheticSpec,
) -> Result<Dataset> {
    let need_path = || path.ok_or_else(|| Error::config("dataset.path", "required for this format"));
    match format {
        DatasetFormat::Synthetic => {
            if synthetic.count == 0 || synthetic.size == 0 || synthetic.channels == 0 {
                return Err(Error::config("dataset.count", "synthetic dataset must be non-empty"));
            }
            Ok(Dataset {
                records: generate(synthetic),
                class_names: super::synthetic::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            })
        }
        DatasetFormat::Darlpack => Ok(Dataset::new(darlpack::read(need_path()?)?)),
        DatasetFormat::PgmDir => load_image_dir(need_path()?, "pgm"),
        DatasetFormat::PpmDir => load_image_dir(need_path()?, "ppm"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_seeded_permutation() {
        let a = epoch_order(20, 3, 0);
        assert_eq!(a, epoch_order(20, 3, 0));
        assert_ne!(a, epoch_order(20, 3, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn class_directories() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(4, 4, 1, 0);
        let recs = generate(&spec);
        for (i, name) in ["b_cls", "a_cls"].iter().enumerate() {
            let sub = dir.path().join(name);
            fs::create_dir(&sub).unwrap();
            for j in 0..2 {
                pnm::write(&sub.join(format!("{j}.pgm")), &recs[2 * i + j].pixels).unwrap();
            }
        }
        let ds = load_dataset(DatasetFormat::PgmDir, Some(dir.path()), &spec).unwrap();
        assert_eq!(ds.class_names, vec!["a_cls", "b_cls"]);
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.records[0].pixels, recs[2].pixels);
        assert_eq!(ds.records[0].label, Some(0));
        assert!(ds.is_labeled());
        assert!(load_dataset(DatasetFormat::PpmDir, Some(dir.path()), &spec).is_err());
    }

    #[test]
    fn missing_path_names_key() {
        let err = load_dataset(DatasetFormat::Darlpack, None, &SyntheticSpec::new(1, 4, 1, 0))
            .unwrap_err();
        assert!(err.to_string().contains("dataset.path"));
    }

    #[test]
    fn holdout_split() {
        let ds = load_dataset(DatasetFormat::Synthetic, None, &SyntheticSpec::new(40, 4, 1, 0))
            .unwrap();
        let (tr, te) = ds.split_holdout(5);
        assert_eq!((tr.len(), te.len()), (32, 8));
        assert_eq!(te.num_classes(), 4);
        let mut per_class = [0; 4];
        for r in &te.records {
            per_class[r.label.unwrap() as usize] += 1;
        }
        assert_eq!(per_class, [2; 4]);
        assert_eq!(ds.num_classes(), 4);
    }
}
