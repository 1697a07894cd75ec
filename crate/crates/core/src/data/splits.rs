use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::DatasetKind;

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "gif"];

/// Image and mask paths sharing one basename.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePaths {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

fn images_in(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::data(dir, e.to_string()))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem() {
            out.insert(stem.to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

/// Pairs `<root>/images/*` with `<root>/masks/*` by basename, sorted by id.
pub fn list_pairs(root: &Path) -> Result<Vec<SamplePaths>> {
    let layout = "expected <root>/images/<id>.{png,jpg,tif} and <root>/masks/<id>.png";
    let (idir, mdir) = (root.join("images"), root.join("masks"));
    if !idir.is_dir() || !mdir.is_dir() {
        return Err(Error::data(root, format!("missing images/ or masks/ directory; {layout}")));
    }
    let images = images_in(&idir)?;
    let mut masks = images_in(&mdir)?;
    let missing: Vec<&str> = images.keys().filter(|k| !masks.contains_key(*k)).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(Error::data(&mdir, format!("no mask for: {}", missing.join(", "))));
    }
    if images.is_empty() {
        return Err(Error::data(&idir, format!("no images found; {layout}")));
    }
    Ok(images
        .into_iter()
        .map(|(id, image)| {
            let mask = masks.remove(&id).expect("checked above");
            SamplePaths { id, image, mask }
        })
        .collect())
}

/// Disjoint train/test id lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub dataset: DatasetKind,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    /// Applies the dataset's split rule to ids (sorted internally).
    pub fn from_ids(dataset: DatasetKind, ids: &[String]) -> Result<Self> {
        let mut ids = ids.to_vec();
        ids.sort();
        let expect = |train: usize, test: usize| -> Result<()> {
            if ids.len() != train + test {
                return Err(Error::InvalidArgument(format!(
                    "{dataset} expects {} images ({train} train + {test} test), found {}",
                    train + test,
                    ids.len()
                )));
            }
            Ok(())
        };
        let (train, test) = match dataset {
            DatasetKind::Drive => {
                expect(20, 20)?;
                (ids[..20].to_vec(), ids[20..].to_vec())
            }
            DatasetKind::ChaseDb1 => {
                expect(8, 20)?;
                (ids[..8].to_vec(), ids[8..].to_vec())
            }
            DatasetKind::Hrf => {
                expect(15, 30)?;
                let mut by_cat: BTreeMap<String, Vec<String>> = BTreeMap::new();
                for id in &ids {
                    let cat = id.rsplit_once('_').map_or("", |(_, c)| c).to_string();
                    by_cat.entry(cat).or_default().push(id.clone());
                }
                if by_cat.len() != 3 || by_cat.values().any(|v| v.len() != 15) {
                    let counts: Vec<String> = by_cat.iter().map(|(k, v)| format!("`{k}`: {}", v.len())).collect();
                    return Err(Error::InvalidArgument(format!(
                        "hrf expects 3 categories of 15 images (ids like 01_h), found {}",
                        counts.join(", ")
                    )));
                }
                let (mut train, mut test) = (Vec::new(), Vec::new());
                for v in by_cat.into_values() {
                    train.extend_from_slice(&v[..5]);
                    test.extend_from_slice(&v[5..]);
                }
                train.sort();
                test.sort();
                (train, test)
            }
            DatasetKind::Synth => {
                let half = ids.len().div_ceil(2);
                (ids[..half].to_vec(), ids[half..].to_vec())
            }
        };
        Ok(SplitSpec { dataset, train, test })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for id in &self.train {
            let _ = writeln!(s, "train {id}");
        }
        for id in &self.test {
            let _ = writeln!(s, "test {id}");
        }
        s
    }

    pub fn parse(dataset: DatasetKind, text: &str) -> Result<Self> {
        let mut spec = SplitSpec {
            dataset,
            train: Vec::new(),
            test: Vec::new(),
        };
        let mut seen = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (kind, id) = line
                .trim()
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::InvalidArgument(format!("split line {}: `{line}`", i + 1)))?;
            let id = id.trim().to_string();
            if seen.insert(id.clone(), kind.to_string()).is_some() {
                return Err(Error::InvalidArgument(format!("split line {}: `{id}` listed twice", i + 1)));
            }
            match kind {
                "train" => spec.train.push(id),
                "test" => spec.test.push(id),
                _ => return Err(Error::InvalidArgument(format!("split line {}: unknown kind `{kind}`", i + 1))),
            }
        }
        Ok(spec)
    }
}

/// Lists `root` and applies the dataset's split rule.
pub fn make_splits(root: &Path, dataset: DatasetKind) -> Result<SplitSpec> {
    let ids: Vec<String> = list_pairs(root)?.into_iter().map(|p| p.id).collect();
    SplitSpec::from_ids(dataset, &ids)
}
