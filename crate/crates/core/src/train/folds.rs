use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatalistEntry {
    pub image: String,
    pub label: String,
    #[serde(default)]
    pub fold: usize,
}

/// The `dataset.json` datalist: image/label paths with a fold number each.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Datalist {
    pub training: Vec<DatalistEntry>,
}

impl Datalist {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn num_folds(&self) -> usize {
        self.training.iter().map(|e| e.fold + 1).max().unwrap_or(0)
    }

    /// Checks that every fold in `0..folds` is populated and none lies
    /// outside it.
    pub fn validate(&self, folds: usize) -> Result<()> {
        if self.training.is_empty() {
            return Err(Error::Config("datalist has no training entries".into()));
        }
        if let Some(e) = self.training.iter().find(|e| e.fold >= folds) {
            return Err(Error::Config(format!("entry {} has fold {} outside [0, {folds})", e.image, e.fold)));
        }
        for f in 0..folds {
            if !self.training.iter().any(|e| e.fold == f) {
                return Err(Error::Config(format!("fold {f} has no cases")));
            }
        }
        Ok(())
    }

    /// Case identifier: the image file name without volume extensions.
    pub fn case_id(entry: &DatalistEntry) -> String {
        let name = Path::new(&entry.image)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| entry.image.clone());
        let name = name.trim_end_matches(".gz").trim_end_matches(".nii").trim_end_matches(".vol");
        name.trim_end_matches("_image").to_string()
    }

    pub fn resolve(root: &Path, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    }
}

/// Seeded shuffle followed by round-robin assignment. Returns the fold of
/// each case in input order; fold sizes differ by at most one.
pub fn make_folds<S: AsRef<str>>(case_ids: &[S], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if case_ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} cases cannot fill {k} folds",
            case_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..case_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; case_ids.len()];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn even_split() {
        let f = make_folds(&ids(10), 5, 1).unwrap();
        for k in 0..5 {
            assert_eq!(f.iter().filter(|v| **v == k).count(), 2);
        }
        assert_eq!(f, make_folds(&ids(10), 5, 1).unwrap());
    }

    #[test]
    fn uneven_split_follows_shuffle_order() {
        let f = make_folds(&ids(11), 5, 3).unwrap();
        let sizes: Vec<usize> = (0..5).map(|k| f.iter().filter(|v| **v == k).count()).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        let mut order: Vec<usize> = (0..11).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(f[order[10]], 0);
    }

    #[test]
    fn too_few_cases() {
        assert!(make_folds(&ids(3), 5, 0).is_err());
    }

    #[test]
    fn case_id_strips_extensions() {
        let e = DatalistEntry { image: "imgs/case_007_image.nii.gz".into(), label: String::new(), fold: 0 };
        assert_eq!(Datalist::case_id(&e), "case_007");
    }
}
