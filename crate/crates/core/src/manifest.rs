//! JSON dataset manifests: which files play which role, and how paired
//! entries are associated.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    SourceClear,
    SourceDegraded,
    Target,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: PathBuf,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

impl Entry {
    /// Explicit pair id, falling back to the file stem.
    pub fn pair_key(&self) -> String {
        self.pair_id.clone().unwrap_or_else(|| file_stem(&self.path))
    }
}

pub(crate) fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub entries: Vec<Entry>,
}

/// A paired record whose paths have been resolved against the manifest root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub id: String,
    pub first: PathBuf,
    pub second: PathBuf,
}

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

pub(crate) fn is_image_file(path: &Path) -> bool {
    path.extension()
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.root.is_relative() {
            if let Some(parent) = path.parent() {
                manifest.root = parent.join(&manifest.root);
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Build a manifest from role directories below `root`. Entries are
    /// sorted by path, so scanning is reproducible.
    pub fn scan(root: impl AsRef<Path>, dirs: &[(&str, Role)], seed: u64) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut entries = Vec::new();
        for (sub, role) in dirs {
            for file in list_images(&root.join(sub))? {
                let rel = file.strip_prefix(&root).unwrap_or(&file).to_path_buf();
                entries.push(Entry {
                    path: rel,
                    role: *role,
                    pair_id: None,
                });
            }
        }
        entries.sort_by(|a, b| (a.role, &a.path).cmp(&(b.role, &b.path)));
        Ok(Self {
            root,
            seed,
            entries,
        })
    }

    pub fn resolve(&self, entry: &Entry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    pub fn paths(&self, role: Role) -> Vec<PathBuf> {
        self.with_role(role).map(|e| self.resolve(e)).collect()
    }

    /// Check file existence and the pairing invariant; returns the entries
    /// with resolved paths, in manifest order.
    pub fn validate(&self) -> Result<Vec<Entry>> {
        for e in &self.entries {
            let p = self.resolve(e);
            if !p.is_file() {
                return Err(Error::Data(format!("manifest entry missing: {}", p.display())));
            }
        }
        self.pairs(Role::SourceDegraded, Role::SourceClear)?;
        Ok(self
            .entries
            .iter()
            .map(|e| Entry {
                path: self.resolve(e),
                role: e.role,
                pair_id: e.pair_id.clone(),
            })
            .collect())
    }

    /// Associate every `from` entry with exactly one `to` entry sharing its
    /// pair key. Pairs are returned sorted by id with paths `(from, to)`.
    pub fn pairs(&self, from: Role, to: Role) -> Result<Vec<Pair>> {
        let mut partners: BTreeMap<String, Vec<&Entry>> = BTreeMap::new();
        for e in self.with_role(to) {
            partners.entry(e.pair_key()).or_default().push(e);
        }
        let mut out = Vec::new();
        for e in self.with_role(from) {
            let key = e.pair_key();
            match partners.get(&key).map(Vec::as_slice) {
                Some([only]) => out.push(Pair {
                    id: key,
                    first: self.resolve(e),
                    second: self.resolve(only),
                }),
                Some(many) if many.len() > 1 => {
                    return Err(Error::Data(format!(
                        "pair id {key:?} has {} {to:?} partners",
                        many.len()
                    )))
                }
                _ => {
                    return Err(Error::Data(format!(
                        "{from:?} entry {key:?} has no {to:?} partner"
                    )))
                }
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, rel: &str) {
        let p = dir.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        image::RgbImage::new(2, 2).save(&p).unwrap();
    }

    #[test]
    fn scan_is_deterministic_and_pairs_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b", "a", "c"] {
            touch(dir.path(), &format!("clear/{name}.png"));
            touch(dir.path(), &format!("degraded/{name}.png"));
        }
        let dirs = [("clear", Role::SourceClear), ("degraded", Role::SourceDegraded)];
        let m1 = DatasetManifest::scan(dir.path(), &dirs, 3).unwrap();
        let m2 = DatasetManifest::scan(dir.path(), &dirs, 3).unwrap();
        assert_eq!(m1.validate().unwrap(), m2.validate().unwrap());
        let pairs = m1.pairs(Role::SourceDegraded, Role::SourceClear).unwrap();
        assert_eq!(pairs.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert!(pairs[0].first.ends_with("degraded/a.png"));
        assert!(pairs[0].second.ends_with("clear/a.png"));
    }

    #[test]
    fn explicit_pair_ids_override_stems() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "x.png");
        touch(dir.path(), "y.png");
        let m = DatasetManifest {
            root: dir.path().into(),
            seed: 0,
            entries: vec![
                Entry { path: "x.png".into(), role: Role::SourceClear, pair_id: Some("p".into()) },
                Entry { path: "y.png".into(), role: Role::SourceDegraded, pair_id: Some("p".into()) },
            ],
        };
        assert_eq!(m.validate().unwrap().len(), 2);
    }

    #[test]
    fn orphan_and_duplicate_partners_fail() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["c1.png", "c2.png", "d.png"] {
            touch(dir.path(), f);
        }
        let entry = |p: &str, role, id: &str| Entry { path: p.into(), role, pair_id: Some(id.into()) };
        let orphan = DatasetManifest {
            root: dir.path().into(),
            seed: 0,
            entries: vec![entry("d.png", Role::SourceDegraded, "k")],
        };
        assert!(matches!(orphan.validate(), Err(Error::Data(_))));
        let dup = DatasetManifest {
            root: dir.path().into(),
            seed: 0,
            entries: vec![
                entry("c1.png", Role::SourceClear, "k"),
                entry("c2.png", Role::SourceClear, "k"),
                entry("d.png", Role::SourceDegraded, "k"),
            ],
        };
        assert!(matches!(dup.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn missing_file_fails_validation() {
        let m = DatasetManifest {
            root: "/nonexistent".into(),
            seed: 0,
            entries: vec![Entry { path: "t.png".into(), role: Role::Target, pair_id: None }],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_shape() {
        let text = r#"{"root": "/data", "seed": 5, "entries": [
            {"path": "a.png", "role": "source-clear"},
            {"path": "b.png", "role": "source-degraded", "pair_id": "a"},
            {"path": "t.png", "role": "target"},
            {"path": "r.png", "role": "reference"}]}"#;
        let m: DatasetManifest = serde_json::from_str(text).unwrap();
        assert_eq!(m.seed, 5);
        assert_eq!(m.entries[1].pair_key(), "a");
        assert_eq!(m.entries[0].pair_key(), "a");
        assert_eq!(m.entries[3].role, Role::Reference);
        let back: DatasetManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
