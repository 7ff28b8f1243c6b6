use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One line of a manifest: `split path sample_count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: String,
    /// As written; relative paths are resolved against the manifest's directory.
    pub path: PathBuf,
    pub count: u64,
}

/// Plain-text list of feature files. Fields are whitespace-separated, so
/// paths may not contain spaces; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [split, path, count] = fields[..] else {
                return Err(Error::Format(format!("manifest line {}: expected `split path count`", n + 1)));
            };
            let count = count
                .parse()
                .map_err(|_| Error::Format(format!("manifest line {}: bad count {count:?}", n + 1)))?;
            if entries.iter().any(|e: &ManifestEntry| e.split == split) {
                return Err(Error::Format(format!("manifest line {}: duplicate split {split:?}", n + 1)));
            }
            entries.push(ManifestEntry { split: split.to_string(), path: PathBuf::from(path), count });
        }
        Ok(Manifest { entries, base_dir: base_dir.into() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# split path sample_count\n");
        for e in &self.entries {
            writeln!(s, "{} {} {}", e.split, e.path.display(), e.count).expect("write to string");
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, split: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.split == split)
            .ok_or_else(|| Error::Validation(format!("manifest has no {split:?} split")))
    }

    /// Absolute (or base-relative) path of a split's feature file.
    pub fn resolve(&self, split: &str) -> Result<PathBuf> {
        let e = self.get(split)?;
        Ok(if e.path.is_absolute() { e.path.clone() } else { self.base_dir.join(&e.path) })
    }

    /// Read a split and check its sample count against the manifest.
    pub fn read_split(&self, split: &str) -> Result<super::Dataset> {
        let ds = super::read_dataset(self.resolve(split)?)?;
        let want = self.get(split)?.count;
        if ds.len() as u64 != want {
            return Err(Error::Validation(format!(
                "split {split:?}: manifest lists {want} samples, file holds {}",
                ds.len()
            )));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let m = Manifest::parse("# header\ntrain train.feat 20\n\ntest  /abs/test.feat 5 # tail\n", "/data").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.resolve("train").unwrap(), PathBuf::from("/data/train.feat"));
        assert_eq!(m.resolve("test").unwrap(), PathBuf::from("/abs/test.feat"));
        assert_eq!(m.get("test").unwrap().count, 5);
        let again = Manifest::parse(&m.to_text(), "/data").unwrap();
        assert_eq!(again, m);
        assert!(m.get("val").is_err());
    }

    #[test]
    fn malformed_lines() {
        assert!(Manifest::parse("train a.feat", "").is_err());
        assert!(Manifest::parse("train a.feat x", "").is_err());
        assert!(Manifest::parse("train a.feat 1 extra", "").is_err());
        assert!(Manifest::parse("train a 1\ntrain b 2", "").is_err());
    }
}
