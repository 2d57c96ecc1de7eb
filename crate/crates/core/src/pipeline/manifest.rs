//! Dataset manifests: one JSON object per line with an id, a feature-file
//! path (relative paths resolve against the manifest's directory), the
//! reference captions and a split tag.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::captioner::FeatureGrid;
use crate::error::{Error, Result};
use crate::pipeline::features;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
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

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::contract(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub features: String,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative feature paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for e in &entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::contract(format!("duplicate manifest id {:?}", e.id)));
            }
            if e.captions.is_empty() {
                return Err(Error::contract(format!("entry {:?} has no captions", e.id)));
            }
        }
        Ok(DatasetManifest { entries, base_dir: base_dir.into() })
    }

    pub fn parse(text: &str, base_dir: &Path, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry =
                serde_json::from_str(line).map_err(|e| Error::format(format!("{origin}:{}", n + 1), e.to_string()))?;
            entries.push(e);
        }
        Self::new(entries, base_dir).map_err(|e| Error::format(origin, e.to_string()))
    }

    /// Reads the manifest; feature files are checked lazily by
    /// [`DatasetManifest::load_features`] or eagerly by [`DatasetManifest::validate_files`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, &path.display().to_string())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.features);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_features(&self, entry: &ManifestEntry) -> Result<FeatureGrid> {
        features::load(&self.resolve(entry))
    }

    pub fn validate_files(&self) -> Result<()> {
        for e in &self.entries {
            self.load_features(e)?;
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"{"id":"a","features":"a.fgrd","captions":["a red square"],"split":"train"}
{"id":"b","features":"/abs/b.fgrd","captions":["x","y"],"split":"test"}
"#;

    #[test]
    fn parse_and_round_trip() {
        let m = DatasetManifest::parse(TWO, Path::new("/data"), "m").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/data/a.fgrd"));
        assert_eq!(m.resolve(&m.entries[1]), PathBuf::from("/abs/b.fgrd"));
        assert_eq!(m.split(Split::Test).count(), 1);
        assert_eq!(m.to_jsonl(), TWO);
    }

    #[test]
    fn rejects_bad_manifests() {
        let dup = TWO.replace("\"b\"", "\"a\"");
        assert!(DatasetManifest::parse(&dup, Path::new("."), "m").is_err());
        let empty = TWO.replace("[\"a red square\"]", "[]");
        assert!(DatasetManifest::parse(&empty, Path::new("."), "m").is_err());
        let split = TWO.replace("\"test\"", "\"holdout\"");
        assert!(DatasetManifest::parse(&split, Path::new("."), "m").is_err());
        let extra = TWO.replace("\"split\":\"train\"", "\"split\":\"train\",\"x\":1");
        assert!(DatasetManifest::parse(&extra, Path::new("."), "m").is_err());
    }

    #[test]
    fn missing_feature_file_names_the_path() {
        let m = DatasetManifest::parse(TWO, Path::new("/nonexistent"), "m").unwrap();
        let err = m.validate_files().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/a.fgrd"), "{err}");
    }
}
