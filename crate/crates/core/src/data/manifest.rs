//! Dataset manifest (`manifest.json`).
//!
//! ```json
//! {"images": [{"path": "images/train_00000.ppm", "split": "train",
//!              "captions": ["a single red circle"], "scene": {...}}]}
//! ```
//! `path` is relative to the manifest's directory unless absolute; `scene`
//! is optional and only written by the toy generator.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::toy::Scene;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub path: String,
    pub split: Split,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<Scene>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub images: Vec<Entry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.images.iter().enumerate() {
            if e.path.is_empty() {
                return Err(Error::Format(format!("manifest entry {i} has an empty path")));
            }
            if e.captions.is_empty() {
                return Err(Error::Format(format!("manifest entry `{}` has no captions", e.path)));
            }
            if !seen.insert(e.path.as_str()) {
                return Err(Error::Format(format!("image `{}` listed more than once", e.path)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn split(&self, split: Split) -> Vec<&Entry> {
        self.images.iter().filter(|e| e.split == split).collect()
    }
}

/// Resolve an entry path against the manifest location.
pub fn resolve(manifest_path: &Path, entry: &Entry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest {
            images: vec![
                Entry {
                    path: "a.ppm".into(),
                    split: Split::Train,
                    captions: vec!["a red circle".into()],
                    scene: None,
                },
                Entry {
                    path: "b.ppm".into(),
                    split: Split::Test,
                    captions: vec!["x".into(), "y".into()],
                    scene: None,
                },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let m = sample();
        assert_eq!(Manifest::parse(&m.to_json()).unwrap(), m);
        assert_eq!(m.split(Split::Test).len(), 1);
    }

    #[test]
    fn rejects_invalid() {
        let mut m = sample();
        m.images[1].captions.clear();
        assert!(Manifest::parse(&m.to_json()).is_err());
        let mut m = sample();
        m.images[1].path = "a.ppm".into();
        assert!(Manifest::parse(&m.to_json()).is_err());
        assert!(Manifest::parse(r#"{"images": [{"path": "a", "split": "dev", "captions": ["x"]}]}"#).is_err());
        assert!(Manifest::parse("{").is_err());
    }

    #[test]
    fn resolves_relative_paths() {
        let e = &sample().images[0];
        assert_eq!(resolve(Path::new("/data/m.json"), e), PathBuf::from("/data/a.ppm"));
    }
}
