use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cochlear::frame_count;
use crate::error::{Error, Result};
use crate::signal::{read_wav, Waveform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speech,
    Noise,
    Music,
}

/// One manifest entry. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub audio: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
}

/// JSON manifest: `{"classes": [...], "items": [{"audio", "labels"?, "role"?}]}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
}

/// A decoded manifest item.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub name: String,
    pub wave: Waveform,
    /// One class index per 5 ms frame; `-1` marks unlabeled frames.
    pub labels: Option<Vec<i32>>,
    pub role: Option<Role>,
}

/// Manifest contents held in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub items: Vec<Item>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Reads a manifest and every file it references.
    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::read(path)?.resolve(base)
    }

    /// Decodes all referenced files, resolving relative paths against `base`.
    pub fn resolve(&self, base: &Path) -> Result<Dataset> {
        if self.items.is_empty() {
            return Err(Error::Manifest("manifest has no items".into()));
        }
        let mut items = Vec::with_capacity(self.items.len());
        for it in &self.items {
            let audio = base.join(&it.audio);
            let wave = read_wav(&audio)
                .map_err(|e| Error::Manifest(format!("{}: {e}", audio.display())))?;
            let labels = match &it.labels {
                Some(l) => {
                    let lp = base.join(l);
                    let labels = read_labels(&lp)?;
                    let expected = frame_count(wave.len());
                    if labels.len() != expected {
                        return Err(Error::Manifest(format!(
                            "{}: {} labels for {} frames",
                            lp.display(),
                            labels.len(),
                            expected
                        )));
                    }
                    if let Some(&bad) = labels.iter().find(|&&c| c < -1) {
                        return Err(Error::Manifest(format!(
                            "{}: invalid label {bad}",
                            lp.display()
                        )));
                    }
                    Some(labels)
                }
                None => None,
            };
            items.push(Item {
                name: it.audio.display().to_string(),
                wave,
                labels,
                role: it.role,
            });
        }
        Ok(Dataset {
            classes: self.classes.clone(),
            items,
        })
    }
}

/// Frame labels: CSV/whitespace text when the extension is `.csv` or `.txt`,
/// otherwise little-endian `i32` binary.
pub fn read_labels(path: &Path) -> Result<Vec<i32>> {
    let bytes = fs::read(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let text = matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("csv") | Some("txt")
    );
    if text {
        let s = String::from_utf8(bytes)
            .map_err(|_| Error::Manifest(format!("{}: not utf-8", path.display())))?;
        s.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<i32>()
                    .map_err(|_| Error::Manifest(format!("{}: bad label `{t}`", path.display())))
            })
            .collect()
    } else {
        if bytes.len() % 4 != 0 {
            return Err(Error::Manifest(format!(
                "{}: {} bytes is not a whole number of i32 labels",
                path.display(),
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Writes labels in the format implied by the extension (see [`read_labels`]).
pub fn write_labels(path: &Path, labels: &[i32]) -> Result<()> {
    let text = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("csv") | Some("txt")
    );
    let bytes = if text {
        let mut s = labels
            .iter()
            .map(i32::to_string)
            .collect::<Vec<_>>()
            .join("\n");
        s.push('\n');
        s.into_bytes()
    } else {
        labels.iter().flat_map(|l| l.to_le_bytes()).collect()
    };
    fs::write(path, bytes)?;
    Ok(())
}

impl Dataset {
    /// Number of classes: the class table size, or one past the largest label.
    pub fn n_classes(&self) -> usize {
        let from_labels = self
            .items
            .iter()
            .filter_map(|i| i.labels.as_ref())
            .flat_map(|l| l.iter().copied())
            .max()
            .map_or(0, |m| (m + 1).max(0) as usize);
        self.classes.len().max(from_labels)
    }

    /// Items acting as clean targets (role speech or unset).
    pub fn targets(&self) -> Vec<&Item> {
        self.items
            .iter()
            .filter(|i| matches!(i.role, None | Some(Role::Speech)))
            .collect()
    }

    /// Items acting as interferers (role noise or music).
    pub fn interferers(&self) -> Vec<&Item> {
        self.items
            .iter()
            .filter(|i| matches!(i.role, Some(Role::Noise) | Some(Role::Music)))
            .collect()
    }
}
