use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::clip::{read_clip, VideoClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::input(format!("unknown split {other:?}"))),
        }
    }
}

/// A list of clip files with class indices.
///
/// On disk: optional `# classes: a,b,c` and `# split: train|test` header
/// lines, then one `path<TAB>class_index` line per clip. Relative paths are
/// resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<(PathBuf, usize)>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn new(entries: Vec<(PathBuf, usize)>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let m = DatasetManifest {
            entries,
            class_names,
            split,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (path, class) in &self.entries {
            if !self.class_names.is_empty() && *class >= self.class_names.len() {
                return Err(Error::input(format!(
                    "{}: class {class} out of range for {} classes",
                    path.display(),
                    self.class_names.len()
                )));
            }
            if !seen.insert(path) {
                return Err(Error::input(format!("duplicate manifest path {}", path.display())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# classes: {}\n# split: {}\n", self.class_names.join(","), self.split);
        for (path, class) in &self.entries {
            out.push_str(&format!("{}\t{class}\n", path.display()));
        }
        out
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut class_names = Vec::new();
        let mut split = Split::Train;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(names) = comment.strip_prefix("classes:") {
                    class_names = names
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect();
                } else if let Some(s) = comment.strip_prefix("split:") {
                    split = s.trim().parse()?;
                }
                continue;
            }
            let (path, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::input(format!("manifest line {}: expected path<TAB>class", no + 1)))?;
            let class = class
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::input(format!("manifest line {}: bad class index {class:?}", no + 1)))?;
            let path = PathBuf::from(path);
            let path = if path.is_absolute() { path } else { base.join(path) };
            entries.push((path, class));
        }
        Self::new(entries, class_names, split)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&fs::read_to_string(path)?, base)
    }

    /// Reads every clip, checking that the stored label agrees with the manifest.
    pub fn read_clips(&self) -> Result<Vec<VideoClip>> {
        self.entries
            .iter()
            .map(|(path, class)| {
                let clip = read_clip(path)?;
                if clip.label != *class {
                    return Err(Error::input(format!(
                        "{}: manifest class {class} but file label {}",
                        path.display(),
                        clip.label
                    )));
                }
                Ok(clip)
            })
            .collect()
    }

    pub fn class_count(&self) -> usize {
        if self.class_names.is_empty() {
            self.entries.iter().map(|(_, c)| c + 1).max().unwrap_or(0)
        } else {
            self.class_names.len()
        }
    }
}
