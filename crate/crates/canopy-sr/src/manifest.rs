//! Dataset manifests: one `path split` pair per line, `#` starts a comment.
//! Relative paths are resolved against the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{AppError, AppResult};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(path), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(format!("line {}: expected `<path> <split>`", i + 1));
            };
            let split = split.parse().map_err(|e| format!("line {}: {e}", i + 1))?;
            let path = Path::new(path);
            let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
            entries.push(Entry { path, split });
        }
        Ok(Self { entries })
    }

    /// Reads `dir/manifest.txt`, or the file itself if `path` is a file.
    pub fn load(path: &Path) -> AppResult<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        if !file.is_file() {
            return Err(AppError::Usage(format!("manifest not found: {}", file.display())));
        }
        let text = fs::read_to_string(&file).map_err(|e| AppError::io(&file, e))?;
        let base = file.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|reason| AppError::format(&file, reason))
    }

    pub fn paths(&self, split: Split) -> Vec<&Path> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.path.as_path())
            .collect()
    }

    /// Lines with paths relative to `base` where possible.
    pub fn render(&self, base: &Path) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            out.push_str(&format!("{} {}\n", p.display(), e.split));
        }
        out
    }
}
