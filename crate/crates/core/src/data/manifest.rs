use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub track: String,
    pub stem: String,
    pub path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(entries
        .into_iter()
        .map(|mut e| {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            e
        })
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusLayout {
    /// `{split}/{track}/{stem}.wav`; `mixture.wav` is skipped.
    Musdb,
    /// `{track}/{stem}/{file}.wav`.
    Moisesdb,
}

impl std::str::FromStr for CorpusLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "musdb" | "musdb18hq" | "musdb18-hq" => Ok(Self::Musdb),
            "moisesdb" => Ok(Self::Moisesdb),
            other => Err(Error::arg(format!("unknown corpus layout `{other}` (valid: musdb, moisesdb)"))),
        }
    }
}

fn wav_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            wav_files(&p, out)?;
        } else if p
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("wav"))
        {
            out.push(p);
        }
    }
    Ok(())
}

fn name_of(p: Option<&Path>) -> Option<String> {
    p.and_then(Path::file_name).map(|s| s.to_string_lossy().into_owned())
}

/// Lists stems under `root`, sorted by path.
pub fn scan_corpus(root: &Path, layout: CorpusLayout) -> Result<Vec<ManifestEntry>> {
    let mut files = Vec::new();
    wav_files(root, &mut files)?;
    let mut out = Vec::new();
    for path in files {
        let file_stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let parent = path.parent();
        let (track, stem) = match layout {
            CorpusLayout::Musdb => {
                if file_stem.eq_ignore_ascii_case("mixture") {
                    continue;
                }
                (name_of(parent), Some(file_stem))
            }
            CorpusLayout::Moisesdb => (name_of(parent.and_then(Path::parent)), name_of(parent)),
        };
        match (track, stem) {
            (Some(track), Some(stem)) => out.push(ManifestEntry { track, stem, path }),
            _ => return Err(Error::Data(format!("{}: does not match the corpus layout", path.display()))),
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no stems found under {}", root.display())));
    }
    Ok(out)
}
