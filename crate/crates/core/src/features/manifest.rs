use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One `speaker_id<TAB>wav_path` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub speaker: String,
    /// Path exactly as written in the manifest; doubles as the utterance id.
    pub utterance_id: String,
    /// `utterance_id` resolved against the manifest's directory.
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses manifest text; `#` lines and blank lines are skipped.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (speaker, wav) = line.split_once('\t').ok_or_else(|| {
                Error::Parse(format!("manifest line {}: expected `speaker<TAB>path`", n + 1))
            })?;
            if speaker.is_empty() || wav.is_empty() || wav.contains('\t') {
                return Err(Error::Parse(format!("manifest line {}: malformed entry", n + 1)));
            }
            entries.push(ManifestEntry {
                speaker: speaker.to_string(),
                utterance_id: wav.to_string(),
                path: base.join(wav),
            });
        }
        Ok(Manifest { entries })
    }

    /// Sorted distinct speaker ids; a speaker's label is its index here.
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.speaker.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# speaker_id\twav_path\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}", e.speaker, e.utterance_id);
        }
        s
    }
}
