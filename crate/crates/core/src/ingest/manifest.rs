use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The closed set of dance styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DanceStyle {
    Ballet,
    Breakdance,
    Flamenco,
    Foxtrot,
    Latin,
    Quickstep,
    Square,
    Swing,
    Tango,
    Waltz,
}

impl DanceStyle {
    pub const ALL: [DanceStyle; 10] = [
        DanceStyle::Ballet,
        DanceStyle::Breakdance,
        DanceStyle::Flamenco,
        DanceStyle::Foxtrot,
        DanceStyle::Latin,
        DanceStyle::Quickstep,
        DanceStyle::Square,
        DanceStyle::Swing,
        DanceStyle::Tango,
        DanceStyle::Waltz,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DanceStyle::Ballet => "ballet",
            DanceStyle::Breakdance => "breakdance",
            DanceStyle::Flamenco => "flamenco",
            DanceStyle::Foxtrot => "foxtrot",
            DanceStyle::Latin => "latin",
            DanceStyle::Quickstep => "quickstep",
            DanceStyle::Square => "square",
            DanceStyle::Swing => "swing",
            DanceStyle::Tango => "tango",
            DanceStyle::Waltz => "waltz",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DanceStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DanceStyle {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        DanceStyle::ALL
            .iter()
            .copied()
            .find(|style| style.as_str() == s)
            .ok_or_else(|| format!("unknown style label `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub audio_path: PathBuf,
    pub pose_path: PathBuf,
    pub style: DanceStyle,
}

/// A validated list of audio/pose pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Builds a manifest, checking id uniqueness and per-modality path
    /// distinctness. File existence is only checked by [`load_manifest`].
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut ids = HashSet::new();
        let mut audio = HashSet::new();
        let mut pose = HashSet::new();
        for e in &entries {
            if !ids.insert(e.clip_id.as_str()) {
                return Err(Error::DuplicateClip(e.clip_id.clone()));
            }
            if !audio.insert(e.audio_path.as_path()) {
                return Err(Error::InvalidArgument(format!(
                    "audio path {} used by more than one clip",
                    e.audio_path.display()
                )));
            }
            if !pose.insert(e.pose_path.as_path()) {
                return Err(Error::InvalidArgument(format!(
                    "pose path {} used by more than one clip",
                    e.pose_path.display()
                )));
            }
        }
        Ok(DatasetManifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, clip_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }
}

fn parse_line(line_no: usize, line: &str, base: &Path) -> Result<ManifestEntry> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(Error::ManifestRow {
            line: line_no,
            reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
        });
    }
    let clip_id = fields[0].trim();
    if clip_id.is_empty() {
        return Err(Error::ManifestRow {
            line: line_no,
            reason: "empty clip id".into(),
        });
    }
    let style = fields[3]
        .trim()
        .parse::<DanceStyle>()
        .map_err(|reason| Error::ManifestRow {
            line: line_no,
            reason,
        })?;
    let resolve = |p: &str| {
        let p = Path::new(p.trim());
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    Ok(ManifestEntry {
        clip_id: clip_id.to_string(),
        audio_path: resolve(fields[1]),
        pose_path: resolve(fields[2]),
        style,
    })
}

/// Parses manifest text. Relative paths are resolved against `base`.
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        entries.push(parse_line(i + 1, trimmed, base)?);
    }
    DatasetManifest::new(entries)
}

/// Loads and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = parse_manifest(&text, base)?;
    for e in manifest.entries() {
        for p in [&e.audio_path, &e.pose_path] {
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
    }
    Ok(manifest)
}

/// Writes a manifest. Paths under `base` are written relative to it.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::new();
    for e in manifest.entries() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.clip_id,
            rel(&e.audio_path),
            rel(&e.pose_path),
            e.style
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, style: &str) -> String {
        format!("{id}\taudio/{id}.wav\tpose/{id}.pose\t{style}\n")
    }

    #[test]
    fn parses_592_rows_over_ten_styles() {
        let text: String = (0..592)
            .map(|i| row(&format!("clip{i:04}"), DanceStyle::ALL[i % 10].as_str()))
            .collect();
        let m = parse_manifest(&text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 592);
        assert_eq!(
            m.entries()[3].audio_path,
            PathBuf::from("/data/audio/clip0003.wav")
        );
        assert_eq!(m.entries()[3].style, DanceStyle::Foxtrot);
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(
            parse_manifest("", Path::new(".")),
            Err(Error::EmptyManifest)
        ));
        assert!(matches!(
            parse_manifest("\n# only a comment\n", Path::new(".")),
            Err(Error::EmptyManifest)
        ));
    }

    #[test]
    fn unknown_style_names_the_row() {
        let text = format!("{}{}", row("a", "tango"), row("b", "polka"));
        let err = parse_manifest(&text, Path::new(".")).unwrap_err();
        match &err {
            Error::ManifestRow { line, reason } => {
                assert_eq!(*line, 2);
                assert!(reason.contains("polka"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = format!(
            "{}b\taudio/x.wav\tpose/x.pose\twaltz\n",
            row("b", "tango")
        );
        assert!(matches!(
            parse_manifest(&text, Path::new(".")),
            Err(Error::DuplicateClip(id)) if id == "b"
        ));
    }

    #[test]
    fn shared_audio_path_is_rejected() {
        let text = "a\tx.wav\ta.pose\ttango\nb\tx.wav\tb.pose\ttango\n";
        assert!(parse_manifest(text, Path::new(".")).is_err());
    }

    #[test]
    fn load_checks_file_existence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        fs::write(&path, row("a", "waltz")).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::MissingFile(_))));

        fs::create_dir_all(dir.path().join("audio")).unwrap();
        fs::create_dir_all(dir.path().join("pose")).unwrap();
        fs::write(dir.path().join("audio/a.wav"), b"x").unwrap();
        fs::write(dir.path().join("pose/a.pose"), b"x").unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 1);

        let out = dir.path().join("copy.tsv");
        write_manifest(&out, &m).unwrap();
        assert_eq!(load_manifest(&out).unwrap(), m);
    }

    #[test]
    fn style_labels_round_trip() {
        for s in DanceStyle::ALL {
            assert_eq!(s.as_str().parse::<DanceStyle>().unwrap(), s);
        }
    }
}
