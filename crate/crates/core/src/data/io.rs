use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::Utterance;
use crate::audio::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::geometry::{ibug68, LandmarkFrame};

pub const TOPOLOGY_HEADER: &str = "#topology ibug68 68";

/// Reads a landmark track: a topology header, then one frame per line as
/// whitespace-separated `x y` pairs.
pub fn read_landmarks(path: &Path) -> Result<Vec<LandmarkFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    let points = match lines.next() {
        Some((_, header)) => {
            let fields: Vec<&str> = header.split_whitespace().collect();
            match fields.as_slice() {
                ["#topology", _, n] => n
                    .parse::<usize>()
                    .map_err(|_| parse_err(1, format!("bad point count `{n}`")))?,
                _ => return Err(parse_err(1, format!("expected `{TOPOLOGY_HEADER}`"))),
            }
        }
        None => return Err(parse_err(1, "empty file".into())),
    };
    let mut frames = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(i + 1, e.to_string()))?;
        if values.len() != 2 * points {
            return Err(parse_err(
                i + 1,
                format!("expected {} values, found {}", 2 * points, values.len()),
            ));
        }
        frames
            .push(LandmarkFrame::from_flat(&values).map_err(|e| parse_err(i + 1, e.to_string()))?);
    }
    Ok(frames)
}

/// Writes values with shortest round-trip formatting so reading back is exact.
pub fn write_landmarks(path: &Path, frames: &[LandmarkFrame]) -> Result<()> {
    let n = frames
        .first()
        .map_or(ibug68::NUM_POINTS, LandmarkFrame::len);
    let mut out = format!("#topology ibug68 {n}\n");
    for f in frames {
        let row: Vec<String> = f.flat().iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub line: usize,
    pub id: String,
    pub speaker_id: String,
    pub wav: PathBuf,
    pub landmarks: PathBuf,
}

/// Parses a manifest of `id speaker wav landmarks` records, tab or space
/// separated, with paths relative to the manifest. `#` starts a comment line.
/// Malformed lines are returned as errors alongside the good entries.
pub fn read_manifest(path: &Path) -> Result<(Vec<ManifestEntry>, Vec<LoadError>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if fields.len() == 1 {
            fields = trimmed.split_whitespace().collect();
        }
        if fields.len() != 4 || fields.iter().any(|f| f.is_empty()) {
            errors.push(LoadError {
                line: i + 1,
                id: fields.first().map(|s| s.to_string()),
                error: Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    detail: format!("expected 4 fields, found {}", fields.len()),
                },
            });
            continue;
        }
        entries.push(ManifestEntry {
            line: i + 1,
            id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            wav: base.join(fields[2]),
            landmarks: base.join(fields[3]),
        });
    }
    Ok((entries, errors))
}

#[derive(Debug)]
pub struct LoadError {
    pub line: usize,
    pub id: Option<String>,
    pub error: Error,
}

impl std::fmt::Display for LoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.id {
            Some(id) => write!(f, "line {} ({id}): {}", self.line, self.error),
            None => write!(f, "line {}: {}", self.line, self.error),
        }
    }
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub utterances: Vec<Utterance>,
    pub errors: Vec<LoadError>,
}

/// Loads every manifest entry in parallel. A failing entry is reported with
/// its line and id and does not stop the others.
pub fn load_dataset(manifest: &Path) -> Result<LoadReport> {
    let (entries, mut errors) = read_manifest(manifest)?;
    let results: Vec<(usize, Result<Utterance>, String)> = entries
        .par_iter()
        .map(|e| (e.line, load_entry(e), e.id.clone()))
        .collect();
    let mut utterances = Vec::new();
    for (line, r, id) in results {
        match r {
            Ok(u) => utterances.push(u),
            Err(error) => errors.push(LoadError {
                line,
                id: Some(id),
                error,
            }),
        }
    }
    errors.sort_by_key(|e| e.line);
    Ok(LoadReport { utterances, errors })
}

fn load_entry(e: &ManifestEntry) -> Result<Utterance> {
    let wave = read_wav(&e.wav)?;
    let frames = read_landmarks(&e.landmarks)?;
    let mut u = Utterance::new(e.id.clone(), e.speaker_id.clone(), wave, frames)?;
    u.wav_path = Some(e.wav.clone());
    Ok(u)
}

/// Writes `wav/<id>.wav`, `landmarks/<id>.lmk` and `manifest.tsv` under `dir`.
/// Landmarks are written in image units.
pub fn write_dataset(dir: &Path, utterances: &[Utterance]) -> Result<PathBuf> {
    for sub in ["wav", "landmarks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::from("# id\tspeaker\twav\tlandmarks\n");
    for u in utterances {
        let wav = format!("wav/{}.wav", u.id);
        let lmk = format!("landmarks/{}.lmk", u.id);
        write_wav(&dir.join(&wav), &u.waveform)?;
        write_landmarks(&dir.join(&lmk), &u.landmarks_px)?;
        let _ = writeln!(manifest, "{}\t{}\t{wav}\t{lmk}", u.id, u.speaker_id);
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
