//! Paired audio and landmark utterances: loading, scale normalization and a
//! synthetic generator with a controllable one-to-many speech-to-face map.

mod io;
pub mod synth;

use std::path::PathBuf;

use crate::audio::{fbank, FbankConfig, FbankSequence, Waveform};
use crate::error::{Error, Result};
use crate::geometry::{align, generalized_procrustes, AlignedDecomposition, LandmarkFrame};

pub use io::{
    load_dataset, read_landmarks, read_manifest, write_dataset, write_landmarks, LoadError,
    LoadReport, ManifestEntry, TOPOLOGY_HEADER,
};
pub use synth::{generate_synthetic, SyntheticMeta, SyntheticSpec};

/// Audio samples per 25 fps video frame at 16 kHz.
pub const SAMPLES_PER_VISUAL_FRAME: usize = 640;
/// Fbank frames per video frame.
pub const FBANK_PER_VISUAL: usize = 4;
/// Allowed gap between `4 * landmark frames` and the fbank frame count.
pub const RATE_TOLERANCE: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub wav_path: Option<PathBuf>,
    pub waveform: Waveform,
    pub fbank: FbankSequence,
    /// Landmarks as provided, in image units.
    pub landmarks_px: Vec<LandmarkFrame>,
    /// Mean inter-ocular distance of `landmarks_px`.
    pub iod: f64,
    /// Landmarks divided by `iod`.
    pub landmarks: Vec<LandmarkFrame>,
    pub synthetic: Option<SyntheticMeta>,
}

impl Utterance {
    /// Computes features, normalizes scale and checks rate pairing.
    pub fn new(
        id: impl Into<String>,
        speaker_id: impl Into<String>,
        waveform: Waveform,
        landmarks_px: Vec<LandmarkFrame>,
    ) -> Result<Self> {
        let id = id.into();
        if landmarks_px.is_empty() {
            return Err(Error::contract(format!(
                "utterance {id}: no landmark frames"
            )));
        }
        let n = landmarks_px[0].len();
        if landmarks_px.iter().any(|f| f.len() != n) {
            return Err(Error::contract(format!(
                "utterance {id}: landmark count varies across frames"
            )));
        }
        let fb = fbank(&waveform, &FbankConfig::default())?;
        check_rate(&id, landmarks_px.len(), fb.len())?;
        let (landmarks, iod) = normalize_scale(&landmarks_px)?;
        Ok(Utterance {
            id,
            speaker_id: speaker_id.into(),
            wav_path: None,
            waveform,
            fbank: fb,
            landmarks_px,
            iod,
            landmarks,
            synthetic: None,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.landmarks.len()
    }

    /// Rigid decomposition of every normalized frame against `template`.
    pub fn aligned(&self, template: &LandmarkFrame) -> Result<Vec<AlignedDecomposition>> {
        self.landmarks.iter().map(|f| align(f, template)).collect()
    }
}

fn check_rate(id: &str, visual: usize, fbank_frames: usize) -> Result<()> {
    let expected = visual * FBANK_PER_VISUAL;
    if expected.abs_diff(fbank_frames) > RATE_TOLERANCE {
        return Err(Error::contract(format!(
            "utterance {id}: {visual} landmark frames need {expected}±{RATE_TOLERANCE} \
             fbank frames, audio gives {fbank_frames}"
        )));
    }
    Ok(())
}

/// Divides a track by its mean inter-ocular distance. Returns the scaled
/// track and the divisor.
pub fn normalize_scale(frames: &[LandmarkFrame]) -> Result<(Vec<LandmarkFrame>, f64)> {
    if frames.is_empty() {
        return Ok((Vec::new(), 1.0));
    }
    if frames[0].len() < 48 {
        return Err(Error::contract(format!(
            "scale normalization needs the 68-point topology, got {} points",
            frames[0].len()
        )));
    }
    let iod = frames.iter().map(LandmarkFrame::inter_ocular).sum::<f64>() / frames.len() as f64;
    if !(iod > 0.0 && iod.is_finite()) {
        return Err(Error::Degenerate(format!(
            "mean inter-ocular distance is {iod}"
        )));
    }
    Ok((frames.iter().map(|f| f.scaled(1.0 / iod)).collect(), iod))
}

/// Mean aligned face over every normalized frame of `utterances`.
pub fn dataset_template(utterances: &[Utterance]) -> Result<LandmarkFrame> {
    let frames: Vec<LandmarkFrame> = utterances
        .iter()
        .flat_map(|u| u.landmarks.iter().cloned())
        .collect();
    generalized_procrustes(&frames, 5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(scale: f64, n: usize) -> Vec<LandmarkFrame> {
        let spec = SyntheticSpec {
            n_utterances: 1,
            n_speakers: 1,
            ..SyntheticSpec::default()
        };
        let u = &generate_synthetic(&spec).unwrap()[0];
        u.landmarks_px[..n]
            .iter()
            .map(|f| f.scaled(scale))
            .collect()
    }

    #[test]
    fn normalization_sets_unit_iod_and_is_idempotent() {
        let raw = track(3.0, 10);
        let (once, iod) = normalize_scale(&raw).unwrap();
        assert!(iod > 0.0);
        let mean: f64 = once.iter().map(LandmarkFrame::inter_ocular).sum::<f64>() / 10.0;
        assert!((mean - 1.0).abs() < 1e-12);
        let (twice, iod2) = normalize_scale(&once).unwrap();
        assert!((iod2 - 1.0).abs() < 1e-12);
        for (a, b) in once.iter().zip(&twice) {
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rate_tolerance() {
        assert!(check_rate("a", 25, 98).is_ok());
        assert!(check_rate("a", 25, 103).is_ok());
        assert!(check_rate("a", 25, 96).is_err());
        assert!(check_rate("a", 25, 104).is_err());
    }

    #[test]
    fn utterance_rejects_rate_mismatch() {
        let frames = track(1.0, 25);
        let short = Waveform::new(vec![0.0; 8000], 16_000).unwrap();
        let err = Utterance::new("u1", "s", short, frames).unwrap_err();
        assert!(err.to_string().contains("u1"));
    }
}
