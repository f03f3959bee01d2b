//! Synthetic speech/face corpus.
//!
//! Each phone is a sinusoid chord. Each phone also has `modes_per_phone`
//! mouth shapes and head poses; the mode is drawn uniformly for every phone
//! segment. Each segment also carries a quiet cue tone that names its mode
//! with probability `cue_reliability` and some other mode otherwise, so the
//! audio carries partial information about which mode the face shows. Frame
//! 0 is silent with a neutral mouth and the speaker's resting pose. Speakers
//! differ in pitch, a timbre partial, jaw contour, mouth width and pose bias.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Utterance, SAMPLES_PER_VISUAL_FRAME};
use crate::audio::{Waveform, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
use crate::geometry::{LandmarkFrame, Pose};

/// Image units per inter-ocular distance.
const FACE_PX: f64 = 64.0;
const CANVAS_CENTER: [f64; 2] = [128.0, 128.0];
const MOUTH_DIMS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_speakers: usize,
    pub n_utterances: usize,
    pub modes_per_phone: usize,
    /// Landmark noise standard deviation in inter-ocular units.
    pub noise_sigma: f64,
    pub seed: u64,
    pub n_phones: usize,
    pub frames_per_utterance: usize,
    /// Scales every head rotation and offset; 0 fixes the pose.
    pub head_motion: f64,
    /// Minimum distance between mouth-shape modes of one phone.
    pub mode_spread: f64,
    /// Probability that a segment's cue tone names the segment's mode.
    pub cue_reliability: f64,
    /// Relative per-utterance jitter of speaker pitch.
    pub identity_jitter: f64,
    pub audio_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_speakers: 4,
            n_utterances: 8,
            modes_per_phone: 1,
            noise_sigma: 0.005,
            seed: 0,
            n_phones: 6,
            frames_per_utterance: 25,
            head_motion: 1.0,
            mode_spread: 0.12,
            cue_reliability: 0.85,
            identity_jitter: 0.04,
            audio_noise: 0.003,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_speakers", self.n_speakers),
            ("n_utterances", self.n_utterances),
            ("modes_per_phone", self.modes_per_phone),
            ("n_phones", self.n_phones),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.frames_per_utterance < 2 {
            return Err(Error::Config(
                "frames_per_utterance must be at least 2".into(),
            ));
        }
        let reals = [
            ("noise_sigma", self.noise_sigma),
            ("head_motion", self.head_motion),
            ("mode_spread", self.mode_spread),
            ("cue_reliability", self.cue_reliability),
            ("identity_jitter", self.identity_jitter),
            ("audio_noise", self.audio_noise),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "{name} must be finite and >= 0, got {v}"
            )));
        }
        if self.cue_reliability > 1.0 {
            return Err(Error::Config(format!(
                "cue_reliability must be in [0, 1], got {}",
                self.cue_reliability
            )));
        }
        if self.identity_jitter >= 0.5 {
            return Err(Error::Config("identity_jitter must be below 0.5".into()));
        }
        Ok(())
    }
}

/// Ground truth kept alongside each synthetic utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticMeta {
    pub speaker: usize,
    /// Phone per landmark frame; `None` for the silent first frame.
    pub phones: Vec<Option<usize>>,
    /// Mode per landmark frame, aligned with `phones`.
    pub modes: Vec<Option<usize>>,
    /// Mode named by the cue tone, aligned with `phones`.
    pub cues: Vec<Option<usize>>,
    pub poses: Vec<Pose>,
}

#[derive(Clone, Debug)]
struct Variant {
    mouth: [f64; MOUTH_DIMS],
    theta: f64,
    t: [f64; 2],
}

#[derive(Clone, Debug)]
struct Phone {
    freqs: [f64; 3],
    mouth: [f64; MOUTH_DIMS],
}

#[derive(Clone, Debug)]
struct Speaker {
    f0: f64,
    pitch: f64,
    jaw_w: f64,
    jaw_h: f64,
    brow: f64,
    mouth_scale: f64,
    theta: f64,
    t: [f64; 2],
}

struct World {
    phones: Vec<Phone>,
    /// Mouth offsets and head poses shared by every phone.
    modes: Vec<Variant>,
    speakers: Vec<Speaker>,
}

const CUE_AMPLITUDE: f64 = 0.2;

/// Cue tones sit above every phone partial, evenly spaced in 4.6-7.4 kHz.
fn cue_hz(mode: usize, modes: usize) -> f64 {
    4600.0 + 2800.0 * mode as f64 / (modes - 1) as f64
}

/// Mouth parameter weights: opening, half-width, corner lift, lower-lip shift.
const MOUTH_AXES: [f64; MOUTH_DIMS] = [1.0, 0.6, 0.5, 0.5];
const NEUTRAL_MOUTH: [f64; MOUTH_DIMS] = [0.02, 0.38, 0.0, 0.0];

/// `k` offsets of norm `spread` with pairwise distances at least `spread`.
fn separated_offsets(rng: &mut ChaCha8Rng, k: usize, spread: f64) -> Vec<[f64; MOUTH_DIMS]> {
    if k == 1 {
        return vec![[0.0; MOUTH_DIMS]];
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<[f64; MOUTH_DIMS]> = Vec::with_capacity(k);
    let mut attempts = 0;
    while out.len() < k {
        let mut v = [0.0; MOUTH_DIMS];
        for (d, x) in v.iter_mut().enumerate() {
            *x = normal.sample(rng) * MOUTH_AXES[d];
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x *= spread / n);
        let far = out.iter().all(|o| {
            o.iter()
                .zip(&v)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= spread * 0.999
        });
        attempts += 1;
        // Past the attempt budget accept anything: spread is then a target.
        if far || attempts > 10_000 {
            out.push(v);
        }
    }
    out
}

fn build_world(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> World {
    let variant = |rng: &mut ChaCha8Rng, mouth| Variant {
        mouth,
        theta: rng.random_range(-0.12..0.12),
        t: [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)],
    };
    let mut phones = Vec::with_capacity(spec.n_phones);
    for _ in 0..spec.n_phones {
        let mut freqs = [0.0; 3];
        for f in &mut freqs {
            *f = (rng.random_range(250f64.ln()..3500f64.ln())).exp();
        }
        let mouth = [
            rng.random_range(0.08..0.30),
            rng.random_range(0.33..0.47),
            rng.random_range(-0.04..0.04),
            0.0,
        ];
        phones.push(Phone { freqs, mouth });
    }
    let offsets = separated_offsets(rng, spec.modes_per_phone, spec.mode_spread);
    let modes = offsets.into_iter().map(|o| variant(rng, o)).collect();
    let mut speakers = Vec::with_capacity(spec.n_speakers);
    for s in 0..spec.n_speakers {
        let frac = if spec.n_speakers > 1 {
            s as f64 / (spec.n_speakers - 1) as f64
        } else {
            0.5
        };
        speakers.push(Speaker {
            f0: 110.0 * 2f64.powf(1.2 * frac),
            pitch: 0.9 + 0.2 * frac,
            jaw_w: rng.random_range(0.9..1.1),
            jaw_h: rng.random_range(0.95..1.2),
            brow: rng.random_range(-0.05..0.05),
            mouth_scale: rng.random_range(0.92..1.08),
            theta: rng.random_range(-0.1..0.1),
            t: [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
        });
    }
    World {
        phones,
        modes,
        speakers,
    }
}

/// 68 landmarks of a frontal face in inter-ocular units, eyes at
/// `(+-0.5, -0.35)`, image y pointing down.
fn face_points(sp: &Speaker, mouth: [f64; MOUTH_DIMS]) -> Vec<[f64; 2]> {
    let [open, half_width, smile, shift] = mouth;
    let half_width = half_width * sp.mouth_scale;
    let mut p = Vec::with_capacity(68);
    for i in 0..17 {
        let u = i as f64 / 16.0;
        let s = (PI * u).sin();
        p.push([
            -sp.jaw_w * (PI * u).cos(),
            -0.25 + sp.jaw_h * s + 0.5 * open * s * s,
        ]);
    }
    for x0 in [-0.9, 0.25] {
        for j in 0..5 {
            let u = j as f64 / 4.0;
            p.push([x0 + 0.65 * u, -0.62 - sp.brow - 0.08 * (PI * u).sin()]);
        }
    }
    for j in 0..4 {
        p.push([0.0, -0.35 + 0.13 * j as f64]);
    }
    for j in 0..5 {
        let jf = j as f64;
        p.push([
            -0.16 + 0.08 * jf,
            0.12 + 0.035 * (1.0 - (jf - 2.0).abs() / 2.0),
        ]);
    }
    let angles = [
        PI,
        2.0 * PI / 3.0,
        PI / 3.0,
        0.0,
        -PI / 3.0,
        -2.0 * PI / 3.0,
    ];
    for cx in [-0.5, 0.5] {
        for a in angles {
            p.push([cx + 0.16 * a.cos(), -0.35 - 0.06 * a.sin()]);
        }
    }
    let cy = 0.42;
    let corner = cy + smile;
    let lip = |u: f64, inner: bool, upper: bool| -> [f64; 2] {
        let bump = (PI * u).sin();
        let w = if inner { half_width - 0.08 } else { half_width };
        let thick = match (inner, upper) {
            (true, _) => 0.0,
            (false, true) => 0.06,
            (false, false) => 0.08,
        };
        let edge = if upper {
            cy - open / 2.0 - thick
        } else {
            cy + open / 2.0 + thick
        };
        let dx = if upper { 0.0 } else { shift * bump };
        [
            -w * (PI * u).cos() + dx,
            corner * (1.0 - bump) + edge * bump,
        ]
    };
    p.push(lip(0.0, false, true));
    for j in 1..6 {
        p.push(lip(j as f64 / 6.0, false, true));
    }
    p.push(lip(1.0, false, true));
    for j in (1..6).rev() {
        p.push(lip(j as f64 / 6.0, false, false));
    }
    p.push(lip(0.0, true, true));
    for j in 1..4 {
        p.push(lip(j as f64 / 4.0, true, true));
    }
    p.push(lip(1.0, true, true));
    for j in (1..4).rev() {
        p.push(lip(j as f64 / 4.0, true, false));
    }
    p
}

fn place(
    points: &[[f64; 2]],
    pose: &Pose,
    noise: &mut dyn FnMut() -> f64,
) -> Result<LandmarkFrame> {
    let (s, c) = pose.theta.sin_cos();
    LandmarkFrame::new(
        points
            .iter()
            .map(|p| {
                let x = c * p[0] - s * p[1] + pose.t[0] + noise();
                let y = s * p[0] + c * p[1] + pose.t[1] + noise();
                [
                    FACE_PX * x + CANVAS_CENTER[0],
                    FACE_PX * y + CANVAS_CENTER[1],
                ]
            })
            .collect(),
    )
}

fn add(a: [f64; MOUTH_DIMS], b: [f64; MOUTH_DIMS]) -> [f64; MOUTH_DIMS] {
    std::array::from_fn(|i| a[i] + b[i])
}

/// Generates `n_utterances` utterances. All randomness comes from one
/// ChaCha8 stream seeded by `spec.seed`: the shared world first, then each
/// utterance in order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = build_world(spec, &mut rng);
    let landmark_noise =
        Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let hm = spec.head_motion;
    let sr = f64::from(SAMPLE_RATE_HZ);

    let mut out = Vec::with_capacity(spec.n_utterances);
    for u in 0..spec.n_utterances {
        let speaker_idx = u % spec.n_speakers;
        let sp = &world.speakers[speaker_idx];
        let k = spec.modes_per_phone;
        let jitter = 1.0 + rng.random_range(-1.0..=1.0) * spec.identity_jitter;

        let mut phones = vec![None];
        let mut modes = vec![None];
        let mut cues = vec![None];
        let mut prev = None;
        while phones.len() < spec.frames_per_utterance {
            let mut p = rng.random_range(0..spec.n_phones);
            if spec.n_phones > 1 && Some(p) == prev {
                p = (p + 1 + rng.random_range(0..spec.n_phones - 1)) % spec.n_phones;
            }
            let dur = rng.random_range(2..=4);
            let mode = rng.random_range(0..k);
            let cue = if k == 1 || rng.random_bool(spec.cue_reliability) {
                mode
            } else {
                (mode + rng.random_range(1..k)) % k
            };
            for _ in 0..dur {
                if phones.len() < spec.frames_per_utterance {
                    phones.push(Some(p));
                    modes.push(Some(mode));
                    cues.push(Some(cue));
                }
            }
            prev = Some(p);
        }

        let mut frames = Vec::with_capacity(phones.len());
        let mut poses = Vec::with_capacity(phones.len());
        for (ph, mode) in phones.iter().zip(&modes) {
            let (mouth, theta, t) = match (ph, mode) {
                (Some(p), Some(mode)) => {
                    let phone = &world.phones[*p];
                    let v = &world.modes[*mode];
                    (add(phone.mouth, v.mouth), v.theta, v.t)
                }
                _ => (NEUTRAL_MOUTH, 0.0, [0.0; 2]),
            };
            let pose = Pose::new(
                hm * (sp.theta + theta),
                [hm * (sp.t[0] + t[0]), hm * (sp.t[1] + t[1])],
            );
            let pts = face_points(sp, mouth);
            let mut noise = || landmark_noise.sample(&mut rng);
            frames.push(place(&pts, &pose, &mut noise)?);
            poses.push(pose);
        }

        let n_samples = phones.len() * SAMPLES_PER_VISUAL_FRAME;
        let phases: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let mut samples = Vec::with_capacity(n_samples);
        for (v, (ph, cue)) in phones.iter().zip(&cues).enumerate() {
            for i in 0..SAMPLES_PER_VISUAL_FRAME {
                let t = (v * SAMPLES_PER_VISUAL_FRAME + i) as f64 / sr;
                let mut s = spec.audio_noise * unit.sample(&mut rng);
                if let Some(p) = ph {
                    let phone = &world.phones[*p];
                    for (f, phase) in phone.freqs.iter().zip(&phases) {
                        s += 0.12 * (2.0 * PI * f * sp.pitch * jitter * t + phase).sin();
                    }
                    s += 0.10 * (2.0 * PI * sp.f0 * jitter * t + phases[3]).sin();
                }
                if let (Some(c), true) = (cue, k > 1) {
                    s += CUE_AMPLITUDE * (2.0 * PI * cue_hz(*c, k) * t + phases[4]).sin();
                }
                samples.push(s);
            }
        }
        let wave = Waveform::new(samples, SAMPLE_RATE_HZ)?.quantized();
        let mut utt = Utterance::new(
            format!("utt{u:04}"),
            format!("spk{speaker_idx:02}"),
            wave,
            frames,
        )?;
        utt.synthetic = Some(SyntheticMeta {
            speaker: speaker_idx,
            modes,
            cues,
            phones,
            poses,
        });
        out.push(utt);
    }
    Ok(out)
}
