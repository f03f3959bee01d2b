//! Log-mel filterbank features from 16 kHz mono audio.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(Error::contract(format!(
                "sample rate must be {SAMPLE_RATE_HZ} Hz, got {sample_rate_hz}"
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Rounds every sample onto the 16-bit PCM grid so that writing and
    /// re-reading the waveform is lossless.
    pub fn quantized(mut self) -> Self {
        for s in &mut self.samples {
            *s = f64::from(to_pcm16(*s)) / 32768.0;
        }
        self
    }
}

fn to_pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Reads a RIFF/WAVE file holding 16-bit signed PCM, mono, 16 kHz.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let unsupported = |detail: String| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| unsupported(format!("unreadable header: {e}")))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "expected 16-bit integer PCM, found {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(unsupported(format!(
            "expected mono, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(unsupported(format!(
            "expected {SAMPLE_RATE_HZ} Hz, found {} Hz",
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| unsupported(e.to_string()))?;
    Waveform::new(samples, SAMPLE_RATE_HZ)
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in wave.samples() {
        writer.write_sample(to_pcm16(s)).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Framing and filterbank settings. Defaults: 20 ms Hann window, 10 ms hop,
/// 512-point FFT, 80 mel bands over 0-8 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct FbankConfig {
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            window: 320,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of whole frames in `num_samples`, zero if shorter than a window.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        if num_samples < self.window {
            0
        } else {
            (num_samples - self.window) / self.hop + 1
        }
    }
}

/// Per-frame log-mel energies, `frames` is `T x n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FbankSequence {
    pub frames: Tensor,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
    pub n_mels: usize,
}

impl FbankSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// `|FFT|^2` of each Hann-windowed, zero-padded frame: `T x (n_fft/2 + 1)`.
pub fn stft_power(wave: &Waveform, cfg: &FbankConfig) -> Result<Tensor> {
    let x = wave.samples();
    if x.len() < cfg.window {
        return Err(Error::InputLength {
            needed: cfg.window,
            got: x.len(),
        });
    }
    if cfg.window > cfg.n_fft {
        return Err(Error::Config(format!(
            "window {} exceeds n_fft {}",
            cfg.window, cfg.n_fft
        )));
    }
    let frames = cfg.frame_count(x.len());
    let bins = cfg.n_bins();
    let win = hann(cfg.window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut out = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, w) in win.iter().enumerate() {
            buf[i].re = x[start + i] * w;
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Tensor::matrix(frames, bins, out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_centers_hz(n_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let step = (hi - lo) / (n_mels + 1) as f64;
    (1..=n_mels)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect()
}

/// Triangular filters with mel-uniform edges, `n_mels x (n_fft/2 + 1)`.
/// Each triangle is linear in mel and spans its two neighbors' centers.
pub fn mel_filterbank(cfg: &FbankConfig) -> Result<Tensor> {
    if cfg.n_mels == 0 {
        return Err(Error::Config("n_mels must be at least 1".into()));
    }
    let bins = cfg.n_bins();
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let edge = |i: usize| lo + step * i as f64;
    let bin_hz = f64::from(SAMPLE_RATE_HZ) / cfg.n_fft as f64;
    let mut w = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edge(m), edge(m + 1), edge(m + 2));
        for k in 0..bins {
            let mel = hz_to_mel(k as f64 * bin_hz);
            let v = if mel > left && mel <= center {
                (mel - left) / (center - left)
            } else if mel > center && mel < right {
                (right - mel) / (right - center)
            } else {
                0.0
            };
            w[m * bins + k] = v;
        }
    }
    Tensor::matrix(cfg.n_mels, bins, w)
}

/// `log(filterbank . power + floor)` per frame.
pub fn fbank(wave: &Waveform, cfg: &FbankConfig) -> Result<FbankSequence> {
    let power = stft_power(wave, cfg)?;
    let bank = mel_filterbank(cfg)?;
    let (t, bins) = (power.rows(), power.cols());
    let mut out = Vec::with_capacity(t * cfg.n_mels);
    for f in 0..t {
        let p = power.row(f);
        for m in 0..cfg.n_mels {
            let e: f64 = bank.data()[m * bins..(m + 1) * bins]
                .iter()
                .zip(p)
                .map(|(a, b)| a * b)
                .sum();
            out.push((e + cfg.log_floor).ln());
        }
    }
    let sr = f64::from(SAMPLE_RATE_HZ);
    Ok(FbankSequence {
        frames: Tensor::matrix(t, cfg.n_mels, out)?,
        frame_shift_ms: cfg.hop as f64 * 1000.0 / sr,
        frame_length_ms: cfg.window as f64 * 1000.0 / sr,
        n_mels: cfg.n_mels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(s, SAMPLE_RATE_HZ).unwrap()
    }

    /// Direct O(N^2) DFT power of one frame, the oracle for the FFT path.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn rejects_other_sample_rates() {
        assert!(Waveform::new(vec![0.0; 10], 8000).is_err());
    }

    #[test]
    fn too_short_is_an_input_length_error() {
        let w = Waveform::new(vec![0.0; 319], SAMPLE_RATE_HZ).unwrap();
        assert!(matches!(
            stft_power(&w, &FbankConfig::default()),
            Err(Error::InputLength {
                needed: 320,
                got: 319
            })
        ));
    }

    #[test]
    fn silence_has_zero_power() {
        let w = Waveform::new(vec![0.0; 1600], SAMPLE_RATE_HZ).unwrap();
        let p = stft_power(&w, &FbankConfig::default()).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_peaks_at_bin_32_and_matches_direct_dft() {
        let cfg = FbankConfig::default();
        let w = sine(1000.0, 0.5, 4000);
        let p = stft_power(&w, &cfg).unwrap();
        for f in 0..p.rows() {
            let row = p.row(f);
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(argmax, 32);
        }
        let win = hann(cfg.window);
        let frame: Vec<f64> = (0..cfg.window)
            .map(|i| w.samples()[160 * 3 + i] * win[i])
            .collect();
        let oracle = dft_power(&frame, cfg.n_fft);
        for (a, b) in p.row(3).iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn parseval_holds_per_frame() {
        let cfg = FbankConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s: Vec<f64> = (0..1200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(s, SAMPLE_RATE_HZ).unwrap();
        let p = stft_power(&w, &cfg).unwrap();
        let win = hann(cfg.window);
        for f in 0..p.rows() {
            let energy: f64 = (0..cfg.window)
                .map(|i| (w.samples()[f * cfg.hop + i] * win[i]).powi(2))
                .sum();
            let row = p.row(f);
            let last = row.len() - 1;
            // Reassemble the full two-sided spectrum from the one-sided half.
            let full = row[0] + row[last] + 2.0 * row[1..last].iter().sum::<f64>();
            assert!((full - energy * cfg.n_fft as f64).abs() <= 1e-6 * full);
        }
    }

    #[test]
    fn filterbank_shape_and_coverage() {
        let cfg = FbankConfig::default();
        let bank = mel_filterbank(&cfg).unwrap();
        assert_eq!(bank.shape(), &[80, 257]);
        for m in 0..80 {
            assert!(bank.row(m).iter().sum::<f64>() > 0.0, "filter {m} is empty");
            assert!(bank.row(m).iter().all(|&v| v >= 0.0));
        }
        for k in 0..257 {
            let covering = (0..80).filter(|&m| bank.at(m, k) > 0.0).count();
            assert!(covering <= 2, "bin {k} covered by {covering} filters");
        }
        let centers = mel_centers_hz(80, 0.0, 8000.0);
        assert!(centers.windows(2).all(|w| w[0] < w[1]));

        let nearest = (0..80)
            .min_by(|&a, &b| {
                (centers[a] - 1000.0)
                    .abs()
                    .total_cmp(&(centers[b] - 1000.0).abs())
            })
            .unwrap();
        let row = bank.row(nearest);
        let peak = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap();
        assert!((peak as i64 - 32).abs() <= 1, "peak bin {peak}");
    }

    #[test]
    fn fbank_examples() {
        let cfg = FbankConfig::default();
        let silent = Waveform::new(vec![0.0; 3200], SAMPLE_RATE_HZ).unwrap();
        let fb = fbank(&silent, &cfg).unwrap();
        assert!(fb.frames.data().iter().all(|&v| v == 1e-10f64.ln()));

        let a = fbank(&sine(440.0, 0.2, 3200), &cfg).unwrap();
        let b = fbank(&sine(440.0, 0.4, 3200), &cfg).unwrap();
        // The log floor perturbs the shift only where energy is near 1e-10.
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            if *x > 0.0 {
                assert!((y - x - 4f64.ln()).abs() < 1e-9);
            } else {
                assert!(y - x <= 4f64.ln() + 1e-12);
            }
        }

        let s = fbank(&sine(1000.0, 0.5, 3200), &cfg).unwrap();
        let centers = mel_centers_hz(80, 0.0, 8000.0);
        let nearest = (0..80)
            .min_by(|&a, &b| {
                (centers[a] - 1000.0)
                    .abs()
                    .total_cmp(&(centers[b] - 1000.0).abs())
            })
            .unwrap();
        for f in 0..s.len() {
            let row = s.frames.row(f);
            let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn frame_count_formula_and_determinism() {
        let cfg = FbankConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(320..4000);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = Waveform::new(s, SAMPLE_RATE_HZ).unwrap();
            let fb = fbank(&w, &cfg).unwrap();
            assert_eq!(fb.len(), (n - 320) / 160 + 1);
            assert!(fb.frames.all_finite());
            let again = fbank(&w, &cfg).unwrap();
            assert!(fb
                .frames
                .data()
                .iter()
                .zip(again.frames.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn wav_round_trip_and_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = sine(300.0, 0.3, 800).quantized();
        write_wav(&path, &w).unwrap();
        assert_eq!(read_wav(&path).unwrap(), w);

        let stereo = dir.path().join("b.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(
            read_wav(&stereo),
            Err(Error::UnsupportedFormat { .. })
        ));

        let junk = dir.path().join("c.wav");
        std::fs::write(&junk, b"RIFFnope").unwrap();
        assert!(matches!(
            read_wav(&junk),
            Err(Error::UnsupportedFormat { .. })
        ));
    }
}
