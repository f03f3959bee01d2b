//! Evaluation metrics: landmark distance, rotation distance, image fidelity
//! and verification equal error rate.

use std::ops::Range;

use crate::data::normalize_scale;
use crate::error::{Error, Result};
use crate::geometry::{align, ibug68, wrap_angle, LandmarkFrame, Pose};

/// Grayscale image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    /// Values outside `[0, 1]` are clamped; NaN becomes 0.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::contract(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        let pixels = pixels
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    fn same_dims(&self, other: &GrayImage, op: &str) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::contract(format!(
                "{op}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredTrial {
    pub score: f64,
    pub is_same: bool,
}

/// Mouth-region landmark distance with per-frame centroid alignment.
pub fn lmd(gen: &[LandmarkFrame], reference: &[LandmarkFrame]) -> Result<f64> {
    lmd_with(gen, reference, ibug68::MOUTH, true)
}

/// Mean Euclidean distance over frames and the points in `region`. With
/// `centroid_align`, each frame's region centroid is subtracted first.
pub fn lmd_with(
    gen: &[LandmarkFrame],
    reference: &[LandmarkFrame],
    region: Range<usize>,
    centroid_align: bool,
) -> Result<f64> {
    if gen.len() != reference.len() || gen.is_empty() {
        return Err(Error::contract(format!(
            "lmd needs equal nonzero lengths, got {} and {}",
            gen.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (g, r) in gen.iter().zip(reference) {
        if g.len() != r.len() || region.end > g.len() || region.is_empty() {
            return Err(Error::contract(format!(
                "lmd region {region:?} on frames of {} and {} points",
                g.len(),
                r.len()
            )));
        }
        let (cg, cr) = if centroid_align {
            (g.centroid_of(region.clone()), r.centroid_of(region.clone()))
        } else {
            ([0.0; 2], [0.0; 2])
        };
        total += region
            .clone()
            .map(|i| {
                let dx = (g.points[i][0] - cg[0]) - (r.points[i][0] - cr[0]);
                let dy = (g.points[i][1] - cg[1]) - (r.points[i][1] - cr[1]);
                (dx * dx + dy * dy).sqrt()
            })
            .sum::<f64>()
            / region.len() as f64;
    }
    Ok(total / gen.len() as f64)
}

/// Mean absolute wrapped rotation difference in radians.
pub fn rd(gen: &[Pose], reference: &[Pose]) -> Result<f64> {
    if gen.len() != reference.len() || gen.is_empty() {
        return Err(Error::contract(format!(
            "rd needs equal nonzero lengths, got {} and {}",
            gen.len(),
            reference.len()
        )));
    }
    let sum: f64 = gen
        .iter()
        .zip(reference)
        .map(|(g, r)| wrap_angle(g.theta - r.theta).abs())
        .sum();
    Ok(sum / gen.len() as f64)
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio for unit peak, capped at 100 dB.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.same_dims(b, "psnr")?;
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.pixels.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 11x11 Gaussian weights, row-major.
pub fn ssim_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gx * gy / total);
        }
    }
    w
}

/// Single-scale SSIM averaged over every fully contained window position.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.same_dims(b, "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let w = ssim_window();
    let (nx, ny) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..ny {
        for ox in 0..nx {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = w[dy * SSIM_WINDOW + dx];
                    let x = a.get(ox + dx, oy + dy);
                    let y = b.get(ox + dx, oy + dy);
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (nx * ny) as f64)
}

/// Equal error rate under the better of the two score polarities.
pub fn eer(trials: &[ScoredTrial]) -> Result<f64> {
    if trials.iter().any(|t| !t.score.is_finite()) {
        return Err(Error::NumericInput { op: "eer" });
    }
    let pos = trials.iter().filter(|t| t.is_same).count();
    if pos == 0 || pos == trials.len() {
        return Err(Error::contract(
            "eer needs both positive and negative trials",
        ));
    }
    let flipped: Vec<ScoredTrial> = trials
        .iter()
        .map(|t| ScoredTrial {
            score: -t.score,
            is_same: t.is_same,
        })
        .collect();
    Ok(eer_one_sided(trials).min(eer_one_sided(&flipped)))
}

/// At threshold `s`, negatives scoring above `s` are false accepts and
/// positives scoring below `s` are false rejects; scores equal to `s` count
/// as neither. The crossing of the two rates is linearly interpolated.
fn eer_one_sided(trials: &[ScoredTrial]) -> f64 {
    let mut pos: Vec<f64> = trials
        .iter()
        .filter(|t| t.is_same)
        .map(|t| t.score)
        .collect();
    let mut neg: Vec<f64> = trials
        .iter()
        .filter(|t| !t.is_same)
        .map(|t| t.score)
        .collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = trials.iter().map(|t| t.score).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let rates = |s: f64| {
        let far = (neg.len() - neg.partition_point(|&v| v <= s)) as f64 / nn;
        let frr = pos.partition_point(|&v| v < s) as f64 / np;
        (far, frr)
    };
    let mut prev = rates(thresholds[0]);
    if prev.0 - prev.1 <= 0.0 {
        return 0.5 * (prev.0 + prev.1);
    }
    for &s in &thresholds[1..] {
        let cur = rates(s);
        let (d0, d1) = (prev.0 - prev.1, cur.0 - cur.1);
        if d1 <= 0.0 {
            let w = d0 / (d0 - d1);
            let far = prev.0 + w * (cur.0 - prev.0);
            let frr = prev.1 + w * (cur.1 - prev.1);
            return 0.5 * (far + frr);
        }
        prev = cur;
    }
    // FAR reaches zero at the top threshold, so the loop always returns.
    0.5 * (prev.0 + prev.1)
}

/// Landmark and rotation distances between two tracks of equal length in
/// image units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackMetrics {
    /// Mouth distance in units of the reference track's mean inter-ocular
    /// distance.
    pub lmd: f64,
    /// Radians. Each frame's rotation is measured against the first
    /// reference frame.
    pub rd: f64,
}

pub fn track_metrics(gen: &[LandmarkFrame], reference: &[LandmarkFrame]) -> Result<TrackMetrics> {
    if gen.len() != reference.len() || gen.is_empty() {
        return Err(Error::contract(format!(
            "tracks must have equal nonzero lengths, got {} and {}",
            gen.len(),
            reference.len()
        )));
    }
    let (ref_n, iod) = normalize_scale(reference)?;
    let gen_n: Vec<LandmarkFrame> = gen.iter().map(|f| f.scaled(1.0 / iod)).collect();
    let anchor = &ref_n[0];
    let poses = |frames: &[LandmarkFrame]| -> Result<Vec<Pose>> {
        frames.iter().map(|f| Ok(align(f, anchor)?.pose)).collect()
    };
    Ok(TrackMetrics {
        lmd: lmd(&gen_n, &ref_n)?,
        rd: rd(&poses(&gen_n)?, &poses(&ref_n)?)?,
    })
}
