//! 2-D landmark frames, rigid Procrustes alignment and its inverse.
//!
//! A pose `(theta, t)` is the rigid motion carrying the aligned shape onto
//! the observed frame: `frame = R(theta) * p_align + t`. [`align`] estimates
//! it against a template, [`reconstruct`] applies it.

use std::f64::consts::PI;
use std::ops::Range;

use crate::error::{Error, Result};

/// Index ranges of the 68-point iBUG topology.
pub mod ibug68 {
    use std::ops::Range;

    pub const NUM_POINTS: usize = 68;
    pub const JAW: Range<usize> = 0..17;
    pub const RIGHT_BROW: Range<usize> = 17..22;
    pub const LEFT_BROW: Range<usize> = 22..27;
    pub const NOSE_BRIDGE: Range<usize> = 27..31;
    pub const NOSE_BASE: Range<usize> = 31..36;
    pub const RIGHT_EYE: Range<usize> = 36..42;
    pub const LEFT_EYE: Range<usize> = 42..48;
    pub const OUTER_LIP: Range<usize> = 48..60;
    pub const INNER_LIP: Range<usize> = 60..68;
    pub const MOUTH: Range<usize> = 48..68;
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkFrame {
    pub points: Vec<[f64; 2]>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("landmark coordinates must be finite"));
        }
        Ok(LandmarkFrame { points })
    }

    /// Builds a frame from interleaved `x0 y0 x1 y1 ...` values.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::contract(format!(
                "flat landmark vector has odd length {}",
                flat.len()
            )));
        }
        LandmarkFrame::new(flat.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 2] {
        centroid(&self.points)
    }

    pub fn centroid_of(&self, range: Range<usize>) -> [f64; 2] {
        centroid(&self.points[range])
    }

    pub fn translated(&self, d: [f64; 2]) -> LandmarkFrame {
        LandmarkFrame {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + d[0], p[1] + d[1]])
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> LandmarkFrame {
        LandmarkFrame {
            points: self.points.iter().map(|p| [p[0] * s, p[1] * s]).collect(),
        }
    }

    /// Applies `R(theta) * p + t` to every point.
    pub fn transformed(&self, pose: &Pose) -> LandmarkFrame {
        let r = rotation_matrix(pose.theta);
        LandmarkFrame {
            points: self
                .points
                .iter()
                .map(|p| {
                    let q = apply(&r, *p);
                    [q[0] + pose.t[0], q[1] + pose.t[1]]
                })
                .collect(),
        }
    }

    /// Distance between the two eye centroids of a 68-point frame.
    pub fn inter_ocular(&self) -> f64 {
        let a = self.centroid_of(ibug68::RIGHT_EYE);
        let b = self.centroid_of(ibug68::LEFT_EYE);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub theta: f64,
    pub t: [f64; 2],
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        theta: 0.0,
        t: [0.0, 0.0],
    };

    pub fn new(theta: f64, t: [f64; 2]) -> Self {
        Pose {
            theta: wrap_angle(theta),
            t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedDecomposition {
    pub p_align: LandmarkFrame,
    pub pose: Pose,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut w = theta.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the other boundary.
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

pub fn rotation_matrix(theta: f64) -> [[f64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

fn apply(r: &[[f64; 2]; 2], p: [f64; 2]) -> [f64; 2] {
    [
        r[0][0] * p[0] + r[0][1] * p[1],
        r[1][0] * p[0] + r[1][1] * p[1],
    ]
}

fn apply_transposed(r: &[[f64; 2]; 2], p: [f64; 2]) -> [f64; 2] {
    [
        r[0][0] * p[0] + r[1][0] * p[1],
        r[0][1] * p[0] + r[1][1] * p[1],
    ]
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [sx / n, sy / n]
}

/// Least-squares rigid registration of `frame` onto `template`.
pub fn align(frame: &LandmarkFrame, template: &LandmarkFrame) -> Result<AlignedDecomposition> {
    if frame.len() != template.len() || template.len() < 2 {
        return Err(Error::contract(format!(
            "align needs matching point counts >= 2, got {} and {}",
            frame.len(),
            template.len()
        )));
    }
    let cf = frame.centroid();
    let ct = template.centroid();
    let spread: f64 = template
        .points
        .iter()
        .map(|p| (p[0] - ct[0]).powi(2) + (p[1] - ct[1]).powi(2))
        .sum();
    if spread <= f64::EPSILON * (ct[0].abs() + ct[1].abs() + 1.0) {
        return Err(Error::Degenerate("template points all coincide".into()));
    }
    // Closed-form 2-D Procrustes: the rotation taking the centered template
    // onto the centered frame has angle atan2(sum cross, sum dot).
    let (mut dot, mut cross) = (0.0, 0.0);
    for (f, tp) in frame.points.iter().zip(&template.points) {
        let (fx, fy) = (f[0] - cf[0], f[1] - cf[1]);
        let (tx, ty) = (tp[0] - ct[0], tp[1] - ct[1]);
        dot += tx * fx + ty * fy;
        cross += tx * fy - ty * fx;
    }
    let theta = wrap_angle(cross.atan2(dot));
    let r = rotation_matrix(theta);
    let rc = apply(&r, ct);
    let t = [cf[0] - rc[0], cf[1] - rc[1]];
    let pose = Pose { theta, t };
    let p_align = LandmarkFrame {
        points: frame
            .points
            .iter()
            .map(|p| apply_transposed(&r, [p[0] - t[0], p[1] - t[1]]))
            .collect(),
    };
    Ok(AlignedDecomposition { p_align, pose })
}

/// Inverse of [`align`]: places the aligned shape back at `pose`.
pub fn reconstruct(p_align: &LandmarkFrame, pose: &Pose) -> LandmarkFrame {
    p_align.transformed(pose)
}

/// Mean shape under rigid alignment, centered at the origin.
///
/// Starts from the first frame and alternates aligning every frame to the
/// current mean with re-estimating the mean. The mean is re-registered to the
/// initial reference each round to pin its orientation.
pub fn generalized_procrustes(
    frames: &[LandmarkFrame],
    iterations: usize,
) -> Result<LandmarkFrame> {
    let first = frames
        .first()
        .ok_or_else(|| Error::contract("generalized Procrustes needs at least one frame"))?;
    let center = |f: &LandmarkFrame| {
        let c = f.centroid();
        f.translated([-c[0], -c[1]])
    };
    let reference = center(first);
    let mut mean = reference.clone();
    for _ in 0..iterations {
        let mut acc = vec![[0.0, 0.0]; mean.len()];
        for f in frames {
            let a = align(f, &mean)?;
            for (s, p) in acc.iter_mut().zip(&a.p_align.points) {
                s[0] += p[0];
                s[1] += p[1];
            }
        }
        let n = frames.len() as f64;
        let raw = LandmarkFrame {
            points: acc.into_iter().map(|p| [p[0] / n, p[1] / n]).collect(),
        };
        mean = center(&align(&raw, &reference)?.p_align);
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, n: usize) -> LandmarkFrame {
        LandmarkFrame::new(
            (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            rng.random_range(-PI..PI),
            [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
        )
    }

    fn max_diff(a: &LandmarkFrame, b: &LandmarkFrame) -> f64 {
        a.points
            .iter()
            .zip(&b.points)
            .map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn rotation_matrix_examples() {
        assert_eq!(rotation_matrix(0.0), [[1.0, 0.0], [0.0, 1.0]]);
        let r = rotation_matrix(PI / 2.0);
        let expect = [[0.0, -1.0], [1.0, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((r[i][j] - expect[i][j]).abs() < 1e-15);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (a, b) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let (ra, rb, rab) = (
                rotation_matrix(a),
                rotation_matrix(b),
                rotation_matrix(a + b),
            );
            for i in 0..2 {
                for j in 0..2 {
                    let prod = ra[i][0] * rb[0][j] + ra[i][1] * rb[1][j];
                    assert!((prod - rab[i][j]).abs() < 1e-12);
                }
            }
            let det = ra[0][0] * ra[1][1] - ra[0][1] * ra[1][0];
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn align_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tpl = random_frame(&mut rng, 68);
        let a = align(&tpl, &tpl).unwrap();
        assert!(a.pose.theta.abs() < 1e-12);
        assert!(a.pose.t[0].abs() < 1e-12 && a.pose.t[1].abs() < 1e-12);
        assert!(max_diff(&a.p_align, &tpl) < 1e-12);
    }

    #[test]
    fn align_recovers_quarter_turn_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tpl = random_frame(&mut rng, 68);
        let frame = tpl.transformed(&Pose::new(PI / 2.0, [1.0, 2.0]));
        let a = align(&frame, &tpl).unwrap();
        assert!((a.pose.theta - PI / 2.0).abs() < 1e-9);
        assert!((a.pose.t[0] - 1.0).abs() < 1e-9 && (a.pose.t[1] - 2.0).abs() < 1e-9);
        assert!(max_diff(&a.p_align, &tpl) < 1e-9);
    }

    #[test]
    fn residual_invariant_to_extra_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tpl = random_frame(&mut rng, 68);
        let frame = random_frame(&mut rng, 68);
        let base = align(&frame, &tpl).unwrap();
        let residual = |a: &AlignedDecomposition| -> f64 {
            a.p_align
                .points
                .iter()
                .zip(&tpl.points)
                .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        for _ in 0..20 {
            let moved = frame.transformed(&random_pose(&mut rng));
            let a = align(&moved, &tpl).unwrap();
            assert!((residual(&a) - residual(&base)).abs() < 1e-9);
            assert!(max_diff(&a.p_align, &base.p_align) < 1e-9);
        }
    }

    #[test]
    fn reconstruct_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_frame(&mut rng, 10);
        assert_eq!(reconstruct(&p, &Pose::IDENTITY), p);

        let origin = LandmarkFrame::new(vec![[0.0, 0.0]]).unwrap();
        let out = reconstruct(&origin, &Pose::new(0.0, [1.0, 1.0]));
        assert_eq!(out.points, vec![[1.0, 1.0]]);
    }

    #[test]
    fn round_trip_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tpl = random_frame(&mut rng, 68);
        for _ in 0..100 {
            let f = random_frame(&mut rng, 68).transformed(&random_pose(&mut rng));
            let a = align(&f, &tpl).unwrap();
            assert!(a.pose.theta > -PI && a.pose.theta <= PI);
            assert!(max_diff(&reconstruct(&a.p_align, &a.pose), &f) < 1e-9);
        }
    }

    #[test]
    fn degenerate_template_is_rejected() {
        let tpl = LandmarkFrame::new(vec![[1.0, 1.0]; 5]).unwrap();
        let f = LandmarkFrame::new((0..5).map(|i| [i as f64, 0.0]).collect()).unwrap();
        assert!(matches!(align(&f, &tpl), Err(Error::Degenerate(_))));
        assert!(align(&f, &LandmarkFrame::new(vec![[0.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(6.2) - (6.2 - 2.0 * PI)).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn procrustes_mean_of_rigid_copies_is_the_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = random_frame(&mut rng, 30);
        let frames: Vec<_> = (0..10)
            .map(|_| shape.transformed(&random_pose(&mut rng)))
            .collect();
        let mean = generalized_procrustes(&frames, 5).unwrap();
        let c = mean.centroid();
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
        let a = align(&shape, &mean).unwrap();
        assert!(max_diff(&a.p_align, &mean) < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn p_align_is_rigid_invariant(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let tpl = random_frame(&mut rng, 12);
                let f = random_frame(&mut rng, 12);
                let a = align(&f, &tpl).unwrap();
                let b = align(&f.transformed(&random_pose(&mut rng)), &tpl).unwrap();
                prop_assert!(max_diff(&a.p_align, &b.p_align) < 1e-9);
                let r = rotation_matrix(a.pose.theta);
                prop_assert!((r[0][0] * r[1][1] - r[0][1] * r[1][0] - 1.0).abs() < 1e-12);
            }
        }
    }
}
