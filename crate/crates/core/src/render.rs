//! Wireframe rasterizer for landmark frames and binary PGM output.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{ibug68, LandmarkFrame};
use crate::metrics::GrayImage;

#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub points: Range<usize>,
    pub closed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSpec {
    pub width: usize,
    pub height: usize,
    pub stroke: f64,
    /// Fraction of each canvas side left empty on both edges.
    pub margin: f64,
    pub groups: Vec<Polyline>,
}

impl Default for RenderSpec {
    fn default() -> Self {
        let open = |points| Polyline {
            points,
            closed: false,
        };
        let closed = |points| Polyline {
            points,
            closed: true,
        };
        RenderSpec {
            width: 256,
            height: 256,
            stroke: 1.0,
            margin: 0.1,
            groups: vec![
                open(ibug68::JAW),
                open(ibug68::RIGHT_BROW),
                open(ibug68::LEFT_BROW),
                open(ibug68::NOSE_BRIDGE),
                open(ibug68::NOSE_BASE),
                closed(ibug68::RIGHT_EYE),
                closed(ibug68::LEFT_EYE),
                closed(ibug68::OUTER_LIP),
                closed(ibug68::INNER_LIP),
            ],
        }
    }
}

/// Maps the frame's bounding box uniformly into the canvas minus margins,
/// centered, then strokes each polyline with Bresenham segments.
pub fn rasterize(frame: &LandmarkFrame, spec: &RenderSpec) -> Result<GrayImage> {
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Config("canvas must be at least 1x1".into()));
    }
    if let Some(g) = spec.groups.iter().find(|g| g.points.end > frame.len()) {
        return Err(Error::contract(format!(
            "polyline {:?} exceeds {} landmarks",
            g.points,
            frame.len()
        )));
    }
    if frame.is_empty() {
        return Err(Error::Degenerate("no landmarks to render".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &frame.points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let extent = [hi[0] - lo[0], hi[1] - lo[1]];
    if extent[0].max(extent[1]) <= 0.0 {
        return Err(Error::Degenerate(
            "landmark bounding box has zero size".into(),
        ));
    }
    let canvas = [spec.width as f64 - 1.0, spec.height as f64 - 1.0];
    let usable = [
        canvas[0] * (1.0 - 2.0 * spec.margin),
        canvas[1] * (1.0 - 2.0 * spec.margin),
    ];
    let scale = (0..2)
        .filter(|&d| extent[d] > 0.0)
        .map(|d| usable[d] / extent[d])
        .fold(f64::INFINITY, f64::min);
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    // Snapping to a 1/1024 sub-pixel grid first absorbs the rounding noise
    // that a translated copy of the frame would otherwise introduce.
    let snap = |v: f64| ((v * 1024.0).round() / 1024.0).round() as i64;
    let to_px = |p: [f64; 2]| -> (i64, i64) {
        (
            snap((p[0] - mid[0]) * scale + canvas[0] / 2.0),
            snap((p[1] - mid[1]) * scale + canvas[1] / 2.0),
        )
    };

    let mut img = GrayImage::new(spec.width, spec.height);
    for g in &spec.groups {
        let idx: Vec<usize> = g.points.clone().collect();
        for w in idx.windows(2) {
            line(
                &mut img,
                to_px(frame.points[w[0]]),
                to_px(frame.points[w[1]]),
                spec.stroke,
            );
        }
        if idx.len() == 1 {
            let p = to_px(frame.points[idx[0]]);
            line(&mut img, p, p, spec.stroke);
        }
        if g.closed && idx.len() > 2 {
            let (a, b) = (idx[idx.len() - 1], idx[0]);
            line(
                &mut img,
                to_px(frame.points[a]),
                to_px(frame.points[b]),
                spec.stroke,
            );
        }
    }
    Ok(img)
}

fn line(img: &mut GrayImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), v: f64) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if (0..img.width() as i64).contains(&x0) && (0..img.height() as i64).contains(&y0) {
            img.set(x0 as usize, y0 as usize, v);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// 8-bit binary PGM (P5) encoding.
pub fn pgm_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|v| (v * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&pgm_bytes(img)).map_err(|e| Error::io(path, e))
}

/// Parses an 8-bit P5 file back into an image.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected 8-bit P5"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimensions"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes
        .get(pos + 1..pos + 1 + w * h)
        .ok_or_else(|| bad("truncated pixels"))?;
    GrayImage::from_pixels(w, h, data.iter().map(|&b| f64::from(b) / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{psnr, ssim};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn face(rng: &mut ChaCha8Rng) -> LandmarkFrame {
        LandmarkFrame::new(
            (0..68)
                .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)])
                .collect(),
        )
        .unwrap()
    }

    fn stroked(img: &GrayImage) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..img.height() {
            for x in 0..img.width() {
                if img.get(x, y) > 0.0 {
                    out.push((x, y));
                }
            }
        }
        out
    }

    #[test]
    fn identical_frames_render_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = face(&mut rng);
        let spec = RenderSpec::default();
        let a = rasterize(&f, &spec).unwrap();
        let b = rasterize(&f.clone(), &spec).unwrap();
        assert!(!stroked(&a).is_empty());
        assert_eq!(ssim(&a, &b).unwrap(), 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 100.0);
    }

    #[test]
    fn fit_removes_global_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = face(&mut rng);
        let spec = RenderSpec::default();
        let moved = f.translated([256.0, -256.0]);
        assert_eq!(
            rasterize(&f, &spec).unwrap(),
            rasterize(&moved, &spec).unwrap()
        );
    }

    #[test]
    fn horizontal_line_strokes_one_row() {
        let f = LandmarkFrame::new((0..68).map(|i| [i as f64, 5.0]).collect()).unwrap();
        let px = stroked(&rasterize(&f, &RenderSpec::default()).unwrap());
        assert!(!px.is_empty());
        assert!(px.iter().all(|p| p.1 == px[0].1));
    }

    #[test]
    fn opening_the_mouth_changes_lip_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = face(&mut rng);
        let mut open = f.clone();
        for i in 48..68 {
            open.points[i][1] += if i < 55 || (61..64).contains(&i) {
                -3.0
            } else {
                3.0
            };
        }
        let spec = RenderSpec::default();
        assert_ne!(
            rasterize(&f, &spec).unwrap(),
            rasterize(&open, &spec).unwrap()
        );
    }

    #[test]
    fn degenerate_and_short_frames_error() {
        let spec = RenderSpec::default();
        let point = LandmarkFrame::new(vec![[1.0, 1.0]; 68]).unwrap();
        assert!(matches!(
            rasterize(&point, &spec),
            Err(Error::Degenerate(_))
        ));
        let short = LandmarkFrame::new(vec![[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(rasterize(&short, &spec).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = rasterize(&face(&mut rng), &RenderSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        write_pgm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n256 256\n255\n"));
        assert_eq!(bytes.len(), 15 + 256 * 256);
        assert_eq!(read_pgm(&path).unwrap(), img);
    }
}
