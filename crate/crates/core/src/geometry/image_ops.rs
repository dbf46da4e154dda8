//! Eye-crop resampling, histogram equalization and PGM dumps.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};
use nalgebra::{Matrix3, Vector3};

use super::GeometryError;
use crate::dataset::{EyeImage, EYE_HEIGHT, EYE_WIDTH};

/// Resamples `image` through the homography `warp` into a 60x36 crop.
pub fn warp_eye_image(image: &GrayImage, warp: &Matrix3<f64>) -> Result<EyeImage, GeometryError> {
    let out = warp_image(image, warp, EYE_WIDTH as u32, EYE_HEIGHT as u32)?;
    Ok(EyeImage::from_gray(&out).expect("output has eye-crop size"))
}

/// Output pixel `(u, v)` takes the bilinear sample of `image` at
/// `warp⁻¹ (u, v, 1)`; samples outside the input are 0. Pixel `(x, y)` sits
/// at integer coordinates.
pub fn warp_image(
    image: &GrayImage,
    warp: &Matrix3<f64>,
    width: u32,
    height: u32,
) -> Result<GrayImage, GeometryError> {
    if !warp.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("warp"));
    }
    let scale = warp.abs().max();
    if scale == 0.0 || warp.determinant().abs() <= 1e-12 * scale.powi(3) {
        return Err(GeometryError::SingularWarp);
    }
    let inv = warp.try_inverse().ok_or(GeometryError::SingularWarp)?;
    let (w, h) = image.dimensions();
    let src = image.as_raw();
    let (w, h) = (w as usize, h as usize);
    let mut out = GrayImage::new(width, height);
    for (u, v, px) in out.enumerate_pixels_mut() {
        let s = inv * Vector3::new(u as f64, v as f64, 1.0);
        if s.z.abs() < 1e-300 {
            continue;
        }
        let (x, y) = (s.x / s.z, s.y / s.z);
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            continue;
        }
        let x0 = (x.floor() as usize).min(w - 1);
        let y0 = (y.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let at = |xx: usize, yy: usize| src[yy * w + xx] as f64;
        let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
        let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
        px.0[0] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

/// Classic CDF histogram equalization:
/// `out = round(255 (cdf(in) - cdf_min) / (N - cdf_min))`.
/// A single-level image is returned unchanged.
pub fn histogram_equalize(image: &GrayImage) -> GrayImage {
    let mut hist = [0usize; 256];
    for p in image.as_raw() {
        hist[*p as usize] += 1;
    }
    let n = image.as_raw().len();
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist.iter()) {
        acc += h;
        *c = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return image.clone();
    }
    let denom = (n - cdf_min) as f64;
    let lut: Vec<u8> = cdf
        .iter()
        .map(|&c| (255.0 * c.saturating_sub(cdf_min) as f64 / denom).round() as u8)
        .collect();
    let mut out = image.clone();
    for p in out.iter_mut() {
        *p = lut[*p as usize];
    }
    out
}

/// Writes a binary (P5) PGM.
pub fn write_pgm(path: &Path, image: &GrayImage) -> std::io::Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            image.as_raw(),
            image.width(),
            image.height(),
            ExtendedColorType::L8,
        )
        .map_err(std::io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]))
    }

    /// Per-pixel reference resampler for an affine map `x' = A x + b`,
    /// written against the inverse map directly.
    fn reference_affine(
        src: &GrayImage,
        a: [[f64; 2]; 2],
        b: [f64; 2],
        w: u32,
        h: u32,
    ) -> GrayImage {
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [
            [a[1][1] / det, -a[0][1] / det],
            [-a[1][0] / det, a[0][0] / det],
        ];
        gray(w, h, |u, v| {
            let (du, dv) = (u as f64 - b[0], v as f64 - b[1]);
            let x = inv[0][0] * du + inv[0][1] * dv;
            let y = inv[1][0] * du + inv[1][1] * dv;
            let (sw, sh) = (src.width() as f64, src.height() as f64);
            if x < 0.0 || y < 0.0 || x > sw - 1.0 || y > sh - 1.0 {
                return 0;
            }
            let xi = x.floor().min(sw - 2.0);
            let yi = y.floor().min(sh - 2.0);
            let (tx, ty) = (x - xi, y - yi);
            let p =
                |dx: f64, dy: f64| src.get_pixel((xi + dx) as u32, (yi + dy) as u32).0[0] as f64;
            let val = (1.0 - tx) * (1.0 - ty) * p(0.0, 0.0)
                + tx * (1.0 - ty) * p(1.0, 0.0)
                + (1.0 - tx) * ty * p(0.0, 1.0)
                + tx * ty * p(1.0, 1.0);
            val.round() as u8
        })
    }

    #[test]
    fn identity_warp_is_identity() {
        let img = gray(60, 36, |x, y| ((x * 7 + y * 13) % 256) as u8);
        let out = warp_eye_image(&img, &Matrix3::identity()).unwrap();
        assert_eq!(out.to_gray(), img);
    }

    #[test]
    fn scaled_constant_stays_constant() {
        let img = gray(200, 120, |_, _| 77);
        let m = Matrix3::new(2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        let out = warp_eye_image(&img, &m).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 77));
    }

    #[test]
    fn checkerboard_matches_reference_resampler() {
        let img = gray(80, 60, |x, y| {
            if ((x / 6) + (y / 6)) % 2 == 0 {
                230
            } else {
                20
            }
        });
        let a = [[0.9, 0.15], [-0.1, 1.1]];
        let b = [-5.0, -3.5];
        let m = Matrix3::new(
            a[0][0], a[0][1], b[0], a[1][0], a[1][1], b[1], 0.0, 0.0, 1.0,
        );
        let got = warp_eye_image(&img, &m).unwrap().to_gray();
        let want = reference_affine(&img, a, b, 60, 36);
        for (g, w) in got.as_raw().iter().zip(want.as_raw()) {
            assert!((*g as i32 - *w as i32).abs() <= 1, "{g} vs {w}");
        }
    }

    #[test]
    fn singular_warp_rejected() {
        let img = gray(10, 10, |_, _| 1);
        let m = Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(
            warp_eye_image(&img, &m).unwrap_err(),
            GeometryError::SingularWarp
        );
    }

    #[test]
    fn equalize_constant() {
        let img = gray(8, 8, |_, _| 90);
        let out = histogram_equalize(&img);
        assert!(out.iter().all(|&p| p == 90));
    }

    #[test]
    fn equalize_two_levels() {
        let img = gray(8, 8, |x, _| if x < 4 { 0 } else { 255 });
        let out = histogram_equalize(&img);
        assert_eq!(out, img);
        let img = gray(8, 8, |x, _| if x < 4 { 40 } else { 41 });
        let out = histogram_equalize(&img);
        assert!(out.iter().all(|&p| p == 0 || p == 255));
    }

    #[test]
    fn equalize_uniform_ramp_is_identity() {
        let img = gray(256, 3, |x, _| x as u8);
        let out = histogram_equalize(&img);
        for (a, b) in out.iter().zip(img.iter()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let img = gray(60, 36, |x, _| x as u8);
        let path = dir.path().join("e.pgm");
        write_pgm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert!(bytes.ends_with(img.as_raw()));
    }

    fn smooth(w: u32, h: u32) -> GrayImage {
        gray(w, h, |x, y| {
            let v = 128.0 + 60.0 * (x as f64 / 9.0).sin() + 50.0 * (y as f64 / 7.0).cos();
            v.round() as u8
        })
    }

    proptest! {
        #[test]
        fn equalize_idempotent_and_monotone(px in prop::collection::vec(0u8..=255, 64..400)) {
            let n = px.len() as u32;
            let img = GrayImage::from_raw(n, 1, px).unwrap();
            let once = histogram_equalize(&img);
            let twice = histogram_equalize(&once);
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((*a as i32 - *b as i32).abs() <= 1);
            }
            for (i, j) in (0..img.len()).zip(1..img.len()) {
                let (a, b) = (img.as_raw()[i], img.as_raw()[j]);
                let (oa, ob) = (once.as_raw()[i], once.as_raw()[j]);
                if a < b {
                    prop_assert!(oa <= ob);
                } else if a > b {
                    prop_assert!(oa >= ob);
                }
            }
        }

        #[test]
        fn warp_composition(
            s1 in 0.9f64..1.1, r1 in -0.1f64..0.1, tx1 in -3.0f64..3.0, ty1 in -3.0f64..3.0,
            s2 in 0.9f64..1.1, r2 in -0.1f64..0.1, tx2 in -3.0f64..3.0, ty2 in -3.0f64..3.0,
        ) {
            let sim = |s: f64, r: f64, tx: f64, ty: f64| Matrix3::new(
                s * r.cos(), -s * r.sin(), tx, s * r.sin(), s * r.cos(), ty, 0.0, 0.0, 1.0);
            let (m, n) = (sim(s1, r1, tx1, ty1), sim(s2, r2, tx2, ty2));
            let img = smooth(120, 90);
            let two_step = warp_image(&warp_image(&img, &m, 120, 90).unwrap(), &n, 120, 90).unwrap();
            let one_step = warp_image(&img, &(n * m), 120, 90).unwrap();
            // compare only where both the intermediate and the source positions
            // stay clear of the zero-filled border
            let inside = |mat: &Matrix3<f64>, x: u32, y: u32| {
                let p = mat.try_inverse().unwrap() * Vector3::new(x as f64, y as f64, 1.0);
                let (px, py) = (p.x / p.z, p.y / p.z);
                px >= 2.0 && py >= 2.0 && px <= 117.0 && py <= 87.0
            };
            for y in 20..70 {
                for x in 25..95 {
                    if !inside(&n, x, y) || !inside(&(n * m), x, y) {
                        continue;
                    }
                    let a = two_step.get_pixel(x, y).0[0] as i32;
                    let b = one_step.get_pixel(x, y).0[0] as i32;
                    prop_assert!((a - b).abs() <= 2, "({x},{y}): {a} vs {b}");
                }
            }
        }
    }
}
