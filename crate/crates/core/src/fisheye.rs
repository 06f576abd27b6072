//! Polynomial radial lens distortion and rectification.
//!
//! The distortion model is radially symmetric in normalized image
//! coordinates: `r_d = r_u * (1 + k1*r_u^2 + k2*r_u^4 + k3*r_u^6 + k4*r_u^8)`.
//! Construction validates by dense sampling that `r_d(r_u)` is strictly
//! increasing on `[0, max_valid_radius]`, which makes the inverse
//! well-defined; [`DistortionModel::undistort_point`] recovers it by damped
//! Newton iteration on the scalar radius.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MONOTONICITY_SAMPLES: usize = 4096;
const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionModel {
    /// Radial coefficients (k1..k4) of the even-powered polynomial.
    pub k: [f64; 4],
    /// Principal point in pixels.
    pub center: (f64, f64),
    /// Focal length in pixels (isotropic).
    pub focal: f64,
    /// Largest undistorted radius (normalized units) the model is valid on.
    #[serde(default = "default_max_valid_radius")]
    pub max_valid_radius: f64,
}

fn default_max_valid_radius() -> f64 {
    1.5
}

impl DistortionModel {
    pub fn new(k: [f64; 4], center: (f64, f64), focal: f64, max_valid_radius: f64) -> Result<Self> {
        let model = DistortionModel {
            k,
            center,
            focal,
            max_valid_radius,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.focal <= 0.0 {
            return Err(Error::Config("focal length must be positive".into()));
        }
        if self.max_valid_radius <= 0.0 {
            return Err(Error::Config("max_valid_radius must be positive".into()));
        }
        // Dense sampling: r_d must be strictly increasing on the domain.
        let mut prev = 0.0;
        for i in 1..=MONOTONICITY_SAMPLES {
            let r = self.max_valid_radius * i as f64 / MONOTONICITY_SAMPLES as f64;
            let rd = self.distort_radius(r);
            if rd <= prev {
                return Err(Error::Config(format!(
                    "distortion is not strictly increasing near r_u = {r:.4}"
                )));
            }
            prev = rd;
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let model: DistortionModel = serde_json::from_str(json)?;
        model.validate()?;
        Ok(model)
    }

    /// `r_d(r_u)` for a non-negative radius.
    pub fn distort_radius(&self, r_u: f64) -> f64 {
        let r2 = r_u * r_u;
        let poly = 1.0 + r2 * (self.k[0] + r2 * (self.k[1] + r2 * (self.k[2] + r2 * self.k[3])));
        r_u * poly
    }

    fn distort_radius_derivative(&self, r_u: f64) -> f64 {
        let r2 = r_u * r_u;
        1.0 + r2
            * (3.0 * self.k[0]
                + r2 * (5.0 * self.k[1] + r2 * (7.0 * self.k[2] + r2 * 9.0 * self.k[3])))
    }

    /// Maps an undistorted normalized point into the distorted image;
    /// direction is preserved. Errors beyond the valid radius.
    pub fn distort_point(&self, p_u: (f64, f64)) -> Result<(f64, f64)> {
        let r_u = (p_u.0 * p_u.0 + p_u.1 * p_u.1).sqrt();
        if r_u > self.max_valid_radius {
            return Err(Error::InvalidArg(format!(
                "radius {r_u:.4} beyond valid domain {:.4}",
                self.max_valid_radius
            )));
        }
        if r_u == 0.0 {
            return Ok((0.0, 0.0));
        }
        let scale = self.distort_radius(r_u) / r_u;
        Ok((p_u.0 * scale, p_u.1 * scale))
    }

    /// Inverse of the radial map by damped Newton iteration, started at
    /// `r_u = r_d`, residual tolerance 1e-10, at most 50 iterations.
    pub fn undistort_radius(&self, r_d: f64) -> Result<f64> {
        if r_d < 0.0 {
            return Err(Error::InvalidArg("negative radius".into()));
        }
        if r_d == 0.0 {
            return Ok(0.0);
        }
        let max_rd = self.distort_radius(self.max_valid_radius);
        if r_d > max_rd + NEWTON_TOL {
            return Err(Error::InvalidArg(format!(
                "distorted radius {r_d:.4} outside the image of the valid domain ({max_rd:.4})"
            )));
        }
        let mut r = r_d.min(self.max_valid_radius);
        let mut residual = self.distort_radius(r) - r_d;
        for _ in 0..NEWTON_MAX_ITERS {
            if residual.abs() < NEWTON_TOL {
                return Ok(r);
            }
            let deriv = self.distort_radius_derivative(r);
            if deriv.abs() < 1e-14 {
                break;
            }
            let full_step = residual / deriv;
            // Damping: halve the step until the residual shrinks and the
            // iterate stays inside the valid domain.
            let mut lambda = 1.0;
            loop {
                let candidate = (r - lambda * full_step).clamp(0.0, self.max_valid_radius);
                let cand_residual = self.distort_radius(candidate) - r_d;
                if cand_residual.abs() < residual.abs() || lambda < 1e-6 {
                    r = candidate;
                    residual = cand_residual;
                    break;
                }
                lambda *= 0.5;
            }
        }
        if residual.abs() < NEWTON_TOL {
            Ok(r)
        } else {
            Err(Error::NotConverged(format!(
                "undistort(r_d={r_d}): residual {residual:e} after {NEWTON_MAX_ITERS} iterations"
            )))
        }
    }

    pub fn undistort_point(&self, p_d: (f64, f64)) -> Result<(f64, f64)> {
        let r_d = (p_d.0 * p_d.0 + p_d.1 * p_d.1).sqrt();
        if r_d == 0.0 {
            return Ok((0.0, 0.0));
        }
        let r_u = self.undistort_radius(r_d)?;
        let scale = r_u / r_d;
        Ok((p_d.0 * scale, p_d.1 * scale))
    }

    /// Pixel -> normalized coordinates.
    pub fn to_normalized(&self, px: (f64, f64)) -> (f64, f64) {
        (
            (px.0 - self.center.0) / self.focal,
            (px.1 - self.center.1) / self.focal,
        )
    }

    /// Normalized -> pixel coordinates.
    pub fn to_pixels(&self, n: (f64, f64)) -> (f64, f64) {
        (
            n.0 * self.focal + self.center.0,
            n.1 * self.focal + self.center.1,
        )
    }
}

/// Per-pixel source coordinates for rectification, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifyMap {
    pub width: usize,
    pub height: usize,
    /// Source (x, y) in input pixels per output pixel, row-major.
    pub src: Vec<(f64, f64)>,
    /// False where the ray leaves the valid distortion domain.
    pub valid: Vec<bool>,
}

/// For every output (undistorted) pixel, the source location in the
/// distorted input: `source = distort(undistorted ray)` on the integer
/// pixel grid. Deterministic and cacheable.
pub fn build_rectify_map(model: &DistortionModel, out_size: (usize, usize)) -> RectifyMap {
    let (width, height) = out_size;
    let rows: Vec<(Vec<(f64, f64)>, Vec<bool>)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut src_row = Vec::with_capacity(width);
            let mut valid_row = Vec::with_capacity(width);
            for x in 0..width {
                let ray = model.to_normalized((x as f64, y as f64));
                match model.distort_point(ray) {
                    Ok(p_d) => {
                        src_row.push(model.to_pixels(p_d));
                        valid_row.push(true);
                    }
                    Err(_) => {
                        src_row.push((-1.0, -1.0));
                        valid_row.push(false);
                    }
                }
            }
            (src_row, valid_row)
        })
        .collect();

    let mut src = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for (s, v) in rows {
        src.extend(s);
        valid.extend(v);
    }
    RectifyMap {
        width,
        height,
        src,
        valid,
    }
}

impl RectifyMap {
    /// Applies the map to an interleaved 8-bit image with `channels`
    /// planes by bilinear sampling. Out-of-bounds or invalid pixels are
    /// black and reported in the returned mask.
    pub fn apply_u8(
        &self,
        input: &[u8],
        in_w: usize,
        in_h: usize,
        channels: usize,
    ) -> Result<(Vec<u8>, Vec<bool>)> {
        if input.len() != in_w * in_h * channels {
            return Err(Error::shape("rectify", "input buffer size mismatch"));
        }
        let mut out = vec![0u8; self.width * self.height * channels];
        let mut mask = vec![false; self.width * self.height];
        for p in 0..self.width * self.height {
            if !self.valid[p] {
                continue;
            }
            let (sx, sy) = self.src[p];
            if sx < 0.0 || sy < 0.0 || sx > (in_w - 1) as f64 || sy > (in_h - 1) as f64 {
                continue;
            }
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let y1 = (y0 + 1).min(in_h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for c in 0..channels {
                let at = |x: usize, y: usize| input[(y * in_w + x) * channels + c] as f64;
                let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + at(x1, y0) * fx * (1.0 - fy)
                    + at(x0, y1) * (1.0 - fx) * fy
                    + at(x1, y1) * fx * fy;
                out[p * channels + c] = v.round().clamp(0.0, 255.0) as u8;
            }
            mask[p] = true;
        }
        Ok((out, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn identity_model() -> DistortionModel {
        DistortionModel::new([0.0; 4], (50.0, 50.0), 50.0, 2.0).unwrap()
    }

    #[test]
    fn zero_coefficients_are_identity() {
        let m = identity_model();
        let p = (0.3, -0.7);
        assert_eq!(m.distort_point(p).unwrap(), p);
        let back = m.undistort_point(p).unwrap();
        assert!((back.0 - p.0).abs() < 1e-12 && (back.1 - p.1).abs() < 1e-12);
    }

    #[test]
    fn forward_polynomial_values() {
        let m = DistortionModel::new([0.1, 0.0, 0.0, 0.0], (0.0, 0.0), 1.0, 1.5).unwrap();
        let p = m.distort_point((1.0, 0.0)).unwrap();
        assert!((p.0 - 1.1).abs() < 1e-12);
        assert_eq!(p.1, 0.0);

        let m = DistortionModel::new([0.1, 0.01, 0.0, 0.0], (0.0, 0.0), 1.0, 1.5).unwrap();
        assert!((m.distort_radius(0.5) - 0.5128125).abs() < 1e-12);
    }

    #[test]
    fn undistort_inverts_the_trivial_example() {
        let m = DistortionModel::new([0.1, 0.0, 0.0, 0.0], (0.0, 0.0), 1.0, 1.5).unwrap();
        let r = m.undistort_radius(1.1).unwrap();
        assert!((r - 1.0).abs() < 1e-8, "{r}");
    }

    #[test]
    fn round_trip_over_the_valid_domain() {
        let m = DistortionModel::new([0.12, -0.03, 0.004, 0.0], (0.0, 0.0), 1.0, 1.2).unwrap();
        let mut rng = Rng::new(8);
        for _ in 0..1000 {
            let r = rng.uniform(0.0, 1.2);
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            let p = (r * theta.cos(), r * theta.sin());
            let d = m.distort_point(p).unwrap();
            let u = m.undistort_point(d).unwrap();
            let err = ((u.0 - p.0).powi(2) + (u.1 - p.1).powi(2)).sqrt();
            assert!(err < 1e-8, "p={p:?} err={err:e}");
        }
    }

    #[test]
    fn radius_beyond_domain_is_rejected() {
        let m = DistortionModel::new([0.1, 0.0, 0.0, 0.0], (0.0, 0.0), 1.0, 1.0).unwrap();
        assert!(m.distort_point((1.2, 0.0)).is_err());
        assert!(m.undistort_radius(5.0).is_err());
    }

    #[test]
    fn non_monotone_model_rejected_at_construction() {
        // r*(1 - 0.5 r^2) folds over at r ~ 0.816 < 1.5.
        assert!(DistortionModel::new([-0.5, 0.0, 0.0, 0.0], (0.0, 0.0), 1.0, 1.5).is_err());
        // ...but is fine on a domain before the fold.
        assert!(DistortionModel::new([-0.5, 0.0, 0.0, 0.0], (0.0, 0.0), 1.0, 0.5).is_ok());
    }

    #[test]
    fn identity_map_reproduces_the_image_exactly() {
        let m = identity_model();
        let map = build_rectify_map(&m, (100, 100));
        let mut rng = Rng::new(3);
        let img: Vec<u8> = (0..100 * 100 * 3).map(|_| (rng.next_u64() % 256) as u8).collect();
        let (out, mask) = map.apply_u8(&img, 100, 100, 3).unwrap();
        assert_eq!(out, img);
        assert!(mask.iter().all(|&v| v));
    }

    #[test]
    fn rebuilt_map_is_bit_identical() {
        let m = DistortionModel::new([0.08, 0.01, 0.0, 0.0], (32.0, 24.0), 40.0, 1.6).unwrap();
        let a = build_rectify_map(&m, (64, 48));
        let b = build_rectify_map(&m, (64, 48));
        assert_eq!(a, b);
    }

    #[test]
    fn validity_shrinks_as_k1_grows() {
        let mut previous = usize::MAX;
        for k1 in [0.0, 0.05, 0.1, 0.2, 0.4] {
            let m = DistortionModel::new([k1, 0.0, 0.0, 0.0], (50.0, 50.0), 40.0, 2.5).unwrap();
            let map = build_rectify_map(&m, (100, 100));
            let img = vec![128u8; 100 * 100];
            let (_, mask) = map.apply_u8(&img, 100, 100, 1).unwrap();
            let valid = mask.iter().filter(|&&v| v).count();
            assert!(valid <= previous, "k1={k1}: {valid} > {previous}");
            previous = valid;
        }
    }
}
