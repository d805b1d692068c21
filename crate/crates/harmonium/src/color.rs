//! Polynomial color matching between illumination conditions.
//!
//! A 24-patch color checker photographed in a scene gives 24 correspondences
//! between the scene's illumination and the chart's reference colors. Fitting
//! a polynomial matching matrix on those correspondences yields a transform
//! that re-illuminates whole images; composing a forward transform with
//! another image's inverse transform transfers illumination across images
//! with the standard condition as the transitional state.
//!
//! All fitting and application happens on sRGB-encoded channel values in
//! `[0, 1]`; outputs are hard-clamped back into `[0, 1]`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, LinearImage};

/// Identifies the fixed feature ordering used by [`poly_features`].
pub const BASIS_ID: &str = "poly-v1";

/// Relative singular-value cutoff for the pseudoinverse solve.
const SV_CUTOFF: f64 = 1e-10;

/// One sRGB color with channels in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Rgb {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl Rgb {
    pub fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.g.is_finite() && self.b.is_finite()
    }

    pub fn in_unit_range(self) -> bool {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        ok(self.r) && ok(self.g) && ok(self.b)
    }
}

impl From<[f64; 3]> for Rgb {
    fn from(v: [f64; 3]) -> Self {
        Rgb::new(v[0], v[1], v[2])
    }
}

impl From<Rgb> for [f64; 3] {
    fn from(c: Rgb) -> Self {
        c.to_array()
    }
}

/// The 24 patch readings of a Macbeth chart under one illumination,
/// in chart row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Rgb>", into = "Vec<Rgb>")]
pub struct PatchColors {
    colors: [Rgb; 24],
}

impl PatchColors {
    pub fn new(colors: [Rgb; 24]) -> Result<Self> {
        for (i, c) in colors.iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::Data(format!("patch {i} has a non-finite channel")));
            }
            if !c.in_unit_range() {
                return Err(Error::Data(format!(
                    "patch {i} = ({}, {}, {}) outside [0, 1]",
                    c.r, c.g, c.b
                )));
            }
        }
        Ok(Self { colors })
    }

    pub fn from_slice(colors: &[Rgb]) -> Result<Self> {
        let arr: [Rgb; 24] = colors
            .try_into()
            .map_err(|_| Error::Shape(format!("expected 24 patches, got {}", colors.len())))?;
        Self::new(arr)
    }

    pub fn colors(&self) -> &[Rgb; 24] {
        &self.colors
    }

    /// Published sRGB reference values of the classic 24-patch chart under
    /// the standard illumination condition. External reference data,
    /// editable by supplying a patch file instead.
    pub fn colorchecker_srgb() -> Self {
        const SRGB_8BIT: [[u8; 3]; 24] = [
            [115, 82, 68],    // dark skin
            [194, 150, 130],  // light skin
            [98, 122, 157],   // blue sky
            [87, 108, 67],    // foliage
            [133, 128, 177],  // blue flower
            [103, 189, 170],  // bluish green
            [214, 126, 44],   // orange
            [80, 91, 166],    // purplish blue
            [193, 90, 99],    // moderate red
            [94, 60, 108],    // purple
            [157, 188, 64],   // yellow green
            [224, 163, 46],   // orange yellow
            [56, 61, 150],    // blue
            [70, 148, 73],    // green
            [175, 54, 60],    // red
            [231, 199, 31],   // yellow
            [187, 86, 149],   // magenta
            [8, 133, 161],    // cyan
            [243, 243, 242],  // white 9.5
            [200, 200, 200],  // neutral 8
            [160, 160, 160],  // neutral 6.5
            [122, 122, 121],  // neutral 5
            [85, 85, 85],     // neutral 3.5
            [52, 52, 52],     // black 2
        ];
        let colors = SRGB_8BIT.map(|[r, g, b]| {
            Rgb::new(r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0)
        });
        Self { colors }
    }

    /// Loads a JSON array of 24 `[r, g, b]` triplets.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl TryFrom<Vec<Rgb>> for PatchColors {
    type Error = Error;

    fn try_from(v: Vec<Rgb>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<PatchColors> for Vec<Rgb> {
    fn from(p: PatchColors) -> Self {
        p.colors.to_vec()
    }
}

/// Number of polynomial features for a supported degree.
pub fn feature_count(degree: u32) -> Result<usize> {
    match degree {
        1 => Ok(4),
        2 => Ok(10),
        other => Err(Error::Config(format!(
            "unsupported polynomial degree {other}; supported degrees are 1 and 2"
        ))),
    }
}

/// Expands a color into its polynomial feature vector.
///
/// The ordering is fixed and part of the on-disk contract:
/// degree 1 gives `[r, g, b, 1]`, degree 2 gives
/// `[r, g, b, r2, g2, b2, rg, gb, rb, 1]`.
pub fn poly_features(color: Rgb, degree: u32) -> Result<Vec<f64>> {
    if !color.is_finite() {
        return Err(Error::Data("non-finite color channel".into()));
    }
    let Rgb { r, g, b } = color;
    match degree {
        1 => Ok(vec![r, g, b, 1.0]),
        2 => Ok(vec![
            r,
            g,
            b,
            r * r,
            g * g,
            b * b,
            r * g,
            g * b,
            r * b,
            1.0,
        ]),
        other => Err(Error::Config(format!(
            "unsupported polynomial degree {other}; supported degrees are 1 and 2"
        ))),
    }
}

/// A fitted polynomial matching matrix mapping expanded source colors to
/// target colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTransform {
    pub degree: u32,
    pub basis_id: String,
    /// F x 3 matrix, one row per feature.
    pub matrix: Vec<[f64; 3]>,
    pub fit_residual_rms: f64,
}

impl PolyTransform {
    /// Applies the transform to one color and clamps into `[0, 1]`.
    pub fn apply_color(&self, color: Rgb) -> Result<Rgb> {
        let phi = poly_features(color, self.degree)?;
        debug_assert_eq!(phi.len(), self.matrix.len());
        let mut out = [0.0; 3];
        for (f, row) in phi.iter().zip(&self.matrix) {
            out[0] += f * row[0];
            out[1] += f * row[1];
            out[2] += f * row[2];
        }
        Ok(Rgb::new(
            out[0].clamp(0.0, 1.0),
            out[1].clamp(0.0, 1.0),
            out[2].clamp(0.0, 1.0),
        ))
    }

    fn validate(&self) -> Result<()> {
        if self.basis_id != BASIS_ID {
            return Err(Error::Config(format!(
                "unknown basis id {:?}, expected {BASIS_ID:?}",
                self.basis_id
            )));
        }
        let f = feature_count(self.degree)?;
        if self.matrix.len() != f {
            return Err(Error::Shape(format!(
                "matrix has {} rows, expected {f} for degree {}",
                self.matrix.len(),
                self.degree
            )));
        }
        if self
            .matrix
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Data("transform matrix has a non-finite entry".into()));
        }
        if !(self.fit_residual_rms >= 0.0) {
            return Err(Error::Data(format!(
                "fit_residual_rms {} is not a nonnegative real",
                self.fit_residual_rms
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: PolyTransform = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Fits the matrix minimizing
/// `sum_k ||phi(src_k)^T M - dst_k||^2 + ridge * ||M||_F^2`
/// over the 24 patch correspondences via an SVD pseudoinverse; singular
/// values below `1e-10 * sigma_max` are treated as zero, so rank-deficient
/// patch sets yield the minimum-norm solution.
pub fn fit_transform(
    src: &PatchColors,
    dst: &PatchColors,
    degree: u32,
    ridge: f64,
) -> Result<PolyTransform> {
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be nonnegative, got {ridge}")));
    }
    let f = feature_count(degree)?;

    let mut design = DMatrix::<f64>::zeros(24 + f, f);
    let mut rhs = DMatrix::<f64>::zeros(24 + f, 3);
    for (k, (s, d)) in src.colors().iter().zip(dst.colors()).enumerate() {
        let phi = poly_features(*s, degree)?;
        for (j, v) in phi.iter().enumerate() {
            design[(k, j)] = *v;
        }
        rhs[(k, 0)] = d.r;
        rhs[(k, 1)] = d.g;
        rhs[(k, 2)] = d.b;
    }
    // Ridge as sqrt(ridge) * I augmentation rows; zero rows are harmless
    // when ridge = 0.
    let ridge_sqrt = ridge.sqrt();
    for j in 0..f {
        design[(24 + j, j)] = ridge_sqrt;
    }

    let svd = design.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    if !(sigma_max > 0.0) {
        return Err(Error::Numeric(
            "all singular values of the design matrix are zero".into(),
        ));
    }
    let solution = svd
        .solve(&rhs, SV_CUTOFF * sigma_max)
        .map_err(|e| Error::Numeric(format!("pseudoinverse solve failed: {e}")))?;

    let matrix: Vec<[f64; 3]> = (0..f)
        .map(|j| [solution[(j, 0)], solution[(j, 1)], solution[(j, 2)]])
        .collect();

    // Residual over the 24 original correspondences only (72 scalars).
    let mut sq_sum = 0.0;
    for k in 0..24 {
        for c in 0..3 {
            let mut pred = 0.0;
            for j in 0..f {
                pred += design[(k, j)] * matrix[j][c];
            }
            let r = pred - rhs[(k, c)];
            sq_sum += r * r;
        }
    }
    let fit_residual_rms = (sq_sum / 72.0).sqrt();

    Ok(PolyTransform {
        degree,
        basis_id: BASIS_ID.to_string(),
        matrix,
        fit_residual_rms,
    })
}

/// Applies a transform pixelwise, optionally restricted to a mask.
/// Unmasked pixels are bit-identical to the input.
pub fn apply_transform(
    t: &PolyTransform,
    image: &LinearImage,
    mask: Option<&BinaryMask>,
) -> Result<LinearImage> {
    t.validate()?;
    if let Some(m) = mask {
        if !m.matches_image(image) {
            return Err(Error::Shape(format!(
                "mask is {}x{} but image is {}x{}",
                m.width(),
                m.height(),
                image.width(),
                image.height()
            )));
        }
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.map_or(true, |m| m.get(x, y)) {
                let c = t.apply_color(Rgb::from(image.get(x, y)))?;
                out.set(x, y, c.to_array());
            }
        }
    }
    Ok(out)
}

/// Fits `src -> standard` and `standard -> src`, then reports the max
/// per-channel error of the round trip over the 24 patches. Diagnostic
/// for dataset quality gating.
pub fn roundtrip_error(
    src: &PatchColors,
    standard: &PatchColors,
    degree: u32,
    ridge: f64,
) -> Result<f64> {
    let forward = fit_transform(src, standard, degree, ridge)?;
    let inverse = fit_transform(standard, src, degree, ridge)?;
    let mut worst = 0.0f64;
    for patch in src.colors() {
        let through = inverse.apply_color(forward.apply_color(*patch)?)?;
        worst = worst
            .max((through.r - patch.r).abs())
            .max((through.g - patch.g).abs())
            .max((through.b - patch.b).abs());
    }
    Ok(worst)
}
