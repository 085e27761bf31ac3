//! The pose-dependent region of interest, the patch operator that resamples
//! it to a fixed grid, and the residual feature
//! `X(t, I) = H_t(DRR(t)) - H_t(I)`.
//!
//! The ROI is centered on the projected gravity center, scales with the
//! magnification `D / t_z` and rotates with `t_theta`, so a patch always
//! shows the object at the same size and in-plane orientation.

use serde::{Deserialize, Serialize};

use crate::drr::{render_drr_masked, BilinearCell, DrrSettings, Image, PixelMask, PixelRect, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{ProjectionGeometry, TransformParams};
use crate::volume::Volume;

/// Object-plane ROI size and the fixed patch resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub w0_mm: f64,
    pub h0_mm: f64,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

impl RoiSpec {
    pub const DEFAULT_ROWS: usize = 156;
    pub const DEFAULT_COLS: usize = 300;

    pub fn new(w0_mm: f64, h0_mm: f64) -> Self {
        Self {
            w0_mm,
            h0_mm,
            patch_rows: Self::DEFAULT_ROWS,
            patch_cols: Self::DEFAULT_COLS,
        }
    }

    pub fn with_patch(mut self, rows: usize, cols: usize) -> Self {
        self.patch_rows = rows;
        self.patch_cols = cols;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w0_mm.is_finite() && self.w0_mm > 0.0 && self.h0_mm.is_finite() && self.h0_mm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ROI size must be positive, got {} x {} mm",
                self.w0_mm, self.h0_mm
            )));
        }
        if self.patch_rows == 0 || self.patch_cols == 0 {
            return Err(Error::InvalidParameter("patch must have at least one sample".into()));
        }
        Ok(())
    }

    /// ROI sized to `margin` times the object's in-plane extent.
    pub fn fit_to(vol: &Volume, margin: f64, rows: usize, cols: usize) -> Result<Self> {
        let e = vol.object_bbox()?.extent();
        Ok(Self {
            w0_mm: margin * e.x,
            h0_mm: margin * e.y,
            patch_rows: rows,
            patch_cols: cols,
        })
    }
}

/// ROI on the detector plane: center (mm), size (mm), orientation (deg).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub center_mm: [f64; 2],
    pub width_mm: f64,
    pub height_mm: f64,
    pub phi_deg: f64,
}

pub fn compute_roi(t: &TransformParams, geom: &ProjectionGeometry, spec: &RoiSpec) -> Result<Roi> {
    t.check_depth(geom)?;
    spec.validate()?;
    let d = geom.source_to_detector_mm;
    Ok(Roi {
        center_mm: [d * t.tx / t.tz, d * t.ty / t.tz],
        width_mm: spec.w0_mm * d / t.tz,
        height_mm: spec.h0_mm * d / t.tz,
        phi_deg: t.theta,
    })
}

impl Roi {
    /// Detector position (mm) of patch sample `(row, col)`. Samples sit at
    /// the centers of a `rows x cols` tiling of the rotated rectangle;
    /// columns run along the width, rows along the height.
    #[inline]
    pub fn sample_point(&self, row: usize, col: usize, rows: usize, cols: usize) -> [f64; 2] {
        let u = ((col as f64 + 0.5) / cols as f64 - 0.5) * self.width_mm;
        let v = ((row as f64 + 0.5) / rows as f64 - 0.5) * self.height_mm;
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        [
            self.center_mm[0] + c * u - s * v,
            self.center_mm[1] + s * u + c * v,
        ]
    }

    /// Smallest pixel rectangle (plus a one-pixel margin for bilinear
    /// lookups) covering every patch sample, clipped to the detector.
    pub fn footprint(&self, spec: &RoiSpec, geom: &ProjectionGeometry) -> PixelRect {
        let (rows, cols) = (spec.patch_rows, spec.patch_cols);
        let corners = [
            self.sample_point(0, 0, rows, cols),
            self.sample_point(0, cols - 1, rows, cols),
            self.sample_point(rows - 1, 0, rows, cols),
            self.sample_point(rows - 1, cols - 1, rows, cols),
        ];
        let (mut c_lo, mut c_hi, mut r_lo, mut r_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in corners {
            let px = geom.mm_to_pixel(p);
            c_lo = c_lo.min(px[0]);
            c_hi = c_hi.max(px[0]);
            r_lo = r_lo.min(px[1]);
            r_hi = r_hi.max(px[1]);
        }
        let clip = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
            let a = (lo.floor() - 1.0).max(0.0);
            let b = (hi.ceil() + 1.0).min(n as f64 - 1.0);
            if !(a <= b) {
                return (0, 0);
            }
            (a as usize, (b - a) as usize + 1)
        };
        let (col0, ncols) = clip(c_lo, c_hi, geom.width());
        let (row0, nrows) = clip(r_lo, r_hi, geom.height());
        if ncols == 0 || nrows == 0 {
            return PixelRect { col0: 0, row0: 0, cols: 0, rows: 0 };
        }
        PixelRect {
            col0,
            row0,
            cols: ncols,
            rows: nrows,
        }
    }

    /// Exactly the pixels that [`extract_patch`] reads for this ROI. Rendering
    /// only these makes the cost independent of the ROI angle.
    pub fn support(&self, spec: &RoiSpec, geom: &ProjectionGeometry) -> PixelMask {
        let mut mask = PixelMask::empty(self.footprint(spec, geom));
        let pp = geom.principal_point();
        let inv = 1.0 / geom.pixel_spacing_mm;
        for r in 0..spec.patch_rows {
            for c in 0..spec.patch_cols {
                let p = self.sample_point(r, c, spec.patch_rows, spec.patch_cols);
                if let Some(cell) = BilinearCell::locate(geom.width(), geom.height(), pp[0] + p[0] * inv, pp[1] + p[1] * inv) {
                    for (col, row) in [(cell.c0, cell.r0), (cell.c1, cell.r0), (cell.c0, cell.r1), (cell.c1, cell.r1)] {
                        mask.insert(col, row);
                    }
                }
            }
        }
        mask
    }
}

/// Fixed-size resampled ROI, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// `(mean, std)` removed by [`standardize_patch`], if applied.
    pub normalization: Option<(f64, f64)>,
    /// At least one sample fell outside the detector.
    pub out_of_field: bool,
}

impl Patch {
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                layer: "patch".into(),
                expected: format!("{rows}x{cols}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            normalization: None,
            out_of_field: false,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    pub fn to_image(&self, sample_spacing_mm: f64) -> Result<Image> {
        Image::new(
            self.cols,
            self.rows,
            sample_spacing_mm,
            self.data.iter().map(|&v| v as f32).collect(),
            Provenance::Feature,
        )
    }
}

/// Bilinear resampling of `img` over the rotated ROI grid. Samples off the
/// detector read as zero and set [`Patch::out_of_field`].
pub fn extract_patch(img: &Image, roi: &Roi, spec: &RoiSpec, geom: &ProjectionGeometry) -> Patch {
    let (rows, cols) = (spec.patch_rows, spec.patch_cols);
    let mut data = Vec::with_capacity(rows * cols);
    let mut out_of_field = false;
    let pp = geom.principal_point();
    let inv = 1.0 / geom.pixel_spacing_mm;
    for r in 0..rows {
        for c in 0..cols {
            let p = roi.sample_point(r, c, rows, cols);
            match img.bilinear(pp[0] + p[0] * inv, pp[1] + p[1] * inv) {
                Some(v) => data.push(v),
                None => {
                    out_of_field = true;
                    data.push(0.0);
                }
            }
        }
    }
    Patch {
        rows,
        cols,
        data,
        normalization: None,
        out_of_field,
    }
}

pub const STD_GUARD: f64 = 1e-6;

/// Zero mean, unit standard deviation; flat patches become all zeros.
pub fn standardize_patch(p: &Patch) -> Patch {
    let (mean, std) = p.mean_std();
    let data = if std < STD_GUARD {
        vec![0.0; p.data.len()]
    } else {
        p.data.iter().map(|v| (v - mean) / std).collect()
    };
    Patch {
        data,
        normalization: Some((mean, std)),
        ..p.clone()
    }
}

/// The regression input: the residual between the standardized DRR patch
/// at `t` and the standardized observed patch, both sampled on the ROI of
/// `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub patch: Patch,
    pub params: TransformParams,
    pub roi: Roi,
}

impl Feature {
    pub fn data(&self) -> &[f64] {
        &self.patch.data
    }
}

/// Difference of two standardized patches taken on the same ROI.
pub fn residual(drr_patch: &Patch, obs_patch: &Patch) -> Patch {
    let a = standardize_patch(drr_patch);
    let b = standardize_patch(obs_patch);
    Patch {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
        normalization: None,
        out_of_field: a.out_of_field || b.out_of_field,
    }
}

/// Renders the DRR at `t` over the ROI footprint only and forms the
/// residual against `xray`.
pub fn feature_residual(
    t: &TransformParams,
    xray: &Image,
    vol: &Volume,
    geom: &ProjectionGeometry,
    spec: &RoiSpec,
) -> Result<Feature> {
    let roi = compute_roi(t, geom, spec)?;
    let drr = render_drr_masked(vol, t, geom, &roi.support(spec, geom), &DrrSettings::default())?;
    let patch = residual(&extract_patch(&drr, &roi, spec, geom), &extract_patch(xray, &roi, spec, geom));
    Ok(Feature {
        patch,
        params: *t,
        roi,
    })
}
