//! Voxel attenuation maps: storage, trilinear sampling, phantom
//! rasterization and the `.vol.json` + raw `f32le` file format.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::io;

/// A scalar attenuation map (1/mm) on a regular grid, stored x-fastest.
///
/// `origin` is the object-local position of the center of voxel `(0,0,0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
    gravity_center: Vector3<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::format("dims", format!("all dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::format(
                "spacing_mm",
                format!("all spacings must be positive, got {spacing:?}"),
            ));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::format("origin_mm", format!("non-finite origin {origin:?}")));
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::format("dims", "voxel count overflows"))?;
        if data.len() != n {
            return Err(Error::format(
                "data",
                format!("dims {dims:?} declare {n} voxels but {} values were given", data.len()),
            ));
        }
        if let Some(bad) = data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::format(
                "data",
                format!("voxel {bad} has invalid attenuation {}", data[bad]),
            ));
        }
        let mut vol = Self {
            dims,
            spacing,
            origin,
            data,
            gravity_center: Vector3::zeros(),
        };
        vol.gravity_center = vol.compute_gravity_center();
        Ok(vol)
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, origin, vec![0.0; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Attenuation-weighted centroid of voxel centers. For an all-zero
    /// volume this falls back to the lattice center.
    pub fn gravity_center(&self) -> Vector3<f64> {
        self.gravity_center
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    /// Box spanned by the voxel-center lattice; sampling is zero outside.
    pub fn lattice_bounds(&self) -> BoundingBox {
        let min = Vector3::from(self.origin);
        let max = self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        BoundingBox { min, max }
    }

    fn compute_gravity_center(&self) -> Vector3<f64> {
        let mut mass = 0.0f64;
        let mut acc = Vector3::zeros();
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let v = self.get(i, j, k) as f64;
                    if v > 0.0 {
                        mass += v;
                        acc += self.voxel_center(i, j, k) * v;
                    }
                }
            }
        }
        if mass > 0.0 {
            acc / mass
        } else {
            let b = self.lattice_bounds();
            (b.min + b.max) / 2.0
        }
    }

    /// Tight box around voxels with positive attenuation, extended by half a
    /// voxel on each side so it covers the voxels' physical extent.
    pub fn object_bbox(&self) -> Result<BoundingBox> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    if self.get(i, j, k) > 0.0 {
                        any = true;
                        for (a, v) in [i, j, k].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v);
                        }
                    }
                }
            }
        }
        if !any {
            return Err(Error::EmptyObject);
        }
        let half = Vector3::from(self.spacing) / 2.0;
        Ok(BoundingBox {
            min: self.voxel_center(lo[0], lo[1], lo[2]) - half,
            max: self.voxel_center(hi[0], hi[1], hi[2]) + half,
        })
    }

    /// The 8 corners of [`Volume::object_bbox`].
    pub fn bbox_corners(&self) -> Result<[Vector3<f64>; 8]> {
        Ok(self.object_bbox()?.corners())
    }

    /// Trilinear interpolation between voxel centers. Points outside the
    /// center lattice are vacuum.
    #[inline]
    pub fn sample_trilinear(&self, p: &Vector3<f64>) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin[a]) / self.spacing[a];
            let last = (self.dims[a] - 1) as f64;
            // written so NaN falls through to the vacuum branch
            if !(f >= 0.0 && f <= last) {
                return 0.0;
            }
            if self.dims[a] == 1 {
                continue;
            }
            let i = (f.floor() as usize).min(self.dims[a] - 2);
            base[a] = i;
            frac[a] = f - i as f64;
        }
        let [i, j, k] = base;
        let step = [
            usize::from(self.dims[0] > 1),
            usize::from(self.dims[1] > 1) * self.dims[0],
            usize::from(self.dims[2] > 1) * self.dims[0] * self.dims[1],
        ];
        let i000 = self.index(i, j, k);
        let d = &self.data;
        let c = |o: usize| d[i000 + o] as f64;
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let c00 = c(0) * (1.0 - fx) + c(step[0]) * fx;
        let c10 = c(step[1]) * (1.0 - fx) + c(step[1] + step[0]) * fx;
        let c01 = c(step[2]) * (1.0 - fx) + c(step[2] + step[0]) * fx;
        let c11 = c(step[2] + step[1]) * (1.0 - fx) + c(step[2] + step[1] + step[0]) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    /// Voxel-wise scaled copy.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(
            self.dims,
            self.spacing,
            self.origin,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// Voxel-wise sum of two volumes on the same lattice.
    pub fn sum(&self, other: &Volume) -> Result<Self> {
        if self.dims != other.dims || self.spacing != other.spacing || self.origin != other.origin {
            return Err(Error::InvalidParameter("volumes are on different lattices".into()));
        }
        Self::new(
            self.dims,
            self.spacing,
            self.origin,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        )
    }
}

// ---------------------------------------------------------------------------
// Phantoms

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Box {
        center: [f64; 3],
        size: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Cylinder {
        center: [f64; 3],
        radius: f64,
        length: f64,
        axis: Axis,
    },
}

impl Shape {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match *self {
            Shape::Box { center, size } => {
                (0..3).all(|a| (p[a] - center[a]).abs() <= size[a] / 2.0)
            }
            Shape::Sphere { center, radius } => {
                (p - Vector3::from(center)).norm_squared() <= radius * radius
            }
            Shape::Cylinder {
                center,
                radius,
                length,
                axis,
            } => {
                let d = p - Vector3::from(center);
                let a = axis.index();
                let radial: f64 = (0..3).filter(|&i| i != a).map(|i| d[i] * d[i]).sum();
                d[a].abs() <= length / 2.0 && radial <= radius * radius
            }
        }
    }

    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Shape::Box { center, size } => {
                let c = Vector3::from(center);
                let h = Vector3::from(size) / 2.0;
                (c - h, c + h)
            }
            Shape::Sphere { center, radius } => {
                let c = Vector3::from(center);
                let r = Vector3::repeat(radius);
                (c - r, c + r)
            }
            Shape::Cylinder {
                center,
                radius,
                length,
                axis,
            } => {
                let c = Vector3::from(center);
                let mut h = Vector3::repeat(radius);
                h[axis.index()] = length / 2.0;
                (c - h, c + h)
            }
        }
    }
}

/// A shape painted with a constant attenuation. Later primitives overwrite
/// earlier ones, so a zero-valued primitive cuts a hole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub primitives: Vec<Primitive>,
}

impl PhantomSpec {
    /// Lattice of `dims` voxels centered on the local origin.
    pub fn centered(dims: [usize; 3], spacing: f64, primitives: Vec<Primitive>) -> Self {
        let origin = [0, 1, 2].map(|a| -(dims[a] as f64 - 1.0) * spacing / 2.0);
        Self {
            dims,
            spacing_mm: [spacing; 3],
            origin_mm: origin,
            primitives,
        }
    }

    /// Uniform cube of side `side` mm, padded by `pad` zero voxels per face.
    pub fn cube(side: f64, mu: f64, spacing: f64, pad: usize) -> Self {
        let n = (side / spacing).round() as usize + 2 * pad;
        Self::centered(
            [n; 3],
            spacing,
            vec![Primitive {
                shape: Shape::Box {
                    center: [0.0; 3],
                    size: [side; 3],
                },
                mu,
            }],
        )
    }

    /// Asymmetric implant-like plate: a 60 x 30 x 4 mm slab with three
    /// through-holes of different radii, a rib on one edge and a peg
    /// standing out of the plate on one side.
    pub fn plate() -> Self {
        let mu = 0.05;
        let hole = |x: f64, y: f64, r: f64| Primitive {
            shape: Shape::Cylinder {
                center: [x, y, 0.0],
                radius: r,
                length: 4.5,
                axis: Axis::Z,
            },
            mu: 0.0,
        };
        let primitives = vec![
            Primitive {
                shape: Shape::Box {
                    center: [0.0, 0.0, 0.0],
                    size: [60.0, 30.0, 4.0],
                },
                mu,
            },
            Primitive {
                shape: Shape::Box {
                    center: [-27.0, 0.0, 3.0],
                    size: [4.0, 30.0, 2.0],
                },
                mu,
            },
            hole(-14.0, 6.0, 4.5),
            hole(4.0, -6.5, 3.0),
            hole(19.0, 7.0, 2.0),
            Primitive {
                shape: Shape::Cylinder {
                    center: [16.0, -7.0, 6.0],
                    radius: 2.5,
                    length: 8.0,
                    axis: Axis::Z,
                },
                mu,
            },
        ];
        Self {
            dims: [67, 37, 17],
            spacing_mm: [1.0; 3],
            origin_mm: [-33.0, -18.0, -4.0],
            primitives,
        }
    }
}

/// Rasterizes a phantom by voxel-center containment.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    if spec.primitives.is_empty() {
        return Err(Error::EmptyObject);
    }
    for (n, p) in spec.primitives.iter().enumerate() {
        if !(p.mu.is_finite() && p.mu >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "primitive {n} has invalid attenuation {}",
                p.mu
            )));
        }
    }
    let mut vol = Volume::zeros(spec.dims, spec.spacing_mm, spec.origin_mm)?;
    let dims = vol.dims;
    for prim in &spec.primitives {
        let (lo, hi) = prim.shape.bounds();
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            let f_lo = ((lo[a] - spec.origin_mm[a]) / spec.spacing_mm[a]).ceil().max(0.0);
            let f_hi = ((hi[a] - spec.origin_mm[a]) / spec.spacing_mm[a])
                .floor()
                .min(dims[a] as f64 - 1.0);
            range[a] = (f_lo as usize, if f_hi < f_lo { 0 } else { f_hi as usize + 1 });
        }
        for k in range[2].0..range[2].1 {
            for j in range[1].0..range[1].1 {
                for i in range[0].0..range[0].1 {
                    if prim.shape.contains(&vol.voxel_center(i, j, k)) {
                        let idx = vol.index(i, j, k);
                        vol.data[idx] = prim.mu as f32;
                    }
                }
            }
        }
    }
    if !vol.data.iter().any(|&v| v > 0.0) {
        return Err(Error::EmptyObject);
    }
    vol.gravity_center = vol.compute_gravity_center();
    Ok(vol)
}

// ---------------------------------------------------------------------------
// File format

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: String,
    pub data_file: String,
}

impl VolumeHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let h: Self = serde_json::from_slice(bytes).map_err(|e| Error::format("header", e.to_string()))?;
        if h.dtype != DTYPE_F32LE {
            return Err(Error::format("dtype", format!("unsupported dtype `{}`", h.dtype)));
        }
        if h.dims.contains(&0) {
            return Err(Error::format("dims", format!("all dims must be >= 1, got {:?}", h.dims)));
        }
        if h.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::format(
                "spacing_mm",
                format!("all spacings must be positive, got {:?}", h.spacing_mm),
            ));
        }
        if h.origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::format("origin_mm", "non-finite origin"));
        }
        Ok(h)
    }

    pub fn voxel_count(&self) -> Result<usize> {
        self.dims[0]
            .checked_mul(self.dims[1])
            .and_then(|v| v.checked_mul(self.dims[2]))
            .ok_or_else(|| Error::format("dims", "voxel count overflows"))
    }
}

/// Decodes a volume from its header JSON and raw data bytes.
pub fn decode_volume(header: &[u8], raw: &[u8]) -> Result<Volume> {
    let h = VolumeHeader::parse(header)?;
    let data = io::f32_from_le_bytes(raw, h.voxel_count()?, "data")?;
    Volume::new(h.dims, h.spacing_mm, h.origin_mm, data)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let header = io::read_bytes(path)?;
    let h = VolumeHeader::parse(&header)?;
    let raw = io::read_bytes(&io::sibling(path, &h.data_file))?;
    decode_volume(&header, &raw)
}

/// Writes `<name>.vol.json` at `path` and the raw data next to it.
pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    let data_file = format!("{}.f32", io::stem_of(path, ".vol.json"));
    let header = VolumeHeader {
        dims: vol.dims,
        spacing_mm: vol.spacing,
        origin_mm: vol.origin,
        dtype: DTYPE_F32LE.into(),
        data_file: data_file.clone(),
    };
    io::write_bytes(&io::sibling(path, &data_file), &io::f32_to_le_bytes(&vol.data))?;
    io::write_json(path, &header)
}
