//! Desk-scale defaults: a small detector, a reduced patch and a single
//! zone, sized so the full pipeline trains and evaluates on one CPU core.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{synthetic_xray, Case};
use crate::feature::RoiSpec;
use crate::geometry::{ProjectionGeometry, TransformParams};
use crate::nn::TrainConfig;
use crate::regression::{BankConfig, GroupSpec, NetworkSpec, NominalRanges, SynthSetup, ZoneGrid};
use crate::volume::{make_phantom, PhantomSpec, Volume};

pub const DESK_DETECTOR_PX: usize = 160;
pub const DESK_PIXEL_MM: f64 = 1.8;
pub const DESK_PATCH: (usize, usize) = (40, 76);
pub const NOMINAL_DEPTH_MM: f64 = 500.0;

/// 1 m source-detector distance, 160x160 pixels of 1.8 mm.
pub fn desk_geometry() -> ProjectionGeometry {
    ProjectionGeometry::new(1000.0, DESK_DETECTOR_PX, DESK_DETECTOR_PX, DESK_PIXEL_MM).expect("valid preset")
}

/// 1.2 times the plate's 60 x 30 mm footprint, sampled on a 40 x 76 grid.
pub fn desk_roi() -> RoiSpec {
    RoiSpec::new(72.0, 36.0).with_patch(DESK_PATCH.0, DESK_PATCH.1)
}

/// One zone covering alpha, beta in [-10, 10).
pub fn desk_grid() -> ZoneGrid {
    ZoneGrid::spanning(1, 1, -10.0, 10.0).expect("valid preset")
}

pub fn desk_setup() -> SynthSetup {
    SynthSetup {
        roi: desk_roi(),
        grid: desk_grid(),
        nominal: NominalRanges::default(),
    }
}

pub fn desk_bank_config(n_samples: usize, epochs: usize, seed: u64) -> BankConfig {
    BankConfig {
        setup: desk_setup(),
        groups: GroupSpec::defaults(),
        network: NetworkSpec::default(),
        train: TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        },
        n_samples,
        seed,
    }
}

pub fn plate() -> Result<Volume> {
    make_phantom(&PhantomSpec::plate())
}

/// Ground-truth poses well inside the synthesis ranges of the desk preset,
/// each with a noise-free synthetic X-ray. Depth is fixed at the nominal
/// 500 mm, like a phantom mounted at a fixed source distance; the
/// perturbed starts still vary it.
pub fn evaluation_cases(vol: &Volume, geom: &ProjectionGeometry, n: usize, seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t_gt = TransformParams::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                NOMINAL_DEPTH_MM,
                rng.random_range(-15.0..15.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            Ok(Case {
                id: format!("case{i}"),
                t_gt,
                xray: synthetic_xray(vol, &t_gt, geom, 0.0, 0)?,
            })
        })
        .collect()
}
