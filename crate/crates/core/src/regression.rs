//! Hierarchical pose regression: the (alpha, beta) zone grid, the three
//! parameter groups, training-set synthesis, regressor banks and
//! single/multi-pass application.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drr::{render_drr_masked, DrrSettings, Image};
use crate::error::{Error, Result};
use crate::feature::{compute_roi, extract_patch, feature_residual, residual, Feature, Roi, RoiSpec};
use crate::geometry::{ProjectionGeometry, TransformParams};
use crate::io;
use crate::nn::{self, Architecture, ModelMeta, Network, TrainConfig, TrainReport};
use crate::volume::Volume;

/// Regular grid over (alpha, beta). Angles outside the span clamp to the
/// edge zones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneGrid {
    pub n_alpha: usize,
    pub n_beta: usize,
    pub zone_size_deg: [f64; 2],
    pub origin_deg: [f64; 2],
}

impl Default for ZoneGrid {
    fn default() -> Self {
        Self {
            n_alpha: 18,
            n_beta: 18,
            zone_size_deg: [20.0, 20.0],
            origin_deg: [-180.0, -180.0],
        }
    }
}

impl ZoneGrid {
    /// `rows x cols` zones evenly covering `[lo, hi)` in both angles.
    pub fn spanning(rows: usize, cols: usize, lo: f64, hi: f64) -> Result<Self> {
        let g = Self {
            n_alpha: rows,
            n_beta: cols,
            zone_size_deg: [(hi - lo) / rows as f64, (hi - lo) / cols as f64],
            origin_deg: [lo, lo],
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_alpha == 0 || self.n_beta == 0 {
            return Err(Error::InvalidParameter("zone grid needs at least one zone per axis".into()));
        }
        if self.zone_size_deg.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParameter(format!("zone size must be positive, got {:?}", self.zone_size_deg)));
        }
        if self.origin_deg.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidParameter("zone origin must be finite".into()));
        }
        Ok(())
    }

    pub fn zone_of(&self, alpha: f64, beta: f64) -> (usize, usize) {
        let index = |angle: f64, axis: usize, n: usize| {
            let f = ((angle - self.origin_deg[axis]) / self.zone_size_deg[axis]).floor();
            if f.is_nan() || f < 0.0 {
                0
            } else {
                (f as usize).min(n - 1)
            }
        };
        (index(alpha, 0, self.n_alpha), index(beta, 1, self.n_beta))
    }

    /// `[lo, hi)` of alpha and beta for a zone.
    pub fn zone_bounds(&self, zone: (usize, usize)) -> ([f64; 2], [f64; 2]) {
        let lo_a = self.origin_deg[0] + zone.0 as f64 * self.zone_size_deg[0];
        let lo_b = self.origin_deg[1] + zone.1 as f64 * self.zone_size_deg[1];
        ([lo_a, lo_a + self.zone_size_deg[0]], [lo_b, lo_b + self.zone_size_deg[1]])
    }

    pub fn zones(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(self.n_alpha * self.n_beta);
        for i in 0..self.n_alpha {
            for j in 0..self.n_beta {
                v.push((i, j));
            }
        }
        v
    }
}

/// The three regression groups, applied in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Group {
    /// x, y, theta
    InPlane,
    /// alpha, beta
    OutOfPlane,
    /// z
    Depth,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::InPlane, Group::OutOfPlane, Group::Depth];

    pub fn id(self) -> u8 {
        match self {
            Group::InPlane => 1,
            Group::OutOfPlane => 2,
            Group::Depth => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Group::InPlane),
            2 => Ok(Group::OutOfPlane),
            3 => Ok(Group::Depth),
            _ => Err(Error::InvalidParameter(format!("group must be 1, 2 or 3, got {id}"))),
        }
    }

    /// Indices into `(tx, ty, tz, theta, alpha, beta)`.
    pub fn params(self) -> &'static [usize] {
        match self {
            Group::InPlane => &[0, 1, 3],
            Group::OutOfPlane => &[4, 5],
            Group::Depth => &[2],
        }
    }
}

impl From<Group> for u8 {
    fn from(g: Group) -> u8 {
        g.id()
    }
}

impl TryFrom<u8> for Group {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        Group::from_id(id)
    }
}

/// Training half-ranges of all six perturbation components for one group.
/// Perturbations are drawn uniformly from `[-r, r]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group: Group,
    pub half_ranges: [f64; 6],
}

impl GroupSpec {
    pub fn default_for(group: Group) -> Self {
        let full = [3.0, 3.0, 30.0, 6.0, 30.0, 30.0];
        let half_ranges = match group {
            Group::InPlane => full,
            // x, y, theta already corrected
            Group::OutOfPlane => [0.4, 0.4, 30.0, 1.0, 30.0, 30.0],
            // only z left
            Group::Depth => [0.4, 0.4, 30.0, 1.0, 1.5, 1.5],
        };
        Self { group, half_ranges }
    }

    pub fn defaults() -> [Self; 3] {
        Group::ALL.map(Self::default_for)
    }

    pub fn validate(&self) -> Result<()> {
        if self.half_ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidParameter(format!("half-ranges must be non-negative, got {:?}", self.half_ranges)));
        }
        if self.group.params().iter().any(|&i| self.half_ranges[i] == 0.0) {
            return Err(Error::InvalidParameter(format!(
                "group {} needs positive half-ranges for its own parameters",
                self.group.id()
            )));
        }
        Ok(())
    }

    /// Per-output normalization constants.
    pub fn label_scale(&self) -> Vec<f64> {
        self.group.params().iter().map(|&i| self.half_ranges[i]).collect()
    }

    pub fn normalize(&self, delta: &[f64; 6]) -> Vec<f64> {
        self.group.params().iter().map(|&i| delta[i] / self.half_ranges[i]).collect()
    }

    pub fn denormalize(&self, label: &[f64]) -> Vec<f64> {
        self.group.params().iter().zip(label).map(|(&i, v)| v * self.half_ranges[i]).collect()
    }
}

/// Distribution of the starting pose `t` during synthesis, apart from
/// (alpha, beta) which are drawn inside the zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NominalRanges {
    pub xy_half_mm: f64,
    pub z_band_mm: [f64; 2],
    pub theta_half_deg: f64,
}

impl Default for NominalRanges {
    fn default() -> Self {
        Self {
            xy_half_mm: 10.0,
            z_band_mm: [400.0, 600.0],
            theta_half_deg: 30.0,
        }
    }
}

impl NominalRanges {
    pub fn validate(&self) -> Result<()> {
        let [z0, z1] = self.z_band_mm;
        if !(self.xy_half_mm >= 0.0 && self.theta_half_deg >= 0.0 && z0 > 0.0 && z1 >= z0 && z1.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid nominal ranges {self:?}")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn symmetric(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

/// Draws a starting pose inside `zone`.
pub fn sample_pose(nominal: &NominalRanges, grid: &ZoneGrid, zone: (usize, usize), rng: &mut ChaCha8Rng) -> TransformParams {
    let (a, b) = grid.zone_bounds(zone);
    TransformParams::new(
        symmetric(rng, nominal.xy_half_mm),
        symmetric(rng, nominal.xy_half_mm),
        uniform(rng, nominal.z_band_mm[0], nominal.z_band_mm[1]),
        symmetric(rng, nominal.theta_half_deg),
        uniform(rng, a[0], a[1]),
        uniform(rng, b[0], b[1]),
    )
    .normalized()
}

/// Zero-mean uniform perturbation within the group's half-ranges.
pub fn sample_delta(spec: &GroupSpec, rng: &mut ChaCha8Rng) -> [f64; 6] {
    spec.half_ranges.map(|r| symmetric(rng, r))
}

/// Residual feature between the DRR at `t` and a synthetic X-ray at
/// `t + delta`. Both images are rendered only on the pixels the patch sampler reads.
pub fn synthetic_feature(
    vol: &Volume,
    geom: &ProjectionGeometry,
    roi_spec: &RoiSpec,
    t: &TransformParams,
    delta: &[f64; 6],
) -> Result<Feature> {
    let roi = compute_roi(t, geom, roi_spec)?;
    let support = roi.support(roi_spec, geom);
    let settings = DrrSettings::default();
    let drr = render_drr_masked(vol, t, geom, &support, &settings)?;
    let xray = render_drr_masked(vol, &t.offset(delta), geom, &support, &settings)?;
    let patch = residual(&extract_patch(&drr, &roi, roi_spec, geom), &extract_patch(&xray, &roi, roi_spec, geom));
    Ok(Feature { patch, params: *t, roi })
}

/// One training pair: feature and normalized label.
pub fn synthesize_sample(
    vol: &Volume,
    geom: &ProjectionGeometry,
    setup: &SynthSetup,
    zone: (usize, usize),
    spec: &GroupSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Feature, Vec<f64>)> {
    let t = sample_pose(&setup.nominal, &setup.grid, zone, rng);
    let delta = sample_delta(spec, rng);
    let feature = synthetic_feature(vol, geom, &setup.roi, &t, &delta)?;
    Ok((feature, spec.normalize(&delta)))
}

/// Everything that determines a training set besides the zone, group,
/// sample count and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSetup {
    pub roi: RoiSpec,
    pub grid: ZoneGrid,
    pub nominal: NominalRanges,
}

impl SynthSetup {
    pub fn validate(&self) -> Result<()> {
        self.roi.validate()?;
        self.grid.validate()?;
        self.nominal.validate()
    }
}

/// Independent stream per sample index, so output does not depend on how
/// samples are scheduled.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Mixes a base seed with a (zone, group) key.
pub fn derive_seed(seed: u64, zone: (usize, usize), group: Group) -> u64 {
    let mut z = seed ^ ((zone.0 as u64) << 40) ^ ((zone.1 as u64) << 20) ^ group.id() as u64;
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const DATASET_FORMAT: &str = "xreg-dataset-f64le-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub zone: (usize, usize),
    pub group: Group,
    pub seed: u64,
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub label_scale: Vec<f64>,
    pub group_spec: GroupSpec,
    pub setup: SynthSetup,
    /// SHA-256 over the volume, geometry and synthesis settings.
    pub spec_hash: String,
    pub features_file: String,
    pub labels_file: String,
}

impl DatasetManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes).map_err(|e| Error::format("manifest", e.to_string()))?;
        if m.format != DATASET_FORMAT {
            return Err(Error::format("format", format!("unsupported dataset format `{}`", m.format)));
        }
        if m.n == 0 || m.rows == 0 || m.cols == 0 {
            return Err(Error::format("n", "dataset dimensions must be positive"));
        }
        if m.label_scale != m.group_spec.label_scale() {
            return Err(Error::format("label_scale", "does not match the group half-ranges"));
        }
        m.n.checked_mul(m.rows)
            .and_then(|v| v.checked_mul(m.cols))
            .ok_or_else(|| Error::format("n", "feature count overflows"))?;
        Ok(m)
    }

    pub fn n_out(&self) -> usize {
        self.group.params().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

pub fn spec_hash(vol: &Volume, geom: &ProjectionGeometry, setup: &SynthSetup, spec: &GroupSpec) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(vol.dims(), vol.spacing(), vol.origin())).expect("serializable"));
    h.update(io::f32_to_le_bytes(vol.data()));
    h.update(serde_json::to_vec(&(geom, setup, spec)).expect("serializable"));
    hex::encode(h.finalize())
}

/// Synthesizes `n` samples for one (zone, group). Samples are generated in
/// parallel from per-index streams.
pub fn synthesize_dataset(
    vol: &Volume,
    geom: &ProjectionGeometry,
    setup: &SynthSetup,
    zone: (usize, usize),
    spec: &GroupSpec,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    setup.validate()?;
    spec.validate()?;
    geom.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    if zone.0 >= setup.grid.n_alpha || zone.1 >= setup.grid.n_beta {
        return Err(Error::InvalidParameter(format!("zone {zone:?} outside the grid")));
    }
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let (f, label) = synthesize_sample(vol, geom, setup, zone, spec, &mut rng)?;
            Ok((f.patch.data, label))
        })
        .collect::<Result<_>>()?;
    let (features, labels) = pairs.into_iter().unzip();
    Ok(Dataset {
        manifest: DatasetManifest {
            format: DATASET_FORMAT.into(),
            zone,
            group: spec.group,
            seed,
            n,
            rows: setup.roi.patch_rows,
            cols: setup.roi.patch_cols,
            label_scale: spec.label_scale(),
            group_spec: *spec,
            setup: *setup,
            spec_hash: spec_hash(vol, geom, setup, spec),
            features_file: "features.f64".into(),
            labels_file: "labels.f64".into(),
        },
        features,
        labels,
    })
}

/// Writes `manifest.json`, `features.f64` and `labels.f64` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let flat: Vec<f64> = ds.features.iter().flatten().copied().collect();
    io::write_bytes(&dir.join(&ds.manifest.features_file), &io::f64_to_le_bytes(&flat))?;
    let flat: Vec<f64> = ds.labels.iter().flatten().copied().collect();
    io::write_bytes(&dir.join(&ds.manifest.labels_file), &io::f64_to_le_bytes(&flat))?;
    io::write_json(&dir.join("manifest.json"), &ds.manifest)
}

/// Decodes a dataset from its manifest and the two blobs.
pub fn decode_dataset(manifest: &[u8], features: &[u8], labels: &[u8]) -> Result<Dataset> {
    let m = DatasetManifest::parse(manifest)?;
    let dim = m.rows * m.cols;
    let f = io::f64_from_le_bytes(features, m.n * dim, "features")?;
    let l = io::f64_from_le_bytes(labels, m.n * m.n_out(), "labels")?;
    Ok(Dataset {
        features: f.chunks_exact(dim).map(<[f64]>::to_vec).collect(),
        labels: l.chunks_exact(m.n_out()).map(<[f64]>::to_vec).collect(),
        manifest: m,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = io::read_bytes(&dir.join("manifest.json"))?;
    let m = DatasetManifest::parse(&manifest)?;
    let features = io::read_bytes(&dir.join(&m.features_file))?;
    let labels = io::read_bytes(&dir.join(&m.labels_file))?;
    decode_dataset(&manifest, &features, &labels)
}

/// CNN layout knobs shared by every regressor in a bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub conv_relu: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            conv1_channels: 6,
            conv2_channels: 16,
            kernel: 5,
            hidden: 250,
            conv_relu: true,
        }
    }
}

impl NetworkSpec {
    pub fn architecture(&self, rows: usize, cols: usize, n_out: usize) -> Architecture {
        Architecture {
            input_rows: rows,
            input_cols: cols,
            conv1_channels: self.conv1_channels,
            conv2_channels: self.conv2_channels,
            kernel: self.kernel,
            hidden: self.hidden,
            n_out,
            conv_relu: self.conv_relu,
        }
    }
}

/// Full recipe for a regressor bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub setup: SynthSetup,
    pub groups: [GroupSpec; 3],
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub n_samples: usize,
    pub seed: u64,
}

impl BankConfig {
    pub fn new(setup: SynthSetup) -> Self {
        Self {
            setup,
            groups: GroupSpec::defaults(),
            network: NetworkSpec::default(),
            train: TrainConfig::default(),
            n_samples: 25_000,
            seed: 0,
        }
    }

    pub fn group_spec(&self, group: Group) -> &GroupSpec {
        self.groups.iter().find(|g| g.group == group).expect("all groups configured")
    }

    pub fn validate(&self) -> Result<()> {
        self.setup.validate()?;
        self.train.validate()?;
        for g in Group::ALL {
            if self.groups.iter().filter(|s| s.group == g).count() != 1 {
                return Err(Error::InvalidParameter(format!("group {} must be configured exactly once", g.id())));
            }
        }
        self.groups.iter().try_for_each(GroupSpec::validate)?;
        if self.n_samples == 0 {
            return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub net: Network,
    pub meta: ModelMeta,
}

impl Regressor {
    /// Parameter deltas (in mm or degrees) for the group's parameters.
    pub fn predict(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.forward(feature)?;
        Ok(out.iter().zip(&self.meta.label_scale).map(|(v, s)| v * s).collect())
    }
}

pub const BANK_FORMAT: &str = "xreg-bank-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankEntry {
    zone: (usize, usize),
    group: Group,
    model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankManifest {
    format: String,
    grid: ZoneGrid,
    roi: RoiSpec,
    geometry: ProjectionGeometry,
    config: Option<BankConfig>,
    models: Vec<BankEntry>,
}

/// Trained regressors keyed by (zone, group).
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorBank {
    pub grid: ZoneGrid,
    pub roi: RoiSpec,
    pub geometry: ProjectionGeometry,
    pub config: Option<BankConfig>,
    pub models: BTreeMap<((usize, usize), Group), Regressor>,
}

impl RegressorBank {
    pub fn new(grid: ZoneGrid, roi: RoiSpec, geometry: ProjectionGeometry) -> Self {
        Self {
            grid,
            roi,
            geometry,
            config: None,
            models: BTreeMap::new(),
        }
    }

    pub fn get(&self, zone: (usize, usize), group: Group) -> Result<&Regressor> {
        self.models.get(&(zone, group)).ok_or(Error::Coverage { zone, group: group.id() })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// `manifest.json` plus one model manifest and weight blob per entry.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for ((zone, group), r) in &self.models {
            let name = format!("z{}_{}_g{}.model.json", zone.0, zone.1, group.id());
            nn::save_model(&r.net, &r.meta, &dir.join(&name))?;
            entries.push(BankEntry {
                zone: *zone,
                group: *group,
                model: name,
            });
        }
        io::write_json(
            &dir.join("manifest.json"),
            &BankManifest {
                format: BANK_FORMAT.into(),
                grid: self.grid,
                roi: self.roi,
                geometry: self.geometry.clone(),
                config: self.config.clone(),
                models: entries,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bytes = io::read_bytes(&dir.join("manifest.json"))?;
        let m: BankManifest = serde_json::from_slice(&bytes).map_err(|e| Error::format("manifest", e.to_string()))?;
        if m.format != BANK_FORMAT {
            return Err(Error::format("format", format!("unsupported bank format `{}`", m.format)));
        }
        m.grid.validate()?;
        m.roi.validate()?;
        m.geometry.validate()?;
        let mut bank = Self::new(m.grid, m.roi, m.geometry);
        bank.config = m.config;
        for e in m.models {
            let (net, meta) = nn::load_model(&dir.join(&e.model)).map_err(|err| err.context(e.model.clone()))?;
            if net.input_shape().rows != bank.roi.patch_rows || net.input_shape().cols != bank.roi.patch_cols {
                return Err(Error::format("models", format!("{} does not match the bank patch size", e.model)));
            }
            if meta.outputs != e.group.params() {
                return Err(Error::format("models", format!("{} outputs do not match group {}", e.model, e.group.id())));
            }
            bank.models.insert((e.zone, e.group), Regressor { net, meta });
        }
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub zone: (usize, usize),
    pub group: Group,
    pub n_samples: usize,
    pub report: TrainReport,
}

/// Trains one regressor on a dataset.
pub fn train_regressor(ds: &Dataset, network: &NetworkSpec, train: &TrainConfig, init_seed: u64) -> Result<(Regressor, TrainReport)> {
    let m = &ds.manifest;
    let mut net = network.architecture(m.rows, m.cols, m.n_out()).build()?;
    nn::xavier_init(&mut net, init_seed);
    let report = nn::train(&mut net, &ds.features, &ds.labels, train)?;
    let meta = ModelMeta {
        group: m.group.id(),
        zone: m.zone,
        label_scale: m.label_scale.clone(),
        outputs: m.group.params().to_vec(),
        train: Some(*train),
    };
    Ok((Regressor { net, meta }, report))
}

/// Synthesizes and trains every (zone, group) of the grid. Datasets are
/// written under `out/data` and the bank under `out` when `out` is given.
pub fn train_bank(
    vol: &Volume,
    geom: &ProjectionGeometry,
    config: &BankConfig,
    out: Option<&Path>,
) -> Result<(RegressorBank, Vec<TrainSummary>)> {
    config.validate()?;
    let mut bank = RegressorBank::new(config.setup.grid, config.setup.roi, geom.clone());
    bank.config = Some(config.clone());
    let mut summaries = Vec::new();
    for zone in config.setup.grid.zones() {
        for group in Group::ALL {
            let seed = derive_seed(config.seed, zone, group);
            let ctx = |e: Error| e.context(format!("zone ({}, {}) group {}", zone.0, zone.1, group.id()));
            let ds = synthesize_dataset(vol, geom, &config.setup, zone, config.group_spec(group), config.n_samples, seed)
                .map_err(ctx)?;
            if let Some(dir) = out {
                save_dataset(&ds, &dir.join("data").join(format!("z{}_{}_g{}", zone.0, zone.1, group.id()))).map_err(ctx)?;
            }
            let train = TrainConfig { seed, ..config.train };
            let (reg, report) = train_regressor(&ds, &config.network, &train, seed).map_err(ctx)?;
            bank.models.insert((zone, group), reg);
            summaries.push(TrainSummary {
                zone,
                group,
                n_samples: config.n_samples,
                report,
            });
        }
    }
    if let Some(dir) = out {
        bank.save(dir)?;
    }
    Ok((bank, summaries))
}

/// One group update inside a pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStep {
    pub group: Group,
    pub zone: (usize, usize),
    /// Pose at which the feature was computed.
    pub at: TransformParams,
    pub roi: Roi,
    /// Applied deltas, aligned with `group.params()`.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassResult {
    pub params: TransformParams,
    pub steps: Vec<GroupStep>,
}

/// One pass of the hierarchy: in-plane, then out-of-plane, then depth,
/// recomputing the feature at the updated pose before each group.
pub fn regress_once(bank: &RegressorBank, vol: &Volume, xray: &Image, t_init: &TransformParams) -> Result<PassResult> {
    let t_init = t_init.normalized();
    let zone = bank.grid.zone_of(t_init.alpha, t_init.beta);
    let regressors: Vec<&Regressor> = Group::ALL.iter().map(|&g| bank.get(zone, g)).collect::<Result<_>>()?;
    let mut t = t_init;
    let mut steps = Vec::with_capacity(3);
    for (group, reg) in Group::ALL.into_iter().zip(regressors) {
        let feature = feature_residual(&t, xray, vol, &bank.geometry, &bank.roi)?;
        let delta = reg.predict(feature.data())?;
        let at = t;
        for (&i, d) in group.params().iter().zip(&delta) {
            t.set(i, t.get(i) + d);
        }
        t = t.normalized();
        steps.push(GroupStep {
            group,
            zone,
            at,
            roi: feature.roi,
            delta,
        });
    }
    Ok(PassResult { params: t, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPassResult {
    pub params: TransformParams,
    /// Pose after each pass.
    pub trajectory: Vec<TransformParams>,
    pub passes: Vec<PassResult>,
}

impl MultiPassResult {
    /// DRR renders used (one per group step).
    pub fn n_drr_evals(&self) -> usize {
        self.passes.iter().map(|p| p.steps.len()).sum()
    }
}

pub fn regress_multipass(
    bank: &RegressorBank,
    vol: &Volume,
    xray: &Image,
    t_init: &TransformParams,
    passes: usize,
) -> Result<MultiPassResult> {
    if passes == 0 {
        return Err(Error::InvalidParameter("passes must be >= 1".into()));
    }
    let mut t = *t_init;
    let mut out = MultiPassResult {
        params: t,
        trajectory: Vec::with_capacity(passes),
        passes: Vec::with_capacity(passes),
    };
    for _ in 0..passes {
        let pass = regress_once(bank, vol, xray, &t)?;
        t = pass.params;
        out.trajectory.push(t);
        out.passes.push(pass);
    }
    out.params = t;
    Ok(out)
}
