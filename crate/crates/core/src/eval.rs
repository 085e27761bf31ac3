//! Evaluation protocol: Gaussian perturbation of ground-truth poses, the
//! projected target registration error, and per-method experiment reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baseline::{register_intensity, IntensityConfig, IntensityMethod};
use crate::drr::{render_drr, Image, Provenance};
use crate::error::{Error, Result};
use crate::feature::RoiSpec;
use crate::geometry::{pose_from_params, project_point, ProjectionGeometry, TransformParams};
use crate::io;
use crate::regression::{regress_multipass, RegressorBank};
use crate::volume::Volume;

/// Zero-mean Gaussian perturbations of the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    /// Standard deviations of `(tx, ty, tz, theta, alpha, beta)`.
    pub stds: [f64; 6],
    pub count: usize,
    pub seed: u64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            stds: [1.0, 1.0, 10.0, 2.0, 10.0, 10.0],
            count: 140,
            seed: 0,
        }
    }
}

impl PerturbSpec {
    pub fn scaled(mut self, factor: f64) -> Self {
        self.stds = self.stds.map(|s| s * factor);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter(format!("stds must be non-negative, got {:?}", self.stds)));
        }
        if self.count == 0 {
            return Err(Error::InvalidParameter("perturbation count must be >= 1".into()));
        }
        Ok(())
    }

    /// Seed of trial `trial` of case `case`.
    pub fn trial_seed(&self, case: usize, trial: usize) -> u64 {
        let mut z = self.seed ^ ((case as u64) << 32) ^ trial as u64;
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

pub fn perturb(t_gt: &TransformParams, spec: &PerturbSpec, rng: &mut ChaCha8Rng) -> TransformParams {
    let mut delta = [0.0; 6];
    for (d, &s) in delta.iter_mut().zip(&spec.stds) {
        *d = if s > 0.0 {
            Normal::new(0.0, s).expect("finite std").sample(rng)
        } else {
            0.0
        };
    }
    t_gt.offset(&delta)
}

/// Mean over the corners of the detector-plane displacement between the
/// two poses, each rescaled to the object plane by the corner's
/// ground-truth depth.
pub fn mtre_proj(
    t_est: &TransformParams,
    t_gt: &TransformParams,
    corners: &[Vector3<f64>],
    center: &Vector3<f64>,
    geom: &ProjectionGeometry,
) -> Result<f64> {
    if corners.is_empty() {
        return Err(Error::Empty("target points".into()));
    }
    let est = pose_from_params(t_est, center)?;
    let gt = pose_from_params(t_gt, center)?;
    let mut total = 0.0;
    for p in corners {
        let pg = gt.apply(p);
        let a = project_point(&est.apply(p), geom)?;
        let b = project_point(&pg, geom)?;
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        total += d * pg.z / geom.source_to_detector_mm;
    }
    Ok(total / corners.len() as f64)
}

/// 1% of the object's bounding-box diagonal.
pub fn success_threshold(vol: &Volume) -> Result<f64> {
    Ok(0.01 * vol.object_bbox()?.diagonal())
}

/// Corner targets and rotation center used by [`mtre_proj`].
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub corners: [Vector3<f64>; 8],
    pub center: Vector3<f64>,
    pub threshold_mm: f64,
}

impl Targets {
    pub fn of(vol: &Volume) -> Result<Self> {
        Ok(Self {
            corners: vol.bbox_corners()?,
            center: vol.gravity_center(),
            threshold_mm: success_threshold(vol)?,
        })
    }

    pub fn error(&self, t_est: &TransformParams, t_gt: &TransformParams, geom: &ProjectionGeometry) -> Result<f64> {
        mtre_proj(t_est, t_gt, &self.corners, &self.center, geom)
    }
}

/// Noise-free DRR at the ground truth, optionally with additive Gaussian
/// noise whose std is `noise_pct` percent of the image's dynamic range.
pub fn synthetic_xray(vol: &Volume, t_gt: &TransformParams, geom: &ProjectionGeometry, noise_pct: f64, seed: u64) -> Result<Image> {
    let mut img = render_drr(vol, t_gt, geom, None)?;
    img.provenance = Provenance::SyntheticXray;
    if noise_pct > 0.0 {
        let (lo, hi) = img.min_max();
        let sigma = noise_pct / 100.0 * f64::from(hi - lo);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut img.values {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub t_gt: TransformParams,
    pub xray: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodOutput {
    pub params: TransformParams,
    pub n_drr_evals: usize,
}

/// A registration method under evaluation. Implementations see only the
/// observed image and the starting pose.
pub trait RegistrationMethod {
    fn name(&self) -> String;
    fn register(&self, xray: &Image, t_init: &TransformParams) -> Result<MethodOutput>;
}

/// Hierarchical CNN regression with a fixed number of passes.
pub struct CnnMethod<'a> {
    pub bank: &'a RegressorBank,
    pub vol: &'a Volume,
    pub passes: usize,
}

impl RegistrationMethod for CnnMethod<'_> {
    fn name(&self) -> String {
        format!("cnn-{}pass", self.passes)
    }

    fn register(&self, xray: &Image, t_init: &TransformParams) -> Result<MethodOutput> {
        let r = regress_multipass(self.bank, self.vol, xray, t_init, self.passes)?;
        Ok(MethodOutput {
            params: r.params,
            n_drr_evals: r.n_drr_evals(),
        })
    }
}

/// Powell with MI, GC or MI followed by GC.
pub struct IntensityBaseline<'a> {
    pub method: IntensityMethod,
    pub vol: &'a Volume,
    pub geom: &'a ProjectionGeometry,
    pub roi: &'a RoiSpec,
    pub config: &'a IntensityConfig,
}

impl RegistrationMethod for IntensityBaseline<'_> {
    fn name(&self) -> String {
        self.method.name().to_string()
    }

    fn register(&self, xray: &Image, t_init: &TransformParams) -> Result<MethodOutput> {
        let r = register_intensity(self.method, self.vol, xray, t_init, self.geom, self.roi, self.config)?;
        Ok(MethodOutput {
            params: r.params,
            n_drr_evals: r.evals,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: String,
    pub case_id: String,
    pub trial_id: usize,
    pub seed: u64,
    pub t_init: [f64; 6],
    /// All NaN when the method failed.
    pub t_est: [f64; 6],
    /// NaN when the method failed.
    pub mtreproj_mm: f64,
    pub success: bool,
    pub wall_time_s: f64,
    pub n_drr_evals: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub n_trials: usize,
    pub success_rate: f64,
    /// Over successful trials; `None` without any.
    pub mean_mtreproj_mm: Option<f64>,
    /// Over trials that produced an estimate.
    pub median_mtreproj_mm: Option<f64>,
    pub time_mean_s: f64,
    pub time_std_s: f64,
    pub mean_drr_evals: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub threshold_mm: f64,
    pub records: Vec<TrialRecord>,
    pub summary: BTreeMap<String, MethodSummary>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(records: &[TrialRecord]) -> BTreeMap<String, MethodSummary> {
    let mut by_method: BTreeMap<String, Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        by_method.entry(r.method.clone()).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(m, rs)| {
            let n = rs.len();
            let ok: Vec<f64> = rs.iter().filter(|r| r.success).map(|r| r.mtreproj_mm).collect();
            let errs: Vec<f64> = rs.iter().map(|r| r.mtreproj_mm).collect();
            let times: Vec<f64> = rs.iter().map(|r| r.wall_time_s).collect();
            let (time_mean_s, time_std_s) = mean_std(&times);
            let s = MethodSummary {
                n_trials: n,
                success_rate: ok.len() as f64 / n as f64,
                mean_mtreproj_mm: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
                median_mtreproj_mm: median(&errs),
                time_mean_s,
                time_std_s,
                mean_drr_evals: rs.iter().map(|r| r.n_drr_evals as f64).sum::<f64>() / n as f64,
            };
            (m, s)
        })
        .collect()
}

pub const CSV_HEADER: [&str; 22] = [
    "method",
    "case_id",
    "trial_id",
    "seed",
    "t_init_x",
    "t_init_y",
    "t_init_z",
    "t_init_theta",
    "t_init_alpha",
    "t_init_beta",
    "t_est_x",
    "t_est_y",
    "t_est_z",
    "t_est_theta",
    "t_est_alpha",
    "t_est_beta",
    "mtreproj_mm",
    "success",
    "wall_time_s",
    "n_drr_evals",
    "error",
    "threshold_mm",
];

pub fn encode_csv(records: &[TrialRecord], threshold_mm: f64) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format("csv", e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.method.clone(), r.case_id.clone(), r.trial_id.to_string(), r.seed.to_string()];
        row.extend(r.t_init.iter().map(f64::to_string));
        row.extend(r.t_est.iter().map(f64::to_string));
        row.push(r.mtreproj_mm.to_string());
        row.push(r.success.to_string());
        row.push(r.wall_time_s.to_string());
        row.push(r.n_drr_evals.to_string());
        row.push(r.error.clone().unwrap_or_default());
        row.push(threshold_mm.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::format("csv", e.to_string()))
}

pub fn write_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let bytes = encode_csv(&report.records, report.threshold_mm).map_err(|e| e.context(path.display().to_string()))?;
    io::write_bytes(path, &bytes)
}

/// Parses rows written by [`encode_csv`].
pub fn read_csv(bytes: &[u8]) -> Result<Vec<TrialRecord>> {
    let mut rd = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| Error::format("csv", e.to_string()))?;
        if row.len() != CSV_HEADER.len() {
            return Err(Error::format("csv", format!("expected {} columns, got {}", CSV_HEADER.len(), row.len())));
        }
        let num = |i: usize| -> Result<f64> {
            row[i].parse::<f64>().map_err(|e| Error::format(CSV_HEADER[i], e.to_string()))
        };
        let int = |i: usize| -> Result<u64> {
            row[i].parse::<u64>().map_err(|e| Error::format(CSV_HEADER[i], e.to_string()))
        };
        let mut t_init = [0.0; 6];
        let mut t_est = [0.0; 6];
        for k in 0..6 {
            t_init[k] = num(4 + k)?;
            t_est[k] = num(10 + k)?;
        }
        out.push(TrialRecord {
            method: row[0].to_string(),
            case_id: row[1].to_string(),
            trial_id: int(2)? as usize,
            seed: int(3)?,
            t_init,
            t_est,
            mtreproj_mm: num(16)?,
            success: row[17].parse::<bool>().map_err(|e| Error::format("success", e.to_string()))?,
            wall_time_s: num(18)?,
            n_drr_evals: int(19)? as usize,
            error: (!row[20].is_empty()).then(|| row[20].to_string()),
        });
    }
    Ok(out)
}

/// Runs every method on every perturbed start. All methods receive the same
/// start for a given (case, trial). Writes `trials.csv` and `summary.json`
/// into `out` when given.
pub fn run_experiment(
    methods: &[&dyn RegistrationMethod],
    targets: &Targets,
    cases: &[Case],
    geom: &ProjectionGeometry,
    spec: &PerturbSpec,
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    spec.validate()?;
    if methods.is_empty() || cases.is_empty() {
        return Err(Error::Empty("experiment needs at least one method and one case".into()));
    }
    let mut records = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        for trial in 0..spec.count {
            let seed = spec.trial_seed(ci, trial);
            let t_init = perturb(&case.t_gt, spec, &mut ChaCha8Rng::seed_from_u64(seed));
            for m in methods {
                let start = Instant::now();
                let result = m.register(&case.xray, &t_init);
                let wall_time_s = start.elapsed().as_secs_f64();
                let scored = result.and_then(|o| Ok((o, targets.error(&o.params, &case.t_gt, geom)?)));
                let record = match scored {
                    Ok((o, err)) => TrialRecord {
                        method: m.name(),
                        case_id: case.id.clone(),
                        trial_id: trial,
                        seed,
                        t_init: t_init.to_array(),
                        t_est: o.params.to_array(),
                        mtreproj_mm: err,
                        success: err < targets.threshold_mm,
                        wall_time_s,
                        n_drr_evals: o.n_drr_evals,
                        error: None,
                    },
                    Err(e) => TrialRecord {
                        method: m.name(),
                        case_id: case.id.clone(),
                        trial_id: trial,
                        seed,
                        t_init: t_init.to_array(),
                        t_est: [f64::NAN; 6],
                        mtreproj_mm: f64::NAN,
                        success: false,
                        wall_time_s,
                        n_drr_evals: 0,
                        error: Some(e.to_string()),
                    },
                };
                records.push(record);
            }
        }
    }
    let report = ExperimentReport {
        threshold_mm: targets.threshold_mm,
        summary: summarize(&records),
        records,
    };
    if let Some(dir) = out {
        write_csv(&report, &dir.join("trials.csv"))?;
        io::write_json(
            &dir.join("summary.json"),
            &serde_json::json!({ "threshold_mm": report.threshold_mm, "methods": report.summary }),
        )?;
    }
    Ok(report)
}
