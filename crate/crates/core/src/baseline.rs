//! Intensity-based registration baselines: mutual information and gradient
//! correlation on ROI patches, optimized with Powell's direction-set method.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::drr::{render_drr_masked, DrrSettings, Image};
use crate::error::{Error, Result};
use crate::feature::{compute_roi, extract_patch, Patch, RoiSpec};
use crate::geometry::{ProjectionGeometry, TransformParams};
use crate::volume::Volume;

fn check_same_dims(a: &Patch, b: &Patch) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Shape {
            layer: "similarity".into(),
            expected: format!("{}x{}", a.rows, a.cols),
            got: format!("{}x{}", b.rows, b.cols),
        });
    }
    if a.data.is_empty() {
        return Err(Error::Empty("patch".into()));
    }
    Ok(())
}

fn bin_indices(values: &[f64], bins: usize) -> Vec<usize> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (((v - lo) / range * bins as f64) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

/// Mutual information (natural log) of the joint histogram of min-max
/// normalized intensities.
pub fn mutual_information(a: &Patch, b: &Patch, bins: usize) -> Result<f64> {
    check_same_dims(a, b)?;
    if bins < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 bins, got {bins}")));
    }
    let ia = bin_indices(&a.data, bins);
    let ib = bin_indices(&b.data, bins);
    let mut joint = vec![0u32; bins * bins];
    for (&x, &y) in ia.iter().zip(&ib) {
        joint[x * bins + y] += 1;
    }
    let n = a.data.len() as f64;
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for x in 0..bins {
        for y in 0..bins {
            let p = joint[x * bins + y] as f64 / n;
            pa[x] += p;
            pb[y] += p;
        }
    }
    let mut mi = 0.0;
    for x in 0..bins {
        for y in 0..bins {
            let c = joint[x * bins + y];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p / (pa[x] * pb[y])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// `Some(ncc)`, or `None` when both fields are constant.
fn ncc(u: &[f64], v: &[f64]) -> Option<f64> {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (x, y) in u.iter().zip(v) {
        let (du, dv) = (x - mu, y - mv);
        suv += du * dv;
        suu += du * du;
        svv += dv * dv;
    }
    const TINY: f64 = 1e-300;
    match (suu > TINY, svv > TINY) {
        (false, false) => None,
        (true, true) => Some((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0)),
        _ => Some(0.0),
    }
}

/// Central differences over the interior: `(d/dcol, d/drow)`.
fn gradients(p: &Patch) -> (Vec<f64>, Vec<f64>) {
    let mut gu = Vec::with_capacity((p.rows - 2) * (p.cols - 2));
    let mut gv = Vec::with_capacity(gu.capacity());
    for r in 1..p.rows - 1 {
        for c in 1..p.cols - 1 {
            gu.push(0.5 * (p.get(r, c + 1) - p.get(r, c - 1)));
            gv.push(0.5 * (p.get(r + 1, c) - p.get(r - 1, c)));
        }
    }
    (gu, gv)
}

/// Mean NCC of the two directional gradient fields. A direction in which
/// both images are constant carries no information and is left out; if
/// only one is constant its NCC counts as 0.
pub fn gradient_correlation(a: &Patch, b: &Patch) -> Result<f64> {
    check_same_dims(a, b)?;
    if a.rows < 3 || a.cols < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3x3, got {}x{}", a.rows, a.cols)));
    }
    let (au, av) = gradients(a);
    let (bu, bv) = gradients(b);
    let terms: Vec<f64> = [ncc(&au, &bu), ncc(&av, &bv)].into_iter().flatten().collect();
    if terms.is_empty() {
        return Ok(0.0);
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowellConfig {
    /// Initial direction lengths, one per coordinate.
    pub scales: Vec<f64>,
    /// Relative objective improvement below which a cycle stops.
    pub ftol: f64,
    /// Relative line-search tolerance on the step length.
    pub line_tol: f64,
    /// Absolute line-search tolerance (in units of the direction length).
    pub line_abs_tol: f64,
    pub max_iter: usize,
    pub max_evals: usize,
}

impl PowellConfig {
    /// Tight tolerances for smooth test functions.
    pub fn precise(n: usize) -> Self {
        Self {
            scales: vec![1.0; n],
            ftol: 1e-12,
            line_tol: 1e-8,
            line_abs_tol: 1e-10,
            max_iter: 200,
            max_evals: 100_000,
        }
    }

    /// Registration defaults: unit steps of (1, 1, 10 mm, 2, 10, 10 deg).
    pub fn registration() -> Self {
        Self {
            scales: vec![1.0, 1.0, 10.0, 2.0, 10.0, 10.0],
            ftol: 1e-5,
            line_tol: 1e-3,
            line_abs_tol: 2e-3,
            max_iter: 30,
            max_evals: 3000,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.scales.len() != n {
            return Err(Error::InvalidParameter(format!("{} scales for {n} parameters", self.scales.len())));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParameter("scales must be positive".into()));
        }
        if !(self.ftol > 0.0 && self.line_tol > 0.0 && self.line_abs_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if self.max_iter == 0 || self.max_evals == 0 {
            return Err(Error::InvalidParameter("iteration and evaluation caps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowellResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub iterations: usize,
    /// Objective value of every evaluation, in order.
    pub trace: Vec<f64>,
}

/// Signals that the evaluation budget is spent.
struct Exhausted;

struct Counter<'a, F> {
    f: &'a mut F,
    max_evals: usize,
    trace: Vec<f64>,
    best_x: Vec<f64>,
    best: f64,
}

impl<F: FnMut(&[f64]) -> f64> Counter<'_, F> {
    fn eval(&mut self, x: &[f64]) -> Result<std::result::Result<f64, Exhausted>> {
        if self.trace.len() >= self.max_evals {
            return Ok(Err(Exhausted));
        }
        let v = (self.f)(x);
        if !v.is_finite() {
            return Err(Error::Diverged { point: x.to_vec() });
        }
        self.trace.push(v);
        if v < self.best {
            self.best = v;
            self.best_x = x.to_vec();
        }
        Ok(Ok(v))
    }
}

/// Early return on errors and on budget exhaustion.
macro_rules! eval {
    ($c:expr, $x:expr) => {
        match $c.eval($x)? {
            Ok(v) => v,
            Err(Exhausted) => return Ok(Err(Exhausted)),
        }
    };
}

type Step<T> = Result<std::result::Result<T, Exhausted>>;

fn along(p: &[f64], d: &[f64], s: f64) -> Vec<f64> {
    p.iter().zip(d).map(|(a, b)| a + s * b).collect()
}

/// Line minimization of `f(p + s d)`: bracketing, then Brent's parabolic
/// and golden-section search. Returns `(s_min, f_min)`.
fn line_minimize<F: FnMut(&[f64]) -> f64>(c: &mut Counter<F>, p: &[f64], d: &[f64], f0: f64, cfg: &PowellConfig) -> Step<(f64, f64)> {
    const GOLD: f64 = 1.618_034;
    const GLIMIT: f64 = 100.0;
    const TINY: f64 = 1e-20;
    const CGOLD: f64 = 0.381_966_0;

    // bracket
    let (mut ax, mut bx) = (0.0, 1.0);
    let mut fa = f0;
    let mut fb = eval!(c, &along(p, d, bx));
    if fb > fa {
        std::mem::swap(&mut ax, &mut bx);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut cx = bx + GOLD * (bx - ax);
    let mut fc = eval!(c, &along(p, d, cx));
    while fb > fc {
        let r = (bx - ax) * (fb - fc);
        let q = (bx - cx) * (fb - fa);
        let denom = 2.0 * (q - r).abs().max(TINY) * (q - r).signum();
        let mut u = bx - ((bx - cx) * q - (bx - ax) * r) / denom;
        let ulim = bx + GLIMIT * (cx - bx);
        let mut fu;
        if (bx - u) * (u - cx) > 0.0 {
            fu = eval!(c, &along(p, d, u));
            if fu < fc {
                ax = bx;
                fa = fb;
                bx = u;
                fb = fu;
                break;
            } else if fu > fb {
                cx = u;
                fc = fu;
                break;
            }
            u = cx + GOLD * (cx - bx);
            fu = eval!(c, &along(p, d, u));
        } else if (cx - u) * (u - ulim) > 0.0 {
            fu = eval!(c, &along(p, d, u));
            if fu < fc {
                bx = cx;
                cx = u;
                u = cx + GOLD * (cx - bx);
                fb = fc;
                fc = fu;
                fu = eval!(c, &along(p, d, u));
            }
        } else if (u - ulim) * (ulim - cx) >= 0.0 {
            u = ulim;
            fu = eval!(c, &along(p, d, u));
        } else {
            u = cx + GOLD * (cx - bx);
            fu = eval!(c, &along(p, d, u));
        }
        ax = bx;
        bx = cx;
        cx = u;
        fa = fb;
        fb = fc;
        fc = fu;
    }
    let _ = (fa, fc);

    // Brent
    let (mut a, mut b) = if ax < cx { (ax, cx) } else { (cx, ax) };
    let (mut x, mut w, mut v) = (bx, bx, bx);
    let (mut fx, mut fw, mut fv) = (fb, fb, fb);
    let (mut dstep, mut e) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let xm = 0.5 * (a + b);
        let tol1 = cfg.line_tol * x.abs() + cfg.line_abs_tol;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut pp = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                pp = -pp;
            }
            q = q.abs();
            let etemp = e;
            e = dstep;
            if pp.abs() >= (0.5 * q * etemp).abs() || pp <= q * (a - x) || pp >= q * (b - x) {
                e = if x >= xm { a - x } else { b - x };
                dstep = CGOLD * e;
            } else {
                dstep = pp / q;
                let u = x + dstep;
                if u - a < tol2 || b - u < tol2 {
                    dstep = tol1.copysign(xm - x);
                }
            }
        } else {
            e = if x >= xm { a - x } else { b - x };
            dstep = CGOLD * e;
        }
        let u = if dstep.abs() >= tol1 { x + dstep } else { x + tol1.copysign(dstep) };
        let fu = eval!(c, &along(p, d, u));
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, w, x) = (w, x, u);
            (fv, fw, fx) = (fw, fx, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, w) = (w, u);
                (fv, fw) = (fw, fu);
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Ok(Ok((x, fx)))
}

/// Powell's direction-set minimization starting at `x0`.
///
/// Directions start as the coordinate axes scaled by `config.scales`. The
/// result is the best point evaluated, so it is never worse than `x0`.
pub fn powell_optimize<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], config: &PowellConfig) -> Result<PowellResult> {
    let n = x0.len();
    config.validate(n)?;
    let mut c = Counter {
        f: &mut f,
        max_evals: config.max_evals,
        trace: Vec::new(),
        best_x: x0.to_vec(),
        best: f64::INFINITY,
    };
    let mut iterations = 0;
    let _ = run_powell(&mut c, x0, config, &mut iterations)?;
    Ok(PowellResult {
        x: c.best_x,
        value: c.best,
        evals: c.trace.len(),
        iterations,
        trace: c.trace,
    })
}

fn run_powell<F: FnMut(&[f64]) -> f64>(c: &mut Counter<F>, x0: &[f64], cfg: &PowellConfig, iterations: &mut usize) -> Step<()> {
    let n = x0.len();
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut d = vec![0.0; n];
            d[i] = cfg.scales[i];
            d
        })
        .collect();
    let mut p = x0.to_vec();
    let mut fret = eval!(c, &p);
    while *iterations < cfg.max_iter {
        *iterations += 1;
        let fp = fret;
        let pt = p.clone();
        let mut ibig = 0;
        let mut del = 0.0;
        for (i, d) in dirs.iter().enumerate() {
            let before = fret;
            let (s, fmin) = match line_minimize(c, &p, d, fret, cfg)? {
                Ok(v) => v,
                Err(Exhausted) => return Ok(Err(Exhausted)),
            };
            if fmin < fret {
                p = along(&p, d, s);
                fret = fmin;
            }
            if before - fret > del {
                del = before - fret;
                ibig = i;
            }
        }
        if 2.0 * (fp - fret) <= cfg.ftol * (fp.abs() + fret.abs()) + 1e-25 {
            break;
        }
        let ptt: Vec<f64> = p.iter().zip(&pt).map(|(a, b)| 2.0 * a - b).collect();
        let xit: Vec<f64> = p.iter().zip(&pt).map(|(a, b)| a - b).collect();
        let fptt = eval!(c, &ptt);
        if fptt < fp {
            let t = 2.0 * (fp - 2.0 * fret + fptt) * (fp - fret - del).powi(2) - del * (fp - fptt).powi(2);
            if t < 0.0 {
                let (s, fmin) = match line_minimize(c, &p, &xit, fret, cfg)? {
                    Ok(v) => v,
                    Err(Exhausted) => return Ok(Err(Exhausted)),
                };
                if fmin < fret {
                    p = along(&p, &xit, s);
                    fret = fmin;
                }
                dirs[ibig] = dirs[n - 1].clone();
                dirs[n - 1] = xit;
            }
        }
    }
    Ok(Ok(()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Mi,
    Gc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntensityMethod {
    Mi,
    Gc,
    MiGc,
}

impl IntensityMethod {
    pub fn name(self) -> &'static str {
        match self {
            IntensityMethod::Mi => "mi",
            IntensityMethod::Gc => "gc",
            IntensityMethod::MiGc => "mi+gc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityConfig {
    pub powell: PowellConfig,
    pub mi_bins: usize,
    /// Objective value for poses that cannot be rendered.
    pub invalid_pose_penalty: f64,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        Self {
            powell: PowellConfig::registration(),
            mi_bins: 32,
            invalid_pose_penalty: 10.0,
        }
    }
}

/// Negative similarity between the DRR at `t` and the observed image, both
/// sampled on the ROI of `t`.
pub fn similarity_objective(
    kind: SimilarityKind,
    vol: &Volume,
    xray: &Image,
    t: &TransformParams,
    geom: &ProjectionGeometry,
    roi_spec: &RoiSpec,
    config: &IntensityConfig,
) -> f64 {
    let eval = || -> Result<f64> {
        let roi = compute_roi(t, geom, roi_spec)?;
        let drr = render_drr_masked(vol, t, geom, &roi.support(roi_spec, geom), &DrrSettings::default())?;
        let a = extract_patch(&drr, &roi, roi_spec, geom);
        let b = extract_patch(xray, &roi, roi_spec, geom);
        match kind {
            SimilarityKind::Mi => mutual_information(&a, &b, config.mi_bins),
            SimilarityKind::Gc => gradient_correlation(&a, &b),
        }
    };
    match eval() {
        Ok(s) => -s,
        Err(_) => config.invalid_pose_penalty,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityResult {
    pub method: IntensityMethod,
    pub params: TransformParams,
    /// Objective evaluations, each one DRR render.
    pub evals: usize,
    pub wall_time_s: f64,
    /// Per-stage Powell results (one for MI or GC, two for MI+GC).
    pub stages: Vec<PowellResult>,
}

fn optimize_with(
    kind: SimilarityKind,
    vol: &Volume,
    xray: &Image,
    t0: &TransformParams,
    geom: &ProjectionGeometry,
    roi_spec: &RoiSpec,
    config: &IntensityConfig,
) -> Result<PowellResult> {
    let f = |x: &[f64]| {
        let t = TransformParams::from_slice(x).expect("six parameters");
        similarity_objective(kind, vol, xray, &t, geom, roi_spec, config)
    };
    powell_optimize(f, &t0.to_array(), &config.powell)
}

/// Intensity-based registration from `t_init`. MI+GC runs MI first and
/// refines its result with GC.
pub fn register_intensity(
    method: IntensityMethod,
    vol: &Volume,
    xray: &Image,
    t_init: &TransformParams,
    geom: &ProjectionGeometry,
    roi_spec: &RoiSpec,
    config: &IntensityConfig,
) -> Result<IntensityResult> {
    let start = Instant::now();
    let kinds: &[SimilarityKind] = match method {
        IntensityMethod::Mi => &[SimilarityKind::Mi],
        IntensityMethod::Gc => &[SimilarityKind::Gc],
        IntensityMethod::MiGc => &[SimilarityKind::Mi, SimilarityKind::Gc],
    };
    let mut t = *t_init;
    let mut stages = Vec::new();
    for &kind in kinds {
        let r = optimize_with(kind, vol, xray, &t, geom, roi_spec, config)?;
        t = TransformParams::from_slice(&r.x)?.normalized();
        stages.push(r);
    }
    Ok(IntensityResult {
        method,
        params: t,
        evals: stages.iter().map(|s| s.evals).sum(),
        wall_time_s: start.elapsed().as_secs_f64(),
        stages,
    })
}
