//! `xreg`: phantoms, DRRs, training-set synthesis, regressor training,
//! registration and evaluation from the command line.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use xreg::baseline::{register_intensity, IntensityConfig, IntensityMethod};
use xreg::drr::{load_image, render_drr, save_image, Image};
use xreg::eval::{run_experiment, CnnMethod, IntensityBaseline, PerturbSpec, RegistrationMethod, Targets};
use xreg::feature::{compute_roi, extract_patch, feature_residual, standardize_patch, RoiSpec};
use xreg::io;
use xreg::regression::{
    regress_multipass, save_dataset, synthesize_dataset, train_bank, BankConfig, Group, RegressorBank, ZoneGrid,
};
use xreg::volume::{load_volume, make_phantom, save_volume, PhantomSpec, Volume};
use xreg::{preset, Error, ProjectionGeometry, TransformParams};

#[derive(Debug, Parser)]
#[command(name = "xreg", version, about = "2-D/3-D rigid registration by hierarchical CNN regression")]
struct Cli {
    /// Worker threads (1 is the sequential reference; results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a voxel phantom.
    Phantom(PhantomArgs),
    /// Render a DRR.
    Drr(DrrArgs),
    /// Synthesize a training set for one zone and group.
    Synth(SynthArgs),
    /// Synthesize training sets and train a regressor bank.
    Train(TrainArgs),
    /// Register an X-ray with a trained bank.
    Register(RegisterArgs),
    /// Register an X-ray with an intensity-based baseline.
    Baseline(BaselineArgs),
    /// Run the perturbation experiment for one or more methods.
    Evaluate(EvaluateArgs),
    /// Dump the DRR patch, X-ray patch and residual feature as images.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Plate,
    Cube,
}

#[derive(Debug, Args, Serialize)]
struct PhantomArgs {
    #[arg(long, value_enum, default_value = "plate")]
    preset: Preset,
    /// Phantom description (JSON); overrides --preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output header, e.g. `p.vol.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct GeomArgs {
    /// Geometry JSON (D_mm, det_px, pixel_spacing_mm, principal_point_px).
    #[arg(long)]
    geom: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct DrrArgs {
    #[arg(long)]
    volume: PathBuf,
    /// `tx,ty,tz,theta,alpha,beta` in mm and degrees.
    #[arg(long, value_parser = parse_params, allow_hyphen_values = true)]
    params: TransformParams,
    #[command(flatten)]
    geom: GeomArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BankArgs {
    /// Zone grid as `RxC`.
    #[arg(long, value_parser = parse_grid, default_value = "1x1")]
    zone_grid: (usize, usize),
    /// Angular span `A,B` (degrees) covered by the grid in alpha and beta.
    #[arg(long, value_parser = parse_span, default_value = "-10,10", allow_hyphen_values = true)]
    zone_span: (f64, f64),
    #[arg(long, default_value_t = 2000)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum GroupArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    #[value(name = "all")]
    All,
}

impl GroupArg {
    fn groups(self) -> Vec<Group> {
        match self {
            GroupArg::One => vec![Group::InPlane],
            GroupArg::Two => vec![Group::OutOfPlane],
            GroupArg::Three => vec![Group::Depth],
            GroupArg::All => Group::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    volume: PathBuf,
    #[command(flatten)]
    geom: GeomArgs,
    #[command(flatten)]
    bank: BankArgs,
    #[arg(long, value_enum, default_value = "all")]
    group: GroupArg,
    /// Output directory; one subdirectory per (zone, group).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    volume: PathBuf,
    #[command(flatten)]
    geom: GeomArgs,
    #[command(flatten)]
    bank: BankArgs,
    #[arg(long, default_value_t = 32)]
    epochs: usize,
    /// Bank output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct RegisterArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    xray: PathBuf,
    /// Regressor bank directory.
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, value_parser = parse_params, allow_hyphen_values = true)]
    init: TransformParams,
    #[arg(long, default_value_t = 3)]
    passes: usize,
    /// Result JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum, Serialize)]
enum MethodArg {
    Mi,
    Gc,
    #[value(name = "mi+gc")]
    #[serde(rename = "mi+gc")]
    MiGc,
    Cnn,
}

impl MethodArg {
    fn intensity(self) -> Option<IntensityMethod> {
        match self {
            MethodArg::Mi => Some(IntensityMethod::Mi),
            MethodArg::Gc => Some(IntensityMethod::Gc),
            MethodArg::MiGc => Some(IntensityMethod::MiGc),
            MethodArg::Cnn => None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    xray: PathBuf,
    #[arg(long, value_parser = parse_params, allow_hyphen_values = true)]
    init: TransformParams,
    #[command(flatten)]
    geom: GeomArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    volume: PathBuf,
    #[command(flatten)]
    geom: GeomArgs,
    /// Methods to compare; repeat or separate with commas.
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    method: Vec<MethodArg>,
    /// Regressor bank directory (needed for `cnn`).
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    passes: usize,
    /// Ground-truth cases with synthetic X-rays.
    #[arg(long, default_value_t = 5)]
    cases: usize,
    /// Perturbations per case.
    #[arg(long, default_value_t = 140)]
    n_perturb: usize,
    /// Multiplier on the default perturbation standard deviations.
    #[arg(long, default_value_t = 1.0)]
    perturb_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct InspectArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    xray: PathBuf,
    #[arg(long, value_parser = parse_params, allow_hyphen_values = true)]
    params: TransformParams,
    #[command(flatten)]
    geom: GeomArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_params(s: &str) -> Result<TransformParams, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let t = TransformParams::from_slice(&v).map_err(|e| e.to_string())?;
    if !t.is_finite() {
        return Err("parameters must be finite".into());
    }
    Ok(t)
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or("expected RxC")?;
    let r: usize = r.trim().parse().map_err(|e| format!("rows: {e}"))?;
    let c: usize = c.trim().parse().map_err(|e| format!("cols: {e}"))?;
    if r == 0 || c == 0 {
        return Err("grid needs at least one zone per axis".into());
    }
    Ok((r, c))
}

fn parse_span(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected A,B")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("A: {e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("B: {e}"))?;
    if !(a.is_finite() && b.is_finite() && b > a) {
        return Err("span must satisfy A < B".into());
    }
    Ok((a, b))
}

type CliResult<T> = std::result::Result<T, Error>;

fn geometry(args: &GeomArgs) -> CliResult<ProjectionGeometry> {
    match &args.geom {
        Some(p) => ProjectionGeometry::from_json(&io::read_bytes(p)?),
        None => Ok(preset::desk_geometry()),
    }
}

fn bank_config(args: &BankArgs, epochs: usize, vol: &Volume) -> CliResult<BankConfig> {
    let mut cfg = preset::desk_bank_config(args.n_samples, epochs, args.seed);
    cfg.setup.grid = ZoneGrid::spanning(args.zone_grid.0, args.zone_grid.1, args.zone_span.0, args.zone_span.1)?;
    // the desk ROI is sized for the plate; other objects get 1.2x their extent
    if vol.object_bbox()?.extent().x > preset::desk_roi().w0_mm {
        cfg.setup.roi = RoiSpec::fit_to(vol, 1.2, preset::DESK_PATCH.0, preset::DESK_PATCH.1)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the effective configuration next to a file output, or inside a
/// directory output.
fn write_config<T: Serialize>(out: &Path, is_dir: bool, config: &T) -> CliResult<()> {
    let path = if is_dir {
        out.join("config.json")
    } else {
        let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let stem = name.split('.').next().unwrap_or("output").to_string();
        out.with_file_name(format!("{stem}.config.json"))
    };
    io::write_json(&path, config)
}

#[derive(Serialize)]
struct Effective<'a, A: Serialize, E: Serialize> {
    command: &'a str,
    args: &'a A,
    effective: E,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Phantom(a) => {
            let spec = match &a.spec {
                Some(p) => serde_json::from_slice(&io::read_bytes(p)?).map_err(|e| Error::Format {
                    field: p.display().to_string(),
                    reason: e.to_string(),
                })?,
                None => match a.preset {
                    Preset::Plate => PhantomSpec::plate(),
                    Preset::Cube => PhantomSpec::cube(20.0, 0.02, 1.0, 4),
                },
            };
            let vol = make_phantom(&spec)?;
            save_volume(&vol, &a.out)?;
            write_config(&a.out, false, &Effective { command: "phantom", args: &a, effective: &spec })
        }
        Command::Drr(a) => {
            let vol = load_volume(&a.volume)?;
            let geom = geometry(&a.geom)?;
            let img = render_drr(&vol, &a.params, &geom, None)?;
            save_image(&img, &a.out)?;
            write_config(&a.out, false, &Effective { command: "drr", args: &a, effective: &geom })
        }
        Command::Synth(a) => {
            let vol = load_volume(&a.volume)?;
            let geom = geometry(&a.geom)?;
            let cfg = bank_config(&a.bank, 1, &vol)?;
            for zone in cfg.setup.grid.zones() {
                for group in a.group.groups() {
                    let seed = xreg::regression::derive_seed(cfg.seed, zone, group);
                    let ds = synthesize_dataset(&vol, &geom, &cfg.setup, zone, cfg.group_spec(group), cfg.n_samples, seed)?;
                    save_dataset(&ds, &a.out.join(format!("z{}_{}_g{}", zone.0, zone.1, group.id())))?;
                }
            }
            write_config(&a.out, true, &Effective { command: "synth", args: &a, effective: (&geom, &cfg) })
        }
        Command::Train(a) => {
            let vol = load_volume(&a.volume)?;
            let geom = geometry(&a.geom)?;
            let cfg = bank_config(&a.bank, a.epochs, &vol)?;
            let (_, summaries) = train_bank(&vol, &geom, &cfg, Some(&a.out))?;
            io::write_json(&a.out.join("training.json"), &summaries)?;
            for s in &summaries {
                let l = &s.report.epoch_losses;
                println!(
                    "zone ({}, {}) group {}: loss {:.5} -> {:.5}",
                    s.zone.0,
                    s.zone.1,
                    s.group.id(),
                    l[0],
                    l[l.len() - 1]
                );
            }
            write_config(&a.out, true, &Effective { command: "train", args: &a, effective: (&geom, &cfg) })
        }
        Command::Register(a) => {
            let vol = load_volume(&a.volume)?;
            let xray = load_image(&a.xray)?;
            let bank = RegressorBank::load(&a.bank)?;
            check_detector(&xray, &bank.geometry)?;
            let r = regress_multipass(&bank, &vol, &xray, &a.init, a.passes)?;
            io::write_json(&a.out, &r)?;
            println!("{}", format_params(&r.params));
            write_config(&a.out, false, &Effective { command: "register", args: &a, effective: &bank.geometry })
        }
        Command::Baseline(a) => {
            let Some(method) = a.method.intensity() else {
                return Err(Error::InvalidParameter("baseline methods are mi, gc and mi+gc; use `register` for cnn".into()));
            };
            let vol = load_volume(&a.volume)?;
            let xray = load_image(&a.xray)?;
            let geom = geometry(&a.geom)?;
            check_detector(&xray, &geom)?;
            let roi = roi_for(&vol)?;
            let cfg = IntensityConfig::default();
            let r = register_intensity(method, &vol, &xray, &a.init, &geom, &roi, &cfg)?;
            io::write_json(&a.out, &r)?;
            println!("{}", format_params(&r.params));
            write_config(&a.out, false, &Effective { command: "baseline", args: &a, effective: (&geom, &roi, &cfg) })
        }
        Command::Evaluate(a) => {
            let vol = load_volume(&a.volume)?;
            let geom = geometry(&a.geom)?;
            let targets = Targets::of(&vol)?;
            let cases = preset::evaluation_cases(&vol, &geom, a.cases, a.seed)?;
            let roi = roi_for(&vol)?;
            let icfg = IntensityConfig::default();
            let bank = match &a.bank {
                Some(p) => Some(RegressorBank::load(p)?),
                None if a.method.contains(&MethodArg::Cnn) => {
                    return Err(Error::InvalidParameter("--bank is required for the cnn method".into()))
                }
                None => None,
            };
            let mut cnn = None;
            let mut baselines = Vec::new();
            for m in &a.method {
                match m.intensity() {
                    Some(method) => baselines.push(IntensityBaseline {
                        method,
                        vol: &vol,
                        geom: &geom,
                        roi: &roi,
                        config: &icfg,
                    }),
                    None => {
                        cnn = Some(CnnMethod {
                            bank: bank.as_ref().expect("checked above"),
                            vol: &vol,
                            passes: a.passes,
                        })
                    }
                }
            }
            let mut methods: Vec<&dyn RegistrationMethod> = baselines.iter().map(|b| b as &dyn RegistrationMethod).collect();
            if let Some(c) = &cnn {
                methods.push(c);
            }
            let spec = PerturbSpec {
                count: a.n_perturb,
                seed: a.seed,
                ..PerturbSpec::default()
            }
            .scaled(a.perturb_scale);
            let report = run_experiment(&methods, &targets, &cases, &geom, &spec, Some(&a.out))?;
            for (m, s) in &report.summary {
                println!(
                    "{m}: success {:.1}%  mean mTREproj {}  time {:.3} +- {:.3} s",
                    100.0 * s.success_rate,
                    s.mean_mtreproj_mm.map_or("n/a".into(), |v| format!("{v:.3} mm")),
                    s.time_mean_s,
                    s.time_std_s
                );
            }
            write_config(&a.out, true, &Effective { command: "evaluate", args: &a, effective: (&geom, &roi, &icfg, &spec) })
        }
        Command::Inspect(a) => {
            let vol = load_volume(&a.volume)?;
            let xray = load_image(&a.xray)?;
            let geom = geometry(&a.geom)?;
            check_detector(&xray, &geom)?;
            let roi_spec = roi_for(&vol)?;
            let roi = compute_roi(&a.params, &geom, &roi_spec)?;
            let drr = render_drr(&vol, &a.params, &geom, None)?;
            let spacing = roi.width_mm / roi_spec.patch_cols as f64;
            let dump = |name: &str, img: Image| -> CliResult<()> {
                save_image(&img, &a.out.join(format!("{name}.img.json")))?;
                io::write_bytes(&a.out.join(format!("{name}.pgm")), &img.to_pgm())
            };
            dump("drr_patch", standardize_patch(&extract_patch(&drr, &roi, &roi_spec, &geom)).to_image(spacing)?)?;
            dump("xray_patch", standardize_patch(&extract_patch(&xray, &roi, &roi_spec, &geom)).to_image(spacing)?)?;
            dump("feature", feature_residual(&a.params, &xray, &vol, &geom, &roi_spec)?.patch.to_image(spacing)?)?;
            write_config(&a.out, true, &Effective { command: "inspect", args: &a, effective: (&geom, &roi_spec, &roi) })
        }
    }
}

fn roi_for(vol: &Volume) -> CliResult<RoiSpec> {
    if vol.object_bbox()?.extent().x > preset::desk_roi().w0_mm {
        RoiSpec::fit_to(vol, 1.2, preset::DESK_PATCH.0, preset::DESK_PATCH.1)
    } else {
        Ok(preset::desk_roi())
    }
}

fn check_detector(img: &Image, geom: &ProjectionGeometry) -> CliResult<()> {
    if img.width != geom.width() || img.height != geom.height() {
        return Err(Error::InvalidParameter(format!(
            "image is {}x{} but the geometry expects {}x{}",
            img.width,
            img.height,
            geom.width(),
            geom.height()
        )));
    }
    Ok(())
}

fn format_params(t: &TransformParams) -> String {
    t.to_array().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(2)
        }
    }
}
