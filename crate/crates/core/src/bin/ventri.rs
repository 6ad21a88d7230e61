use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ventri::brain::BrainVolumeParams;
use ventri::error::{Error, Result};
use ventri::mesh::write_ply;
use ventri::phantom::PhantomSpec;
use ventri::pipeline::{
    run_brain_volume, run_calibrate_cf, run_evaluate, run_fuse, run_phantom_generate, run_refine, run_register,
    run_segment, save_json, Config, EvalCase, FuseMethod, RefineRun,
};
use ventri::volume::{save_label_map, save_volume};

#[derive(Parser)]
#[command(name = "ventri", version, about = "Infant brain volume and lateral ventricle segmentation from 3D ultrasound")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON configuration; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed (and the phantom seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantoms with ground truth.
    Phantom {
        #[command(subcommand)]
        action: PhantomAction,
    },
    /// Brain volume from the skull ellipsoid of an ultrasound volume.
    BrainVolume {
        #[arg(long)]
        us: PathBuf,
        /// Brain volume parameters (JSON), overriding the configuration.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Rigid then non-rigid registration of every atlas in a bank.
    Register {
        #[arg(long)]
        us: PathBuf,
        #[arg(long)]
        atlas_dir: PathBuf,
        /// Atlas directory names to leave out.
        #[arg(long)]
        exclude: Vec<String>,
    },
    /// Label fusion; writes the probability map at --out.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        labels: Vec<PathBuf>,
        #[arg(long, default_value = "staple")]
        method: String,
        /// One score per label; keeps the top n before fusing.
        #[arg(long, value_delimiter = ',')]
        scores: Option<Vec<f64>>,
    },
    /// Energy-driven mesh refinement against an ultrasound volume.
    Refine {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        us: PathBuf,
        /// Mean atlas label volume (mm³) setting l = 2·V_k/V_M.
        #[arg(long)]
        mean_label_volume: Option<f64>,
    },
    /// Full pipeline: brain volume, registration, fusion, mesh and ratio.
    Segment {
        #[arg(long)]
        us: PathBuf,
        #[arg(long)]
        atlas_dir: PathBuf,
        #[arg(long)]
        exclude: Vec<String>,
    },
    /// Dice, surface distances and volumes against ground truth.
    Evaluate {
        #[arg(long, requires = "truth", conflicts_with = "cases")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        truth: Option<PathBuf>,
        /// JSON list of {case, method, pred, truth}.
        #[arg(long)]
        cases: Option<PathBuf>,
    },
    /// Fit C_f on a bank of phantom directories.
    CalibrateCf {
        #[arg(long)]
        atlas_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum PhantomAction {
    Generate {
        /// Phantom spec (JSON); defaults to the configuration's phantom.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of consecutive seeds; more than one writes phantom_<seed> sub-directories.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
}

/// Errors caused by the invocation rather than by the computation.
fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::MissingFile(_))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_config(g: &Global) -> Result<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
        cfg.phantom.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_or(g: &Global, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// `dir/name.ext` → `dir/name<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    match cli.command {
        Command::Phantom {
            action: PhantomAction::Generate { spec, count },
        } => {
            let mut spec = match spec {
                Some(p) => read_json::<PhantomSpec>(&p)?,
                None => cfg.phantom.clone(),
            };
            if let Some(s) = g.seed {
                spec.seed = s;
            }
            let out = out_or(g, "phantom");
            let truths = run_phantom_generate(&spec, &out, count)?;
            println!("wrote {} phantom(s) to {}", truths.len(), out.display());
        }
        Command::BrainVolume { us, params } => {
            let mut cfg = cfg;
            if let Some(p) = params {
                cfg.brain = read_json::<BrainVolumeParams>(&p)?;
                cfg.validate()?;
            }
            let (report, skull) = run_brain_volume(&cfg, &us)?;
            let out = out_or(g, "brain_volume.json");
            save_json(&report, &out)?;
            save_label_map(&skull, sibling(&out, "_skull.mhd"))?;
            println!("brain volume {:.1} mm³ (cf {})", report.volume_mm3, report.cf);
        }
        Command::Register { us, atlas_dir, exclude } => {
            let out = out_or(g, "registration");
            let run = run_register(&cfg, &us, &atlas_dir, &exclude, &out)?;
            for a in &run.atlases {
                println!("{}: LC² {:.4} total {:.4}", a.id, a.nonrigid.lc2, a.nonrigid.total);
            }
        }
        Command::Fuse { labels, method, scores } => {
            let method: FuseMethod = method.parse()?;
            let (report, fused, probability) = run_fuse(&cfg, method, &labels, scores.as_deref())?;
            let out = out_or(g, "probability.mhd");
            save_volume(&probability.probability_volume()?, &out)?;
            save_label_map(&fused, sibling(&out, "_label.mhd"))?;
            let raters = out.with_file_name("raters.json");
            save_json(&report, &raters)?;
            println!("fused volume {:.1} mm³", report.fused_volume_mm3);
        }
        Command::Refine { mesh, us, mean_label_volume } => {
            let (report, m): (RefineRun, _) = run_refine(&cfg, &mesh, &us, mean_label_volume)?;
            let out = out_or(g, "refined.ply");
            write_ply(&m, &out)?;
            save_json(&report, sibling(&out, ".json"))?;
            println!(
                "energy {:.3} -> {:.3} in {} iterations",
                report.energy_initial.total, report.energy_final.total, report.iterations
            );
        }
        Command::Segment { us, atlas_dir, exclude } => {
            let out = out_or(g, "segmentation");
            let r = run_segment(&cfg, &us, &atlas_dir, &exclude, &out)?;
            println!(
                "ventricles {:.1} mm³, brain {:.1} mm³, ratio {:.4}",
                r.ventricle_volume_mm3.unwrap_or(f64::NAN),
                r.brain_volume_mm3.unwrap_or(f64::NAN),
                r.ratio.unwrap_or(f64::NAN)
            );
        }
        Command::Evaluate { pred, truth, cases } => {
            let cases: Vec<EvalCase> = match (pred, truth, cases) {
                (Some(pred), Some(truth), None) => vec![EvalCase {
                    case: pred.display().to_string(),
                    method: "prediction".into(),
                    pred,
                    truth,
                }],
                (None, None, Some(c)) => read_json(&c)?,
                _ => return Err(Error::Config("give --pred and --truth, or --cases".into())),
            };
            let report = run_evaluate(&cases)?;
            save_json(&report, out_or(g, "metrics.json"))?;
            println!("{:<20} {:>3} {:>14} {:>14} {:>14}", "method", "n", "dice", "mad_mm", "hausdorff_mm");
            let f = |m: Option<ventri::pipeline::MeanSd>| m.map_or("-".to_string(), |m| format!("{:.3}±{:.3}", m.mean, m.sd));
            for m in &report.methods {
                println!(
                    "{:<20} {:>3} {:>14} {:>14} {:>14}",
                    m.method,
                    m.cases,
                    f(m.dice),
                    f(m.mad_mm),
                    f(m.hausdorff_mm)
                );
            }
        }
        Command::CalibrateCf { atlas_dir } => {
            let run = run_calibrate_cf(&cfg, &atlas_dir)?;
            save_json(&run, out_or(g, "calibration.json"))?;
            println!(
                "cf {:.4}, leave-one-out mean error {:.2}%",
                run.calibration.cf,
                100.0 * run.calibration.loo_mean
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 3 })
        }
    }
}
