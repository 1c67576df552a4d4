use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rangediff::config::{Preset, RunConfig};
use rangediff::error::{Error, IoError};
use rangediff::geometry::PointCloud;
use rangediff::io::{
    list_pairs, load_checkpoint, read_pair, read_rays, read_sweep, save_checkpoint, write_pair, write_ply, write_sweep,
    ColorBy, PlyFormat,
};
use rangediff::metrics::{evaluate, EvalConfig};
use rangediff::pipeline::densify;
use rangediff::prior::build_prior;
use rangediff::training::{mix, train, trace_to_csv, TrainingScene};

/// Default config file looked up in `$RANGEDIFF_CONFIG_DIR`.
const CONFIG_DIR_VAR: &str = "RANGEDIFF_CONFIG_DIR";
const DEFAULT_CONFIG_NAME: &str = "rangediff.toml";

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "rangediff", version, about = "Range-aware diffusion densification for LiDAR sweeps")]
struct Cli {
    /// TOML config layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlyColor {
    None,
    BHat,
    Occupancy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic sweep pairs into OUT/train and OUT/val.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the structural prior on a sparse sweep.
    Prior {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Train a denoiser on DATA/train, validating on DATA/val.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, trace and config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Densify a sparse sweep with a trained checkpoint.
    Densify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the occupancy threshold.
        #[arg(long)]
        occ_threshold: Option<f64>,
        #[arg(long)]
        ply: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        color_by: PlyColor,
    },
    /// Score a generated sweep against GT rays (and optionally a GT cloud).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt_rays: PathBuf,
        /// GT cloud; defaults to the returns of the GT rays.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// PLY with violating points in red.
        #[arg(long)]
        ply: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Run(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) | CliError::Run(Error::Config(_)) => EXIT_USAGE,
        CliError::Run(Error::DivergenceDetected { .. }) => EXIT_DIVERGED,
        CliError::Run(_) => EXIT_DATA,
    }
}

fn config_path(flag: Option<&Path>) -> Result<Option<PathBuf>, CliError> {
    let dir = std::env::var_os(CONFIG_DIR_VAR).map(PathBuf::from);
    match flag {
        Some(p) if p.is_file() => Ok(Some(p.to_path_buf())),
        Some(p) => match dir.map(|d| d.join(p)).filter(|c| c.is_file()) {
            Some(c) => Ok(Some(c)),
            None => Err(CliError::Usage(format!("config file {} not found", p.display()))),
        },
        None => Ok(dir.map(|d| d.join(DEFAULT_CONFIG_NAME)).filter(|c| c.is_file())),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let preset = match cli.preset {
        Some(PresetArg::Paper) => Preset::Paper,
        _ => Preset::Desk,
    };
    let base = RunConfig::preset(preset);
    let mut cfg = match config_path(cli.config.as_deref())? {
        Some(p) => {
            log::info!("config {}", p.display());
            let text = fs::read_to_string(&p)?;
            RunConfig::from_toml_over(&text, &base)?
        }
        None => base,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Metadata written next to every output so results can be traced back to
/// the exact config.
fn write_meta(path: &Path, cfg: &RunConfig, extra: &[(&str, String)]) -> Result<(), CliError> {
    let mut t = toml::Table::new();
    t.insert("config_hash".into(), format!("{:016x}", cfg.hash()).into());
    t.insert("seed".into(), (cfg.seed as i64).into());
    t.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    for (k, v) in extra {
        t.insert((*k).into(), v.clone().into());
    }
    fs::write(path, toml::to_string(&t).expect("metadata serializes"))?;
    Ok(())
}

fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.toml");
    PathBuf::from(s)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { out } => {
            let scenes = cfg.synth_scenes()?;
            let n_train = cfg.dataset.train_scenes;
            for (i, (spec, pair)) in scenes.iter().enumerate() {
                let dir = if i < n_train {
                    out.join("train").join(format!("scene_{i:04}"))
                } else {
                    out.join("val").join(format!("scene_{:04}", i - n_train))
                };
                write_pair(pair, &dir)?;
                fs::write(dir.join("scene.toml"), spec.to_toml())?;
            }
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            write_meta(&out.join("meta.toml"), &cfg, &[("scenes", scenes.len().to_string())])?;
            println!("wrote {} sweep pairs to {}", scenes.len(), out.display());
        }
        Command::Prior { input, out, ply } => {
            let cloud = read_sweep(input)?;
            let prior = build_prior(&cloud, &cfg.stage0, cfg.seed).map_err(Error::from)?;
            write_sweep(&prior.cloud, out)?;
            if let Some(p) = ply {
                write_ply(&prior.cloud, p, ColorBy::None, PlyFormat::BinaryLittleEndian)?;
            }
            write_meta(&meta_path(out), &cfg, &[("input_points", cloud.len().to_string()), ("prior_points", prior.len().to_string())])?;
            println!("prior: {} -> {} points", cloud.len(), prior.len());
        }
        Command::Train { data, out } => {
            let load = |split: &str| -> Result<Vec<_>, CliError> {
                let dir = data.join(split);
                if !dir.is_dir() {
                    return Ok(Vec::new());
                }
                list_pairs(&dir)?.iter().map(|p| Ok(read_pair(p)?)).collect()
            };
            let train_pairs = load("train")?;
            if train_pairs.is_empty() {
                return Err(CliError::Run(Error::Config(format!("no sweep pairs under {}", data.join("train").display()))));
            }
            let val_pairs = load("val")?;
            let settings = cfg.train_settings();
            let scenes = train_pairs
                .into_iter()
                .enumerate()
                .map(|(i, p)| TrainingScene::new(p, &settings.stage0, mix(cfg.seed, 5, i as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            fs::create_dir_all(out)?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let dump = out.join("diverged.rdck");
            let mut on_div = |net: &rangediff::network::Network| {
                if let Err(e) = save_checkpoint(net, &dump) {
                    log::error!("could not save divergence snapshot: {e}");
                }
            };
            let res = train(&scenes, &val_pairs, &settings, cfg.seed, Some(&mut on_div))?;
            save_checkpoint(&res.network, &out.join("model.rdck"))?;
            fs::write(out.join("trace.csv"), trace_to_csv(&res.trace))?;
            let last = res.trace.last().expect("at least one epoch");
            write_meta(
                &out.join("meta.toml"),
                &cfg,
                &[
                    ("network_hash", format!("{:016x}", cfg.network.hash())),
                    ("epochs", res.trace.len().to_string()),
                    ("final_loss", last.loss_total.to_string()),
                    ("val_cd", last.val_cd.to_string()),
                    ("val_fsvr", last.val_fsvr.to_string()),
                ],
            )?;
            println!("trained {} epochs: loss {:.5}, val CD {:.4}, val FSVR {:.2}%", res.trace.len(), last.loss_total, last.val_cd, last.val_fsvr);
        }
        Command::Densify {
            input,
            checkpoint,
            out,
            occ_threshold,
            ply,
            color_by,
        } => {
            let mut dcfg = cfg.densify;
            if let Some(t) = occ_threshold {
                dcfg.occ_threshold = *t;
            }
            dcfg.validate()?;
            let net = load_checkpoint(checkpoint, &cfg.network)?;
            let cloud = read_sweep(input)?;
            let res = densify(&cloud, &net, &cfg.stage0, &cfg.sdedit, &dcfg, cfg.seed)?;
            write_sweep(&res.cloud, out)?;
            if let Some(p) = ply {
                let color = match color_by {
                    PlyColor::None => ColorBy::None,
                    PlyColor::BHat => ColorBy::BHat(&res.b_hat),
                    PlyColor::Occupancy => ColorBy::Occupancy(&res.occupancy),
                };
                write_ply(&res.cloud, p, color, PlyFormat::BinaryLittleEndian)?;
            }
            let t = &res.timings;
            write_meta(
                &meta_path(out),
                &cfg,
                &[
                    ("network_hash", format!("{:016x}", cfg.network.hash())),
                    ("input_points", cloud.len().to_string()),
                    ("candidates", res.candidates.to_string()),
                    ("output_points", res.cloud.len().to_string()),
                    ("prior_ms", format!("{:.3}", t.prior_ms)),
                    ("conditioning_ms", format!("{:.3}", t.conditioning_ms)),
                    ("noising_ms", format!("{:.3}", t.noising_ms)),
                    ("reverse_ms", format!("{:.3}", t.reverse_ms)),
                    ("filter_ms", format!("{:.3}", t.filter_ms)),
                ],
            )?;
            println!(
                "densified {} -> {} points ({} candidates); prior {:.1} ms, conditioning {:.1} ms, noising {:.1} ms, reverse {:.1} ms, filter {:.1} ms, total {:.1} ms",
                cloud.len(),
                res.cloud.len(),
                res.candidates,
                t.prior_ms,
                t.conditioning_ms,
                t.noising_ms,
                t.reverse_ms,
                t.filter_ms,
                t.total_ms()
            );
        }
        Command::Eval { pred, gt_rays, gt, out, ply } => {
            let gen = read_sweep(pred)?;
            let rays = read_rays(gt_rays)?;
            let gt_cloud = match gt {
                Some(p) => read_sweep(p)?,
                None => PointCloud::new(rays.iter().filter_map(|r| r.point()).collect()),
            };
            let ecfg = EvalConfig {
                fsvr: cfg.fsvr,
                seed: cfg.seed,
                ..EvalConfig::default()
            };
            let report = evaluate(&gen, &gt_cloud, &rays, &ecfg).map_err(Error::from)?;
            if let Some(p) = out {
                fs::write(p, report.to_csv())?;
                write_meta(&meta_path(p), &cfg, &[])?;
            }
            if let Some(p) = ply {
                let bad: Vec<usize> = report.violations.iter().map(|v| v.point).collect();
                write_ply(&gen, p, ColorBy::Violation(&bad), PlyFormat::BinaryLittleEndian)?;
            }
            println!("{}", report.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Run(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
