#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use radarlink::config::RunConfig;
use radarlink::dataset::{dataset_path, generate_dataset, load_dataset, load_split_manifest, manifest_path};
use radarlink::detection::write_lag_power_csv;
use radarlink::neural::{input_scale, load_checkpoint, save_checkpoint, train, write_history_csv, MlpModel, Variant};
use radarlink::scenario::{detect_demo, run_campaign, write_results_csv, write_summary_csv, PredictorKind};
use radarlink::Error;

#[derive(Parser)]
#[command(name = "radarlink", version, about = "Passive-radar-aided mmWave link configuration")]
struct Cli {
    /// TOML configuration file; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, env = "RSEED", global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate scenes and write radar/communication feature pairs.
    GenerateDataset {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `n_scenes`.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train one translation network on a generated dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// aps, eigvec or covvec.
        #[arg(long)]
        variant: String,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// History CSV (default: checkpoint path with `.history.csv`).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Monte Carlo campaign over protocols, predictors and coherence times.
    Sweep {
        /// `variant=path` for every learned predictor in use.
        #[arg(long = "checkpoint", value_name = "VARIANT=PATH")]
        checkpoints: Vec<String>,
        /// Per-user results CSV; aggregates go to `<stem>_summary.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `n_trials`.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Correlator lag power of one synthesized scene.
    DetectDemo {
        #[arg(long)]
        out: PathBuf,
    },
}

fn ensure_parent(path: &Path) -> radarlink::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn create(path: &Path) -> radarlink::Result<std::io::BufWriter<std::fs::File>> {
    ensure_parent(path)?;
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn finish(path: &Path, mut w: std::io::BufWriter<std::fs::File>) -> radarlink::Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "results".into());
    out.with_file_name(format!("{stem}_summary.csv"))
}

fn run(cli: Cli) -> radarlink::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    match &cli.cmd {
        Cmd::GenerateDataset { scenes: Some(n), .. } => cfg.run.n_scenes = *n,
        Cmd::Sweep { trials: Some(n), .. } => cfg.run.n_trials = *n,
        _ => {}
    }
    cfg.validate()?;
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config {
                key: "--jobs".into(),
                message: "must be >= 1".into(),
            });
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let header = cfg.echo_lines();

    match cli.cmd {
        Cmd::GenerateDataset { out, .. } => {
            let (data, files) = generate_dataset(&cfg.scene, cfg.run.n_scenes, cfg.run.seed, cfg.run.val_fraction, &out)?;
            let echo = out.join("config.toml");
            let mut w = create(&echo)?;
            for l in &header {
                writeln!(w, "{l}").map_err(|e| Error::io(&echo, e))?;
            }
            finish(&echo, w)?;
            println!("pairs written: {}", data.len());
            println!("discarded (undetected): {}", data.discarded);
            for p in files.variants.iter().chain([&files.manifest]) {
                println!("  {}", p.display());
            }
        }
        Cmd::Train { dataset, variant, out, history } => {
            let variant = Variant::parse(&variant).map_err(|_| Error::Config {
                key: "--variant".into(),
                message: format!("`{variant}` is not one of aps, eigvec, covvec"),
            })?;
            let ds = load_dataset(&dataset_path(&dataset, variant))?;
            if ds.variant != variant {
                return Err(Error::invalid(format!("dataset file holds {} records", ds.variant.name())));
            }
            let split = load_split_manifest(&manifest_path(&dataset))?;
            let (train_set, val_set) = ds.split(&split)?;
            let mut model = MlpModel::new(variant, variant.array_size(ds.feature_dim), cfg.train.seed);
            if variant != Variant::Eigvec {
                model.norm_const = input_scale(&train_set);
            }
            let (best, hist) = train(&model, &train_set, &val_set, &cfg.train, variant.loss())?;
            ensure_parent(&out)?;
            save_checkpoint(&out, &best)?;
            let hpath = history.unwrap_or_else(|| out.with_extension("history.csv"));
            let mut w = create(&hpath)?;
            write_history_csv(&mut w, &hist, &header).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::invalid(format!("{}: {m}", hpath.display())),
                other => other,
            })?;
            finish(&hpath, w)?;
            let best_val = hist.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
            println!(
                "{}: {} train / {} val pairs, {} epochs, best val loss {best_val:.6e}",
                variant.name(),
                train_set.len(),
                val_set.len(),
                hist.len()
            );
            println!("  {}\n  {}", out.display(), hpath.display());
        }
        Cmd::Sweep { checkpoints, out, .. } => {
            let mut models = BTreeMap::new();
            for spec in &checkpoints {
                let (name, path) = spec.split_once('=').ok_or_else(|| Error::Config {
                    key: "--checkpoint".into(),
                    message: format!("`{spec}` is not VARIANT=PATH"),
                })?;
                let v = Variant::parse(name).map_err(|_| Error::Config {
                    key: "--checkpoint".into(),
                    message: format!("`{name}` is not one of aps, eigvec, covvec"),
                })?;
                let m = load_checkpoint(Path::new(path))?;
                if m.variant != v {
                    return Err(Error::invalid(format!("{path} holds a {} network, not {}", m.variant.name(), v.name())));
                }
                models.insert(v, m);
            }
            let campaign = cfg.campaign()?;
            for p in &campaign.predictors {
                if let PredictorKind::Net(v) = p {
                    if !models.contains_key(v) {
                        return Err(Error::invalid(format!("predictor {} needs --checkpoint {}=PATH", v.name(), v.name())));
                    }
                }
            }
            let report = run_campaign(&campaign, &models)?;
            let mut w = create(&out)?;
            write_results_csv(&mut w, &campaign, &report, &header)?;
            finish(&out, w)?;
            let spath = summary_path(&out);
            let mut w = create(&spath)?;
            write_summary_csv(&mut w, &report, &header)?;
            finish(&spath, w)?;
            println!("{} trials", campaign.n_trials);
            println!("  {}\n  {}", out.display(), spath.display());
        }
        Cmd::DetectDemo { out } => {
            let demo = detect_demo(&cfg.scene, cfg.run.demo_radars, cfg.run.demo_all_blocks, cfg.run.seed)?;
            let mut w = create(&out)?;
            for l in &header {
                writeln!(w, "# {l}").map_err(|e| Error::io(&out, e))?;
            }
            writeln!(w, "# radar_blocks = {:?}", demo.radar_blocks).map_err(|e| Error::io(&out, e))?;
            write_lag_power_csv(&mut w, &demo.rows)?;
            finish(&out, w)?;
            println!("radar blocks {:?}; {} blocks written to {}", demo.radar_blocks, demo.rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
