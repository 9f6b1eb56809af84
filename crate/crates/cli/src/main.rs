//! `rsrnet` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage or I/O errors, 2 when training
//! stops on a non-finite loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rsrnet::checkpoint::{load_checkpoint, Checkpoint};
use rsrnet::config::ABLATION_ROWS;
use rsrnet::data::{self, load_dataset, make_dataset, save_dataset, split_ids, DataConfig};
use rsrnet::metrics::{complexity_report, ApMode};
use rsrnet::pipeline::{ablate, evaluate, forward, train};
use rsrnet::viz::write_visualization;
use rsrnet::{Error, Model, ModelConfig};

const OUT_ENV: &str = "RSRNET_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "rsrnet", version, about = "Inharmonious region localization with recurrent self-reasoning")]
struct Cli {
    /// Random seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file; keys it sets take precedence over flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic composite dataset.
    GenerateData {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Image side; defaults to the config's input size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
    },
    /// Train a model on the train split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
        /// Ablation flags to switch on, comma separated.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        /// Component-ablation row (1-9) to train.
        #[arg(long)]
        row: Option<usize>,
    },
    /// Score a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Pool all pixels into one AP instead of averaging per image.
        #[arg(long)]
        pooled: bool,
    },
    /// Predict masks for images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
        /// Also write the recurrent mask, the decoder mask and the gate.
        #[arg(long)]
        dump_all: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write iteration masks, similarity heatmaps and the fusion panel.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask for the last panel tile.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
    },
    /// Train and score component-ablation rows across seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Rows 1-9, comma separated, or `all`.
        #[arg(long, default_value = "1,9")]
        rows: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Report parameter counts, FLOPs and forward time.
    Complexity {
        /// Read the architecture from a checkpoint instead of a preset.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, default_value_t = 3)]
        timing_runs: usize,
    },
}

#[derive(Args, Debug)]
struct TrainOpts {
    /// `desk` or `paper`.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Recurrent iterations.
    #[arg(long)]
    iterations: Option<usize>,
}

/// Preset, then flags, then the config file on top.
fn resolve(preset: &str, seed: Option<u64>, config: Option<&Path>, edit: impl FnOnce(&mut ModelConfig) -> anyhow::Result<()>) -> anyhow::Result<ModelConfig> {
    let mut cfg = ModelConfig::preset(preset)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    edit(&mut cfg)?;
    match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.overlay_toml(&text).with_context(|| format!("in config {}", path.display()))
        }
        None => {
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn apply_opts(cfg: &mut ModelConfig, o: &TrainOpts) {
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = o.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = o.iterations {
        cfg.num_iterations = v;
    }
}

fn parse_rows(text: &str) -> anyhow::Result<Vec<usize>> {
    if text.trim() == "all" {
        return Ok((1..=ABLATION_ROWS.len()).collect());
    }
    text.split(',')
        .map(|r| {
            let row: usize = r.trim().parse().with_context(|| format!("bad row `{r}`"))?;
            if !(1..=ABLATION_ROWS.len()).contains(&row) {
                bail!("row {row} out of range 1..=9");
            }
            Ok(row)
        })
        .collect()
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn load_model(checkpoint: &Path, requested: Option<&ModelConfig>) -> anyhow::Result<Model> {
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(ck.into_model(requested)?)
}

/// The config file, when given, must describe the checkpoint's architecture.
fn requested_config(cli: &Cli) -> anyhow::Result<Option<ModelConfig>> {
    cli.config.as_deref().map(|p| resolve("desk", cli.seed, Some(p), |_| Ok(()))).transpose()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenerateData {
            n,
            size,
            train_fraction,
            out,
        } => {
            let cfg = resolve("desk", cli.seed, cli.config.as_deref(), |_| Ok(()))?;
            let data_cfg = DataConfig {
                size: size.unwrap_or(cfg.input_size),
                train_fraction: *train_fraction,
                ..DataConfig::default()
            };
            let samples = make_dataset(cfg.seed, *n, &data_cfg)?;
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let split = split_ids(&ids, data_cfg.train_fraction, cfg.seed);
            save_dataset(out, &samples, &split)?;
            let areas: Vec<f64> = samples.iter().map(|s| s.mask.foreground_fraction()).collect();
            let min = areas.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = areas.iter().cloned().fold(0.0, f64::max);
            let mean = areas.iter().sum::<f64>() / areas.len() as f64;
            println!("wrote {n} samples ({} train, {} test) to {}", split.train.len(), split.test.len(), out.display());
            println!("region area fraction: min {min:.4}, mean {mean:.4}, max {max:.4}");
        }
        Command::Train {
            data,
            out,
            opts,
            ablate,
            row,
        } => {
            let cfg = resolve(&opts.preset, cli.seed, cli.config.as_deref(), |cfg| {
                apply_opts(cfg, opts);
                if let Some(r) = row {
                    *cfg = cfg.with_ablation_row(*r)?;
                }
                for flag in ablate {
                    cfg.set_flag(flag, true)?;
                }
                Ok(())
            })?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            cfg.save(&out.join("config.toml"))?;
            let result = train(&cfg, data, out)?;
            println!("steps: {}", result.records.len());
            if let Some(loss) = result.final_loss() {
                println!("final loss: {loss:?}");
            }
            if let Some(p) = &result.checkpoint {
                println!("checkpoint: {}", p.display());
            }
        }
        Command::Eval { checkpoint, data, pooled } => {
            let requested = requested_config(&cli)?;
            let mode = if *pooled { ApMode::Pooled } else { ApMode::PerImage };
            let report = evaluate(checkpoint, data, requested.as_ref(), mode)?;
            println!("{report}");
        }
        Command::Infer {
            checkpoint,
            out,
            dump_all,
            images,
        } => {
            let model = load_model(checkpoint, requested_config(&cli)?.as_ref())?;
            for path in images {
                let image = data::resize_image(&data::load_image(path)?, model.config.input_size)?;
                let o = forward(&model, &image)?;
                let name = stem(path);
                let mut masks = vec![("m_fnl", &o.m_fnl)];
                if *dump_all {
                    masks.extend([("m_rsr", &o.m_rsr_up), ("m_dec", &o.m_dec), ("g", &o.g)]);
                }
                for (tag, m) in masks {
                    let p = out.join(format!("{name}_{tag}.png"));
                    data::save_mask(&p, m)?;
                    println!("{}", p.display());
                }
            }
        }
        Command::Visualize { checkpoint, image, gt, out } => {
            let model = load_model(checkpoint, requested_config(&cli)?.as_ref())?;
            let size = model.config.input_size;
            let img = data::resize_image(&data::load_image(image)?, size)?;
            let gt = match gt {
                Some(p) => {
                    let m = data::load_mask(p)?;
                    if m.height() != size || m.width() != size {
                        bail!("ground truth {} is {}x{}, expected {size}x{size}", p.display(), m.height(), m.width());
                    }
                    Some(m)
                }
                None => None,
            };
            let o = forward(&model, &img)?;
            for p in write_visualization(out, &o, gt.as_ref())? {
                println!("{}", p.display());
            }
        }
        Command::Ablate {
            data,
            rows,
            seeds,
            out,
            opts,
        } => {
            let rows = parse_rows(rows)?;
            let base = resolve(&opts.preset, cli.seed, cli.config.as_deref(), |cfg| {
                apply_opts(cfg, opts);
                Ok(())
            })?;
            let ds = load_dataset(data)?;
            let (train_set, test_set) = (ds.train(), ds.test());
            if test_set.is_empty() {
                bail!("{} has no test samples", data.display());
            }
            let report = ablate(&base, &train_set, &test_set, &rows, seeds, ApMode::PerImage, out.as_deref())?;
            println!("{report}");
            if let Some(dir) = out {
                std::fs::write(dir.join("ablation.txt"), format!("{report}\n")).with_context(|| format!("writing {}", dir.display()))?;
            }
        }
        Command::Complexity {
            checkpoint,
            preset,
            timing_runs,
        } => {
            let (model, manifest_total) = match checkpoint {
                Some(path) => {
                    let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
                    let total: usize = ck.manifest().iter().map(|e| e.shape.iter().product::<usize>()).sum();
                    (Checkpoint::into_model(ck, None)?, Some(total))
                }
                None => {
                    let cfg = resolve(preset, cli.seed, cli.config.as_deref(), |_| Ok(()))?;
                    (Model::new(&cfg, cfg.seed)?, None)
                }
            };
            let report = complexity_report(&model, *timing_runs)?;
            println!("{report}");
            if let Some(total) = manifest_total {
                println!("checkpoint manifest total: {total}");
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
