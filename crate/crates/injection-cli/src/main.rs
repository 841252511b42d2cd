//! Command-line entry point: toy-dataset creation, training, sampling
//! grids, evaluation, and the backbone/latent-weight ablation grid.
//!
//! Every command echoes its effective configuration (all defaults resolved)
//! as `#`-prefixed header lines, so a run is reproducible from its output.
//! The default output root is `$INJECTION_HOME` when set, `./runs` otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use injection::config::{
    load_config, serialize_config, Backbone, ConfigTriple, LossWeights, ModelConfig, TrainConfig,
};
use injection::data::{
    center_prepare, image_grid, load_folders, load_image, save_png, write_toy_dataset, Dataset,
    ToySpec,
};
use injection::metrics::{
    append_metric_record, diversity_all_pairs, diversity_score, fid, FeatureExtractor,
    FrozenConvExtractor, MetricRecord,
};
use injection::rng::RandomSource;
use injection::tensor::Tensor;
use injection::trainer::{
    load_checkpoint, load_checkpoint_expecting, train, translate_images, TrainOptions, TrainState,
};

#[derive(Parser)]
#[command(
    name = "injection",
    version,
    about = "Many-to-many image translation with injected domain labels and latent codes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic folder-per-domain toy dataset
    MakeToy {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of domains (>= 2)
        #[arg(long, default_value_t = 2)]
        domains: usize,
        /// Images per domain
        #[arg(long = "per-domain", default_value_t = 64)]
        per_domain: usize,
        /// Square image edge length
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a folder-per-domain dataset
    Train {
        /// key=value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config backbone (unet | resnet)
        #[arg(long)]
        backbone: Option<String>,
        /// Override the latent-consistency weight
        #[arg(long = "lambda-latent")]
        lambda_latent: Option<f64>,
        /// Stop after this many optimizer steps
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Translate input images and write an image grid (input + variants)
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// One image file or a directory of images
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "target-domain")]
        target_domain: usize,
        /// Independent latent draws per input
        #[arg(long, default_value_t = 7)]
        variants: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate per-mapping samples and report FID and diversity
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Samples per mapping
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Random pairs for the diversity score
        #[arg(long, default_value_t = 1_900)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Allow drawing real images with replacement when n exceeds the set
        #[arg(long = "with-replacement")]
        with_replacement: bool,
    },
    /// Train the {unet, resnet} x lambda_latent {0.5, 5, 10} grid and report
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optimizer steps per grid cell
        #[arg(long, default_value_t = 600)]
        steps: u64,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn default_out(verb: &str) -> PathBuf {
    std::env::var_os("INJECTION_HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(verb)
}

fn resolve_config(path: Option<&Path>) -> Result<ConfigTriple> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok((
            ModelConfig::default(),
            LossWeights::default(),
            TrainConfig::default(),
        )),
    }
}

fn print_header(verb: &str, triple: Option<&ConfigTriple>, flags: &[(&str, String)]) {
    println!("# injection {verb}");
    if let Some((m, w, t)) = triple {
        for line in serialize_config(m, w, t).lines() {
            println!("# {line}");
        }
    }
    for (k, v) in flags {
        println!("# {k}={v}");
    }
}

fn prepared_domain_images(ds: &Dataset, domain: usize) -> Vec<Tensor> {
    ds.domains[domain]
        .images
        .iter()
        .map(|img| center_prepare(img, ds.image_size))
        .collect()
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::MakeToy {
            out,
            domains,
            per_domain,
            size,
            seed,
        } => {
            let out = out.unwrap_or_else(|| default_out("toy"));
            print_header(
                "make-toy",
                None,
                &[
                    ("out", out.display().to_string()),
                    ("domains", domains.to_string()),
                    ("per_domain", per_domain.to_string()),
                    ("size", size.to_string()),
                    ("seed", seed.to_string()),
                ],
            );
            let spec = ToySpec {
                num_domains: domains,
                per_domain,
                image_size: size,
            };
            let ds = write_toy_dataset(&spec, seed, &out)?;
            for d in &ds.domains {
                println!("{}: {} images", d.name, d.images.len());
            }
            println!(
                "wrote {} images across {} domains to {}",
                ds.len(),
                ds.num_domains(),
                out.display()
            );
        }

        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
            backbone,
            lambda_latent,
            steps,
        } => {
            let (mut model, mut weights, mut tcfg) = resolve_config(config.as_deref())?;
            if let Some(seed) = seed {
                tcfg.seed = seed;
            }
            if let Some(b) = &backbone {
                model.backbone = match b.as_str() {
                    "unet" => Backbone::Unet,
                    "resnet" => Backbone::Resnet,
                    other => bail!("unknown backbone `{other}` (expected unet or resnet)"),
                };
            }
            if let Some(l) = lambda_latent {
                weights.lambda_latent = l;
            }
            model.validate()?;
            weights.validate()?;
            let out = out.unwrap_or_else(|| default_out("train"));
            let triple = (model.clone(), weights.clone(), tcfg.clone());
            print_header(
                "train",
                Some(&triple),
                &[
                    ("data", data.display().to_string()),
                    ("out", out.display().to_string()),
                    (
                        "resume",
                        resume
                            .as_ref()
                            .map(|p| p.display().to_string())
                            .unwrap_or_else(|| "none".into()),
                    ),
                    (
                        "steps",
                        steps.map(|s| s.to_string()).unwrap_or_else(|| "full".into()),
                    ),
                ],
            );
            if !data.exists() {
                bail!("data directory {} does not exist", data.display());
            }
            let ds = load_folders(&data, &model)?;
            let mut state = match &resume {
                Some(ckpt) => load_checkpoint_expecting(ckpt, &model)
                    .with_context(|| format!("resuming from {}", ckpt.display()))?,
                None => TrainState::new(model, weights, tcfg)?,
            };
            let last = train(&mut state, &ds, &out, &TrainOptions { max_steps: steps })?;
            println!(
                "trained to step {} (epoch {}); checkpoint {}",
                state.step,
                state.epoch,
                last.display()
            );
        }

        Command::Sample {
            ckpt,
            input,
            target_domain,
            variants,
            out,
            seed,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let cfg = &state.model;
            if target_domain >= cfg.num_domains {
                bail!(
                    "target domain {target_domain} out of range (K={})",
                    cfg.num_domains
                );
            }
            if variants < 1 {
                bail!("need at least one variant");
            }
            let out = out.unwrap_or_else(|| default_out("sample"));
            let triple = (cfg.clone(), state.weights.clone(), state.train.clone());
            print_header(
                "sample",
                Some(&triple),
                &[
                    ("ckpt", ckpt.display().to_string()),
                    ("input", input.display().to_string()),
                    ("target_domain", target_domain.to_string()),
                    ("variants", variants.to_string()),
                    ("out", out.display().to_string()),
                    ("seed", seed.to_string()),
                ],
            );
            let mut paths: Vec<PathBuf> = if input.is_dir() {
                fs::read_dir(&input)
                    .with_context(|| format!("reading {}", input.display()))?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.is_file())
                    .collect()
            } else {
                vec![input.clone()]
            };
            paths.sort();
            if paths.is_empty() {
                bail!("no input images under {}", input.display());
            }
            let mut z_rng = RandomSource::new(seed, "sample-z");
            let mut rows = Vec::new();
            for p in &paths {
                let img = center_prepare(&load_image(p, cfg.in_channels)?, cfg.image_size);
                let outs = translate_images(
                    &state.generator,
                    cfg,
                    &vec![img.clone(); variants],
                    target_domain,
                    &mut z_rng,
                )?;
                let mut row = vec![img];
                row.extend(outs);
                rows.push(row);
            }
            fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let grid = image_grid(&rows);
            let path = out.join(format!("sample-d{target_domain}-seed{seed}.png"));
            save_png(&grid, &path)?;
            println!(
                "wrote {} ({} rows x {} columns)",
                path.display(),
                rows.len(),
                variants + 1
            );
        }

        Command::Evaluate {
            ckpt,
            data,
            out,
            n,
            pairs,
            seed,
            with_replacement,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let cfg = &state.model;
            let ds = load_folders(&data, cfg)?;
            if ds.num_domains() != cfg.num_domains {
                bail!(
                    "dataset has {} domains but the checkpoint expects {}",
                    ds.num_domains(),
                    cfg.num_domains
                );
            }
            let out = out.unwrap_or_else(|| default_out("evaluate"));
            let triple = (cfg.clone(), state.weights.clone(), state.train.clone());
            print_header(
                "evaluate",
                Some(&triple),
                &[
                    ("ckpt", ckpt.display().to_string()),
                    ("data", data.display().to_string()),
                    ("out", out.display().to_string()),
                    ("n", n.to_string()),
                    ("pairs", pairs.to_string()),
                    ("seed", seed.to_string()),
                    ("with_replacement", with_replacement.to_string()),
                ],
            );
            if !with_replacement {
                for d in &ds.domains {
                    if n > d.images.len() {
                        bail!(
                            "n={n} exceeds the {} images of domain `{}`; pass --with-replacement",
                            d.images.len(),
                            d.name
                        );
                    }
                }
            }
            let fx = FrozenConvExtractor::new(cfg.in_channels, FrozenConvExtractor::DEFAULT_SEED);
            fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let k = cfg.num_domains;
            let prepared: Vec<Vec<Tensor>> =
                (0..k).map(|d| prepared_domain_images(&ds, d)).collect();
            let mut csv = String::from("source,target,fid,diversity\n");
            let mut table = format!(
                "extractor {}  n {}  pairs {}  seed {}\nsource  target  fid         diversity\n",
                fx.id(),
                n,
                pairs,
                seed
            );
            for s in 0..k {
                for t in 0..k {
                    let stream = format!("eval/{s}->{t}");
                    let mut src_rng = RandomSource::new(seed, &format!("{stream}/src"));
                    let sources: Vec<Tensor> = (0..n)
                        .map(|_| prepared[s][src_rng.below(prepared[s].len())].clone())
                        .collect();
                    let generated = translate_images(
                        &state.generator,
                        cfg,
                        &sources,
                        t,
                        &mut RandomSource::new(seed, &format!("{stream}/z")),
                    )?;
                    let fid_val = fid(
                        &prepared[t],
                        &generated,
                        &fx,
                        n,
                        with_replacement,
                        &mut RandomSource::new(seed, &format!("{stream}/fid")),
                    )?;
                    let div = diversity_score(
                        &generated,
                        &fx,
                        pairs,
                        &mut RandomSource::new(seed, &format!("{stream}/pairs")),
                    )?;
                    csv.push_str(&format!("{s},{t},{fid_val:.6},{div:.6}\n"));
                    table.push_str(&format!("{s:<7} {t:<7} {fid_val:<11.6} {div:.6}\n"));
                    append_metric_record(
                        &out.join("metric-report.csv"),
                        &MetricRecord {
                            extractor_id: fx.id().to_owned(),
                            n,
                            num_pairs: pairs,
                            seed,
                            fid: fid_val,
                            diversity: div,
                        },
                    )?;
                }
            }
            fs::write(out.join("evaluation.csv"), &csv)
                .with_context(|| format!("writing under {}", out.display()))?;
            fs::write(out.join("evaluation.txt"), &table)
                .with_context(|| format!("writing under {}", out.display()))?;
            print!("{table}");
            println!("reports under {}", out.display());
        }

        Command::Ablate {
            config,
            data,
            out,
            steps,
            seed,
        } => {
            let (mut model, weights, mut tcfg) = resolve_config(config.as_deref())?;
            if let Some(seed) = seed {
                tcfg.seed = seed;
            }
            let out = out.unwrap_or_else(|| default_out("ablate"));
            let triple = (model.clone(), weights.clone(), tcfg.clone());
            print_header(
                "ablate",
                Some(&triple),
                &[
                    ("data", data.display().to_string()),
                    ("out", out.display().to_string()),
                    ("steps", steps.to_string()),
                ],
            );
            let ds = load_folders(&data, &model)?;
            if ds.num_domains() != model.num_domains {
                bail!(
                    "dataset has {} domains but the config expects {}",
                    ds.num_domains(),
                    model.num_domains
                );
            }
            fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let fx = FrozenConvExtractor::new(
                model.in_channels,
                FrozenConvExtractor::DEFAULT_SEED,
            );
            let d1_prepared = prepared_domain_images(&ds, 1);
            let first_source = center_prepare(&ds.domains[0].images[0], ds.image_size);
            let mut csv = String::from("backbone,lambda_latent,fid,diversity\n");
            let mut failed = false;
            for backbone in [Backbone::Unet, Backbone::Resnet] {
                for lambda in [0.5, 5.0, 10.0] {
                    model.backbone = backbone;
                    let cell_weights = LossWeights {
                        lambda_latent: lambda,
                        ..weights.clone()
                    };
                    let cell_dir = out.join(format!("cell-{backbone}-lat{lambda}"));
                    let row = run_ablation_cell(
                        &model,
                        &cell_weights,
                        &tcfg,
                        &ds,
                        &cell_dir,
                        steps,
                        &fx,
                        &d1_prepared,
                        &first_source,
                    );
                    match row {
                        Ok((fid_val, div)) => {
                            csv.push_str(&format!(
                                "{backbone},{lambda},{fid_val:.6},{div:.6}\n"
                            ));
                        }
                        Err(e) => {
                            eprintln!("cell {backbone}/{lambda} failed: {e:#}");
                            csv.push_str(&format!("{backbone},{lambda},failed,failed\n"));
                            failed = true;
                        }
                    }
                    // Partial results survive an aborted later cell.
                    fs::write(out.join("ablation.csv"), &csv)
                        .with_context(|| format!("writing under {}", out.display()))?;
                }
            }
            let mut table = String::from("backbone  lambda_latent  fid         diversity\n");
            for line in csv.lines().skip(1) {
                let cells: Vec<&str> = line.split(',').collect();
                table.push_str(&format!(
                    "{:<9} {:<14} {:<11} {}\n",
                    cells[0], cells[1], cells[2], cells[3]
                ));
            }
            fs::write(out.join("ablation.txt"), &table)
                .with_context(|| format!("writing under {}", out.display()))?;
            print!("{table}");
            if failed {
                bail!("one or more ablation cells aborted; partial results kept");
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_ablation_cell(
    model: &ModelConfig,
    weights: &LossWeights,
    tcfg: &TrainConfig,
    ds: &Dataset,
    cell_dir: &Path,
    steps: u64,
    fx: &FrozenConvExtractor,
    d1_prepared: &[Tensor],
    first_source: &Tensor,
) -> Result<(f64, f64)> {
    let mut state = TrainState::new(model.clone(), weights.clone(), tcfg.clone())?;
    train(
        &mut state,
        ds,
        cell_dir,
        &TrainOptions {
            max_steps: Some(steps),
        },
    )?;
    let n_eval = 256;
    let mut src_rng = RandomSource::new(tcfg.seed, "ablate/src");
    let d0 = &ds.domains[0].images;
    let sources: Vec<Tensor> = (0..n_eval)
        .map(|_| center_prepare(&d0[src_rng.below(d0.len())], ds.image_size))
        .collect();
    let generated = translate_images(
        &state.generator,
        model,
        &sources,
        1,
        &mut RandomSource::new(tcfg.seed, "ablate/z"),
    )?;
    let fid_val = fid(
        d1_prepared,
        &generated,
        fx,
        n_eval,
        true,
        &mut RandomSource::new(tcfg.seed, "ablate/fid"),
    )?;
    let variants = translate_images(
        &state.generator,
        model,
        &vec![first_source.clone(); 64],
        1,
        &mut RandomSource::new(tcfg.seed, "ablate/variants"),
    )?;
    let div = diversity_all_pairs(&variants, fx)?;
    Ok((fid_val, div))
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
