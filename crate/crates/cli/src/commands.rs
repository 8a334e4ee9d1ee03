use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use sha2::{Digest, Sha256};

use ovrs_core::data::synth::synth_generate;
use ovrs_core::data::{load_manifest, load_split, read_image, read_mask, write_mask, Dataset};
use ovrs_core::pipeline::check_categories;
use ovrs_core::train::{read_run_log, train_loop, Record, RunDir};
use ovrs_core::{Checkpoint, ConfusionMatrix, MetricsReport, Model, RunConfig, Split, Trainer};

use crate::plot::{self, Series};
use crate::Common;

pub const SCRATCH_ENV: &str = "OVRS_SCRATCH";

/// An invocation error reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let is_usage = e.chain().any(|c| {
        c.downcast_ref::<Usage>().is_some() || c.downcast_ref::<ovrs_core::Error>().is_some_and(|e| e.is_usage())
    });
    if is_usage {
        2
    } else {
        1
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        for key in ["train.seed", "model.seed", "synth.seed"] {
            overrides.push(format!("{key}={seed}"));
        }
    }
    overrides.extend(common.overrides.iter().cloned());
    Ok(RunConfig::resolve(common.config.as_deref(), &overrides)?)
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    if let Some(p) = &common.out {
        return p.clone();
    }
    match std::env::var_os(SCRATCH_ENV) {
        Some(base) => PathBuf::from(base).join(command),
        None => PathBuf::from("runs").join(command),
    }
}

fn dataset(cfg: &mut RunConfig, manifest: Option<&PathBuf>) -> Result<Dataset> {
    if let Some(m) = manifest {
        cfg.data.manifest = Some(m.clone());
    }
    let path = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| usage("no dataset: pass --manifest or set data.manifest"))?;
    Ok(load_manifest(&path)?)
}

pub fn make_synth(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let out = out_dir(common, "make-synth");
    let manifest = synth_generate(&cfg.synth, &out)?;
    cfg.persist(&out)?;
    println!("wrote {} ({} images)", manifest.display(), cfg.synth.num_images);
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest; overrides `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

pub fn train(common: &Common, args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(common)?;
    let data = dataset(&mut cfg, args.manifest.as_ref())?;
    let names = data.registry.names().to_vec();
    cfg.train.ignore_index = data.ignore_index;
    let mut trainer = match &args.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.categories != names {
                return Err(ovrs_core::Error::IncompatibleRegistry(format!(
                    "checkpoint was trained on {:?}, dataset has {:?}",
                    ckpt.categories, names
                ))
                .into());
            }
            cfg.model = ckpt.model.clone();
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            cfg.train.validate(&cfg.model)?;
            t.optimizer.config = cfg.train.optimizer();
            t.config = cfg.train.clone();
            eprintln!("resuming at iteration {}", t.iteration);
            t
        }
        None => Trainer::new(Model::new(cfg.model.clone())?, cfg.train.clone(), names)?,
    };
    let train_set = load_split(&data, Split::Train, cfg.train.image_side)?;
    let val_set = load_split(&data, Split::Val, cfg.train.image_side)?;
    let out = out_dir(common, "train");
    let run = RunDir::new(&out)?;
    cfg.persist(&out)?;
    let every = (cfg.train.max_iterations / 20).max(1);
    let result = train_loop(&mut trainer, &train_set, &val_set, Some(&run), &mut |r| match r {
        Record::Step { iteration, loss, wall_time, .. } if iteration % every == 0 => {
            eprintln!("iter {iteration:>7}  loss {loss:.4}  {wall_time:.1}s");
        }
        Record::Eval(e) => eprintln!(
            "iter {:>7}  {:<5} mIoU {}  fwIoU {}  mACC {}",
            e.iteration,
            e.split.to_string(),
            ovrs_core::metrics::pct(e.miou),
            ovrs_core::metrics::pct(e.fwiou),
            ovrs_core::metrics::pct(e.macc)
        ),
        _ => {}
    })?;
    println!(
        "finished at iteration {}{}; checkpoint {}",
        result.checkpoint.iteration,
        if result.stopped_early { " (target reached)" } else { "" },
        run.last_path().display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset manifest; overrides `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: Split,
    /// Score saved index masks (`<sample id>.png`) instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<()> {
    let mut cfg = resolve(common)?;
    let data = dataset(&mut cfg, args.manifest.as_ref())?;
    let samples = data.split(args.split);
    if samples.is_empty() {
        return Err(usage(format!("the {} split is empty", args.split)));
    }
    let names = data.registry.names().to_vec();
    let mut cm = ConfusionMatrix::new(names.len());
    match (&args.predictions, &args.checkpoint) {
        (Some(dir), _) => {
            for s in &samples {
                let path = dir.join(format!("{}.png", s.id));
                let pred = read_mask(&path)?;
                cm.accumulate(&pred, &read_mask(&s.mask)?, data.ignore_index)
                    .with_context(|| format!("scoring {}", path.display()))?;
            }
        }
        (None, Some(ckpt)) => {
            let ckpt = Checkpoint::load(ckpt)?;
            let model = model_from(&ckpt)?;
            let classes = model.class_embeddings(&names)?;
            for s in &samples {
                let pred = model.predict_labels(&read_image(&s.image)?, &classes, ckpt.train.image_side)?;
                cm.accumulate(&pred, &read_mask(&s.mask)?, data.ignore_index)
                    .with_context(|| format!("scoring {}", s.id))?;
            }
        }
        (None, None) => return Err(usage("eval needs --checkpoint or --predictions")),
    }
    let report = MetricsReport::from_confusion(&cm, &names)?;
    let out = out_dir(common, "eval");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("metrics.csv"), &report.to_csv())?;
    write(&out.join("metrics.txt"), &report.to_text())?;
    cfg.persist(&out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn model_from(ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(ckpt.model.clone())?;
    ckpt.restore_params(model.params_mut())?;
    Ok(model)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Comma-separated category names; defaults to the training categories.
    #[arg(long)]
    pub categories: Option<String>,
}

/// Display colour for a category, stable across runs and orderings.
pub fn palette_color(name: &str) -> [u8; 3] {
    let h = Sha256::digest(name.as_bytes());
    [h[0], h[1], h[2]]
}

pub fn predict(common: &Common, args: &PredictArgs) -> Result<()> {
    let cfg = resolve(common)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let names: Vec<String> = match &args.categories {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => ckpt.categories.clone(),
    };
    check_categories(&names)?;
    let image = read_image(&args.image)?;
    let model = model_from(&ckpt)?;
    let classes = model.class_embeddings(&names)?;
    let labels = model.predict_labels(&image, &classes, ckpt.train.image_side)?;

    let out = out_dir(common, "predict");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let stem = args
        .image
        .file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    write_mask(&out.join(format!("{stem}_index.png")), &labels)?;
    let colors: Vec<[u8; 3]> = names.iter().map(|n| palette_color(n)).collect();
    let rgb: Vec<u8> = labels.data().iter().flat_map(|&l| colors[usize::from(l)]).collect();
    let color_path = out.join(format!("{stem}_color.png"));
    image::RgbImage::from_raw(labels.width() as u32, labels.height() as u32, rgb)
        .expect("buffer matches dimensions")
        .save(&color_path)
        .with_context(|| format!("writing {}", color_path.display()))?;
    let legend: Vec<serde_json::Value> = names
        .iter()
        .zip(&colors)
        .enumerate()
        .map(|(i, (n, c))| serde_json::json!({ "index": i, "name": n, "color": c }))
        .collect();
    write(
        &out.join(format!("{stem}_legend.json")),
        &serde_json::to_string_pretty(&legend)?,
    )?;
    cfg.persist(&out)?;
    println!("wrote {}", color_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run directories or `run_log.jsonl` files.
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
}

pub fn plot_metrics(common: &Common, args: &PlotArgs) -> Result<()> {
    let cfg = resolve(common)?;
    let mut runs = Vec::new();
    for (i, p) in args.logs.iter().enumerate() {
        let file = if p.is_dir() { p.join(RunDir::LOG) } else { p.clone() };
        if !file.is_file() {
            return Err(usage(format!("no run log at {}", file.display())));
        }
        let label = file
            .parent()
            .and_then(|d| d.file_name())
            .map_or_else(|| format!("run{i}"), |n| n.to_string_lossy().into_owned());
        let label = if runs.iter().any(|(l, _): &(String, _)| *l == label) {
            format!("{label}#{i}")
        } else {
            label
        };
        runs.push((label, read_run_log(&file)?));
    }

    let mut loss_csv = String::from("run,iteration,loss,lr,wall_time\n");
    let mut metric_csv = String::from("run,iteration,split,miou,fwiou,macc\n");
    let mut loss_series = Vec::new();
    let mut miou_series = Vec::new();
    for (label, records) in &runs {
        let mut loss = Vec::new();
        let mut evals: Vec<(Split, Vec<(f64, f64)>)> = Vec::new();
        for r in records {
            match r {
                Record::Step { iteration, loss: l, lr, wall_time, .. } => {
                    loss_csv.push_str(&format!("{label},{iteration},{l},{lr},{wall_time}\n"));
                    loss.push((*iteration as f64, *l));
                }
                Record::Eval(e) => {
                    metric_csv.push_str(&format!(
                        "{label},{},{},{},{},{}\n",
                        e.iteration, e.split, e.miou, e.fwiou, e.macc
                    ));
                    match evals.iter_mut().find(|(s, _)| *s == e.split) {
                        Some((_, pts)) => pts.push((e.iteration as f64, e.miou * 100.0)),
                        None => evals.push((e.split, vec![(e.iteration as f64, e.miou * 100.0)])),
                    }
                }
            }
        }
        loss_series.push(Series {
            label: label.clone(),
            points: loss,
        });
        for (split, points) in evals {
            miou_series.push(Series {
                label: format!("{label} {split}"),
                points,
            });
        }
    }

    let out = out_dir(common, "plot-metrics");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("loss.csv"), &loss_csv)?;
    write(&out.join("metrics.csv"), &metric_csv)?;
    plot::line_chart(&out.join("loss.svg"), "training loss", "loss", &loss_series)?;
    plot::line_chart(&out.join("miou.svg"), "mIoU", "mIoU (%)", &miou_series)?;
    cfg.persist(&out)?;
    println!("wrote plots and CSV to {}", out.display());
    Ok(())
}
