//! Subcommand implementations.

use std::path::{Path, PathBuf};

use transclaw::ablation::{rows_to_csv, run_ablation, summarize, summary_to_csv, AblationData, AblationSpec, Axis, AxisValue};
use transclaw::data::{generate_dataset, load_mask, load_sample, save_mask, Dataset, Manifest, PhantomSpec, Sample, Split};
use transclaw::kernels::Exec;
use transclaw::metrics::{evaluate, evaluate_predictions, predict_all};
use transclaw::model::{Model, ModelConfig};
use transclaw::train::{load_checkpoint, load_checkpoint_for, save_checkpoint, train_loop, TrainConfig};
use transclaw::verify::{gradient_suite, render_table, SuiteOptions, OPERATORS};
use transclaw::{Error, Scalar, Tensor};

use crate::output::{create_dir, mask_to_ppm, write_file};
use crate::{
    AblateArgs, CliError, CliResult, EvalArgs, GenerateArgs, GradcheckArgs, ModelArgs, OptimArgs, Precision,
    PredictArgs, TrainArgs,
};

fn parse_extent(s: &str) -> CliResult<(usize, usize)> {
    match AxisValue::parse(Axis::Resolution, s)? {
        AxisValue::Resolution(h, w) => Ok((h, w)),
        _ => unreachable!("resolution parse yields a resolution"),
    }
}

fn parse_split(s: &str) -> CliResult<Split> {
    s.parse::<Split>()
        .map_err(|_| CliError::Usage(format!("unknown split `{s}` (train, val or test)")))
}

/// File stem of a sample entry, used to name per-image outputs.
fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map_or_else(|| path.to_string(), |s| s.to_string_lossy().into_owned())
}

/// Checks that a dataset's images fit a model.
fn check_dataset_fits(config: &ModelConfig, manifest: &Manifest, data: &Path) -> CliResult<()> {
    let want = (config.in_channels, config.height, config.width, config.num_classes);
    let have = (manifest.channels, manifest.height, manifest.width, manifest.num_classes);
    if want != have {
        return Err(Error::ConfigMismatch(format!(
            "{} holds {}-channel {}x{} images with {} classes but the model expects \
             {}-channel {}x{} images with {} classes",
            data.display(),
            have.0,
            have.1,
            have.2,
            have.3,
            want.0,
            want.1,
            want.2,
            want.3
        ))
        .into());
    }
    Ok(())
}

/// The model config from `--config` (or defaults sized to the dataset) with
/// the command-line overrides applied.
fn resolve_model(args: &ModelArgs, manifest: Option<&Manifest>) -> CliResult<ModelConfig> {
    let mut config = match (&args.config, manifest) {
        (Some(path), _) => ModelConfig::load(path)?,
        (None, Some(m)) => ModelConfig {
            height: m.height,
            width: m.width,
            in_channels: m.channels,
            num_classes: m.num_classes,
            ..ModelConfig::default()
        },
        (None, None) => ModelConfig::default(),
    };
    if let Some(s) = args.skips {
        config.skips = s;
    }
    if let Some(p) = args.patch {
        config.patch_size = p;
    }
    if let Some(r) = &args.resolution {
        (config.height, config.width) = parse_extent(r)?;
    }
    config.validate()?;
    Ok(config)
}

fn resolve_train(args: &OptimArgs, seed: u64) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(d.epochs),
        batch_size: args.batch_size.unwrap_or(d.batch_size),
        lr: args.lr.unwrap_or(d.lr),
        momentum: args.momentum.unwrap_or(d.momentum),
        weight_decay: args.weight_decay.unwrap_or(d.weight_decay),
        exempt_norm_and_position: !args.decay_all,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let (height, width) = parse_extent(&args.resolution)?;
    let spec = PhantomSpec {
        count: args.count,
        num_classes: args.classes,
        height,
        width,
        channels: args.channels,
        seed: args.seed,
        noise: args.noise,
        val_fraction: args.val_fraction,
        test_fraction: args.test_fraction,
    };
    create_dir(&args.out)?;
    let manifest = generate_dataset(&spec, &args.name, &args.out)?;
    let count = |s| manifest.entries(s).count();
    println!(
        "wrote {} phantoms ({} train, {} val, {} test) to {}",
        manifest.samples.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        args.out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let data = Dataset::open(&args.data)?;
    let config = resolve_model(&args.model, Some(data.manifest()))?;
    check_dataset_fits(&config, data.manifest(), &args.data)?;
    let cfg = resolve_train(&args.optim, args.seed)?;
    let train_set = data.require_split(Split::Train)?;
    let val_set = data.load_split(Split::Val)?;
    create_dir(&args.out)?;
    config.save(&args.out.join("config.json"))?;
    let train_json = serde_json::to_string_pretty(&cfg).expect("train config serializes");
    write_file(&args.out.join("train.json"), train_json + "\n")?;
    match args.precision {
        Precision::F32 => train_as::<f32>(args, config, &cfg, &train_set, &val_set),
        Precision::F64 => train_as::<f64>(args, config, &cfg, &train_set, &val_set),
    }
}

fn train_as<T: Scalar>(
    args: &TrainArgs,
    config: ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
) -> CliResult<()> {
    let model = Model::<T>::new(config, args.seed)?;
    let quiet = args.quiet;
    let epochs = cfg.epochs;
    let out = train_loop(model, train_set, val_set, cfg, |r| {
        if !quiet {
            println!(
                "epoch {:>3}/{epochs}  loss {:.5}  val_dice {}  val_hd {}",
                r.epoch,
                r.loss,
                fmt_opt(r.val_dice),
                fmt_opt(r.val_hd)
            );
        }
    })?;
    out.history.save(&args.out.join("history.csv"))?;
    let last = &out.last;
    save_checkpoint(
        &args.out.join("last.ckpt"),
        &last.model,
        Some(&last.optim),
        args.seed,
        epochs as u64,
    )?;
    save_checkpoint(&args.out.join("best.ckpt"), &out.best, None, args.seed, out.best_epoch as u64)?;
    if let Some(report) = &out.best_report {
        write_file(&args.out.join("val_report.csv"), report.to_csv())?;
    }
    println!(
        "best epoch {} (val_dice {}); wrote {}",
        out.best_epoch,
        fmt_opt(out.best_report.as_ref().and_then(|r| r.mean_dice)),
        args.out.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let data = Dataset::open(&args.data)?;
    let split = parse_split(&args.split)?;
    let samples = data.require_split(split)?;
    let manifest = data.manifest();
    let report = match (&args.checkpoint, &args.predictions) {
        (Some(ckpt), _) => match args.precision {
            Precision::F32 => eval_checkpoint::<f32>(args, ckpt, manifest, &samples)?,
            Precision::F64 => eval_checkpoint::<f64>(args, ckpt, manifest, &samples)?,
        },
        (None, Some(dir)) => {
            let preds = manifest
                .entries(split)
                .map(|e| {
                    let path = dir.join(format!("{}.mask", stem(&e.file)));
                    let (mask, h, w) = load_mask(&path)?;
                    if (h, w) != (manifest.height, manifest.width) {
                        return Err(Error::ConfigMismatch(format!(
                            "{} is {h}x{w} but the dataset is {}x{}",
                            path.display(),
                            manifest.height,
                            manifest.width
                        )));
                    }
                    if let Some(&bad) = mask.iter().find(|&&c| c as usize >= manifest.num_classes) {
                        return Err(Error::Corrupt {
                            what: "mask",
                            msg: format!(
                                "{}: class {bad} not below num_classes {}",
                                path.display(),
                                manifest.num_classes
                            ),
                        });
                    }
                    Ok(mask)
                })
                .collect::<Result<Vec<_>, _>>()?;
            evaluate_predictions(&preds, &samples, manifest.num_classes, Exec::default())?
        }
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --predictions".into())),
    };
    create_dir(&args.out)?;
    write_file(&args.out.join("report.csv"), report.to_csv())?;
    let text = report.to_text();
    write_file(&args.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn open_checkpoint<T: Scalar>(path: &Path, config: Option<&PathBuf>) -> CliResult<Model<T>> {
    let ck = match config {
        Some(c) => load_checkpoint_for::<T>(path, &ModelConfig::load(c)?)?,
        None => load_checkpoint::<T>(path)?,
    };
    Ok(ck.model)
}

fn eval_checkpoint<T: Scalar>(
    args: &EvalArgs,
    ckpt: &Path,
    manifest: &Manifest,
    samples: &[Sample],
) -> CliResult<transclaw::metrics::EvalReport> {
    let model = open_checkpoint::<T>(ckpt, args.config.as_ref())?;
    check_dataset_fits(model.config(), manifest, &args.data)?;
    Ok(evaluate(&model, samples, args.batch_size)?)
}

/// Reads a bare `[C, H, W]` tensor file or the image of a sample file.
fn read_image(path: &Path) -> CliResult<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = &bytes[..];
    let image = match Tensor::<f32>::read_binary(&mut r) {
        Ok(t) if r.is_empty() => t,
        Ok(_) => load_sample(path)?.image,
        Err(Error::Corrupt { what, msg }) => {
            return Err(Error::Corrupt {
                what,
                msg: format!("{}: {msg}", path.display()),
            }
            .into())
        }
        Err(e) => return Err(e.into()),
    };
    if image.rank() != 3 {
        return Err(Error::Corrupt {
            what: "image",
            msg: format!("{}: shape {:?} is not [C, H, W]", path.display(), image.shape()),
        }
        .into());
    }
    Ok(image)
}

pub fn predict(args: &PredictArgs) -> CliResult<()> {
    match args.precision {
        Precision::F32 => predict_as::<f32>(args),
        Precision::F64 => predict_as::<f64>(args),
    }
}

fn predict_as<T: Scalar>(args: &PredictArgs) -> CliResult<()> {
    let model = open_checkpoint::<T>(&args.checkpoint, None)?;
    let c = model.config();
    let (height, width) = (c.height, c.width);
    let (names, maps): (Vec<String>, Vec<Vec<u8>>) = match (&args.data, &args.split) {
        (Some(dir), Some(split)) => {
            let data = Dataset::open(dir)?;
            check_dataset_fits(c, data.manifest(), dir)?;
            let split = parse_split(split)?;
            let samples = data.require_split(split)?;
            let names = data.manifest().entries(split).map(|e| stem(&e.file)).collect();
            (names, predict_all(&model, &samples, 4)?)
        }
        _ => {
            if args.images.is_empty() {
                return Err(CliError::Usage("predict needs --images or --data with --split".into()));
            }
            let mut names = Vec::new();
            let mut maps = Vec::new();
            for path in &args.images {
                let image = read_image(path)?;
                if image.shape() != [c.in_channels, height, width] {
                    return Err(Error::ConfigMismatch(format!(
                        "{} has shape {:?} but the model expects [{}, {height}, {width}]",
                        path.display(),
                        image.shape(),
                        c.in_channels
                    ))
                    .into());
                }
                let batch = image.reshaped([1, c.in_channels, height, width])?;
                maps.push(model.predict(&batch.cast())?);
                names.push(stem(&path.to_string_lossy()));
            }
            (names, maps)
        }
    };
    create_dir(&args.out)?;
    for (name, map) in names.iter().zip(&maps) {
        save_mask(map, height, width, &args.out.join(format!("{name}.mask")))?;
        if args.color {
            write_file(&args.out.join(format!("{name}.ppm")), mask_to_ppm(map, height, width))?;
        }
    }
    println!("wrote {} masks to {}", maps.len(), args.out.display());
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    if args.precision == Some(Precision::F32) {
        eprintln!("note: gradient checks always run in 64-bit; --precision is ignored");
    }
    let corrupt = match &args.corrupt {
        Some(name) => Some(*OPERATORS.iter().find(|op| **op == name.as_str()).ok_or_else(|| {
            CliError::Usage(format!("unknown operator `{name}`; known: {}", OPERATORS.join(", ")))
        })?),
        None => None,
    };
    let rows = gradient_suite(&SuiteOptions {
        seeds: args.seeds,
        end_to_end: !args.skip_end_to_end,
        corrupt,
    })?;
    print!("{}", render_table(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", rows.len());
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}

pub fn ablate(args: &AblateArgs) -> CliResult<()> {
    let axis: Axis = args.axis.parse()?;
    let values = args
        .values
        .iter()
        .map(|v| AxisValue::parse(axis, v))
        .collect::<Result<Vec<_>, _>>()?;
    let dataset = args.data.as_deref().map(Dataset::open).transpose()?;
    let base = resolve_model(&args.model, dataset.as_ref().map(Dataset::manifest))?;
    let train = resolve_train(&args.optim, 0)?;
    let data = match &dataset {
        Some(d) => {
            let m = d.manifest();
            match (&m.generator, axis) {
                (Some(info), Axis::Resolution) => AblationData::Generated(info.spec.clone()),
                _ => {
                    check_dataset_fits(&base, m, d.root())?;
                    AblationData::Fixed {
                        train: d.require_split(Split::Train)?,
                        val: d.require_split(Split::Val)?,
                    }
                }
            }
        }
        None => AblationData::Generated(PhantomSpec {
            count: args.count,
            num_classes: base.num_classes,
            channels: base.in_channels,
            height: base.height,
            width: base.width,
            ..PhantomSpec::default()
        }),
    };
    let spec = AblationSpec {
        values,
        seeds: args.seeds.clone(),
        base,
        train,
    };
    let exec = if args.sequential { Exec::Sequential } else { Exec::default() };
    let rows = run_ablation(&spec, &data, exec)?;
    let summary = summarize(&rows);
    create_dir(&args.out)?;
    write_file(&args.out.join("ablation.csv"), rows_to_csv(&rows))?;
    let summary_csv = summary_to_csv(&summary);
    write_file(&args.out.join("summary.csv"), &summary_csv)?;
    print!("{summary_csv}");
    Ok(())
}
