use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use dlanet::autodiff::{checkpoint, DType, ParamStore, Real};
use dlanet::dataset::{
    class_stats, generate_synthetic_facade, load_cloud, make_splits, save_cloud, AreaSet, CloudFormat, SplitMode, CLASS_NAMES,
};
use dlanet::evaluation::{ConfusionMatrix, Metrics};
use dlanet::geometry::PointCloud;
use dlanet::network::{predict, DlaNet};
use dlanet::rng::Prng;
use dlanet::training::{confusion, evaluate_full, Trainer};
use serde_json::json;

use crate::args::{EvalArgs, GenArgs, NetOverrides, PredictArgs, SelftestArgs, StatsArgs, TrainArgs, TrainOverrides};
use crate::checks;
use crate::error::{CliError, CliResult, Context};
use crate::manifest::{now_unix, FoldPlan, RunConfig, RunManifest};

pub const SEED_ENV: &str = "DLA_SEED";

/// Seed of area `i` (0-based) in a generated set.
pub fn area_seed(seed: u64, i: usize) -> u64 {
    Prng::derive(seed, i as u64).next_u64()
}

pub fn gen(args: &GenArgs) -> CliResult<()> {
    if args.areas == 0 {
        return Err(CliError::Usage("--areas must be at least 1".into()));
    }
    let areas = (0..args.areas)
        .map(|i| {
            let cloud = generate_synthetic_facade(area_seed(args.seed, i), args.points, None)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok((format!("Area{}", i + 1), cloud))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let set = AreaSet::new(areas).context(|| "assembling areas".into())?;
    for path in set.save(&args.out).context(|| format!("writing under {}", args.out.display()))? {
        println!("{}", path.display());
    }
    Ok(())
}

pub fn stats(args: &StatsArgs) -> CliResult<()> {
    let set = load_areas(&args.data)?;
    let stats = class_stats(&set.areas).context(|| "counting classes".into())?;
    print!("{}", stats.table());
    Ok(())
}

fn load_areas(dir: &Path) -> CliResult<AreaSet> {
    AreaSet::load(dir).context(|| format!("loading areas from {}", dir.display()))
}

fn apply_overrides(cfg: &mut RunConfig, net: &NetOverrides, train: &TrainOverrides) {
    let n = &mut cfg.net;
    if let Some(v) = net.pe_variant {
        n.pe_variant = v;
    }
    if let Some(v) = net.pe_bn {
        n.pe_bn = v;
    }
    if let Some(v) = net.sa_pe {
        n.sa_pe_placement = v;
    }
    if let Some(v) = net.sa_bn {
        n.sa_bn = v;
    }
    if let Some(v) = net.sa_aggregate {
        n.sa_aggregate = v;
    }
    if let Some(v) = net.ap_mode {
        n.ap_mode = v;
    }
    if net.no_rgb {
        n.set_rgb(false);
    }
    if let Some(v) = net.k_neighbors {
        n.k_neighbors = v;
    }
    if let Some(v) = net.dropout {
        n.dropout_p = v;
    }
    let t = &mut cfg.train;
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut t.epochs, train.epochs);
    set(&mut t.steps_per_epoch, train.steps_per_epoch);
    set(&mut t.batch_size, train.batch_size);
    set(&mut t.points_per_sample, train.points_per_sample);
    set(&mut t.eval_chunk, train.eval_chunk);
    set(&mut t.bn_refresh_passes, train.bn_refresh_passes);
    if let Some(v) = train.lr {
        t.lr0 = v;
    }
    if let Some(v) = train.lr_decay {
        t.lr_decay = v;
    }
    if let Some(v) = train.seed {
        t.seed = v;
    }
    if let Some(v) = train.precision {
        t.precision = v;
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Resolves the run from flags (or a manifest), writes `manifest.json`
/// before anything else, trains every fold and pools their test metrics.
pub fn train(args: &TrainArgs) -> CliResult<Metrics> {
    let manifest = match &args.manifest {
        Some(path) => {
            let mut m = RunManifest::load(path)?;
            m.out = args.out.clone();
            m.start_time_unix = now_unix();
            m
        }
        None => {
            let mut cfg = match &args.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            apply_overrides(&mut cfg, &args.net, &args.train);
            if let Some(seed) = env_seed()? {
                cfg.train.seed = seed;
            }
            let data = args.data.clone().expect("clap requires --data without --manifest");
            let split = args.split.clone().unwrap_or(SplitMode::KFold6);
            let set = load_areas(&data)?;
            let splits = make_splits(&set.names(), &split).map_err(|e| CliError::Usage(e.to_string()))?;
            RunManifest::new(cfg, data, &split, splits, args.out.clone(), args.parallel_folds)
        }
    };
    manifest.config.validate()?;
    fs::create_dir_all(&manifest.out).context(|| format!("creating {}", manifest.out.display()))?;
    manifest.save(&manifest.out.join("manifest.json"))?;
    run_manifest(&manifest)
}

fn run_manifest(m: &RunManifest) -> CliResult<Metrics> {
    let set = load_areas(&m.data)?;
    for f in &m.folds {
        for name in f.train.iter().chain(&f.test) {
            if set.get(name).is_none() {
                return Err(CliError::Usage(format!("area {name} not found under {}", m.data.display())));
            }
        }
    }
    let run = |i: usize, f: &FoldPlan| -> CliResult<ConfusionMatrix> {
        let mut cfg = m.config.clone();
        cfg.train.seed = f.seed;
        let dir = m.out.join(format!("fold{i}"));
        match cfg.train.precision {
            DType::F32 => run_fold::<f32>(&cfg, &set, f, &dir, i),
            DType::F64 => run_fold::<f64>(&cfg, &set, f, &dir, i),
        }
    };
    let matrices: Vec<ConfusionMatrix> = if m.parallel_folds {
        std::thread::scope(|s| {
            let handles: Vec<_> = m.folds.iter().enumerate().map(|(i, f)| s.spawn(move || run(i, f))).collect();
            handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect::<CliResult<Vec<_>>>()
        })?
    } else {
        m.folds.iter().enumerate().map(|(i, f)| run(i, f)).collect::<CliResult<Vec<_>>>()?
    };
    let mut pooled = ConfusionMatrix::new(m.config.net.n_class);
    for cm in &matrices {
        pooled.merge(cm).context(|| "pooling folds".into())?;
    }
    let tested: Vec<String> = m.folds.iter().flat_map(|f| f.test.clone()).collect();
    let metrics = write_metrics(&m.out, &pooled, &tested)?;
    print!("{}", metrics.table(&CLASS_NAMES));
    Ok(metrics)
}

fn run_fold<T: Real>(cfg: &RunConfig, set: &AreaSet, plan: &FoldPlan, dir: &Path, fold: usize) -> CliResult<ConfusionMatrix> {
    fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    let clouds: Vec<PointCloud> = plan.train.iter().map(|n| set.get(n).expect("checked").clone()).collect();
    let mut trainer = Trainer::<T>::new(&cfg.net, cfg.train.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let log_path = dir.join("train_log.ndjson");
    let mut log = BufWriter::new(File::create(&log_path).context(|| format!("creating {}", log_path.display()))?);
    trainer
        .fit(
            &clouds,
            &mut |r| {
                serde_json::to_writer(&mut log, r)?;
                log.write_all(b"\n")?;
                Ok(())
            },
            &mut |e| {
                eprintln!("fold {fold} epoch {:>3}  lr {:.3e}  loss {:.4}  train OA {:.3}", e.epoch, e.lr, e.mean_loss, e.oa);
                Ok(())
            },
        )
        .context(|| format!("training fold {fold}"))?;
    log.flush().context(|| format!("writing {}", log_path.display()))?;
    trainer.save(&dir.join("checkpoint.dlaw")).context(|| "saving checkpoint".into())?;
    let model = serde_json::to_string_pretty(cfg).context(|| "serialising model config".into())?;
    fs::write(dir.join("model.json"), model + "\n").context(|| "writing model.json".into())?;

    let mut cm = ConfusionMatrix::new(cfg.net.n_class);
    for name in &plan.test {
        let part = confusion(&trainer.net, &trainer.store, set.get(name).expect("checked"), &trainer.cfg)
            .context(|| format!("evaluating {name}"))?;
        cm.merge(&part).context(|| "merging".into())?;
    }
    write_metrics(dir, &cm, &plan.test)?;
    Ok(cm)
}

pub fn metrics_json(m: &Metrics, cm: &ConfusionMatrix, areas: &[String]) -> serde_json::Value {
    let per_class: Vec<_> = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| json!({ "class": name, "iou": m.per_class_iou[k], "acc": m.per_class_acc[k] }))
        .collect();
    let rows: Vec<&[u64]> = cm.counts.chunks(cm.n_class).collect();
    json!({
        "areas": areas,
        "points": cm.total(),
        "oa": m.oa,
        "miou": m.miou,
        "macc": m.macc,
        "per_class": per_class,
        "confusion": rows,
    })
}

/// `metrics.json` and `metrics.txt` in `dir`.
fn write_metrics(dir: &Path, cm: &ConfusionMatrix, areas: &[String]) -> CliResult<Metrics> {
    let m = cm.metrics().context(|| "computing metrics".into())?;
    write_json(&dir.join("metrics.json"), &metrics_json(&m, cm, areas))?;
    fs::write(dir.join("metrics.txt"), m.table(&CLASS_NAMES)).context(|| "writing metrics.txt".into())?;
    Ok(m)
}

fn write_json(path: &Path, v: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).context(|| "serialising".into())?;
    fs::write(path, text + "\n").context(|| format!("writing {}", path.display()))
}

/// A trained model: the configuration beside the checkpoint plus its weights.
struct Loaded<T: Real> {
    cfg: RunConfig,
    net: DlaNet,
    store: ParamStore<T>,
}

fn model_config(checkpoint: &Path, model: Option<&Path>) -> CliResult<RunConfig> {
    let path = match model {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("model.json"),
    };
    let cfg = RunConfig::load(&path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_model<T: Real>(mut cfg: RunConfig, checkpoint: &Path) -> CliResult<Loaded<T>> {
    cfg.train.precision = T::DTYPE;
    let (net, mut store) = DlaNet::init::<T>(&cfg.net, cfg.train.seed).context(|| "building the network".into())?;
    checkpoint::load::<T>(checkpoint)
        .and_then(|c| c.load_into(&mut store))
        .context(|| format!("loading {}", checkpoint.display()))?;
    Ok(Loaded { cfg, net, store })
}

pub fn eval(args: &EvalArgs) -> CliResult<Metrics> {
    let cfg = model_config(&args.checkpoint, args.model.as_deref())?;
    let set = load_areas(&args.data)?;
    let clouds = args
        .area
        .iter()
        .map(|a| {
            set.get(a)
                .ok_or_else(|| CliError::Usage(format!("area {a} not found (have: {})", set.names().join("|"))))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let dtype = checkpoint::peek_dtype(&args.checkpoint).context(|| format!("reading {}", args.checkpoint.display()))?;
    let cm = match dtype {
        DType::F32 => eval_with(load_model::<f32>(cfg, &args.checkpoint)?, &clouds)?,
        DType::F64 => eval_with(load_model::<f64>(cfg, &args.checkpoint)?, &clouds)?,
    };
    let m = cm.metrics().context(|| "computing metrics".into())?;
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.with_file_name(format!("eval_{}.json", args.area.join("_"))));
    write_json(&out, &metrics_json(&m, &cm, &args.area))?;
    print!("{}", m.table(&CLASS_NAMES));
    Ok(m)
}

fn eval_with<T: Real>(model: Loaded<T>, clouds: &[&PointCloud]) -> CliResult<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.cfg.net.n_class);
    for c in clouds {
        let part = confusion(&model.net, &model.store, c, &model.cfg.train).context(|| "evaluating".into())?;
        cm.merge(&part).context(|| "merging".into())?;
    }
    Ok(cm)
}

pub fn predict_cmd(args: &PredictArgs) -> CliResult<usize> {
    let cfg = model_config(&args.checkpoint, args.model.as_deref())?;
    let cloud = load_cloud(&args.input).context(|| format!("loading {}", args.input.display()))?;
    if cfg.net.use_rgb && cloud.colors.is_none() {
        return Err(CliError::Usage(format!(
            "{} has no colours but the model was trained with RGB input",
            args.input.display()
        )));
    }
    let dtype = checkpoint::peek_dtype(&args.checkpoint).context(|| format!("reading {}", args.checkpoint.display()))?;
    let labels = match dtype {
        DType::F32 => predict_with(load_model::<f32>(cfg, &args.checkpoint)?, &cloud)?,
        DType::F64 => predict_with(load_model::<f64>(cfg, &args.checkpoint)?, &cloud)?,
    };
    let n = labels.len();
    let labelled = PointCloud { labels: Some(labels), ..cloud };
    save_cloud(&labelled, &args.out, CloudFormat::PlyAscii).context(|| format!("writing {}", args.out.display()))?;
    println!("{n} points written to {}", args.out.display());
    Ok(n)
}

fn predict_with<T: Real>(model: Loaded<T>, cloud: &PointCloud) -> CliResult<Vec<u8>> {
    let logits = evaluate_full(&model.net, &model.store, cloud, &model.cfg.train).context(|| "predicting".into())?;
    Ok(predict(&logits))
}

pub fn selftest(args: &SelftestArgs) -> CliResult<()> {
    let mut failed = 0;
    for outcome in checks::selftest_suite(args.corrupt_gradient) {
        println!("{}", outcome.line());
        failed += !outcome.passed as usize;
    }
    if failed > 0 {
        return Err(CliError::Selftest(failed));
    }
    println!("all checks passed");
    Ok(())
}
