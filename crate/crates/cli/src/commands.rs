use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tangentconv::engine::{read_checkpoint, write_checkpoint, Adam, Checkpoint};
use tangentconv::io::{generate_scene, read_ply, write_ply, ColorBy, PointCloud, SceneSpec};
use tangentconv::network::{receptive_field, Model};
use tangentconv::precompute::{build_hierarchy, read_hierarchy_for, write_hierarchy, Hierarchy, HierarchyConfig};
use tangentconv::train::{evaluate, predict_full, train, TrainError};

use crate::config::{NetworkSection, PlanSection, RunConfig};
use crate::error::{CliError, ErrorCode};
use crate::report;
use crate::Command;

/// Scalar type used for training and inference.
type Float = f32;

pub fn dispatch(cfg: &RunConfig, cmd: &Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Precompute {
            input,
            output,
            check_scaling,
        } => precompute(cfg, input, output, *check_scaling, out),
        Command::Train {
            inputs,
            checkpoint,
            out_dir,
            resume,
        } => cmd_train(cfg, inputs, checkpoint, out_dir, *resume, out),
        Command::Segment {
            checkpoint,
            input,
            output,
            plans,
        } => segment(checkpoint, input, output, plans.as_deref(), out),
        Command::Evaluate { pred, truth, out_dir } => cmd_evaluate(cfg, pred, truth, out_dir.as_deref(), out),
        Command::Benchmark {
            input,
            checkpoint,
            scaling,
            csv,
        } => benchmark(cfg, input, checkpoint.as_deref(), *scaling, csv.as_deref(), out),
        Command::GenScene {
            output,
            scene,
            room,
            noise,
        } => gen_scene(cfg, output, scene.as_deref(), *room, *noise, out),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed().as_secs_f64())
}

/// Every `step`-th point, starting at the first.
fn subsample(cloud: &PointCloud, step: usize) -> PointCloud {
    let idx: Vec<usize> = (0..cloud.len()).step_by(step.max(1)).collect();
    cloud.select(&idx)
}

fn precompute(cfg: &RunConfig, input: &Path, output: &Path, check_scaling: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let cloud = read_ply(input)?;
    let hcfg = cfg.plans.hierarchy();
    let (h, secs) = timed(|| build_hierarchy(&cloud, &hcfg));
    let h = h?;
    write_hierarchy(output, &h)?;
    writeln!(out, "points={} levels={} seconds={secs:.3}", cloud.len(), h.levels.len())?;
    for (k, n) in h.point_counts().iter().enumerate() {
        writeln!(out, "level {k}: {n} points, r={:.3} m, R={:.3} m", hcfg.pixel_size(k), hcfg.radius(k))?;
    }
    if check_scaling {
        let half = subsample(&cloud, 2);
        let (hh, half_secs) = timed(|| build_hierarchy(&half, &hcfg));
        hh?;
        let ratio = secs / half_secs.max(1e-9);
        let verdict = if ratio <= 2.5 { "ok" } else { "SUPERLINEAR" };
        writeln!(out, "scaling: {} -> {} points, time ratio {ratio:.2} (limit 2.5) {verdict}", half.len(), cloud.len())?;
    }
    Ok(())
}

fn model_meta(cfg: &RunConfig) -> Vec<(String, String)> {
    vec![
        ("network".into(), toml::to_string(&cfg.network).expect("serializes")),
        ("plans".into(), toml::to_string(&cfg.plans).expect("serializes")),
        ("seed".into(), cfg.seed.to_string()),
    ]
}

/// Network and plan settings a checkpoint was trained with.
fn checkpoint_setup(ck: &Checkpoint<Float>) -> Result<(NetworkSection, PlanSection), CliError> {
    let get = |key: &str| {
        ck.meta(key)
            .ok_or_else(|| CliError::new(ErrorCode::Parse, format!("checkpoint lacks `{key}` metadata")))
    };
    let bad = |e: toml::de::Error| CliError::new(ErrorCode::Parse, format!("checkpoint metadata: {}", e.message()));
    let network: NetworkSection = toml::from_str(get("network")?).map_err(bad)?;
    let plans: PlanSection = toml::from_str(get("plans")?).map_err(bad)?;
    Ok((network, plans))
}

fn load_model(path: &Path) -> Result<(Model<Float>, HierarchyConfig, Checkpoint<Float>), CliError> {
    let ck = read_checkpoint::<Float>(path)?;
    let (network, plans) = checkpoint_setup(&ck)?;
    let mut model = Model::<Float>::new(network.spec()?, 0)?;
    model
        .params
        .load_from(&ck.params)
        .map_err(|e| CliError::new(ErrorCode::Mismatch, e))?;
    Ok((model, plans.hierarchy(), ck))
}

fn labeled(path: &Path) -> Result<PointCloud, CliError> {
    let cloud = read_ply(path)?;
    if cloud.labels().is_none() {
        return Err(CliError::new(ErrorCode::Mismatch, format!("{} has no labels", path.display())));
    }
    Ok(cloud)
}

fn save_checkpoint(path: &Path, ck: &Checkpoint<Float>) -> Result<(), CliError> {
    // write then rename, so an interrupted run leaves the previous epoch intact
    let tmp = path.with_extension("tmp");
    write_checkpoint(&tmp, ck)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    inputs: &[PathBuf],
    checkpoint: &Path,
    out_dir: &Path,
    resume: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let scenes = inputs.iter().map(|p| labeled(p)).collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(out_dir)?;
    let hcfg = cfg.plans.hierarchy();
    let spec = cfg.network.spec()?;
    let loss_path = out_dir.join("loss.csv");
    let (mut model, mut adam, start) = if resume && checkpoint.exists() {
        let (model, ck_hcfg, ck) = load_model(checkpoint)?;
        if model.spec != spec || ck_hcfg != hcfg {
            return Err(CliError::new(
                ErrorCode::Mismatch,
                "checkpoint was trained with a different network or plan configuration",
            ));
        }
        let mut adam = Adam::new(cfg.train.lr);
        adam.t = ck.step;
        (model, adam, ck.epoch as usize)
    } else {
        if loss_path.exists() {
            std::fs::remove_file(&loss_path)?;
        }
        (Model::<Float>::new(spec.clone(), cfg.seed)?, Adam::new(cfg.train.lr), 0)
    };
    if start == 0 {
        // the untrained weights, so a zero-epoch or lr = 0 run still leaves a checkpoint
        let ck = Checkpoint {
            epoch: 0,
            step: 0,
            meta: model_meta(cfg),
            params: model.params.clone(),
        };
        save_checkpoint(checkpoint, &ck)?;
    }
    if start >= cfg.train.epochs {
        writeln!(out, "checkpoint already at epoch {start}; nothing to do")?;
        return Ok(());
    }
    writeln!(
        out,
        "training {} parameters on {} scenes, epochs {}..={}",
        model.params.scalar_count(),
        scenes.len(),
        start + 1,
        cfg.train.epochs
    )?;
    let meta = model_meta(cfg);
    let history = train(&mut model, &mut adam, &scenes, &hcfg, &cfg.train, start, |stats, model, adam| {
        let ck = Checkpoint {
            epoch: stats.epoch as u64,
            step: adam.t,
            meta: meta.clone(),
            params: model.params.clone(),
        };
        save_checkpoint(checkpoint, &ck).map_err(|e| TrainError::Callback(e.message))?;
        report::append_losses(&loss_path, std::slice::from_ref(stats)).map_err(|e| TrainError::Callback(e.message))
    })?;
    for s in &history {
        writeln!(out, "epoch {}: loss {:.6}", s.epoch, s.mean_loss)?;
    }
    let mut pairs = vec![
        ("command".to_string(), "train".to_string()),
        ("inputs".to_string(), inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")),
        ("seed".to_string(), cfg.seed.to_string()),
        ("deterministic".to_string(), cfg.deterministic.to_string()),
        ("threads".to_string(), cfg.threads.to_string()),
        ("signals".to_string(), spec.signals.code()),
        ("classes".to_string(), spec.classes.to_string()),
        ("scheme".to_string(), format!("{:?}", hcfg.interpolation)),
        ("receptive_field_m".to_string(), format!("{:.3}", receptive_field(&spec, hcfg.r0))),
        ("epochs".to_string(), cfg.train.epochs.to_string()),
        ("resumed_from_epoch".to_string(), start.to_string()),
        ("lr".to_string(), cfg.train.lr.to_string()),
        ("batch".to_string(), format!("{:?}", cfg.train.batch)),
        ("rotations".to_string(), cfg.train.rotations.to_string()),
        ("class_weights".to_string(), format!("{:?}", cfg.train.class_weights)),
        ("parameters".to_string(), model.params.scalar_count().to_string()),
    ];
    if let Some(last) = history.last() {
        pairs.push(("final_loss".to_string(), format!("{:e}", last.mean_loss)));
    }
    report::write_metadata(&out_dir.join("run.txt"), &pairs)?;
    Ok(())
}

fn hierarchy_for(cloud: &PointCloud, hcfg: &HierarchyConfig, plans: Option<&Path>) -> Result<Hierarchy, CliError> {
    match plans {
        Some(p) => Ok(read_hierarchy_for(p, cloud, hcfg)?),
        None => Ok(build_hierarchy(cloud, hcfg)?),
    }
}

fn segment(checkpoint: &Path, input: &Path, output: &Path, plans: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, hcfg, _) = load_model(checkpoint)?;
    let cloud = read_ply(input)?;
    let h = hierarchy_for(&cloud, &hcfg, plans)?;
    let pred = predict_full(&model, &h, cloud.positions())?;
    if let Some(truth) = cloud.labels() {
        let m = evaluate(&pred, truth, model.spec.classes)?;
        writeln!(out, "{}", report::metrics_line(&m))?;
    }
    let labeled = cloud.with_labels(pred)?;
    write_ply(&labeled, output, ColorBy::Labels)?;
    writeln!(out, "wrote {} labeled points to {}", labeled.len(), output.display())?;
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, pred: &Path, truth: &Path, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let p = labeled(pred)?;
    let t = labeled(truth)?;
    if p.len() != t.len() {
        return Err(CliError::new(
            ErrorCode::Mismatch,
            format!("{} predicted points but {} ground-truth points", p.len(), t.len()),
        ));
    }
    let m = evaluate(p.labels().unwrap(), t.labels().unwrap(), cfg.network.classes)?;
    writeln!(out, "{}", report::metrics_line(&m))?;
    for c in 0..m.confusion.classes {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        writeln!(out, "class {c}: acc={} iou={}", f(m.class_accuracy[c]), f(m.class_iou[c]))?;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report::write_confusion(&dir.join("confusion.csv"), &m)?;
        report::write_class_metrics(&dir.join("classes.csv"), &m)?;
    }
    Ok(())
}

/// One row of the timing table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub points: usize,
    pub prep_s: f64,
    pub fp_s: f64,
    /// Forward passes needed to cover the scan.
    pub passes: usize,
    pub full_s: f64,
    pub mem_mb: Option<f64>,
}

fn benchmark(
    cfg: &RunConfig,
    input: &Path,
    checkpoint: Option<&Path>,
    scaling: bool,
    csv_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cloud = read_ply(input)?;
    let (model, hcfg) = match checkpoint {
        Some(p) => {
            let (m, h, _) = load_model(p)?;
            (m, h)
        }
        None => (Model::<Float>::new(cfg.network.spec()?, cfg.seed)?, cfg.plans.hierarchy()),
    };
    let (h, prep_s) = timed(|| build_hierarchy(&cloud, &hcfg));
    let h = h?;
    let (logits, fp_s) = timed(|| model.predict_logits(&h));
    logits?;
    // the whole scan goes through the network at once
    let passes = 1;
    let row = BenchRow {
        points: cloud.len(),
        prep_s,
        fp_s,
        passes,
        full_s: fp_s * passes as f64,
        mem_mb: report::peak_rss_bytes().map(|b| b as f64 / (1024.0 * 1024.0)),
    };
    let mem = row.mem_mb.map_or("n/a".to_string(), |m| format!("{m:.1}"));
    writeln!(out, "{:>10} {:>10} {:>10} {:>10} {:>10}", "Points", "Prep(s)", "FP(s)", "Full(s)", "Mem(MB)")?;
    writeln!(
        out,
        "{:>10} {:>10.3} {:>10.3} {:>10.3} {:>10}",
        row.points, row.prep_s, row.fp_s, row.full_s, mem
    )?;
    writeln!(out, "passes per scan: {passes}; Mem is peak resident memory (approximate)")?;
    if let Some(p) = csv_path {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["points", "prep_s", "fp_s", "full_s", "mem_mb"])?;
        w.write_record([
            row.points.to_string(),
            format!("{:.6}", row.prep_s),
            format!("{:.6}", row.fp_s),
            format!("{:.6}", row.full_s),
            row.mem_mb.map_or(String::new(), |m| format!("{m:.1}")),
        ])?;
        w.flush()?;
    }
    if scaling {
        writeln!(out, "precompute scaling:")?;
        let mut last: Option<f64> = None;
        for step in [4, 2, 1] {
            let sub = subsample(&cloud, step);
            let (r, secs) = timed(|| build_hierarchy(&sub, &hcfg));
            r?;
            let ratio = last.map_or("-".to_string(), |l| format!("{:.2}", secs / l.max(1e-9)));
            writeln!(out, "{:>10} points {:>10.3} s  ratio {ratio}", sub.len(), secs)?;
            last = Some(secs);
        }
    }
    Ok(())
}

fn gen_scene(cfg: &RunConfig, output: &Path, scene: Option<&Path>, room: u64, noise: Option<f64>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut spec = match scene {
        Some(p) => SceneSpec::from_toml(&std::fs::read_to_string(p)?)?,
        None => SceneSpec::room(room, 0.005),
    };
    if let Some(s) = noise {
        spec = spec.with_noise(s);
    }
    let cloud = generate_scene(&spec, cfg.seed)?;
    write_ply(&cloud, output, ColorBy::Labels)?;
    writeln!(out, "wrote {} points to {}", cloud.len(), output.display())?;
    Ok(())
}
