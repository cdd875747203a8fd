use std::fs;
use std::path::Path;

use dualpl_core::bank::{load_bank, InstanceBank, BANK_MAGIC};
use dualpl_core::discrimination::instance_predict;
use dualpl_core::numerics::{DenseGrid, Rng};
use dualpl_core::regen::{regenerate, regenerate_pixel, InteractionStrategy, RegenMode};
use dualpl_core::selftrain::checkpoint::CHECKPOINT_MAGIC;
use dualpl_core::selftrain::{
    evaluate_miou, load_checkpoint, save_checkpoint, train as train_run, Checkpoint, RunConfig,
};
use dualpl_core::synthdata::{read_dataset, write_dataset, Benchmark};
use serde::Serialize;
use serde_json::json;

use crate::ablate::{comparison_csv, parse_seeds, summary_csv, variants, Axis, RunRow};
use crate::manifest::{
    read_config, read_manifest, validated, write_run_files, AblationRecord, Manifest, MANIFEST_FILE,
    RUN_MANIFEST_FILE,
};
use crate::{
    runtime, write_file, AblateArgs, CliError, CliResult, ConfigSource, EvalArgs, GenDataArgs,
    InspectArgs, RegenArgs, TrainArgs,
};

fn load_source(src: &ConfigSource) -> CliResult<(RunConfig, Option<Manifest>)> {
    match (&src.config, &src.manifest) {
        (Some(c), None) => Ok((read_config(c)?, None)),
        (None, Some(m)) => {
            let m = read_manifest(m)?;
            Ok((m.config.clone(), Some(m)))
        }
        _ => Err(CliError::Usage("give exactly one of --config and --manifest".into())),
    }
}

fn reject_overrides_with_manifest(m: &Option<Manifest>, any: bool) -> CliResult<()> {
    if m.is_some() && any {
        return Err(CliError::Usage("overrides cannot be combined with --manifest".into()));
    }
    Ok(())
}

fn expect_command(m: &Option<Manifest>, command: &str) -> CliResult<()> {
    match m {
        Some(m) if m.command != command => Err(CliError::Config(format!(
            "manifest was written by {:?}, not {command:?}",
            m.command
        ))),
        _ => Ok(()),
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub(crate) fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let (mut cfg, m) = load_source(&a.source)?;
    expect_command(&m, "gen-data")?;
    reject_overrides_with_manifest(&m, a.seed.is_some())?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    let cfg = validated(cfg)?;
    let data = cfg.data.generate()?;
    write_dataset(&a.out, &data)?;
    // manifest.json belongs to the dataset itself
    write_run_files(&a.out, &Manifest::new("gen-data", cfg), RUN_MANIFEST_FILE)?;
    println!(
        "wrote {} source + {} target images to {}",
        data.source.len(),
        data.target.len(),
        a.out.display()
    );
    Ok(())
}

fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> CliResult<Benchmark> {
    match dir {
        Some(d) => read_dataset(d).map_err(runtime(&d.display().to_string())),
        None => Ok(cfg.data.generate()?),
    }
}

pub(crate) fn train(a: TrainArgs) -> CliResult<()> {
    let (mut cfg, m) = load_source(&a.source)?;
    expect_command(&m, "train")?;
    let overrides = a.seed.is_some() || a.data_seed.is_some() || a.iterations.is_some() || a.data.is_some();
    reject_overrides_with_manifest(&m, overrides)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.data_seed {
        cfg.data.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    let cfg = validated(cfg)?;
    let data_dir = match &m {
        Some(m) => m.data_dir.clone(),
        None => a.data.clone(),
    };
    let data = load_data(&cfg, data_dir.as_deref())?;

    let mut manifest = Manifest::new("train", cfg.clone());
    manifest.data_dir = data_dir;
    write_run_files(&a.out, &manifest, MANIFEST_FILE)?;

    let outcome = train_run(&cfg, &data)?;
    write_file(&a.out.join("metrics.csv"), outcome.metrics.to_csv())?;
    let ck = Checkpoint {
        model: outcome.model,
        bank: outcome.bank,
        iteration: cfg.iterations as u64,
    };
    write_file(&a.out.join("checkpoint.bin"), save_checkpoint(&ck))?;
    if let Some(b) = &ck.bank {
        write_file(&a.out.join("bank.bin"), dualpl_core::bank::save_bank(b))?;
    }
    match outcome.metrics.final_miou() {
        Some(v) if v.is_finite() => println!("final target mIoU {v:.4}"),
        _ => println!("final target mIoU undefined"),
    }
    Ok(())
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(runtime(&path.display().to_string()))
}

pub(crate) fn eval(a: EvalArgs) -> CliResult<()> {
    let ck = load_checkpoint(&read_bytes(&a.checkpoint)?)?;
    let data = match (&a.data, &a.config) {
        (Some(d), _) => load_data(&RunConfig::desk(), Some(d))?,
        (None, Some(c)) => validated(read_config(c)?)?.data.generate()?,
        (None, None) => return Err(CliError::Usage("give --data or --config".into())),
    };
    if data.class_count() != ck.model.classes {
        return Err(CliError::Runtime(format!(
            "checkpoint has {} classes, dataset {}",
            ck.model.classes,
            data.class_count()
        )));
    }
    let set = if a.split == "source" { &data.source } else { &data.target };
    let ev = evaluate_miou(&ck.model, set);
    let report = json!({
        "split": a.split,
        "images": set.len(),
        "iteration": ck.iteration,
        "miou": if ev.miou.is_finite() { Some(ev.miou) } else { None },
        "iou": ev.iou,
    });
    let text = to_json(&report);
    print!("{text}");
    if let Some(p) = &a.out {
        write_file(p, text)?;
    }
    Ok(())
}

pub(crate) fn ablate(a: AblateArgs) -> CliResult<()> {
    let (mut base, m) = load_source(&a.source)?;
    expect_command(&m, "ablate")?;
    let (axis, seeds, vars) = match m.as_ref().and_then(|m| m.ablation.clone()) {
        Some(rec) => {
            reject_overrides_with_manifest(&m, a.values.is_some() || a.iterations.is_some())?;
            if let Some(g) = a.grid.as_deref().filter(|g| *g != rec.axis) {
                return Err(CliError::Usage(format!("manifest sweeps {}, not {g}", rec.axis)));
            }
            let axis = Axis::parse(&rec.axis)?;
            crate::ablate::check_variants(&base, axis, &rec.variants)?;
            (axis, rec.seeds, rec.variants)
        }
        None if m.is_some() => return Err(CliError::Config("manifest has no ablation record".into())),
        None => {
            let grid = a
                .grid
                .as_deref()
                .ok_or_else(|| CliError::Usage("--grid is required".into()))?;
            let axis = Axis::parse(grid)?;
            if let Some(n) = a.iterations {
                base.iterations = n;
            }
            base = validated(base)?;
            let seeds = parse_seeds(&a.seeds)?;
            (axis, seeds, variants(&base, axis, a.values.as_deref())?)
        }
    };

    let mut manifest = Manifest::new("ablate", base.clone());
    manifest.ablation = Some(AblationRecord {
        axis: axis.name().into(),
        seeds: seeds.clone(),
        variants: vars.clone(),
    });
    write_run_files(&a.out, &manifest, MANIFEST_FILE)?;

    let mut cached: Option<(dualpl_core::synthdata::BenchmarkConfig, Benchmark)> = None;
    let mut rows = Vec::new();
    for v in &vars {
        for &seed in &seeds {
            let mut cfg = v.config.clone();
            cfg.seed = seed;
            if cached.as_ref().is_none_or(|(c, _)| *c != cfg.data) {
                cached = Some((cfg.data.clone(), cfg.data.generate()?));
            }
            let data = &cached.as_ref().unwrap().1;
            let outcome = train_run(&cfg, data)?;
            let dir = a.out.join("runs").join(&v.name).join(format!("seed_{seed}"));
            fs::create_dir_all(&dir).map_err(runtime(&dir.display().to_string()))?;
            write_file(&dir.join("metrics.csv"), outcome.metrics.to_csv())?;
            let final_miou = outcome.metrics.final_miou().unwrap_or(f64::NAN);
            eprintln!("{} {} seed {seed}: final mIoU {final_miou:.4}", axis.name(), v.name);
            rows.push(RunRow {
                variant: v.name.clone(),
                seed,
                metrics: outcome.metrics,
            });
        }
    }
    write_file(&a.out.join("comparison.csv"), comparison_csv(axis, &rows))?;
    let summary = summary_csv(&rows);
    write_file(&a.out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn class_stats(bank: &InstanceBank) -> serde_json::Value {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norm = |a: &[f64]| dot(a, a).sqrt();
    let cosine = |a: &[f64], b: &[f64]| {
        let n = norm(a) * norm(b);
        if n > 0.0 { dot(a, b) / n } else { 0.0 }
    };
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let per_class: Vec<_> = (0..bank.classes())
        .map(|c| {
            let slots = bank.slots_of(c);
            let norms: Vec<f64> = slots.clone().map(|k| norm(bank.row(k))).collect();
            let mut within = Vec::new();
            for i in slots.clone() {
                for j in slots.clone().filter(|&j| j > i) {
                    within.push(cosine(bank.row(i), bank.row(j)));
                }
            }
            let mut across = Vec::new();
            for i in slots.clone() {
                for j in (0..bank.size()).filter(|j| !slots.contains(j)) {
                    across.push(cosine(bank.row(i), bank.row(j)));
                }
            }
            json!({
                "class": c,
                "slots": slots.len(),
                "first_slot": slots.start,
                "cursor": bank.cursors()[c],
                "norm_min": norms.iter().cloned().reduce(f64::min),
                "norm_max": norms.iter().cloned().reduce(f64::max),
                "mean_cosine_within": mean(&within),
                "mean_cosine_across": mean(&across),
            })
        })
        .collect();
    json!({
        "size": bank.size(),
        "classes": bank.classes(),
        "dim": bank.dim(),
        "updates_applied": bank.updates_applied(),
        "filled": bank.is_filled(),
        "per_class": per_class,
    })
}

pub(crate) fn inspect_bank(a: InspectArgs) -> CliResult<()> {
    let bytes = read_bytes(&a.path)?;
    let bank = if bytes.starts_with(BANK_MAGIC) {
        load_bank(&bytes)?
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        load_checkpoint(&bytes)?
            .bank
            .ok_or_else(|| CliError::Runtime("checkpoint carries no bank".into()))?
    } else {
        return Err(CliError::Runtime(format!("{}: neither a bank nor a checkpoint", a.path.display())));
    };
    print!("{}", to_json(&class_stats(&bank)));
    Ok(())
}

fn parse_floats(text: &str, what: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("bad {what} entry {s:?}"))))
        .collect()
}

fn mode(s: &str) -> RegenMode {
    if s == "scaling" { RegenMode::Scaling } else { RegenMode::Smoothing }
}

fn random_simplex(rng: &mut Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.normal().exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

#[derive(Serialize)]
struct ImageRegen {
    index: usize,
    height: usize,
    width: usize,
    classes: usize,
    slots: usize,
    bank_labels: Vec<u8>,
    truth: Vec<u8>,
    z: DenseGrid,
    q_alpha: DenseGrid,
    z_hat: DenseGrid,
    q_hat: DenseGrid,
    scale_fallback: Vec<bool>,
}

pub(crate) fn regen_demo(a: RegenArgs) -> CliResult<()> {
    let text = if let Some(ck_path) = &a.checkpoint {
        let cfg = validated(read_config(a.config.as_ref().expect("clap requires config"))?)?;
        let ck = load_checkpoint(&read_bytes(ck_path)?)?;
        let bank = ck
            .bank
            .ok_or_else(|| CliError::Runtime("checkpoint carries no bank".into()))?;
        let data = cfg.data.generate()?;
        let img = data.target.get(a.index).ok_or_else(|| {
            CliError::Config(format!("target index {} out of range ({} images)", a.index, data.target.len()))
        })?;
        let fwd = ck.model.forward(&img.image);
        let q = instance_predict(&fwd.features, &bank, cfg.tp)?;
        let out = regenerate(&fwd.probs, &q.grid, bank.labels(), &cfg.strategy)?;
        to_json(&ImageRegen {
            index: a.index,
            height: img.labels.height(),
            width: img.labels.width(),
            classes: bank.classes(),
            slots: bank.size(),
            bank_labels: bank.labels().to_vec(),
            truth: img.labels.data().to_vec(),
            z: fwd.probs,
            q_alpha: q.grid,
            z_hat: out.z_hat,
            q_hat: out.q_hat,
            scale_fallback: out.scale_fallback,
        })
    } else {
        let strategy = InteractionStrategy {
            z_mode: mode(&a.z_mode),
            q_mode: mode(&a.q_mode),
            phi: a.phi,
        };
        strategy.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let (z, q, labels) = match (&a.z, &a.random) {
            (Some(z), _) => {
                let labels: Vec<u8> = a
                    .labels
                    .as_deref()
                    .unwrap_or_default()
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("bad label {s:?}"))))
                    .collect::<CliResult<_>>()?;
                (parse_floats(z, "z")?, parse_floats(a.q_alpha.as_deref().unwrap_or_default(), "q_alpha")?, labels)
            }
            (None, Some(dims)) => {
                let (c, k) = (dims[0], dims[1]);
                if c == 0 || k < c || c > 256 {
                    return Err(CliError::Config("need 1 <= classes <= slots and classes <= 256".into()));
                }
                let mut rng = Rng::new(a.seed);
                let z = random_simplex(&mut rng, c);
                let q = random_simplex(&mut rng, k);
                // every class owns at least one slot
                let labels = (0..k).map(|i| if i < c { i as u8 } else { rng.below(c) as u8 }).collect();
                (z, q, labels)
            }
            (None, None) => {
                return Err(CliError::Usage("give --z/--q-alpha/--labels, --random or --checkpoint".into()))
            }
        };
        check_pixel_inputs(&z, &q, &labels)?;
        to_json(&regenerate_pixel(&z, &q, &labels, &strategy))
    };
    print!("{text}");
    if let Some(p) = &a.out {
        write_file(p, text)?;
    }
    Ok(())
}

fn check_pixel_inputs(z: &[f64], q: &[f64], labels: &[u8]) -> CliResult<()> {
    let on_simplex = |v: &[f64]| v.iter().all(|x| *x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-6;
    if !on_simplex(z) || !on_simplex(q) {
        return Err(CliError::Config("z and q_alpha must be probability vectors".into()));
    }
    if q.len() != labels.len() {
        return Err(CliError::Config(format!("{} instance entries but {} labels", q.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= z.len()) {
        return Err(CliError::Config(format!("label {l} outside {} classes", z.len())));
    }
    Ok(())
}
