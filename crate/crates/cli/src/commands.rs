use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use octuplet::eval::verify::{evaluate, EvalMode, EvalOptions, VerificationReport};
use octuplet::experiment::{grid_csv, grid_markdown, margin_batch_cells, metric_cells, run_grid, term_mask_cells, GridData};
use octuplet::io::{read_kv_file, save_png, write_json, write_text, Checkpoint, DirectorySource, ImageSource};
use octuplet::seeds::{derive_seed, tag};
use octuplet::synth::{generate, SynthConfig};
use octuplet::training::{fine_tune, pretrain_classifier, toy_backbone, FineTuneConfig, PretrainConfig, Validation};
use octuplet::{degrade_image, generate_pairs, Error, FeatureExtractor, IdentityPool, PairProtocol, ResolutionSampler, ToyBackbone};
use serde_json::{json, Value};

use crate::args::*;
use crate::plots;

const MANIFEST_VERSION: u32 = 1;

fn require_path(path: &Path, what: &str) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} '{}' does not exist", path.display())))
    }
}

fn environment() -> Value {
    json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "threads": rayon::current_num_threads(),
    })
}

fn write_manifest(out: &Path, command: &str, seed: u64, config: Value, inputs: Value) -> Result<(), Error> {
    let manifest = json!({
        "schema_version": MANIFEST_VERSION,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "environment": environment(),
    });
    write_json(&out.join("manifest.json"), &manifest)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Config file values overlaid with command-line flags.
fn train_config(flags: &TrainFlags) -> Result<FineTuneConfig, Error> {
    let mut values = match &flags.config {
        Some(path) => {
            require_path(path, "config file")?;
            read_kv_file(path)?
        }
        None => BTreeMap::new(),
    };
    values.extend(flags.overrides());
    let mut cfg = FineTuneConfig::default();
    cfg.apply(&values)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_pool(data: &DataFlags) -> Result<IdentityPool, Error> {
    require_path(&data.data, "dataset root")?;
    let pool = match &data.manifest {
        Some(m) => {
            require_path(m, "dataset manifest")?;
            IdentityPool::from_manifest(m)?
        }
        None => IdentityPool::from_directory(&data.data)?,
    };
    if pool.image_count() == 0 {
        return Err(Error::Config(format!("no images found below '{}'", data.data.display())));
    }
    Ok(pool)
}

fn initial_model(model: &ModelFlags, seed: u64) -> Result<ToyBackbone, Error> {
    match &model.checkpoint {
        Some(path) => {
            require_path(path, "checkpoint")?;
            Ok(Checkpoint::load(path)?.backbone)
        }
        None => toy_backbone(model.dim, derive_seed(seed, &[tag::INIT])),
    }
}

fn model_input(model: &ModelFlags) -> Value {
    match &model.checkpoint {
        Some(p) => json!({ "checkpoint": path_str(p) }),
        None => json!({ "toy_backbone": { "dim": model.dim } }),
    }
}

fn seed_map(seed: u64) -> BTreeMap<String, u64> {
    [
        ("root", seed),
        ("init", derive_seed(seed, &[tag::INIT])),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn finetune(args: FinetuneArgs) -> Result<()> {
    let cfg = train_config(&args.train)?;
    let pool = load_pool(&args.data)?;
    let source = DirectorySource::new(&args.data.data);
    let model = initial_model(&args.model, cfg.seed)?;

    let val_protocol = match &args.val_protocol {
        Some(p) => {
            require_path(p, "validation protocol")?;
            Some(PairProtocol::read(p)?)
        }
        None => None,
    };
    let val_root = args.val_data.clone().unwrap_or_else(|| args.data.data.clone());
    let val_source = DirectorySource::new(&val_root);
    let validation = val_protocol.as_ref().map(|protocol| Validation {
        protocol,
        source: &val_source,
    });

    let inputs = json!({
        "data": path_str(&args.data.data),
        "manifest": args.data.manifest.as_deref().map(path_str),
        "model": model_input(&args.model),
        "val_protocol": args.val_protocol.as_deref().map(path_str),
        "val_data": args.val_protocol.as_ref().map(|_| path_str(&val_root)),
    });
    write_manifest(&args.out, "finetune", cfg.seed, cfg.to_json(), inputs)?;

    let outcome = match fine_tune(model, &pool, &source, validation, &cfg) {
        Ok(o) => o,
        Err(e @ Error::Numeric(_)) => {
            let dump = json!({
                "error": e.to_string(),
                "seed": cfg.seed,
                "config": cfg.to_json(),
            });
            write_json(&args.out.join("diagnostic.json"), &dump)?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };

    write_text(&args.out.join("history.csv"), &outcome.history.to_csv())?;
    let last_step = outcome.history.steps.last().map_or(0, |s| s.step);
    let mut last = Checkpoint::new(outcome.model.clone(), cfg.to_json(), seed_map(cfg.seed));
    last.epoch = cfg.epochs;
    last.step = last_step;
    last.save(&args.out.join("checkpoint_last.json"))?;
    if let Some(best) = &outcome.best {
        let net = ToyBackbone::from_parts(outcome.model.config().clone(), best.params.clone())?;
        let mut ck = Checkpoint::new(net, cfg.to_json(), seed_map(cfg.seed));
        ck.epoch = best.epoch;
        ck.step = best.step;
        ck.save(&args.out.join("checkpoint_best.json"))?;
        println!("best validation accuracy {:.4} at step {}", best.accuracy, best.step);
    }
    if let Some(loss) = outcome.history.epoch_mean_loss.last() {
        println!("final epoch mean loss {loss:.6}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn read_protocol(path: &Path, flags: &ProtocolFlags) -> Result<PairProtocol, Error> {
    require_path(path, "protocol")?;
    match flags.protocol_format {
        ProtocolFormat::Native => PairProtocol::read(path),
        ProtocolFormat::Lfw => PairProtocol::read_lfw_pairs(path, &flags.lfw_ext),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "report".to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    require_path(&args.checkpoint, "checkpoint")?;
    require_path(&args.data, "image root")?;
    let mode: EvalMode = args.mode.parse()?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let source = DirectorySource::new(&args.data);
    let protocols = args
        .protocol
        .protocols
        .iter()
        .map(|p| read_protocol(p, &args.protocol).map(|proto| (p.clone(), proto)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut names: Vec<String> = protocols.iter().map(|(p, _)| stem(p)).collect();
    // disambiguate protocols that share a file stem
    for i in 0..names.len() {
        if names[..i].contains(&names[i]) {
            names[i] = format!("{}_{i}", names[i]);
        }
    }

    let mut written = Vec::new();
    for ((path, protocol), name) in protocols.iter().zip(&names) {
        let options = EvalOptions {
            far_targets: args.far.clone(),
            skip_unreadable: args.skip_unreadable,
            config: json!({
                "command": "evaluate",
                "checkpoint": path_str(&args.checkpoint),
                "checkpoint_seeds": ck.seeds,
                "checkpoint_config": ck.config,
                "protocol": path_str(path),
                "data": path_str(&args.data),
                "resolutions": args.resolutions,
                "mode": mode.to_string(),
            }),
        };
        let report = evaluate(&ck.backbone, protocol, &source, &args.resolutions, mode, &options)?;
        let json_path = args.out.join(format!("{name}.json"));
        write_text(&json_path, &report.to_json())?;
        write_text(&args.out.join(format!("{name}.csv")), &report.to_csv())?;
        if args.roc {
            for r in &report.results {
                let csv = report.roc_csv(r.resolution).expect("resolution present");
                write_text(&args.out.join(format!("{name}_roc_{}.csv", r.resolution)), &csv)?;
            }
        }
        for r in &report.results {
            println!(
                "{name} {mode} {:>3} px  accuracy {:.4} +- {:.4}  eer {:.4}",
                r.resolution, r.accuracy, r.accuracy_std, r.eer
            );
        }
        if !report.skipped.is_empty() {
            println!("{name}: skipped {} pairs with unreadable images", report.skipped.len());
        }
        written.push((json_path, name.clone()));
    }
    if args.plots {
        for (json_path, name) in &written {
            let report = read_report(json_path)?;
            plots::render(&[(name.clone(), report)], &args.out, name)?;
        }
    }
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let base = train_config(&args.train)?;
    let pool = load_pool(&args.data)?;
    let train_source = DirectorySource::new(&args.data.data);
    require_path(&args.protocol, "protocol")?;
    let protocol = PairProtocol::read(&args.protocol)?;
    let eval_root = args.eval_data.clone().unwrap_or_else(|| args.data.data.clone());
    require_path(&eval_root, "evaluation image root")?;
    let eval_source = DirectorySource::new(&eval_root);
    let model = initial_model(&args.model, base.seed)?;

    let mut base = base;
    base.validations_per_epoch = 0;
    let cells = match args.grid {
        Grid::Terms => term_mask_cells(&base),
        Grid::Metrics => metric_cells(&base),
        Grid::Margins => {
            let batches = if args.batch_sizes.is_empty() {
                vec![base.batch_size]
            } else {
                args.batch_sizes.clone()
            };
            margin_batch_cells(&base, &args.margins, &batches)
        }
    };
    for (label, cfg) in &cells {
        cfg.validate().map_err(|e| Error::Config(format!("cell {label}: {e}")))?;
    }

    let inputs = json!({
        "data": path_str(&args.data.data),
        "manifest": args.data.manifest.as_deref().map(path_str),
        "model": model_input(&args.model),
        "protocol": path_str(&args.protocol),
        "eval_data": path_str(&eval_root),
        "eval_resolutions": args.eval_resolutions,
        "cells": cells.iter().map(|(l, c)| json!({"label": l, "config": c.to_json()})).collect::<Vec<_>>(),
    });
    write_manifest(&args.out, "ablate", base.seed, base.to_json(), inputs)?;

    let data = GridData {
        pool: &pool,
        train_source: &train_source,
        protocol: &protocol,
        eval_source: &eval_source,
        resolutions: &args.eval_resolutions,
    };
    let outcome = run_grid(&model, data, &cells)?;

    write_text(&args.out.join("baseline.json"), &outcome.baseline.to_json())?;
    for (i, cell) in outcome.cells.iter().enumerate() {
        let dir = args.out.join("cells").join(format!("{i:02}_{}", sanitize(&cell.label)));
        write_text(&dir.join("report.json"), &cell.report.to_json())?;
        write_text(&dir.join("history.csv"), &cell.history.to_csv())?;
    }
    write_text(&args.out.join("grid.csv"), &grid_csv(&outcome.rows))?;
    let table = grid_markdown(&outcome.rows);
    write_text(&args.out.join("grid.md"), &table)?;
    write_json(
        &args.out.join("grid.json"),
        &json!({
            "schema_version": MANIFEST_VERSION,
            "seed": base.seed,
            "baseline": outcome.baseline.results.iter().map(|r| (r.resolution, r.accuracy)).collect::<Vec<_>>(),
            "rows": outcome.rows,
        }),
    )?;
    print!("{table}");
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

pub fn pairs(args: PairsArgs) -> Result<()> {
    let pool = load_pool(&args.data)?;
    let protocol = generate_pairs(&pool, args.genuine, args.imposter, args.folds, args.seed)?;
    protocol.write(&args.out)?;
    println!(
        "wrote {} pairs ({} genuine) in {} folds to {}",
        protocol.len(),
        protocol.genuine_count(),
        protocol.folds(),
        args.out.display()
    );
    Ok(())
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .is_some_and(|e| matches!(e.as_str(), "png" | "jpg" | "jpeg"))
}

pub fn degrade(args: DegradeArgs) -> Result<()> {
    require_path(&args.input, "input directory")?;
    if !args.format.eq_ignore_ascii_case("png") {
        return Err(Error::Config(format!("unsupported output format '{}', use png", args.format)).into());
    }
    let sampler = ResolutionSampler::new(args.resolutions.clone(), args.seed)?;
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(&args.input)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && is_image(e.path()))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    let source = DirectorySource::new(&args.input);
    for (index, file) in files.iter().enumerate() {
        let rel = file.strip_prefix(&args.input).expect("walked below input");
        let img = source.load(&rel.to_string_lossy())?;
        let low = degrade_image(&img, sampler.draw(index as u64))?;
        save_png(&args.out.join(rel).with_extension("png"), &low)?;
    }
    println!("degraded {} images into {}", files.len(), args.out.display());
    Ok(())
}

fn read_report(path: &Path) -> Result<VerificationReport, Error> {
    require_path(path, "report")?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    VerificationReport::from_json(&text)
}

pub fn report(args: ReportArgs) -> Result<()> {
    if !args.labels.is_empty() && args.labels.len() != args.reports.len() {
        return Err(Error::Config("give one --label per --report or none".into()).into());
    }
    let mut reports = Vec::new();
    for (i, path) in args.reports.iter().enumerate() {
        let label = args.labels.get(i).cloned().unwrap_or_else(|| stem(path));
        reports.push((label, read_report(path)?));
    }
    let files = plots::render(&reports, &args.out, "report")?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        identities: args.identities,
        images_per_identity: args.images,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let data = generate(&cfg, "id")?;
    data.source.write_to(&args.out)?;
    println!("wrote {} images of {} identities to {}", data.source.len(), data.pool.len(), args.out.display());
    Ok(())
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let pool = load_pool(&args.data)?;
    let source = DirectorySource::new(&args.data.data);
    let mut net = toy_backbone(args.dim, derive_seed(args.seed, &[tag::INIT]))?;
    let cfg = PretrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: derive_seed(args.seed, &[tag::PRETRAIN]),
        ..PretrainConfig::default()
    };
    let report = pretrain_classifier(&mut net, &pool, &source, &cfg)?;
    for (e, (loss, acc)) in report.epoch_loss.iter().zip(&report.epoch_accuracy).enumerate() {
        println!("epoch {:>2}  loss {loss:.4}  accuracy {acc:.4}", e + 1);
    }
    let config = json!({
        "command": "pretrain",
        "data": path_str(&args.data.data),
        "dim": net.dim(),
        "pretrain": serde_json::to_value(&cfg).expect("config serializes"),
    });
    let mut ck = Checkpoint::new(net, config, seed_map(args.seed));
    ck.epoch = args.epochs;
    ck.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
