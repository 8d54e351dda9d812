use std::io::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use stairiqa::data::{
    five_crop_batch, gen_synthetic_db, load_manifest, score_aggregate, split_by_groups, Dataset, DatasetManifest,
    ImageLoader, ManifestEntry, PpmLoader, PreprocessConfig, SyntheticSpec,
};
use stairiqa::experiment::{
    evaluate, head_predictions, run_cross_db, CrossDbEvent, HeadSelector, MetricsReport, MetricsRow, Provenance, Scores,
    TrainMode, ENSEMBLE,
};
use stairiqa::gradcheck::{run_grad_check, GradCheckOptions};
use stairiqa::tape::Fault;
use stairiqa::train::{run_imdt, train_single, validation_seed, EpochRecord, SubProblem, TrainOutcome, VALIDATION_FRACTION};
use stairiqa::{Model64, StaircaseModel};

use crate::config::{Overrides, RunConfig};
use crate::outputs::Outputs;
use crate::UsageExt;

pub fn gen_data(spec_path: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display())).usage()?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .with_context(|| format!("parsing spec {}", p.display()))
                .usage()?
        }
        None => SyntheticSpec::default(),
    };
    spec.validate().usage()?;
    let mut outputs = Outputs::create(out, "gen-data")?;
    outputs.write("spec.json", serde_json::to_string_pretty(&spec)? + "\n")?;
    let generated = gen_synthetic_db(&spec, out)?;
    println!("{:<12} {:>6} {:>10} {:>10}", "database", "images", "mos_min", "mos_max");
    for db in &generated {
        for e in &db.manifest.entries {
            outputs.register(&db.manifest.resolve(e));
        }
        outputs.register(&db.manifest_path);
        outputs.register(&db.sidecar_path);
        let (lo, hi) = db.manifest.score_range().unwrap_or((f64::NAN, f64::NAN));
        println!("{:<12} {:>6} {:>10.4} {:>10.4}", db.manifest.database_id, db.manifest.len(), lo, hi);
    }
    outputs.finish()?;
    Ok(())
}

/// Copy of `m` whose image paths are absolute, so it can live anywhere.
fn detached(m: &DatasetManifest) -> DatasetManifest {
    DatasetManifest {
        database_id: m.database_id.clone(),
        root: m.root.clone(),
        entries: m
            .entries
            .iter()
            .map(|e| ManifestEntry { image_path: m.resolve(e).to_string_lossy().into_owned(), ..e.clone() })
            .collect(),
    }
}

fn group_split(m: &DatasetManifest, fraction: f64, seed: u64) -> anyhow::Result<(DatasetManifest, DatasetManifest)> {
    let groups: Vec<&str> = m.entries.iter().map(|e| e.group_id.as_str()).collect();
    let (a, b) = split_by_groups(&groups, fraction, seed)?;
    Ok((m.subset(&a), m.subset(&b)))
}

struct Prepared {
    sub: SubProblem,
    test: Option<DatasetManifest>,
}

/// Splits each database into train/validation(/test), writes the split
/// manifests and loads the training images.
fn prepare_databases(cfg: &RunConfig, manifests: &[DatasetManifest], outputs: &mut Outputs) -> anyhow::Result<Vec<Prepared>> {
    let mut out = Vec::with_capacity(manifests.len());
    for (head, m) in manifests.iter().enumerate() {
        let m = detached(m);
        let (train, test) = match cfg.train_fraction {
            Some(f) => {
                let (a, b) = group_split(&m, f, cfg.split_seed())?;
                (a, Some(b))
            }
            None => (m, None),
        };
        let (fit, val) = group_split(&train, 1.0 - VALIDATION_FRACTION, validation_seed(cfg.train.seed))?;
        let id = &train.database_id;
        fit.write(&outputs.path(format!("splits/{id}_train.csv"))?)?;
        val.write(&outputs.path(format!("splits/{id}_val.csv"))?)?;
        if let Some(t) = &test {
            t.write(&outputs.path(format!("splits/{id}_test.csv"))?)?;
        }
        let fit = Dataset::load(&fit, &cfg.preprocess, &PpmLoader)?;
        let val = Dataset::load(&val, &cfg.preprocess, &PpmLoader)?;
        out.push(Prepared { sub: SubProblem::new(head, fit, val)?, test });
    }
    Ok(out)
}

fn report_epoch(r: &EpochRecord) {
    eprintln!(
        "loop {} {:<12} epoch {:>3}  loss {:>12.6}  criterion {:>8.4}{}",
        r.loop_index,
        r.db,
        r.epoch,
        r.mean_loss,
        r.criterion,
        if r.snapshot_taken { "  *" } else { "" }
    );
}

pub fn train(config: &Path, overrides: &Overrides) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config, overrides).usage()?;
    let manifests = cfg.load_manifests().usage()?;
    let setup = cfg.setup();
    let mut outputs = Outputs::create(&cfg.out, "train")?;
    outputs.write("resolved_config.json", cfg.to_json())?;
    let prepared = prepare_databases(&cfg, &manifests, &mut outputs)?;

    let log_path = outputs.path("train_log.jsonl")?;
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut sink = |r: &EpochRecord| -> stairiqa::Result<()> {
        report_epoch(r);
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(log, "{line}").and_then(|()| log.flush()).map_err(|e| stairiqa::Error::Io {
            path: log_path.clone(),
            source: e,
        })
    };

    // (database id, head inside its model, best model)
    let mut best: Vec<(String, usize, Model64)> = Vec::new();
    match setup.mode {
        TrainMode::Imdt => {
            let ids = prepared.iter().map(|p| p.sub.database_id.clone()).collect();
            let model = StaircaseModel::build(&setup.model_config(ids), setup.model_seed)?;
            let subs: Vec<SubProblem> = prepared.iter().map(|p| p.sub.clone()).collect();
            let TrainOutcome { final_model, best: snaps, .. } =
                run_imdt(model, &subs, &setup.train, &setup.preprocess, &mut sink)?;
            final_model.save(&outputs.path("final.ckpt")?)?;
            for (s, snap) in subs.iter().zip(snaps) {
                best.push((s.database_id.clone(), s.head, snap.model));
            }
        }
        TrainMode::Single => {
            for p in &prepared {
                let mut sub = p.sub.clone();
                sub.head = 0;
                let model =
                    StaircaseModel::build(&setup.model_config(vec![sub.database_id.clone()]), setup.model_seed)?;
                let out = train_single(model, &sub, &setup.train, &setup.preprocess, &mut sink)?;
                out.final_model.save(&outputs.path(format!("final_{}.ckpt", sub.database_id))?)?;
                let snap = out.best.into_iter().next().expect("one database");
                best.push((sub.database_id.clone(), 0, snap.model));
            }
        }
    }
    for (id, _, model) in &best {
        model.save(&outputs.path(format!("best_{id}.ckpt"))?)?;
    }

    let mut rows = Vec::new();
    for ((id, head, model), p) in best.iter().zip(&prepared) {
        if let Some(test) = &p.test {
            let data = Dataset::load(test, &setup.preprocess, &PpmLoader)?;
            let s = evaluate(model, &data, HeadSelector::Index(*head), &setup.preprocess)?;
            rows.push(MetricsRow { database: id.clone(), split: 0, head: id.clone(), srcc: s.srcc, plcc: s.plcc, count: s.count });
        }
    }
    if !rows.is_empty() {
        println!("{:<12} {:>6} {:>8} {:>8}", "test", "images", "srcc", "plcc");
        for r in &rows {
            println!("{:<12} {:>6} {:>8.4} {:>8.4}", r.database, r.count, r.srcc, r.plcc);
        }
        let provenance = Provenance {
            seed: cfg.seed,
            split_seeds: vec![cfg.split_seed()],
            config_hash: setup.config_hash(),
            checkpoint: None,
        };
        let report = MetricsReport::from_rows(rows, Vec::new(), provenance);
        outputs.write("test_report.json", report.to_json())?;
        outputs.write("test_report.csv", report.to_csv())?;
    }
    let index = outputs.finish()?;
    eprintln!("outputs indexed in {}", index.display());
    Ok(())
}

/// Preprocessing recorded in the checkpoint, or the defaults.
fn checkpoint_preprocess(model: &Model64) -> PreprocessConfig {
    model.preprocess().cloned().unwrap_or_else(|| {
        eprintln!("warning: checkpoint records no preprocessing; using defaults");
        PreprocessConfig::default()
    })
}

fn head_names(model: &Model64) -> String {
    model.config().head_ids.join(", ")
}

fn parse_head(model: &Model64, head: &str) -> anyhow::Result<HeadSelector> {
    if head == ENSEMBLE {
        return Ok(HeadSelector::Ensemble);
    }
    model
        .head_index(head)
        .map(HeadSelector::Index)
        .ok_or_else(|| anyhow!("unknown head `{head}`; available heads: {}, {ENSEMBLE}", head_names(model)))
        .usage()
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Model64> {
    StaircaseModel::load(path).with_context(|| format!("loading checkpoint {}", path.display())).usage()
}

pub fn eval(checkpoint: &Path, manifest: &Path, head: Option<&str>, out: Option<&Path>) -> anyhow::Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let selectors: Vec<(String, HeadSelector)> = match head {
        Some(h) => vec![(h.to_owned(), parse_head(&model, h)?)],
        None => model
            .config()
            .head_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), HeadSelector::Index(i)))
            .chain([(ENSEMBLE.to_owned(), HeadSelector::Ensemble)])
            .collect(),
    };
    let manifest = load_manifest(manifest).usage()?;
    if manifest.len() < 2 {
        bail!("`{}` has {} image(s); correlations need at least 2", manifest.database_id, manifest.len());
    }
    let pre = checkpoint_preprocess(&model);
    let data = Dataset::load(&manifest, &pre, &PpmLoader)?;
    let (per_head, ensemble) = head_predictions(&model, &data, &pre)?;
    let labels = data.labels();
    let mut rows = Vec::new();
    println!("{:<12} {:<12} {:>6} {:>8} {:>8}", "database", "head", "images", "srcc", "plcc");
    for (name, sel) in selectors {
        let pred = match sel {
            HeadSelector::Index(i) => &per_head[i],
            HeadSelector::Ensemble => &ensemble,
        };
        let s = Scores::of(pred, &labels)?;
        println!("{:<12} {:<12} {:>6} {:>8.4} {:>8.4}", data.database_id, name, s.count, s.srcc, s.plcc);
        rows.push(MetricsRow { database: data.database_id.clone(), split: 0, head: name, srcc: s.srcc, plcc: s.plcc, count: s.count });
    }
    if let Some(dir) = out {
        let provenance = Provenance {
            seed: model.seed(),
            split_seeds: Vec::new(),
            config_hash: String::new(),
            checkpoint: Some(checkpoint.display().to_string()),
        };
        let report = MetricsReport::from_rows(rows, Vec::new(), provenance);
        let mut outputs = Outputs::create(dir, "eval")?;
        outputs.write("eval_report.json", report.to_json())?;
        outputs.write("eval_report.csv", report.to_csv())?;
        outputs.finish()?;
    }
    Ok(())
}

pub fn score(checkpoint: &Path, image: &Path, head: Option<&str>) -> anyhow::Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let sel = match head {
        Some(h) => parse_head(&model, h)?,
        None if model.num_heads() == 1 => HeadSelector::Index(0),
        None => {
            return Err(anyhow!("model has several heads; pick one with --head: {}, {ENSEMBLE}", head_names(&model)))
                .usage()
        }
    };
    let pre = checkpoint_preprocess(&model);
    let img = PpmLoader.load(image).usage()?;
    let img = pre.prepare(&img).with_context(|| format!("preparing {}", image.display())).usage()?;
    let crops = five_crop_batch::<f64>(&img, &pre)?;
    let per_head = model.predict_all_heads(&crops)?;
    let aggregate = |h: usize| score_aggregate(&per_head[h]);
    let value = match sel {
        HeadSelector::Index(h) => aggregate(h)?,
        HeadSelector::Ensemble => {
            let all = (0..model.num_heads()).map(aggregate).collect::<stairiqa::Result<Vec<_>>>()?;
            all.iter().sum::<f64>() / all.len() as f64
        }
    };
    println!("{value}");
    Ok(())
}

pub fn grad_check(full: bool, fault: Option<Fault>) -> anyhow::Result<()> {
    let base = GradCheckOptions::default();
    let opts = GradCheckOptions { instances: if full { base.instances } else { 3 }, fault, ..base };
    let report = run_grad_check(&opts)?;
    println!("{:<24} {:>9} {:>14} {:>10}  result", "op", "instances", "max_rel_err", "tolerance");
    for r in &report.rows {
        println!(
            "{:<24} {:>9} {:>14.3e} {:>10.0e}  {}",
            r.name,
            r.instances,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    if !report.passed() {
        let failed: Vec<&str> = report.rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

pub fn cross_eval(config: &Path, overrides: &Overrides) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config, overrides).usage()?;
    let manifests = cfg.load_manifests().usage()?;
    if manifests.len() < 3 {
        return Err(anyhow!(
            "cross-database evaluation needs at least 3 databases (2 to train on, 1 held out); the config lists {}",
            manifests.len()
        ))
        .usage();
    }
    let mut outputs = Outputs::create(&cfg.out, "cross-eval")?;
    outputs.write("resolved_config.json", cfg.to_json())?;
    let results = run_cross_db(&cfg.setup(), &manifests, &PpmLoader, &mut |e| match e {
        CrossDbEvent::TrainingStarted { held_out } => eprintln!("training without {held_out}"),
        CrossDbEvent::TrainingFinished { held_out } => eprintln!("scoring {held_out}"),
    })?;

    let mut csv = String::from("held_out,head,srcc,plcc,count\n");
    println!("{:<12} {:<36} {:>9} {:>9}", "held_out", "head srcc", "ens_srcc", "ens_plcc");
    for r in &results {
        let heads: Vec<String> = r.heads.iter().map(|(id, s)| format!("{id}={:.4}", s.srcc)).collect();
        println!("{:<12} {:<36} {:>9.4} {:>9.4}", r.held_out, heads.join(" "), r.ensemble.srcc, r.ensemble.plcc);
        for (id, s) in r.heads.iter().chain([(ENSEMBLE.to_owned(), r.ensemble)].iter()) {
            csv.push_str(&format!("{},{},{},{},{}\n", r.held_out, id, s.srcc, s.plcc, s.count));
        }
    }
    outputs.write("cross_db.json", serde_json::to_string_pretty(&results)? + "\n")?;
    outputs.write("cross_db.csv", csv)?;
    outputs.finish()?;
    Ok(())
}
