//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own pass/fail line under `cargo test`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stairiqa::data::split::TRAIN_FRACTION;
use stairiqa::data::synth::synthetic_dataset;
use stairiqa::data::{five_crop, five_crop_offsets, gen_synthetic_db, split_by_groups, Dataset, PlanarImage, PpmLoader};
use stairiqa::data::{SyntheticDbSpec, SyntheticSpec};
use stairiqa::experiment::{
    ablation_grid, run_ablation, run_cross_db, run_split, run_splits_protocol, split_seeds, ExperimentSetup,
};
use stairiqa::gradcheck::{run_grad_check, GradCheckOptions};
use stairiqa::metrics::{plcc, srcc};
use stairiqa::train::{build_schedule, compute_epoch_budget, run_imdt, validate, SubProblem, TrainConfig};
use stairiqa::{BackboneConfig, Model64, ModelConfig, Tensor};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn default_datasets(setup: &ExperimentSetup) -> Vec<Dataset> {
    let spec = SyntheticSpec::default();
    spec.databases.iter().map(|d| synthetic_dataset(d, spec.seed, &setup.preprocess).unwrap()).collect()
}

fn gradient_oracle() -> Result<String, String> {
    let start = Instant::now();
    let report = run_grad_check(&GradCheckOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut worst_op: f64 = 0.0;
    let mut e2e = f64::NAN;
    for row in &report.rows {
        if row.name == "staircase_end_to_end" {
            e2e = row.max_rel_err;
            ensure(row.max_rel_err < 1e-3, || format!("end-to-end relative error {:.3e}", row.max_rel_err))?;
        } else {
            worst_op = worst_op.max(row.max_rel_err);
            ensure(row.max_rel_err < 1e-4, || format!("{} relative error {:.3e}", row.name, row.max_rel_err))?;
        }
    }
    ensure(e2e.is_finite(), || "end-to-end row missing".into())?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} ops, worst op err {worst_op:.2e}, end-to-end err {e2e:.2e}, {:.2}s",
        report.rows.len() - 1,
        elapsed.as_secs_f64()
    ))
}

fn staircase_reduction() -> Result<String, String> {
    let backbone = BackboneConfig::desk();
    let heads = vec!["a".to_owned(), "b".to_owned()];
    let n = backbone.num_stages() - 1;
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let plain = Model64::build(&ModelConfig::plain(backbone.clone(), heads.clone()), seed).unwrap();
        let masked = Model64::build(&ModelConfig::new(backbone.clone(), vec![false; n], heads.clone()), seed).unwrap();
        let mut zeroed = Model64::build(&ModelConfig::staircase(backbone.clone(), heads.clone()), seed).unwrap();
        for id in zeroed.path_param_ids() {
            zeroed.params_mut().get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = Tensor::from_fn(&[3, 3, 28, 28], |_| rng.random_range(-1.0..1.0));
        for head in 0..heads.len() {
            let want = plain.predict(&x, head).unwrap();
            for other in [&masked, &zeroed] {
                let got = other.predict(&x, head).unwrap();
                for (a, b) in want.iter().zip(&got) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("20 batches, max deviation {worst:.1e}"))
}

/// Budget by integer arithmetic: round half up of `n_max / n`, at least `e`.
fn budget_oracle(n: usize, n_max: usize, e: usize) -> usize {
    ((2 * n_max + n) / (2 * n)).max(e)
}

fn scheduler_oracle() -> Result<String, String> {
    let worked = [(586, 10073, 20, 20), (1162, 40000, 20, 34)];
    for (n_i, n_max, e, want) in worked {
        let got = compute_epoch_budget(n_i, n_max, e).unwrap();
        ensure(got == want, || format!("budget({n_i}, {n_max}, {e}) = {got}, expected {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..50 {
        let m = rng.random_range(1..=5);
        let loops = rng.random_range(1..=4);
        let e = rng.random_range(1..=5);
        let sizes: Vec<usize> = (0..m).map(|_| rng.random_range(1..=3000)).collect();
        let n_max = *sizes.iter().max().unwrap();
        let mut expected = Vec::new();
        for l in 1..=loops {
            for (i, &n) in sizes.iter().enumerate() {
                for epoch in 1..=budget_oracle(n, n_max, e) {
                    expected.push((l, i, epoch));
                }
            }
        }
        let got: Vec<_> =
            build_schedule(loops, e, &sizes).unwrap().iter().map(|s| (s.loop_index, s.database, s.epoch)).collect();
        ensure(got == expected, || format!("case {case}: sizes {sizes:?}, L={loops}, E={e}"))?;
    }
    Ok("worked values 20 and 34, 50 random schedules identical".into())
}

fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&o| o < v).count() as f64;
            let equal = x.iter().filter(|&&o| o == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

fn rank_metric_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut tied = 0;
    while checked < 1000 {
        let n = rng.random_range(2..=80);
        let discrete = checked % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| if discrete { rng.random_range(0..6) as f64 } else { rng.random_range(-50.0..50.0) })
                .collect()
        };
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
        if constant(&x) || constant(&y) {
            continue;
        }
        if discrete {
            tied += 1;
        }
        let s = srcc(&x, &y).map_err(|e| e.to_string())?;
        let p = plcc(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((s - brute_pearson(&brute_ranks(&x), &brute_ranks(&y))).abs());
        worst = worst.max((p - brute_pearson(&x, &y)).abs());
        checked += 1;
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("1000 vector pairs ({tied} with ties), max deviation {worst:.1e}"))
}

fn desk_training() -> Result<String, String> {
    let setup = ExperimentSetup::desk();
    let start = Instant::now();
    let data = default_datasets(&setup);
    let rows = run_split(&setup, &data, 1, split_seeds(0, 1)[0]).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summary: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.database, r.srcc)).collect();
    for r in &rows {
        ensure(r.srcc >= 0.85, || format!("{} held-out SRCC {:.4} below 0.85 ({summary:?})", r.database, r.srcc))?;
    }
    ensure(rows.len() == 3, || format!("{} rows", rows.len()))?;
    ensure(elapsed <= Duration::from_secs(15 * 60), || format!("took {elapsed:?}"))?;
    Ok(format!("held-out SRCC {}, {:.1}s", summary.join(", "), elapsed.as_secs_f64()))
}

fn ablation_direction() -> Result<String, String> {
    let setup = ExperimentSetup::desk();
    let data = default_datasets(&setup);
    let smallest = data.iter().min_by_key(|d| d.len()).unwrap().database_id.clone();
    let seeds = [1, 2, 3];
    let table = run_ablation(&setup, &data, &ablation_grid(&setup.backbone), &seeds).map_err(|e| e.to_string())?;
    let at = |variant: &str, seed: u64| table.get(variant, seed, &smallest).unwrap().srcc;
    let mut imdt_wins = 0;
    let mut stair_wins = 0;
    let mut cells = Vec::new();
    for &s in &seeds {
        let base = at("plain+single", s);
        let imdt = at("plain+imdt", s);
        let stair = at("staircase+single", s);
        imdt_wins += usize::from(imdt > base);
        stair_wins += usize::from(stair > base);
        cells.push(format!("seed {s}: base {base:.3} imdt {imdt:.3} staircase {stair:.3}"));
    }
    let detail = format!("{smallest}; imdt wins {imdt_wins}/3, staircase wins {stair_wins}/3 [{}]", cells.join("; "));
    ensure(imdt_wins >= 2 && stair_wins >= 2, || detail.clone())?;
    Ok(detail)
}

fn cross_database() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let generated = gen_synthetic_db(&SyntheticSpec::default(), dir.path()).map_err(|e| e.to_string())?;
    let manifests: Vec<_> = generated.into_iter().map(|g| g.manifest).collect();
    let results =
        run_cross_db(&ExperimentSetup::desk(), &manifests, &PpmLoader, &mut |_| {}).map_err(|e| e.to_string())?;
    let mut cells = Vec::new();
    for r in &results {
        let min = r.min_head_srcc();
        cells.push(format!("{} ensemble {:.4} min head {:.4}", r.held_out, r.ensemble.srcc, min));
        ensure(r.ensemble.srcc >= min, || format!("{}: ensemble {:.4} < min head {min:.4}", r.held_out, r.ensemble.srcc))?;
        ensure(min > 0.0 && r.ensemble.srcc > 0.0, || format!("{}: no transfer ({min:.4})", r.held_out))?;
    }
    ensure(results.len() == 3, || format!("{} held-out rows", results.len()))?;
    Ok(cells.join("; "))
}

fn determinism() -> Result<String, String> {
    let setup = ExperimentSetup::desk();
    let data = default_datasets(&setup);
    let subs: Vec<SubProblem> = data
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let (train, _) = d.split(TRAIN_FRACTION, 1).unwrap();
            SubProblem::carve(i, &train, setup.train.seed).unwrap()
        })
        .collect();
    let ids: Vec<String> = subs.iter().map(|s| s.database_id.clone()).collect();
    let run = || {
        let model = Model64::build(&setup.model_config(ids.clone()), setup.model_seed).unwrap();
        let mut lines = String::new();
        let out = run_imdt(model, &subs, &setup.train, &setup.preprocess, &mut |r| {
            lines.push_str(&serde_json::to_string(r).unwrap());
            lines.push('\n');
            Ok(())
        })
        .unwrap();
        (out, lines)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    ensure(log_a == log_b, || "training logs differ".into())?;
    ensure(a.final_model.to_checkpoint_bytes() == b.final_model.to_checkpoint_bytes(), || "final checkpoints differ".into())?;
    for (x, y) in a.best.iter().zip(&b.best) {
        ensure(x.model.to_checkpoint_bytes() == y.model.to_checkpoint_bytes(), || "best checkpoints differ".into())?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, (snap, sub)) in a.best.iter().zip(&subs).enumerate() {
        let path = dir.path().join(format!("best{i}.ckpt"));
        snap.model.save(&path).map_err(|e| e.to_string())?;
        let loaded = Model64::load(&path).map_err(|e| e.to_string())?;
        let pre = loaded.preprocess().cloned().ok_or("checkpoint lacks preprocessing")?;
        let again = validate(&loaded, &sub.validation, sub.head, &pre, setup.train.criterion).map_err(|e| e.to_string())?;
        let logged = a
            .log
            .iter()
            .filter(|r| r.db == sub.database_id && r.snapshot_taken)
            .map(|r| r.criterion)
            .next_back()
            .ok_or_else(|| format!("{} never improved", sub.database_id))?;
        ensure(again == logged, || format!("{}: re-validated {again} vs logged {logged}", sub.database_id))?;
    }
    Ok(format!("{} log lines and 4 checkpoints bit-identical; 3 reloads match their logged criterion", a.log.len()))
}

fn protocol_mechanics() -> Result<String, String> {
    let setup = ExperimentSetup {
        train: TrainConfig { loops: 1, epochs: 1, ..TrainConfig::desk() },
        backbone: BackboneConfig::plain(4, &[4, 8, 16]),
        ..ExperimentSetup::desk()
    };
    let specs: Vec<SyntheticDbSpec> =
        [("p", 40), ("q", 30), ("r", 20)].iter().map(|&(id, n)| SyntheticDbSpec::new(id, n)).collect();
    let data: Vec<Dataset> = specs.iter().map(|s| synthetic_dataset(s, 8, &setup.preprocess).unwrap()).collect();
    let master = 100;
    let report = run_splits_protocol(&setup, &data, 10, master).map_err(|e| e.to_string())?;
    ensure(report.failures.is_empty(), || format!("split failures {:?}", report.failures))?;
    for d in &data {
        let mut v: Vec<f64> = report.rows.iter().filter(|r| r.database == d.database_id).map(|r| r.srcc).collect();
        ensure(v.len() == 10, || format!("{}: {} splits", d.database_id, v.len()))?;
        v.sort_by(f64::total_cmp);
        let want = (v[4] + v[5]) / 2.0;
        let got = report.median_for(&d.database_id, &d.database_id).ok_or("median missing")?.srcc;
        ensure(got == want, || format!("{}: median {got} vs sorted {want}", d.database_id))?;
    }

    let mut pairs = 0;
    for seed in split_seeds(master, 10) {
        for d in &data {
            let groups = d.groups();
            let (tr, te) = split_by_groups(&groups, TRAIN_FRACTION, seed).map_err(|e| e.to_string())?;
            let train: std::collections::HashSet<&str> = tr.iter().map(|&i| groups[i]).collect();
            ensure(te.iter().all(|&i| !train.contains(groups[i])), || format!("seed {seed}: group overlap in {}", d.database_id))?;
            ensure(tr.len() + te.len() == d.len(), || "split loses images".into())?;
            pairs += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let c = rng.random_range(1..=h.min(w));
        let expected = [(0, 0), (0, w - c), (h - c, 0), (h - c, w - c), ((h - c) / 2, (w - c) / 2)];
        let got = five_crop_offsets(h, w, c);
        ensure(got == expected, || format!("{h}x{w} crop {c}: {got:?}"))?;
        let img = PlanarImage::from_fn(w, h, |ch, y, x| (ch * 10_000 + y * 100 + x) as f64);
        for (crop, &(top, left)) in five_crop(&img, c).unwrap().iter().zip(&expected) {
            ensure(crop.at(0, 0, 0) == img.at(0, top, left), || format!("{h}x{w} crop {c}: wrong pixels"))?;
        }
    }
    Ok(format!("10-split medians match sorting, {pairs} database-split pairs group-disjoint, 100 five-crop layouts exact"))
}

fn main() {
    let checks: [(&str, Check); 9] = [
        ("gradient oracle", gradient_oracle),
        ("staircase reduction", staircase_reduction),
        ("scheduler oracle", scheduler_oracle),
        ("rank-metric oracle", rank_metric_oracle),
        ("desk-scale training", desk_training),
        ("ablation direction", ablation_direction),
        ("cross-database transfer", cross_database),
        ("determinism", determinism),
        ("protocol mechanics", protocol_mechanics),
    ];
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name}: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {why}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
