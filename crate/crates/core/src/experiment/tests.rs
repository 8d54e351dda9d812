use super::*;
use crate::data::synth::{gen_synthetic_db, synthetic_dataset, SyntheticDbSpec, SyntheticSpec};
use crate::data::{load_manifest, LoggingLoader, PpmLoader};
use crate::net::ScoreScale;

fn setup() -> ExperimentSetup {
    ExperimentSetup {
        backbone: BackboneConfig::plain(4, &[4, 8, 16]),
        path_mask: None,
        train: TrainConfig { loops: 1, epochs: 1, batch_size: 8, lr: 3e-3, ..TrainConfig::default() },
        preprocess: PreprocessConfig { resize_min_dim: 16, train_crop: 12, ..PreprocessConfig::default() },
        mode: TrainMode::Imdt,
        model_seed: 2,
    }
}

fn small_spec() -> SyntheticSpec {
    let db = |id: &str, n: usize, scale: f64| SyntheticDbSpec { resolution: 16, mos_scale: scale, ..SyntheticDbSpec::new(id, n) };
    SyntheticSpec { seed: 8, databases: vec![db("p", 30, 1.0), db("q", 20, 0.5), db("r", 16, 0.05)] }
}

fn datasets() -> Vec<Dataset> {
    let spec = small_spec();
    spec.databases.iter().map(|d| synthetic_dataset(d, spec.seed, &setup().preprocess).unwrap()).collect()
}

#[test]
fn one_split_report_equals_one_split_run() {
    let data = datasets();
    let report = run_splits_protocol(&setup(), &data, 1, 40).unwrap();
    let direct = run_split(&setup(), &data, 1, 41).unwrap();
    assert_eq!(report.rows, direct);
    assert!(report.failures.is_empty());
    for r in &direct {
        let m = report.median_for(&r.database, &r.head).unwrap();
        assert_eq!((m.srcc, m.plcc, m.splits), (r.srcc, r.plcc, 1));
    }
    assert_eq!(report.provenance.split_seeds, vec![41]);
    assert_eq!(report.provenance.config_hash, setup().config_hash());
}

#[test]
fn medians_over_ten_splits() {
    let vals = [0.9, 0.1, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6, 1.0];
    let rows = vals
        .iter()
        .enumerate()
        .map(|(k, &v)| MetricsRow { database: "d".into(), split: k + 1, head: "d".into(), srcc: v, plcc: -v, count: 4 })
        .collect();
    let prov = Provenance { seed: 0, split_seeds: split_seeds(0, 10), config_hash: String::new(), checkpoint: None };
    let r = MetricsReport::from_rows(rows, vec![], prov);
    let mut sorted = vals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = r.median_for("d", "d").unwrap();
    assert_eq!(m.srcc, (sorted[4] + sorted[5]) / 2.0);
    assert_eq!(m.plcc, -(sorted[4] + sorted[5]) / 2.0);
    assert_eq!(m.splits, 10);
    let csv = r.to_csv();
    assert!(csv.starts_with("database,split,head,srcc,plcc\nd,1,d,0.9,-0.9\n"), "{csv}");
    assert_eq!(csv.lines().count(), 11);
    let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn a_failing_split_is_recorded() {
    // One group cannot be split; the report keeps the failure instead of aborting.
    let mut data = datasets();
    for s in &mut data[2].samples {
        s.group_id = "same".into();
    }
    let r = run_splits_protocol(&setup(), &data, 2, 0).unwrap();
    assert_eq!(r.failures.len(), 2);
    assert!(r.rows.is_empty() && r.medians.is_empty());
}

#[test]
fn grid_and_path_variants() {
    let bb = BackboneConfig::desk();
    let grid = ablation_grid(&bb);
    assert_eq!(grid.len(), 4);
    let names: Vec<_> = path_variants(&bb, TrainMode::Imdt).into_iter().map(|v| v.name).collect();
    assert_eq!(names, ["path1", "path2", "path3", "none", "all"]);
    let plain_imdt = grid.iter().find(|v| v.name == "plain+imdt").unwrap();
    let none = path_variants(&bb, TrainMode::Imdt).into_iter().find(|v| v.name == "none").unwrap();
    assert_eq!((&plain_imdt.path_mask, plain_imdt.mode), (&none.path_mask, none.mode));
}

#[test]
fn staircase_off_equals_no_paths() {
    let data = datasets();
    let grid: Vec<_> = ablation_grid(&setup().backbone).into_iter().filter(|v| v.name.starts_with("plain")).collect();
    let none: Vec<_> = path_variants(&setup().backbone, TrainMode::Single)
        .into_iter()
        .filter(|v| v.name == "none")
        .chain(path_variants(&setup().backbone, TrainMode::Imdt).into_iter().filter(|v| v.name == "none"))
        .collect();
    let a = run_ablation(&setup(), &data, &grid, &[3]).unwrap();
    let b = run_ablation(&setup(), &data, &none, &[3]).unwrap();
    let strip = |t: &AblationTable| t.rows.iter().map(|r| (r.database.clone(), r.srcc, r.plcc)).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.rows.len(), 2 * data.len());
    assert!(a.to_csv().starts_with("variant,seed,database,srcc,plcc\nplain+single,3,"));
}

#[test]
fn ensemble_of_identical_heads_equals_one_head() {
    let cfg = setup().model_config(vec!["a".into(), "b".into()]);
    let mut m = StaircaseModel::<f64>::build(&cfg, 1).unwrap();
    let (h0, h1) = (m.head_param_ids(0), m.head_param_ids(1));
    for (a, b) in h0.iter().zip(&h1) {
        let v = m.params().get(*a).value.clone();
        m.params_mut().get_mut(*b).value = v;
    }
    m.set_score_scale(0, ScoreScale { offset: 3.0, scale: 2.0 }).unwrap();
    m.set_score_scale(1, ScoreScale { offset: 3.0, scale: 2.0 }).unwrap();
    let d = &datasets()[0];
    let pre = setup().preprocess;
    let one = evaluate(&m, d, HeadSelector::Index(0), &pre).unwrap();
    let ens = evaluate(&m, d, HeadSelector::Ensemble, &pre).unwrap();
    assert_eq!(one, ens);
    assert!(evaluate(&m, d, HeadSelector::Index(2), &pre).is_err());
    assert!(evaluate(&m, &d.subset(&[0]), HeadSelector::Ensemble, &pre).is_err());
}

#[test]
fn cross_db_shapes_and_access_order() {
    let dir = tempfile::tempdir().unwrap();
    let generated = gen_synthetic_db(&small_spec(), dir.path()).unwrap();
    let manifests: Vec<_> = generated.iter().map(|g| load_manifest(&g.manifest_path).unwrap()).collect();
    let loader = LoggingLoader::new(PpmLoader);
    let mut marks = Vec::new();
    let results = run_cross_db(&setup(), &manifests, &loader, &mut |e| marks.push((e, loader.accessed().len()))).unwrap();
    assert_eq!(results.len(), 3);
    let log = loader.accessed();
    for (k, r) in results.iter().enumerate() {
        assert_eq!(r.held_out, manifests[k].database_id);
        assert_eq!(r.heads.len(), 2);
        assert!(r.heads.iter().all(|(id, _)| *id != r.held_out));
        assert_eq!(r.ensemble.count, manifests[k].len());
        // Nothing is read while training runs, and the held-out database is
        // never read before its training has finished.
        let (start, end) = (marks[2 * k].1, marks[2 * k + 1].1);
        assert_eq!(start, end);
        let held_root = &manifests[k].root;
        let prior_fold_end = if k == 0 { 0 } else { marks[2 * k - 1].1 };
        assert!(log[prior_fold_end..end].iter().all(|p| !p.starts_with(held_root)));
    }
    assert!(run_cross_db(&setup(), &manifests[..2], &loader, &mut |_| {}).is_err());
}

#[test]
fn config_hash_tracks_content() {
    let a = setup();
    let mut b = setup();
    assert_eq!(a.config_hash(), b.config_hash());
    b.train.lr *= 2.0;
    assert_ne!(a.config_hash(), b.config_hash());
    assert_eq!(a.config_hash().len(), 64);
}
