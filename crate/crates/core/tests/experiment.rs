mod common;

use metaprune::experiment::{
    ablate, build_zoo, ifp_for_budget, load_or_pretrain, load_zoo, overlap_analysis, pretrain, AblationAxis, Evaluator,
    ExperimentConfig, SimilarityIndex, Summary, Universe,
};
use metaprune::similarity::{leep_score, task_wup, Metric};
use metaprune::zoo::ZooStore;

#[test]
fn config_round_trips_through_its_canonical_text() {
    let mut cfg = common::tiny_experiment();
    cfg.set("mvp", "metric", "wup").unwrap();
    let text = cfg.canonical();
    let mut back = ExperimentConfig::default();
    let mut section = String::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = s.to_string();
        } else {
            let (k, v) = line.split_once('=').unwrap();
            back.set(&section, k.trim(), v.trim()).unwrap();
        }
    }
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn budget_rule_shortens_the_period_only_when_needed() {
    let cfg = ExperimentConfig::default();
    let w = [64, 64];
    assert_eq!(ifp_for_budget(&cfg.ifp, &w, 500).period, 20);
    let short = ifp_for_budget(&cfg.ifp, &w, 100);
    assert_eq!(short.period, 10);
    short.validate(&w).unwrap();
}

#[test]
fn summary_uses_table_format() {
    let s = Summary::of(&[0.8860, 0.8936]);
    assert_eq!(s.percent(), "88.98±0.54");
    assert_eq!(Summary::of(&[0.5]).std, 0.0);
}

#[test]
fn universe_split_and_files() {
    let cfg = common::tiny_experiment();
    let u = Universe::generate(&cfg).unwrap();
    assert_eq!(u.test_ids(), vec![21, 22, 23]);
    assert_eq!(u.train_ids().len(), 21);
    let dir = tempfile::tempdir().unwrap();
    u.write(dir.path()).unwrap();
    assert_eq!(Universe::load(dir.path(), &cfg).unwrap(), u);
}

#[test]
fn pretrained_model_is_cached_per_settings() {
    let cfg = common::tiny_experiment();
    let u = Universe::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = load_or_pretrain(dir.path(), &cfg, &u).unwrap();
    assert_eq!(a, pretrain(&cfg, &u).unwrap());
    assert_eq!(load_or_pretrain(dir.path(), &cfg, &u).unwrap(), a);
    let mut other = cfg.clone();
    other.set("pretrain", "iters", "20").unwrap();
    assert_ne!(load_or_pretrain(dir.path(), &other, &u).unwrap(), a);
}

#[test]
fn zoo_build_index_and_evaluation() {
    let cfg = common::tiny_experiment();
    let u = Universe::generate(&cfg).unwrap();
    let pre = pretrain(&cfg, &u).unwrap();

    let one = tempfile::tempdir().unwrap();
    let two = tempfile::tempdir().unwrap();
    let (s1, s2) = (ZooStore::create(one.path()).unwrap(), ZooStore::create(two.path()).unwrap());
    let r1 = build_zoo(&cfg, &u, &pre, &s1, 1, &|_| {}).unwrap();
    assert_eq!(r1.built, u.train_ids());
    build_zoo(&cfg, &u, &pre, &s2, 2, &|_| {}).unwrap();
    let recs = load_zoo(&s1).unwrap();
    assert_eq!(recs, load_zoo(&s2).unwrap());
    let again = build_zoo(&cfg, &u, &pre, &s1, 2, &|_| {}).unwrap();
    assert!(again.built.is_empty());
    assert_eq!(again.skipped.len(), recs.len());

    // The cached index agrees with LEEP and Wu-Palmer computed directly.
    let leep = SimilarityIndex::new(Metric::Leep, &u, &recs).unwrap();
    let wup = SimilarityIndex::new(Metric::Wup, &u, &recs).unwrap();
    for &t in &u.test_ids() {
        let spec = u.task(t).unwrap();
        let data = u.dataset(t).unwrap();
        for ((id, s), (_, w)) in leep.scores(spec).unwrap().into_iter().zip(wup.scores(spec).unwrap()) {
            let rec = recs.iter().find(|r| r.task_id == id).unwrap();
            assert!((s - leep_score(&rec.params, &data.train).unwrap()).abs() < 1e-9);
            assert_eq!(w, task_wup(&u.taxonomy, &spec.classes, &rec.classes).unwrap());
        }
    }

    let rep = overlap_analysis(&u, &recs, Metric::Wup).unwrap();
    assert_eq!(rep.layers, 2);
    assert_eq!(rep.per_target.len(), recs.len());

    let ev = Evaluator { cfg: &cfg, universe: &u, pretrained: &pre, records: &recs };
    assert_eq!(ev.eval_ids(), vec![21, 22]);
    let nb = ev.neighbours(&leep, 21, 3).unwrap();
    let a = ev.mvp(21, &cfg.mvp, &nb).unwrap();
    let b = ev.mvp(21, &cfg.mvp, &nb).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.mask.counts(), vec![7, 7]);
    let groups = ev.group_neighbours(&leep, 21, 3).unwrap();
    assert!(groups.iter().all(|g| g.len() <= 3 && !g.contains(&21)));

    let rows = ablate(&ev, AblationAxis::Iterations).unwrap();
    assert!(rows.iter().any(|r| r.iters == 0 && r.method == "mvp"));
    assert!(rows.iter().all(|r| ev.eval_ids().contains(&r.task_id)));
    let rows = ablate(&ev, AblationAxis::Neighbours).unwrap();
    assert_eq!(rows.len(), 2 * 2);
}
