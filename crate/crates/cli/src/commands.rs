use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use metaprune::experiment::{
    ablate, ablate_criterion, aggregate, build_zoo, load_or_pretrain, load_zoo, overlap_analysis, AblationAxis, AblationRow,
    BuildEvent, Evaluator, ExperimentConfig, SimilarityIndex, Summary, TaskRun, Universe, ZooMethod,
};
use metaprune::model::{Criterion, ModelParams};
use metaprune::pruning::{ahnp, ifp, random_prune};
use metaprune::similarity::{sign_test, Metric};
use metaprune::zoo::{RecordMeta, ZooRecord, ZooStore};

use crate::output::{pct, trace_table, write_mask, Table};
use crate::{Cli, Command};

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: ExperimentConfig,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    fn universe_dir(&self) -> PathBuf {
        self.path("universe")
    }

    fn universe(&self) -> Result<Universe> {
        Ok(Universe::load(&self.universe_dir(), &self.cfg)?)
    }

    fn pretrained(&self, u: &Universe) -> Result<ModelParams> {
        info!("loading pretrained model (training it on first use)");
        Ok(load_or_pretrain(&self.universe_dir(), &self.cfg, u)?)
    }

    /// Zoos built with a non-default IFP criterion live beside the main one.
    fn zoo_dir(&self, criterion: Criterion) -> PathBuf {
        let base = self.cli.zoo.clone().unwrap_or_else(|| self.path("zoo"));
        if criterion == self.cfg.ifp.criterion || self.cfg.zoo_method() != ZooMethod::Ifp {
            return base;
        }
        let name = format!("{}-{criterion}", base.file_name().and_then(|s| s.to_str()).unwrap_or("zoo"));
        base.with_file_name(name)
    }

    fn records(&self) -> Result<Vec<ZooRecord>> {
        let dir = self.zoo_dir(self.cfg.ifp.criterion);
        let store = ZooStore::open(&dir).with_context(|| "run build-zoo first")?;
        let recs = load_zoo(&store)?;
        if recs.is_empty() {
            bail!("zoo at {} has no records", dir.display());
        }
        Ok(recs)
    }

    fn eval_ids(&self, u: &Universe, task: Option<u64>) -> Result<Vec<u64>> {
        match task {
            Some(id) => {
                u.task(id)?;
                Ok(vec![id])
            }
            None => Ok(u.test_ids().into_iter().take(self.cfg.eval_tasks).collect()),
        }
    }
}

pub fn run(cli: &Cli, cfg: ExperimentConfig) -> Result<ExitCode> {
    let ctx = Ctx { cli, cfg };
    match &cli.command {
        Command::GenTasks => gen_tasks(&ctx),
        Command::BuildZoo { criterion } => build(&ctx, criterion.unwrap_or(ctx.cfg.ifp.criterion)),
        Command::Prune { task, method } => prune(&ctx, *task, method),
        Command::Mvp { task, grow } => mvp(&ctx, *task, *grow),
        Command::AnalyzeOverlap => analyze_overlap(&ctx),
        Command::Ablate { axis } => run_ablation(&ctx, *axis),
        Command::Report => report(&ctx),
        Command::ZooCheck => zoo_check(&ctx),
    }
}

fn gen_tasks(ctx: &Ctx) -> Result<ExitCode> {
    let u = Universe::generate(&ctx.cfg)?;
    u.write(&ctx.universe_dir()).with_context(|| format!("writing universe to {}", ctx.universe_dir().display()))?;
    fs::write(ctx.path("config.ini"), ctx.cfg.canonical())?;
    println!(
        "{} tasks over {} classes ({} train, {} test) in {}",
        u.tasks.len(),
        u.taxonomy.num_classes(),
        u.train_ids().len(),
        u.test_ids().len(),
        ctx.universe_dir().display()
    );
    Ok(ExitCode::SUCCESS)
}

fn build(ctx: &Ctx, criterion: Criterion) -> Result<ExitCode> {
    let mut cfg = ctx.cfg.clone();
    cfg.ifp.criterion = criterion;
    let u = ctx.universe()?;
    let pre = ctx.pretrained(&u)?;
    let dir = ctx.zoo_dir(criterion);
    let store = ZooStore::create(&dir)?;
    let workers = ctx.cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let log_path = dir.join("failures.log");
    let log_failure = |id: u64, err: &str| -> std::io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&log_path)?;
        writeln!(f, "task {id}: {err}")
    };
    let progress = |e: &BuildEvent| match e {
        BuildEvent::Built { task_id, accuracy, done, total } => info!("[{done}/{total}] task {task_id}: accuracy {}", pct(*accuracy)),
        BuildEvent::Failed { task_id, error } => {
            warn!("task {task_id} failed: {error}");
            if let Err(io) = log_failure(*task_id, error) {
                warn!("cannot write {}: {io}", log_path.display());
            }
        }
    };
    let r = build_zoo(&cfg, &u, &pre, &store, workers, &progress)?;
    println!(
        "zoo {}: {} built, {} already present, {} failed",
        dir.display(),
        r.built.len(),
        r.skipped.len(),
        r.failures.len()
    );
    if r.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failures logged to {}", log_path.display());
        Ok(ExitCode::from(2))
    }
}

fn write_run(ctx: &Ctx, dir: &str, run: &TaskRun, layers: usize) -> Result<()> {
    let stem = format!("task-{}-{}", run.task_id, run.method);
    write_mask(&ctx.path(dir).join("masks").join(format!("{stem}.txt")), &run.mask)?;
    trace_table(&run.trace, layers).write(&ctx.path(dir).join("traces").join(format!("{stem}.csv")), &ctx.cfg)
}

fn prune(ctx: &Ctx, task: u64, method: &str) -> Result<ExitCode> {
    let u = ctx.universe()?;
    let pre = ctx.pretrained(&u)?;
    let data = u.dataset(task)?;
    let seed = metaprune::experiment::task_seed(&ctx.cfg, "prune", task);
    let res = match method {
        "ifp" => ifp(&pre, &data, &ctx.cfg.ifp, seed)?,
        "ahnp" => ahnp(&pre, &data, &ctx.cfg.ahnp, seed)?,
        _ => random_prune(&pre, &data, ctx.cfg.mvp.target, &ctx.cfg.mvp.train, seed)?,
    };
    let run = TaskRun { task_id: task, method: method.into(), accuracy: res.accuracy, mask: res.mask, trace: res.trace, neighbours: vec![] };
    write_run(ctx, "prune", &run, pre.arch().num_prunable())?;
    let mut t = Table::new("prune", &["task_id", "method", "accuracy", "kept"]);
    t.push(vec![task.to_string(), method.into(), pct(run.accuracy), kept_str(&run)]);
    t.write(&ctx.path("prune").join(format!("task-{task}-{method}.csv")), &ctx.cfg)?;
    println!("task {task} {method}: accuracy {}%", pct(run.accuracy));
    Ok(ExitCode::SUCCESS)
}

fn kept_str(run: &TaskRun) -> String {
    run.mask.counts().iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn ids_str(ids: &[u64]) -> String {
    ids.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

fn mvp(ctx: &Ctx, task: Option<u64>, grow: bool) -> Result<ExitCode> {
    let u = ctx.universe()?;
    let pre = ctx.pretrained(&u)?;
    let recs = ctx.records()?;
    let ev = Evaluator { cfg: &ctx.cfg, universe: &u, pretrained: &pre, records: &recs };
    let index = SimilarityIndex::new(ctx.cfg.metric, &u, &recs)?;
    let store = if grow { Some(ZooStore::open(ctx.zoo_dir(ctx.cfg.ifp.criterion))?) } else { None };
    let mut t = Table::new("mvp", &["task_id", "classes", "neighbours", "accuracy"]);
    let mut acc = Vec::new();
    for id in ctx.eval_ids(&u, task)? {
        let nb = ev.neighbours(&index, id, ctx.cfg.mvp.neighbours)?;
        let run = ev.mvp(id, &ctx.cfg.mvp, &nb)?;
        info!("task {id}: accuracy {}", pct(run.accuracy));
        write_run(ctx, "mvp", &run, pre.arch().num_prunable())?;
        let classes = u.task(id)?.classes.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        t.push(vec![id.to_string(), classes, ids_str(&nb), pct(run.accuracy)]);
        acc.push(run.accuracy);
        if let Some(store) = &store {
            grow_zoo(ctx, store, &u, &ev, id, &run)?;
        }
    }
    let s = Summary::of(&acc);
    t.push(vec!["summary".into(), String::new(), String::new(), s.percent()]);
    t.write(&ctx.path("mvp").join("results.csv"), &ctx.cfg)?;
    println!("mvp over {} task(s): {}", s.n, s.percent());
    Ok(ExitCode::SUCCESS)
}

/// Appends an MVP result as a zoo record, re-running the deterministic job
/// to recover its weights.
fn grow_zoo(ctx: &Ctx, store: &ZooStore, u: &Universe, ev: &Evaluator, id: u64, run: &TaskRun) -> Result<()> {
    let data = u.dataset(id)?;
    let donors = run
        .neighbours
        .iter()
        .map(|n| ev.records.iter().find(|r| r.task_id == *n).map(|r| (&r.mask, &r.params)))
        .collect::<Option<Vec<_>>>()
        .context("neighbour missing from zoo")?;
    let seed = metaprune::experiment::task_seed(&ctx.cfg, "eval", id);
    let res = metaprune::metavote::mvp(ev.pretrained, &donors, &data, &ctx.cfg.mvp, seed)?;
    let meta = RecordMeta {
        method: "mvp".into(),
        criterion: ctx.cfg.metric.to_string(),
        r: ctx.cfg.ratio,
        iterations: ctx.cfg.mvp.train.iters,
        accuracy: res.accuracy,
        seed,
    };
    let rec = ZooRecord::new(id, u.task(id)?.classes.clone(), ev.pretrained.arch(), res.mask, &res.params, meta)?;
    match store.append(&rec) {
        Err(metaprune::Error::DuplicateTask(_)) => warn!("task {id} already in the zoo; not appended"),
        other => other?,
    }
    Ok(())
}

fn analyze_overlap(ctx: &Ctx) -> Result<ExitCode> {
    let u = ctx.universe()?;
    let recs = ctx.records()?;
    let metrics = match ctx.cli.metric {
        Some(m) => vec![m],
        None => vec![Metric::Leep, Metric::Wup],
    };
    for metric in metrics {
        let rep = overlap_analysis(&u, &recs, metric)?;
        let mut t = Table::new("analyze-overlap", &["layer", "group", "mean_iou", "pooled_iou", "pairs"]);
        for r in rep.rows() {
            t.push(vec![r.layer.to_string(), r.group.to_string(), format!("{:.6}", r.mean_iou), format!("{:.6}", r.pooled_iou), r.pair_count.to_string()]);
        }
        t.write(&ctx.path(&format!("overlap-{metric}.csv")), &ctx.cfg)?;
        let mut g = Table::new("analyze-overlap gap", &["layer", "gap", "targets", "positive", "negative", "ties", "p_value"]);
        for (l, gap) in rep.gap().into_iter().enumerate() {
            let diffs = rep.target_gaps(l);
            let s = sign_test(&diffs);
            g.push(vec![
                l.to_string(),
                format!("{gap:.6}"),
                diffs.len().to_string(),
                s.positive.to_string(),
                s.negative.to_string(),
                s.ties.to_string(),
                format!("{:.3e}", s.p_value),
            ]);
            println!("{metric} layer {l}: group1-group5 IoU {gap:+.4} (sign test p = {:.2e})", s.p_value);
        }
        g.write(&ctx.path(&format!("overlap-{metric}-gap.csv")), &ctx.cfg)?;
        if rep.degenerate_targets > 0 {
            warn!("{metric}: {} target(s) had identical scores for every neighbour", rep.degenerate_targets);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn ablation_table(rows: &[AblationRow]) -> Table {
    let mut t = Table::new("ablate", &["axis", "value", "method", "group", "iters", "task_id", "accuracy"]);
    let group = |g: Option<usize>| g.map_or(String::new(), |g| g.to_string());
    for r in rows {
        t.push(vec![r.axis.to_string(), r.value.clone(), r.method.clone(), group(r.group), r.iters.to_string(), r.task_id.to_string(), pct(r.accuracy)]);
    }
    for (k, s) in aggregate(rows) {
        t.push(vec![k.axis.to_string(), k.value, k.method, group(k.group), k.iters.to_string(), "all".into(), s.percent()]);
    }
    t
}

fn run_ablation(ctx: &Ctx, axis: Option<AblationAxis>) -> Result<ExitCode> {
    let u = ctx.universe()?;
    let pre = ctx.pretrained(&u)?;
    let recs = ctx.records()?;
    let ev = Evaluator { cfg: &ctx.cfg, universe: &u, pretrained: &pre, records: &recs };
    let axes = axis.map_or_else(|| AblationAxis::ALL.to_vec(), |a| vec![a]);
    for axis in axes {
        info!("ablation over {axis}");
        let rows = if axis == AblationAxis::Criterion {
            let mut zoos = Vec::new();
            for &c in &ctx.cfg.ablate.criteria {
                let dir = ctx.zoo_dir(c);
                if !dir.join("manifest.txt").exists() || c != ctx.cfg.ifp.criterion {
                    info!("ensuring {c} zoo at {}", dir.display());
                    if build(ctx, c)? != ExitCode::SUCCESS {
                        bail!("building the {c} zoo had failures");
                    }
                }
                zoos.push((c, load_zoo(&ZooStore::open(&dir)?)?));
            }
            let refs: Vec<(Criterion, &[ZooRecord])> = zoos.iter().map(|(c, r)| (*c, r.as_slice())).collect();
            ablate_criterion(&ev, &refs)?
        } else {
            ablate(&ev, axis)?
        };
        for (k, s) in aggregate(&rows) {
            let g = k.group.map_or(String::new(), |g| format!(" group {g}"));
            println!("{axis} {} {}{g} J={}: {}", k.value, k.method, k.iters, s.percent());
        }
        ablation_table(&rows).write(&ctx.path(&format!("ablate-{axis}.csv")), &ctx.cfg)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn report(ctx: &Ctx) -> Result<ExitCode> {
    let u = ctx.universe()?;
    let pre = ctx.pretrained(&u)?;
    let recs = ctx.records()?;
    let ev = Evaluator { cfg: &ctx.cfg, universe: &u, pretrained: &pre, records: &recs };
    let index = SimilarityIndex::new(ctx.cfg.metric, &u, &recs)?;
    let j = ctx.cfg.mvp.train.iters;
    let methods = [format!("mvp@{j}"), format!("random@{j}"), format!("ifp@{j}"), format!("ifp@{}", 5 * j)];
    let mut header = vec!["task_id"];
    header.extend(methods.iter().map(String::as_str));
    let mut t = Table::new("report", &header);
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    for id in ev.eval_ids() {
        let nb = ev.neighbours(&index, id, ctx.cfg.mvp.neighbours)?;
        let accs = [
            ev.mvp(id, &ctx.cfg.mvp, &nb)?.accuracy,
            ev.random(id, &ctx.cfg.mvp.train)?.accuracy,
            ev.ifp_scratch(id, j)?.accuracy,
            ev.ifp_scratch(id, 5 * j)?.accuracy,
        ];
        info!("task {id}: {}", accs.iter().map(|a| pct(*a)).collect::<Vec<_>>().join(" "));
        let mut row = vec![id.to_string()];
        for (c, a) in cols.iter_mut().zip(accs) {
            c.push(a);
            row.push(pct(a));
        }
        t.push(row);
    }
    let mut summary = vec!["summary".to_string()];
    for (m, c) in methods.iter().zip(&cols) {
        let s = Summary::of(c);
        println!("{m:>12}: {}", s.percent());
        summary.push(s.percent());
    }
    t.push(summary);
    t.write(&ctx.path("report.csv"), &ctx.cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn zoo_check(ctx: &Ctx) -> Result<ExitCode> {
    let dir = ctx.zoo_dir(ctx.cfg.ifp.criterion);
    let store = ZooStore::open(&dir)?;
    let r = store.integrity_check()?;
    println!("{} record(s) checked in {}", r.checked, dir.display());
    for (id, why) in &r.failures {
        println!("task {id}: {why}");
    }
    Ok(if r.is_clean() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
