use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use metaprune::experiment::ExperimentConfig;
use metaprune::model::Mask;
use metaprune::train::TraceRow;

/// CSV with `#` comment lines naming the producing command, the config hash
/// and the master seed, followed by a header row and the data rows.
pub struct Table {
    what: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(what: &str, header: &[&str]) -> Self {
        Self { what: what.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path, cfg: &ExperimentConfig) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let body = w.into_inner().context("flushing csv")?;
        let mut out = format!("# metaprune {}\n# config_hash={} seed={}\n", self.what, cfg.hash(), cfg.seed).into_bytes();
        out.extend(body);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, out).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn trace_table(trace: &[TraceRow], layers: usize) -> Table {
    let mut header = vec!["iteration".to_string(), "loss".into(), "lr".into()];
    header.extend((0..layers).map(|l| format!("kept_{l}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new("trace", &refs);
    for r in trace {
        let mut row = vec![r.iteration.to_string(), format!("{:.6}", r.loss), format!("{:.6e}", r.lr)];
        row.extend(r.kept.iter().map(usize::to_string));
        t.push(row);
    }
    t
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, mask.to_string()).with_context(|| format!("writing {}", path.display()))
}

pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}
