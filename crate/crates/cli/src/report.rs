//! Run reports: a plain-text table, a long-format CSV and the config echo.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use clarity_core::conditioning::{SceneCondition, CLASS_NAMES};
use clarity_core::metrics::Metrics;
use clarity_core::moe::{tv_distance, tv_frequencies};
use clarity_core::train::{EpochLog, Evaluation};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::runner::RunOutcome;

#[derive(Debug, Clone)]
pub struct Report {
    pub config: RunConfig,
    pub logs: Vec<EpochLog>,
    pub metrics: Metrics,
    /// Expert selection frequencies per condition, each stage weighted equally.
    pub routes: Vec<(SceneCondition, Vec<f64>)>,
    /// Total-variation distance between Total Darkness and Well-lit routing.
    pub darkness_vs_lit_tv: Option<f64>,
    pub stage_tv: Vec<f64>,
    /// Same distance with stages weighted by pixel count.
    pub pixel_weighted_tv: Option<f64>,
    pub decoder_stats: Vec<(f64, f64)>,
}

impl Report {
    pub fn new(config: RunConfig, logs: Vec<EpochLog>, evaluation: &Evaluation) -> Self {
        let routes = SceneCondition::ALL
            .into_iter()
            .filter_map(|c| evaluation.balanced_frequencies(c).map(|f| (c, f)))
            .collect();
        let (dark, lit) = (SceneCondition::TotalDarkness, SceneCondition::WellLit);
        let k = evaluation.condition_routes(dark).map(|s| s.k).unwrap_or(0);
        let darkness_vs_lit_tv = match (evaluation.balanced_frequencies(dark), evaluation.balanced_frequencies(lit)) {
            (Some(a), Some(b)) => tv_frequencies(&a, &b, k).ok(),
            _ => None,
        };
        let pixel_weighted_tv = match (evaluation.condition_routes(dark), evaluation.condition_routes(lit)) {
            (Some(a), Some(b)) => tv_distance(&a, &b).ok(),
            _ => None,
        };
        Self {
            config,
            logs,
            metrics: evaluation.metrics.clone(),
            routes,
            darkness_vs_lit_tv,
            stage_tv: evaluation.stage_tv(dark, lit).unwrap_or_default(),
            pixel_weighted_tv,
            decoder_stats: evaluation.decoder_stats.clone(),
        }
    }

    pub fn from_outcome(outcome: &RunOutcome) -> Self {
        Self::new(outcome.config.clone(), outcome.logs.clone(), &outcome.evaluation)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.config.to_block());
        if !self.logs.is_empty() {
            let _ = writeln!(s, "{:>5} {:>10} {:>10} {:>10} {:>10}", "epoch", "loss", "seg", "edge", "lr_end");
            for l in &self.logs {
                let _ = writeln!(
                    s,
                    "{:>5} {:>10.5} {:>10.5} {:>10.5} {:>10.3e}",
                    l.epoch, l.loss, l.seg_loss, l.edge_loss, l.lr_end
                );
            }
            s.push('\n');
        }
        s.push_str(&class_table(&self.metrics));
        if !self.routes.is_empty() {
            let experts = self.routes[0].1.len();
            let _ = write!(s, "\n{:<16}", "routing");
            for e in 0..experts {
                let _ = write!(s, " {:>7}", format!("E{e}"));
            }
            s.push('\n');
            for (c, freq) in &self.routes {
                let _ = write!(s, "{:<16}", c.surface());
                for f in freq {
                    let _ = write!(s, " {f:>7.3}");
                }
                s.push('\n');
            }
            if let Some(tv) = self.darkness_vs_lit_tv {
                let _ = writeln!(s, "TV(Total Darkness, Well-lit) = {tv:.4}");
            }
            for (i, tv) in self.stage_tv.iter().enumerate() {
                let _ = writeln!(s, "  stage {i} TV = {tv:.4}");
            }
            if let Some(tv) = self.pixel_weighted_tv {
                let _ = writeln!(s, "  pixel-weighted TV = {tv:.4}");
            }
        }
        if !self.decoder_stats.is_empty() {
            s.push_str("\ndecoder state   mean      variance\n");
            for (i, (m, v)) in self.decoder_stats.iter().enumerate() {
                let _ = writeln!(s, "D{:<14} {m:>9.4} {v:>9.4}", i + 1);
            }
        }
        s
    }

    /// Long format `section,name,field,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,name,field,value\n");
        for key in crate::config::KEYS {
            let _ = writeln!(s, "config,{key},value,{}", csv_field(&self.config.get(key).unwrap_or_default()));
        }
        for l in &self.logs {
            let _ = writeln!(s, "epoch,{},loss,{}", l.epoch, l.loss);
            let _ = writeln!(s, "epoch,{},seg_loss,{}", l.epoch, l.seg_loss);
            let _ = writeln!(s, "epoch,{},edge_loss,{}", l.epoch, l.edge_loss);
            let _ = writeln!(s, "epoch,{},lr_end,{}", l.epoch, l.lr_end);
        }
        for (i, name) in CLASS_NAMES.iter().enumerate() {
            let _ = writeln!(s, "class,{name},acc,{}", opt(self.metrics.acc[i]));
            let _ = writeln!(s, "class,{name},iou,{}", opt(self.metrics.iou[i]));
        }
        let _ = writeln!(s, "summary,all,macc,{}", self.metrics.macc);
        let _ = writeln!(s, "summary,all,miou,{}", self.metrics.miou);
        for (c, freq) in &self.routes {
            for (e, f) in freq.iter().enumerate() {
                let _ = writeln!(s, "route,{},E{e},{f}", c.surface());
            }
        }
        if let Some(tv) = self.darkness_vs_lit_tv {
            let _ = writeln!(s, "summary,all,route_tv_darkness_welllit,{tv}");
        }
        for (i, tv) in self.stage_tv.iter().enumerate() {
            let _ = writeln!(s, "route_tv,stage{i},darkness_welllit,{tv}");
        }
        if let Some(tv) = self.pixel_weighted_tv {
            let _ = writeln!(s, "route_tv,pixel_weighted,darkness_welllit,{tv}");
        }
        for (i, (m, v)) in self.decoder_stats.iter().enumerate() {
            let _ = writeln!(s, "decoder,D{},mean,{m}", i + 1);
            let _ = writeln!(s, "decoder,D{},variance,{v}", i + 1);
        }
        s
    }

    /// Writes `report.txt`, `report.csv` and `config.echo` into `dir`, plus
    /// `timing.txt` when a wall-clock is given. Timing is kept apart so the
    /// other three files are reproducible byte for byte.
    pub fn write(&self, dir: &Path, elapsed: Option<Duration>) -> CliResult<()> {
        let w = |name: &str, body: &str| {
            fs::write(dir.join(name), body).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", dir.join(name).display())))
        };
        fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        w("report.txt", &self.to_text())?;
        w("report.csv", &self.to_csv())?;
        w("config.echo", &self.config.to_string())?;
        if let Some(t) = elapsed {
            w("timing.txt", &format!("wall_clock_seconds = {:.3}\n", t.as_secs_f64()))?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

/// Per-class Acc/IoU in percent, one column pair per class, then the means.
pub fn class_table(m: &Metrics) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<6}", "");
    for name in CLASS_NAMES {
        let _ = write!(s, " {name:>11}");
    }
    let _ = writeln!(s, " {:>7}", "mean");
    for (label, values, mean) in [("Acc", &m.acc, m.macc), ("IoU", &m.iou, m.miou)] {
        let _ = write!(s, "{label:<6}");
        for v in values.iter() {
            let _ = write!(s, " {:>11}", pct(*v));
        }
        let _ = writeln!(s, " {:>7.1}", 100.0 * mean);
    }
    s
}
