//! Multi-seed ablation suites.

use std::fmt::Write as _;

use clarity_core::conditioning::{PromptGranularity, CLASS_NAMES, NUM_CLASSES};
use clarity_core::dataset::Dataset;
use clarity_core::moe::RouterMode;

use crate::config::{GatingKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::runner::run;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Components,
    Gating,
    Prompts,
}

impl Suite {
    pub fn key(self) -> &'static str {
        match self {
            Suite::Components => "components",
            Suite::Gating => "gating",
            Suite::Prompts => "prompts",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        [Suite::Components, Suite::Gating, Suite::Prompts]
            .into_iter()
            .find(|s| s.key() == key)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub label: &'static str,
    pub config: RunConfig,
}

/// Row configs. Components rows are cumulative and each differs from the
/// previous in exactly one key; the other suites vary one key around `base`.
pub fn suite_rows(suite: Suite, base: &RunConfig) -> Vec<SuiteRow> {
    let with = |label, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        SuiteRow { label, config }
    };
    match suite {
        Suite::Components => {
            let mut cfg = base.clone();
            cfg.router = RouterMode::Static;
            cfg.scene_embedding = false;
            cfg.gating = GatingKind::None;
            let mut rows = vec![SuiteRow {
                label: "baseline",
                config: cfg.clone(),
            }];
            let steps: [(&'static str, fn(&mut RunConfig)); 4] = [
                ("+MoE random router", |c| c.router = RouterMode::Random),
                ("+condition gate", |c| c.router = RouterMode::Condition),
                ("+scene embedding", |c| c.scene_embedding = true),
                ("+SG-UPT soft gating", |c| c.gating = GatingKind::Soft),
            ];
            for (label, step) in steps {
                step(&mut cfg);
                rows.push(SuiteRow {
                    label,
                    config: cfg.clone(),
                });
            }
            rows
        }
        Suite::Gating => vec![
            with("no prior", &|c| c.gating = GatingKind::None),
            with("hard cut", &|c| c.gating = GatingKind::Hard),
            with("soft tanh", &|c| c.gating = GatingKind::Soft),
        ],
        Suite::Prompts => vec![
            with("none", &|c| c.prompts = PromptGranularity::None),
            with("binary", &|c| c.prompts = PromptGranularity::Binary),
            with("ternary", &|c| c.prompts = PromptGranularity::Ternary),
            with("five-way", &|c| c.prompts = PromptGranularity::FiveWay),
        ],
    }
}

pub fn row_seed(base: u64, row: usize, replicate: usize) -> u64 {
    base + row as u64 * 1000 + replicate as u64
}

#[derive(Debug, Clone)]
pub struct Replicate {
    pub seed: u64,
    pub miou: f64,
    pub macc: f64,
    pub iou: Vec<Option<f64>>,
    pub route_tv: Option<f64>,
    pub stage_tv: Vec<f64>,
    pub pixel_weighted_tv: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RowResult {
    pub index: usize,
    pub label: &'static str,
    pub config: RunConfig,
    pub replicates: Vec<Replicate>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RowResult {
    pub fn miou(&self) -> (f64, f64) {
        mean_std(&self.replicates.iter().map(|r| r.miou).collect::<Vec<_>>())
    }

    pub fn macc(&self) -> (f64, f64) {
        mean_std(&self.replicates.iter().map(|r| r.macc).collect::<Vec<_>>())
    }

    /// Mean IoU of one class over the replicates where it is defined.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        let v: Vec<f64> = self.replicates.iter().filter_map(|r| r.iou[class]).collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub suite: Suite,
    pub base: RunConfig,
    pub rows: Vec<RowResult>,
}

/// Runs the selected rows (all when `only` is `None`) over `replicates`
/// seeds each, sharing one dataset.
pub fn run_suite(
    suite: Suite,
    base: &RunConfig,
    data: &Dataset,
    replicates: usize,
    only: Option<&[usize]>,
    mut progress: impl FnMut(&str),
) -> CliResult<SuiteResult> {
    if replicates == 0 {
        return Err(CliError::Usage("an ablation needs at least one replicate".into()));
    }
    let mut rows = Vec::new();
    for (index, row) in suite_rows(suite, base).into_iter().enumerate() {
        if only.is_some_and(|o| !o.contains(&index)) {
            continue;
        }
        let mut result = RowResult {
            index,
            label: row.label,
            config: row.config.clone(),
            replicates: Vec::new(),
        };
        for rep in 0..replicates {
            let mut cfg = row.config.clone();
            cfg.seed = row_seed(base.seed, index, rep);
            let out = run(&cfg, data, |_| {})?;
            let report = crate::report::Report::from_outcome(&out);
            progress(&format!(
                "{} / {} seed {}: mIoU {:.4} ({:.0}s)",
                suite.key(),
                row.label,
                cfg.seed,
                report.metrics.miou,
                out.elapsed.as_secs_f64()
            ));
            result.replicates.push(Replicate {
                seed: cfg.seed,
                miou: report.metrics.miou,
                macc: report.metrics.macc,
                iou: report.metrics.iou.clone(),
                route_tv: report.darkness_vs_lit_tv,
                stage_tv: report.stage_tv.clone(),
                pixel_weighted_tv: report.pixel_weighted_tv,
            });
        }
        rows.push(result);
    }
    Ok(SuiteResult {
        suite,
        base: base.clone(),
        rows,
    })
}

impl SuiteResult {
    pub fn row(&self, index: usize) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.index == index)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.base.to_block());
        let _ = writeln!(s, "suite {}", self.suite.key());
        let _ = writeln!(
            s,
            "{:<22} {:<26} {:>16} {:>16} {:>9} {:>9}",
            "row", "changed", "mIoU", "mAcc", "d(prev)", "d(first)"
        );
        let first = self.rows.first().map(|r| r.miou().0);
        let mut prev: Option<(&RowResult, f64)> = None;
        for r in &self.rows {
            let (m, sd) = r.miou();
            let (a, asd) = r.macc();
            let changed = match prev {
                Some((p, _)) => r
                    .config
                    .diff(&p.config)
                    .iter()
                    .map(|k| format!("{k}={}", r.config.get(k).unwrap_or_default()))
                    .collect::<Vec<_>>()
                    .join(" "),
                None => "-".into(),
            };
            let dprev = prev.map(|(_, pm)| format!("{:+.2}", 100.0 * (m - pm))).unwrap_or_else(|| "-".into());
            let dfirst = first.map(|f| format!("{:+.2}", 100.0 * (m - f))).unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<22} {:<26} {:>16} {:>16} {:>9} {:>9}",
                r.label,
                changed,
                format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd),
                format!("{:.2} ± {:.2}", 100.0 * a, 100.0 * asd),
                dprev,
                dfirst
            );
            prev = Some((r, m));
        }
        let _ = write!(s, "\nper-class IoU (mean over seeds)\n{:<22}", "row");
        for name in CLASS_NAMES {
            let _ = write!(s, " {name:>11}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<22}", r.label);
            for c in 0..NUM_CLASSES {
                let v = r.class_iou(c).map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into());
                let _ = write!(s, " {v:>11}");
            }
            s.push('\n');
        }
        s
    }

    /// One line per replicate: `suite,row,label,seed,miou,macc,iou_<class>...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("suite,row,label,seed,miou,macc");
        for name in CLASS_NAMES {
            let _ = write!(s, ",iou_{}", name.to_lowercase().replace(' ', "_"));
        }
        s.push_str(",route_tv\n");
        for r in &self.rows {
            for rep in &r.replicates {
                let _ = write!(s, "{},{},{},{},{},{}", self.suite.key(), r.index, r.label, rep.seed, rep.miou, rep.macc);
                for v in &rep.iou {
                    let _ = write!(s, ",{}", v.map(|x| x.to_string()).unwrap_or_default());
                }
                let _ = writeln!(s, ",{}", rep.route_tv.map(|x| x.to_string()).unwrap_or_default());
            }
        }
        s
    }
}
