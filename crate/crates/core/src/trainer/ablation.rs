use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::Utterance;
use crate::mdn::RegressionMode;
use crate::sfe::MemoryMode;

use super::{train_mdn, train_sfe, MetricRecord, Stage, TrainConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub components: Vec<usize>,
    pub memory: Vec<MemoryMode>,
    pub regression: Vec<RegressionMode>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            components: vec![1, 2, 3, 5, 8],
            memory: vec![MemoryMode::Wo, MemoryMode::W, MemoryMode::Cs],
            regression: vec![RegressionMode::Fa, RegressionMode::Ftt],
        }
    }
}

/// One grid cell. Metrics are validation values at the best epoch; `eer`
/// belongs to the cell's feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config_hash: String,
    pub components: usize,
    pub memory: MemoryMode,
    pub regression: RegressionMode,
    pub lmd: Option<f64>,
    pub rd: Option<f64>,
    pub eer: Option<f64>,
    pub error: Option<String>,
}

fn metric_at(log: &[MetricRecord], epoch: usize, metric: &str) -> Option<f64> {
    log.iter()
        .find(|r| r.epoch == epoch && r.split == "val" && r.metric == metric)
        .map(|r| r.value)
}

/// Trains one feature extractor per memory mode (unless `mdn_base`
/// bypasses it), then one MDN per cell. Cells run in parallel; a failing
/// cell records its error and the rest continue. Rows are sorted by config
/// hash.
pub fn run_ablation(
    sfe_base: &TrainConfig,
    mdn_base: &TrainConfig,
    data: &[Utterance],
    grid: &AblationGrid,
) -> Vec<AblationRow> {
    let extractors: BTreeMap<MemoryMode, Result<(super::Checkpoint, Option<f64>), String>> = grid
        .memory
        .par_iter()
        .map(|&memory| {
            if mdn_base.sfe_bypass {
                return (memory, Err("bypassed".to_string()));
            }
            let cfg = TrainConfig {
                stage: Stage::Sfe,
                memory,
                ..sfe_base.clone()
            };
            let run = train_sfe(&cfg, data, &TrainOptions::default()).and_then(|out| {
                let eer = metric_at(&out.log, out.best_epoch, "eer");
                out.best
                    .map(|b| (b, eer))
                    .ok_or_else(|| crate::Error::contract("feature extractor never improved"))
            });
            (memory, run.map_err(|e| e.to_string()))
        })
        .collect();

    let mut cells = Vec::new();
    for &memory in &grid.memory {
        for &regression in &grid.regression {
            for &components in &grid.components {
                cells.push(TrainConfig {
                    stage: Stage::Mdn,
                    memory,
                    regression,
                    components,
                    ..mdn_base.clone()
                });
            }
        }
    }
    let mut rows: Vec<AblationRow> = cells
        .par_iter()
        .map(|cfg| {
            let mut row = AblationRow {
                config_hash: cfg.hash(),
                components: cfg.components,
                memory: cfg.memory,
                regression: cfg.regression,
                lmd: None,
                rd: None,
                eer: None,
                error: None,
            };
            let mut opts = TrainOptions::default();
            if !cfg.sfe_bypass {
                match &extractors[&cfg.memory] {
                    Ok((ck, eer)) => {
                        row.eer = *eer;
                        opts.sfe = Some(ck.clone());
                    }
                    Err(e) => {
                        row.error = Some(format!("feature extractor: {e}"));
                        return row;
                    }
                }
            }
            match train_mdn(cfg, data, &opts) {
                Ok(out) => {
                    row.lmd = metric_at(&out.log, out.best_epoch, "lmd");
                    row.rd = metric_at(&out.log, out.best_epoch, "rd");
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    rows.sort_by(|a, b| a.config_hash.cmp(&b.config_hash));
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn lookup<K: Ord>(
    rows: &[AblationRow],
    key: impl Fn(&AblationRow) -> K,
    value: impl Fn(&AblationRow) -> Option<f64>,
) -> BTreeMap<K, f64> {
    rows.iter()
        .filter_map(|r| value(r).map(|v| (key(r), v)))
        .collect()
}

/// Per (memory, regression) group: `LMD(3) <= LMD(2) <= LMD(1)` and
/// `LMD(5)`, `LMD(8)` within 10% of `LMD(3)`, for whichever of these sizes
/// are present.
pub fn component_trend(rows: &[AblationRow]) -> Vec<TrendCheck> {
    let table = lookup(rows, |r| (r.memory, r.regression, r.components), |r| r.lmd);
    let mut groups: Vec<(MemoryMode, RegressionMode)> = table.keys().map(|k| (k.0, k.1)).collect();
    groups.dedup();
    let mut out = Vec::new();
    for (mem, reg) in groups {
        let at = |m: usize| table.get(&(mem, reg, m)).copied();
        let tag = format!("memory={mem} regression={reg}");
        for (lo, hi) in [(3, 2), (2, 1), (3, 1)] {
            if let (Some(a), Some(b)) = (at(lo), at(hi)) {
                out.push(TrendCheck {
                    name: format!("{tag}: LMD(M={lo}) <= LMD(M={hi})"),
                    passed: a <= b,
                    detail: format!("{a:.6} vs {b:.6}"),
                });
            }
        }
        for m in [5, 8] {
            if let (Some(a), Some(b)) = (at(m), at(3)) {
                out.push(TrendCheck {
                    name: format!("{tag}: LMD(M={m}) within 10% of LMD(M=3)"),
                    passed: (a - b).abs() <= 0.1 * b,
                    detail: format!("{a:.6} vs {b:.6}"),
                });
            }
        }
    }
    out
}

/// `EER(cs) <= EER(w) <= EER(wo)` over whichever modes are present.
pub fn memory_trend(rows: &[AblationRow]) -> Vec<TrendCheck> {
    let table = lookup(rows, |r| r.memory, |r| r.eer);
    let mut out = Vec::new();
    for (lo, hi) in [
        (MemoryMode::Cs, MemoryMode::W),
        (MemoryMode::W, MemoryMode::Wo),
    ] {
        if let (Some(a), Some(b)) = (table.get(&lo), table.get(&hi)) {
            out.push(TrendCheck {
                name: format!("EER({lo}) <= EER({hi})"),
                passed: a <= b,
                detail: format!("{a:.6} vs {b:.6}"),
            });
        }
    }
    out
}

/// `RD(f_tt) <= RD(f_a)` per (memory, components) pair.
pub fn regression_trend(rows: &[AblationRow]) -> Vec<TrendCheck> {
    let table = lookup(rows, |r| (r.memory, r.components, r.regression), |r| r.rd);
    let mut out = Vec::new();
    for (&(mem, m, reg), &tt) in &table {
        if reg != RegressionMode::Ftt {
            continue;
        }
        if let Some(&fa) = table.get(&(mem, m, RegressionMode::Fa)) {
            out.push(TrendCheck {
                name: format!("memory={mem} M={m}: RD(f_tt) <= RD(f_a)"),
                passed: tt <= fa,
                detail: format!("{tt:.6} vs {fa:.6}"),
            });
        }
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

/// Plain-text report: both resolved base configs, one row per cell and the
/// trend checks.
pub fn render_report(
    sfe_base: &TrainConfig,
    mdn_base: &TrainConfig,
    rows: &[AblationRow],
    checks: &[TrendCheck],
) -> String {
    let mut s = String::new();
    for (title, cfg) in [("feature extractor", sfe_base), ("mdn", mdn_base)] {
        s.push_str(&format!("# {title} base config\n"));
        for line in cfg.to_text().lines() {
            s.push_str(&format!("#   {line}\n"));
        }
    }
    s.push_str("config_hash\tcomponents\tmemory\tregression\tlmd\trd\teer\terror\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            &r.config_hash[..r.config_hash.len().min(16)],
            r.components,
            r.memory,
            r.regression,
            cell(r.lmd),
            cell(r.rd),
            cell(r.eer),
            r.error.as_deref().unwrap_or("-")
        ));
    }
    for c in checks {
        s.push_str(&format!(
            "# {} {} ({})\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        ));
    }
    s
}
