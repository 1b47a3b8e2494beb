//! Trains and evaluates a matrix of pipeline variants on one corpus.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{TrainConfig, Variant};
use crate::data::Corpus;
use crate::error::Result;
use crate::metrics::{evaluate, EvalReport};
use crate::trainer::{train_stage1, train_stage2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setting {
    pub name: &'static str,
    pub variant: Variant,
    /// Whether the edge co-occurrence loss is used (lambda from config).
    pub edge_loss: bool,
}

const fn setting(name: &'static str, afg: bool, fgg: bool, mefl: bool, edge_loss: bool) -> Setting {
    Setting {
        name,
        variant: Variant { afg, fgg, mefl },
        edge_loss,
    }
}

pub const BACKBONE: Setting = setting("backbone", false, false, false, false);
pub const AFG: Setting = setting("+AFG", true, false, false, false);
pub const AFG_FGG: Setting = setting("+AFG+FGG", true, true, false, false);
pub const AFG_MEFL: Setting = setting("+AFG+MEFL", true, false, true, false);
pub const AFG_MEFL_LE: Setting = setting("+AFG+MEFL+L_E", true, false, true, true);
pub const FULL_NO_LE: Setting = setting("+AFG+FGG+MEFL", true, true, true, false);
pub const FULL: Setting = setting("+AFG+FGG+MEFL+L_E", true, true, true, true);

/// Every row of the comparison table, simplest first.
pub const ALL_SETTINGS: [Setting; 7] = [BACKBONE, AFG, AFG_FGG, AFG_MEFL, AFG_MEFL_LE, FULL_NO_LE, FULL];

impl Setting {
    pub fn by_name(name: &str) -> Option<Setting> {
        ALL_SETTINGS.iter().copied().find(|s| s.name.eq_ignore_ascii_case(name))
    }

    /// The config this row trains with. Every row runs the same two-stage
    /// schedule; rows without MEFL spend stage 2 on their stage-1 path.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            lambda: if self.edge_loss { base.lambda } else { 0.0 },
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub lambda: f64,
    pub macro_f1: Option<f64>,
    pub macro_auc: Option<f64>,
    #[serde(skip)]
    pub report: EvalReport,
}

pub fn run_setting(setting: &Setting, train: &Corpus, eval: &Corpus, base: &TrainConfig) -> Result<AblationRow> {
    let cfg = setting.config(base);
    let s1 = train_stage1(train, &cfg)?;
    let s2 = train_stage2(train, Some(&s1.checkpoint), &cfg)?;
    let report = evaluate(&s2.checkpoint.model, eval, cfg.threshold)?;
    Ok(AblationRow {
        setting: setting.name.to_string(),
        lambda: cfg.lambda,
        macro_f1: report.macro_f1,
        macro_auc: report.macro_auc,
        report,
    })
}

pub fn run_ablation(settings: &[Setting], train: &Corpus, eval: &Corpus, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    settings.iter().map(|s| run_setting(s, train, eval, base)).collect()
}

/// Plain-text table: setting, lambda, macro F1 and macro AUC in percent.
pub fn format_table(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut out = format!("{:<22} {:>8} {:>10} {:>10}\n", "setting", "lambda", "F1 (%)", "AUC (%)");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<22} {:>8} {:>10} {:>10}",
            r.setting,
            r.lambda,
            pct(r.macro_f1),
            pct(r.macro_auc)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_are_valid_and_named() {
        for s in ALL_SETTINGS {
            assert!(s.variant.validate().is_ok(), "{}", s.name);
            assert_eq!(Setting::by_name(s.name), Some(s));
        }
        let base = TrainConfig { lambda: 0.01, ..TrainConfig::default() };
        assert_eq!(FULL.config(&base).lambda, 0.01);
        assert_eq!(FULL_NO_LE.config(&base).lambda, 0.0);
    }
}
