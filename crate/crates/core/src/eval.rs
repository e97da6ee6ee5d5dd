//! Defaults-only error measures, AUC and model comparison tables.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_plus: f64,
    pub mse_plus: f64,
    pub auc: f64,
    pub n_defaults: usize,
    pub n_total: usize,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!(
            "{a} predictions for {b} responses"
        )));
    }
    Ok(())
}

/// Mean absolute and squared error `1 − PD` over the defaulted rows only.
pub fn mae_mse_plus(pd: &[f64], y: &[u8]) -> Result<(f64, f64)> {
    check_lengths(pd.len(), y.len())?;
    let (mut n, mut abs, mut sq) = (0usize, 0.0, 0.0);
    for (&p, _) in pd.iter().zip(y).filter(|(_, &yi)| yi == 1) {
        let e = 1.0 - p;
        n += 1;
        abs += e.abs();
        sq += e * e;
    }
    if n == 0 {
        return Err(Error::NoDefaults);
    }
    Ok((abs / n as f64, sq / n as f64))
}

/// Midranks (1-based) of `scores`, ties sharing their average rank.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC with midranks: the probability that a random default
/// outscores a random non-default, ties counting one half.
pub fn auc(scores: &[f64], y: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), y.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let nd = y.iter().filter(|&&v| v == 1).count();
    let ng = y.len() - nd;
    if nd == 0 || ng == 0 {
        return Err(Error::SingleClass);
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(y).filter(|(_, &v)| v == 1).map(|(r, _)| r).sum();
    let nd = nd as f64;
    Ok((rank_sum - nd * (nd + 1.0) / 2.0) / (nd * ng as f64))
}

pub fn evaluate(pd: &[f64], y: &[u8]) -> Result<MetricsReport> {
    let (mae_plus, mse_plus) = mae_mse_plus(pd, y)?;
    Ok(MetricsReport {
        mae_plus,
        mse_plus,
        auc: auc(pd, y)?,
        n_defaults: y.iter().filter(|&&v| v == 1).count(),
        n_total: y.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub method: String,
    pub model: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub model: String,
    pub report: MetricsReport,
    pub best_mae: bool,
    pub best_mse: bool,
    pub best_auc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Flags the best value per column; lower is better for the error
/// measures, higher for AUC. Tied values are all flagged.
pub fn compare_models(reports: &[NamedReport]) -> ComparisonTable {
    let min_mae = reports.iter().map(|r| r.report.mae_plus).fold(f64::INFINITY, f64::min);
    let min_mse = reports.iter().map(|r| r.report.mse_plus).fold(f64::INFINITY, f64::min);
    let max_auc = reports.iter().map(|r| r.report.auc).fold(f64::NEG_INFINITY, f64::max);
    ComparisonTable {
        rows: reports
            .iter()
            .map(|r| ComparisonRow {
                method: r.method.clone(),
                model: r.model.clone(),
                report: r.report,
                best_mae: r.report.mae_plus == min_mae,
                best_mse: r.report.mse_plus == min_mse,
                best_auc: r.report.auc == max_auc,
            })
            .collect(),
    }
}

impl ComparisonTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method", "model", "mae_plus", "mse_plus", "auc", "n_defaults", "n_total", "best_mae",
            "best_mse", "best_auc",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.model.clone(),
                r.report.mae_plus.to_string(),
                r.report.mse_plus.to_string(),
                r.report.auc.to_string(),
                r.report.n_defaults.to_string(),
                r.report.n_total.to_string(),
                r.best_mae.to_string(),
                r.best_mse.to_string(),
                r.best_auc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned plain-text table; `*` marks the best value in a column.
    pub fn to_text(&self) -> String {
        let cell = |v: f64, best: bool| format!("{v:.4}{}", if best { "*" } else { " " });
        let rows: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    r.model.clone(),
                    cell(r.report.mae_plus, r.best_mae),
                    cell(r.report.mse_plus, r.best_mse),
                    cell(r.report.auc, r.best_auc),
                ]
            })
            .collect();
        let header = ["Method", "Model", "MAE+", "MSE+", "AUC"].map(String::from);
        let widths: Vec<usize> = (0..5)
            .map(|c| rows.iter().chain([&header]).map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in std::iter::once(&header).chain(&rows) {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| if c < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(scores: &[f64], y: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (&si, _) in scores.iter().zip(y).filter(|(_, &v)| v == 1) {
            for (&sj, _) in scores.iter().zip(y).filter(|(_, &v)| v == 0) {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / pairs
    }

    #[test]
    fn error_measure_examples() {
        assert_eq!(mae_mse_plus(&[1.0, 1.0, 0.2], &[1, 1, 0]).unwrap(), (0.0, 0.0));
        assert_eq!(mae_mse_plus(&[0.5, 0.5], &[1, 1]).unwrap(), (0.5, 0.25));
        let (mae, mse) = mae_mse_plus(&[0.9, 0.7, 0.99], &[1, 1, 0]).unwrap();
        assert!((mae - 0.2).abs() < 1e-15);
        assert!((mse - 0.05).abs() < 1e-15);
        assert!(matches!(mae_mse_plus(&[0.3], &[0]), Err(Error::NoDefaults)));
        assert!(mae_mse_plus(&[0.3], &[0, 1]).is_err());
    }

    #[test]
    fn auc_examples() {
        // both defaults outscore both goods here, so every pair is a win
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.4], &[1, 0, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.7], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.6, 0.6, 0.4], &[1, 0, 1, 0]).unwrap(), 0.875);
        assert_eq!(auc(&[0.3; 7], &[1, 0, 1, 0, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn comparison_flags() {
        let rep = |auc, mse| MetricsReport {
            mae_plus: 0.5,
            mse_plus: mse,
            auc,
            n_defaults: 10,
            n_total: 100,
        };
        let named = |model: &str, r| NamedReport {
            method: "woe".into(),
            model: model.into(),
            report: r,
        };
        let t = compare_models(&[named("gev", rep(0.741, 0.3)), named("logit", rep(0.731, 0.2))]);
        assert!(t.rows[0].best_auc && !t.rows[1].best_auc);
        assert!(!t.rows[0].best_mse && t.rows[1].best_mse);
        assert!(t.rows.iter().all(|r| r.best_mae));
        let same = compare_models(&[named("a", rep(0.7, 0.2)), named("b", rep(0.7, 0.2))]);
        assert!(same.rows.iter().all(|r| r.best_mae && r.best_mse && r.best_auc));
        let text = t.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("0.7410*"));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..=50).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..8).prop_map(|v| v as f64 / 4.0), n),
                proptest::collection::vec(0u8..=1, n),
            )
                .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
        })
    }

    proptest! {
        #[test]
        fn matches_pairwise((s, y) in instance()) {
            let a = auc(&s, &y).unwrap();
            prop_assert!((a - brute_force(&s, &y)).abs() < 1e-12);
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert!((auc(&t, &y).unwrap() - a).abs() < 1e-12);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auc(&neg, &y).unwrap() + a - 1.0).abs() < 1e-12);
        }

        #[test]
        fn non_defaults_do_not_matter(pd in proptest::collection::vec(0.0f64..=1.0, 1..40), extra in proptest::collection::vec(0.0f64..=1.0, 0..20)) {
            let y = vec![1u8; pd.len()];
            let base = mae_mse_plus(&pd, &y).unwrap();
            let mut pd2 = pd.clone();
            pd2.extend(&extra);
            let mut y2 = y.clone();
            y2.extend(std::iter::repeat_n(0u8, extra.len()));
            let with = mae_mse_plus(&pd2, &y2).unwrap();
            prop_assert_eq!(base, with);
            prop_assert!(base.1 <= base.0 + 1e-15);
        }
    }
}
