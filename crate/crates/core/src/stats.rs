//! Error metrics and the nonparametric comparison machinery: Friedman rank
//! test, Wilcoxon signed-rank post-hocs, and multiplicity adjustments.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One hypothesis-test outcome, with optional multiplicity-adjusted values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatReport {
    pub test_name: String,
    pub statistic: f64,
    pub df: Option<f64>,
    pub p_raw: f64,
    pub p_holm: Option<f64>,
    pub p_bh: Option<f64>,
    pub alpha: f64,
    pub reject: bool,
    pub n_hypotheses: usize,
    /// All differences zero (or a similarly vacuous input).
    pub degenerate: bool,
}

/// sqrt of the mean squared elementwise error.
pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "rmse",
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    let n = pred.len() as f64;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse / n).sqrt())
}

/// Signed mean elementwise error.
pub fn bias(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "bias",
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| p - t)
        .sum::<f64>()
        / n)
}

/// Average ranks (1-based) with ties sharing their mean rank. Lower value
/// gets rank 1 when `lower_is_better`.
fn rank_block(scores: &[f64], lower_is_better: bool) -> Vec<f64> {
    let a = scores.len();
    let mut idx: Vec<usize> = (0..a).collect();
    idx.sort_by(|&p, &q| {
        let ord = scores[p].total_cmp(&scores[q]);
        if lower_is_better {
            ord
        } else {
            ord.reverse()
        }
    });
    let mut ranks = vec![0.0; a];
    let mut pos = 0;
    while pos < a {
        let mut end = pos + 1;
        while end < a && scores[idx[end]] == scores[idx[pos]] {
            end += 1;
        }
        // Positions pos..end (0-based) share the mean of ranks pos+1..end.
        let mean = (pos + 1 + end) as f64 / 2.0;
        for &i in &idx[pos..end] {
            ranks[i] = mean;
        }
        pos = end;
    }
    ranks
}

fn chi2_upper_tail(stat: f64, df: f64) -> Result<f64> {
    let chi = ChiSquared::new(df).map_err(|e| Error::Stats(format!("chi-squared: {e}")))?;
    Ok(1.0 - chi.cdf(stat))
}

/// Friedman statistic over the per-block rank matrix. Fully tied blocks
/// contribute flat average ranks.
pub fn friedman_statistic(scores: &[Vec<f64>], lower_is_better: bool) -> Result<(f64, f64)> {
    let b = scores.len();
    if b < 2 {
        return Err(Error::Stats("Friedman needs at least 2 blocks".into()));
    }
    let a = scores[0].len();
    if a < 2 {
        return Err(Error::Stats("Friedman needs at least 2 algorithms".into()));
    }
    if scores.iter().any(|row| row.len() != a) {
        return Err(Error::Stats("ragged score matrix".into()));
    }
    let mut rank_sums = vec![0.0; a];
    for row in scores {
        for (j, r) in rank_block(row, lower_is_better).into_iter().enumerate() {
            rank_sums[j] += r;
        }
    }
    let center = (a + 1) as f64 / 2.0;
    let spread: f64 = rank_sums
        .iter()
        .map(|sum| {
            let mean = sum / b as f64;
            (mean - center) * (mean - center)
        })
        .sum();
    let stat = 12.0 * b as f64 / (a as f64 * (a + 1) as f64) * spread;
    Ok((stat, (a - 1) as f64))
}

/// Friedman rank test: chi-squared upper tail with A-1 degrees of freedom.
pub fn friedman(scores: &[Vec<f64>], lower_is_better: bool, alpha: f64) -> Result<StatReport> {
    let (stat, df) = friedman_statistic(scores, lower_is_better)?;
    let p = chi2_upper_tail(stat, df)?;
    Ok(StatReport {
        test_name: "friedman".into(),
        statistic: stat,
        df: Some(df),
        p_raw: p,
        p_holm: None,
        p_bh: None,
        alpha,
        reject: p < alpha,
        n_hypotheses: 1,
        degenerate: stat == 0.0,
    })
}

/// Which p-value path the signed-rank test takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact enumeration for n <= 12, normal approximation above.
    Auto,
    Exact,
    Normal,
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; an all-zero input returns a degenerate p = 1 report.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alpha: f64) -> Result<StatReport> {
    wilcoxon_signed_rank_with(a, b, alpha, WilcoxonMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(
    a: &[f64],
    b: &[f64],
    alpha: f64,
    method: WilcoxonMethod,
) -> Result<StatReport> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!(
            "paired samples of different lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let report = |stat: f64, p: f64, degenerate: bool| StatReport {
        test_name: "wilcoxon_signed_rank".into(),
        statistic: stat,
        df: None,
        p_raw: p,
        p_holm: None,
        p_bh: None,
        alpha,
        reject: !degenerate && p < alpha,
        n_hypotheses: 1,
        degenerate,
    };
    let n = diffs.len();
    if n == 0 {
        return Ok(report(0.0, 1.0, true));
    }
    if n < 5 {
        return Err(Error::Stats(format!(
            "only {n} nonzero differences; need at least 5"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = rank_block(&abs, true);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    let exact = match method {
        WilcoxonMethod::Auto => n <= 12,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p = if exact {
        // Enumerate every sign assignment over the observed rank multiset.
        let total = 1u64 << n;
        let mut le = 0u64;
        let mut ge = 0u64;
        let eps = 1e-9;
        for mask in 0..total {
            let mut w = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    w += r;
                }
            }
            if w <= w_plus + eps {
                le += 1;
            }
            if w >= w_plus - eps {
                ge += 1;
            }
        }
        (2.0 * (le.min(ge) as f64) / total as f64).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // Tie correction: subtract sum(t^3 - t)/48 from the variance.
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            while j < n && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Ok(report(w_plus, 1.0, true));
        }
        // Continuity correction of 1/2 toward the mean.
        let delta = (w_plus - mean).abs() - 0.5;
        let z = delta.max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(report(w_plus, p, false))
}

/// Holm step-down adjustment, returned in input order.
pub fn adjust_holm(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (i, &orig) in idx.iter().enumerate() {
        let scaled = ((m - i) as f64 * p[orig]).min(1.0);
        running = running.max(scaled);
        out[orig] = running;
    }
    out
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn adjust_bh(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for (i, &orig) in idx.iter().enumerate().rev() {
        let scaled = (m as f64 * p[orig] / (i + 1) as f64).min(1.0);
        running = running.min(scaled);
        out[orig] = running;
    }
    out
}

/// The three traditional-vs-agnostic pairings reported side by side.
pub const PAIRED_HYPOTHESES: [(&str, &str); 3] = [
    ("A-CNN", "CNN"),
    ("A-ConvLSTM", "ConvLSTM"),
    ("A-GCN-LSTM", "GCN-LSTM"),
];

/// Friedman gate plus jointly adjusted pairwise post-hocs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSuite {
    pub friedman: StatReport,
    pub pairwise: Vec<StatReport>,
}

/// Runs the comparison protocol on per-model block scores (lower is
/// better, e.g. RMSE per fold). The Friedman test gates the three paired
/// hypotheses; their p-values are adjusted as one family with both Holm
/// and Benjamini-Hochberg.
pub fn compare_models(results: &[(String, Vec<f64>)], alpha: f64) -> Result<ComparisonSuite> {
    let b = results
        .first()
        .map(|(_, v)| v.len())
        .ok_or_else(|| Error::Stats("no models to compare".into()))?;
    if results.iter().any(|(_, v)| v.len() != b) {
        return Err(Error::Stats("models report different block counts".into()));
    }
    let matrix: Vec<Vec<f64>> = (0..b)
        .map(|blk| results.iter().map(|(_, v)| v[blk]).collect())
        .collect();
    let gate = friedman(&matrix, true, alpha)?;

    let mut pairwise = Vec::new();
    if gate.reject {
        let find = |name: &str| results.iter().find(|(n, _)| n == name).map(|(_, v)| v);
        let mut reports = Vec::new();
        for (agnostic, traditional) in PAIRED_HYPOTHESES {
            if let (Some(a), Some(t)) = (find(agnostic), find(traditional)) {
                let mut r = wilcoxon_signed_rank(a, t, alpha)?;
                r.test_name = format!("{agnostic} vs {traditional}");
                reports.push(r);
            }
        }
        let raw: Vec<f64> = reports.iter().map(|r| r.p_raw).collect();
        let holm = adjust_holm(&raw);
        let bh = adjust_bh(&raw);
        let m = reports.len();
        for (i, mut r) in reports.into_iter().enumerate() {
            r.p_holm = Some(holm[i]);
            r.p_bh = Some(bh[i]);
            r.n_hypotheses = m;
            r.reject = !r.degenerate && holm[i] < alpha;
            pairwise.push(r);
        }
    }
    Ok(ComparisonSuite {
        friedman: gate,
        pairwise,
    })
}

/// Aligned plain-text table over the suite, one row per hypothesis.
pub fn render_table(suite: &ComparisonSuite) -> String {
    let mut rows = vec![[
        "hypothesis".to_string(),
        "statistic".to_string(),
        "p_unajusted".to_string(),
        "p_holm".to_string(),
        "p_BH".to_string(),
        "reject".to_string(),
    ]];
    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |p| format!("{p:.4}"));
    let push = |rows: &mut Vec<[String; 6]>, r: &StatReport| {
        rows.push([
            r.test_name.clone(),
            format!("{:.4}", r.statistic),
            format!("{:.4}", r.p_raw),
            fmt_opt(r.p_holm),
            fmt_opt(r.p_bh),
            if r.degenerate {
                "degenerate".into()
            } else {
                r.reject.to_string()
            },
        ]);
    };
    push(&mut rows, &suite.friedman);
    for r in &suite.pairwise {
        push(&mut rows, r);
    }
    let mut widths = [0usize; 6];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
