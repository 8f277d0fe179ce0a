//! Subcommand implementations and their file products.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use stlab_core::data::{
    build_adjacency, load_csv, synth_generate, write_csv, write_folds_json,
};
use stlab_core::diagnostics::{atdm_dataset, morans_i_series, SpatialWeights};
use stlab_core::error::{Error, Result};
use stlab_core::stats::{compare_models, render_table};

use crate::config::ExperimentConfig;
use crate::suite::{
    load_series, permutation_experiment, run_suite, FoldRow, PermComparison, RunOutput,
};

/// Output directory precedence: command line, then STLAB_OUT, then the
/// config, then ./out.
pub fn resolve_out(cli: Option<PathBuf>, cfg: Option<&PathBuf>) -> PathBuf {
    cli.or_else(|| std::env::var_os("STLAB_OUT").map(PathBuf::from))
        .or_else(|| cfg.cloned())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_rows_csv(rows: &[FoldRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "model,fold,rmse,bias,params")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.model, r.fold, r.rmse, r.bias, r.params)?;
    }
    Ok(())
}

fn write_timings_csv(out: &RunOutput, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "model,fold,seconds")?;
    for t in &out.timings {
        writeln!(f, "{},{},{:.3}", t.model, t.fold, t.seconds)?;
    }
    Ok(())
}

fn write_summary_json(out: &RunOutput, path: &Path) -> Result<()> {
    let mut by_model: BTreeMap<&str, Vec<&FoldRow>> = BTreeMap::new();
    for r in &out.rows {
        by_model.entry(&r.model).or_default().push(r);
    }
    let mut models = serde_json::Map::new();
    for (name, rows) in by_model {
        let finite: Vec<&&FoldRow> = rows.iter().filter(|r| r.rmse.is_finite()).collect();
        let mean = |f: &dyn Fn(&FoldRow) -> f64| {
            if finite.is_empty() {
                serde_json::Value::Null
            } else {
                json!(finite.iter().map(|r| f(r)).sum::<f64>() / finite.len() as f64)
            }
        };
        models.insert(
            name.to_string(),
            json!({
                "mean_rmse": mean(&|r| r.rmse),
                "mean_bias": mean(&|r| r.bias),
                "params": rows[0].params,
                "folds": rows.len(),
                "diverged_folds": rows.len() - finite.len(),
            }),
        );
    }
    let doc = json!({ "models": models, "diverged": out.diverged });
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(f, &doc)?;
    Ok(())
}

fn write_run_products(out: &RunOutput, dir: &Path) -> Result<()> {
    write_rows_csv(&out.rows, &dir.join("folds.csv"))?;
    write_timings_csv(out, &dir.join("timings.csv"))?;
    write_summary_json(out, &dir.join("summary.json"))?;
    write_folds_json(&out.folds, &dir.join("folds.json"))
}

/// `run`: the cross-validated model suite. Returns the diverged-fold
/// count.
pub fn cmd_run(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<usize> {
    ensure_dir(dir)?;
    let (series, _) = load_series(cfg)?;
    let out = run_suite(cfg, &series, jobs)?;
    write_run_products(&out, dir)?;
    println!("wrote {} fold rows to {}", out.rows.len(), dir.display());
    Ok(out.diverged)
}

fn perm_table(comparisons: &[PermComparison]) -> String {
    let mut rows = vec![[
        "hypothesis".to_string(),
        "statistic".to_string(),
        "p_unajusted".to_string(),
        "p_holm".to_string(),
        "p_BH".to_string(),
        "reject".to_string(),
    ]];
    for c in comparisons {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |p| format!("{p:.4}"));
        rows.push([
            c.report.test_name.clone(),
            format!("{:.4}", c.report.statistic),
            format!("{:.4}", c.report.p_raw),
            fmt(c.report.p_holm),
            fmt(c.report.p_bh),
            if c.report.degenerate {
                "degenerate".to_string()
            } else if c.report.reject {
                "yes".to_string()
            } else {
                "no".to_string()
            },
        ]);
    }
    let mut widths = [0usize; 6];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        text.push_str(line.join("  ").trim_end());
        text.push('\n');
    }
    text
}

/// `permtest`: suite on the original and association-broken series plus
/// per-model Wilcoxon comparisons. Returns the total diverged-fold count.
pub fn cmd_permtest(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<usize> {
    ensure_dir(dir)?;
    let (series, _) = load_series(cfg)?;
    let (original, permuted, comparisons) = permutation_experiment(cfg, &series, jobs)?;
    write_run_products(&original, dir)?;
    write_rows_csv(&permuted.rows, &dir.join("folds_permuted.csv"))?;
    write_timings_csv(&permuted, &dir.join("timings_permuted.csv"))?;

    let doc = json!({
        "comparisons": comparisons
            .iter()
            .map(|c| json!({
                "model": c.model,
                "original_rmse": c.original,
                "permuted_rmse": c.permuted,
                "report": c.report,
            }))
            .collect::<Vec<_>>(),
    });
    let f = std::fs::File::create(dir.join("permtest.json"))?;
    serde_json::to_writer_pretty(f, &doc)?;

    let table = perm_table(&comparisons);
    std::fs::write(dir.join("permtest.txt"), &table)?;
    print!("{table}");
    Ok(original.diverged + permuted.diverged)
}

/// `diagnose`: spatial autocorrelation and temporal-shape distance of the
/// dataset itself, no models involved.
pub fn cmd_diagnose(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let (series, _) = load_series(cfg)?;
    let w = SpatialWeights::from_adjacency(&build_adjacency(series.coords())?, series.s())?;
    let d = &cfg.diagnostics;
    let moran = morans_i_series(&series, &w, d.permutations, cfg.seed)?;
    let (atdm, atdm_adj) = atdm_dataset(&series, d.atdm_k, d.ma_window)?;

    let doc = json!({
        "morans_i": moran.mean_i,
        "morans_p": moran.p_value,
        "atdm": atdm,
        "atdm_adj": atdm_adj,
        "skipped_timesteps": moran.skipped_timesteps,
    });
    let f = std::fs::File::create(dir.join("diagnostics.json"))?;
    serde_json::to_writer_pretty(f, &doc)?;

    let mut csv = std::fs::File::create(dir.join("moran_series.csv"))?;
    writeln!(csv, "timestep,morans_i")?;
    for (t, i) in moran.per_timestep.iter().enumerate() {
        writeln!(csv, "{t},{i}")?;
    }
    println!(
        "morans_i = {:.4} (p = {:.4}), atdm = {:.6}, atdm_adj = {:.6}",
        moran.mean_i, moran.p_value, atdm, atdm_adj
    );
    Ok(())
}

fn read_rows_csv(path: &Path) -> Result<Vec<FoldRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        #[derive(serde::Deserialize)]
        struct Raw {
            model: String,
            fold: usize,
            rmse: f64,
            bias: f64,
            params: usize,
        }
        let r: Raw =
            record.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        rows.push(FoldRow {
            model: r.model,
            fold: r.fold,
            rmse: r.rmse,
            bias: r.bias,
            params: r.params,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no fold rows", path.display())));
    }
    Ok(rows)
}

/// `compare`: Friedman-gated suite over per-fold RMSE pooled from several
/// result files. Name collisions across files get a `@filestem` suffix.
pub fn cmd_compare(paths: &[PathBuf], alpha: f64, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let mut results: Vec<(String, Vec<f64>)> = Vec::new();
    for path in paths {
        let rows = read_rows_csv(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "results".into());
        let mut per_model: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in &rows {
            if !per_model.contains_key(&r.model) {
                order.push(r.model.clone());
            }
            per_model.entry(r.model.clone()).or_default().push((r.fold, r.rmse));
        }
        for name in order {
            let mut folds = per_model.remove(&name).unwrap();
            folds.sort_by_key(|&(f, _)| f);
            let scores: Vec<f64> = folds.into_iter().map(|(_, v)| v).collect();
            let label = if results.iter().any(|(n, _)| *n == name) {
                format!("{name}@{stem}")
            } else {
                name
            };
            results.push((label, scores));
        }
    }
    if results.len() < 2 {
        return Err(Error::Config("compare needs at least two models".into()));
    }
    let blocks = results[0].1.len();
    if results.iter().any(|(_, v)| v.len() != blocks) {
        return Err(Error::Config("result files carry misaligned folds".into()));
    }
    let suite = compare_models(&results, alpha)?;
    let table = render_table(&suite);
    std::fs::write(dir.join("comparison.txt"), &table)?;
    let f = std::fs::File::create(dir.join("comparison.json"))?;
    serde_json::to_writer_pretty(f, &suite)?;
    print!("{table}");
    Ok(())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// `plotdata`: long-format RMSE rows plus mean/median annotations per
/// model, ready for external histogram plotting.
pub fn cmd_plotdata(path: &Path, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let rows = read_rows_csv(path)?;
    let mut long = std::fs::File::create(dir.join("plotdata.csv"))?;
    writeln!(long, "model,fold,rmse")?;
    for r in &rows {
        writeln!(long, "{},{},{}", r.model, r.fold, r.rmse)?;
    }
    let mut by_model: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in &rows {
        if !by_model.contains_key(r.model.as_str()) {
            order.push(r.model.as_str());
        }
        if r.rmse.is_finite() {
            by_model.entry(&r.model).or_default().push(r.rmse);
        }
    }
    let mut ann = std::fs::File::create(dir.join("annotations.csv"))?;
    writeln!(ann, "model,mean,median")?;
    for name in order {
        let mut v = by_model.remove(name).unwrap_or_default();
        if v.is_empty() {
            writeln!(ann, "{name},NaN,NaN")?;
            continue;
        }
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        writeln!(ann, "{name},{mean},{}", median(&v))?;
    }
    Ok(())
}

/// `synth`: writes a generated dataset as the wide CSV plus its
/// coordinate sidecar.
pub fn cmd_synth(
    s: usize,
    n: usize,
    corr_len: f64,
    seed: u64,
    data: &Path,
    coords: &Path,
) -> Result<()> {
    let series = synth_generate(s, n, corr_len, seed)?;
    write_csv(&series, data, coords)?;
    println!(
        "wrote {} x {} series to {} (coords {})",
        series.n(),
        series.s(),
        data.display(),
        coords.display()
    );
    Ok(())
}

/// Round-trip sanity helper used by the integration tests: a written
/// dataset must load back unchanged.
pub fn roundtrip_check(data: &Path, coords: &Path) -> Result<usize> {
    let (_, filled) = load_csv(data, coords)?;
    Ok(filled)
}
