//! Fold-suite orchestration: budget-matched builds, per-fold normalization,
//! training, de-normalized evaluation, and the spatial permutation
//! experiment.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use stlab_core::data::{
    blocked_cv, build_adjacency, dendrogram_order, load_csv, make_windows, stack_samples,
    synth_generate, FoldSpec, StSeries, Zscore,
};
use stlab_core::error::{Error, Result};
use stlab_core::models::{
    build_model, count_parameters, match_hidden_width, ModelConfig, ModelKind,
};
use stlab_core::stats::{adjust_bh, adjust_holm, wilcoxon_signed_rank, StatReport};
use stlab_core::tensor::Tensor;
use stlab_core::training::{grid_search_tpast, train, Dataset};

use crate::config::ExperimentConfig;

/// One model-fold evaluation. A diverged fold carries NaN metrics.
#[derive(Debug, Clone)]
pub struct FoldRow {
    pub model: String,
    pub fold: usize,
    pub rmse: f64,
    pub bias: f64,
    pub params: usize,
}

#[derive(Debug, Clone)]
pub struct Timing {
    pub model: String,
    pub fold: usize,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub rows: Vec<FoldRow>,
    pub timings: Vec<Timing>,
    pub folds: Vec<FoldSpec>,
    pub diverged: usize,
}

/// Loads the configured dataset: file pair or generated series. The second
/// element is the filled-cell count for file loads.
pub fn load_series(cfg: &ExperimentConfig) -> Result<(StSeries, usize)> {
    if let Some(spec) = &cfg.dataset.synth {
        let series = synth_generate(spec.s, spec.n, spec.corr_len, spec.seed)?;
        return Ok((series, 0));
    }
    let path = cfg.dataset.path.as_ref().expect("validated");
    let coords = cfg.dataset.coords.as_ref().expect("validated");
    load_csv(path, coords)
}

/// splitmix64 finalizer: spreads (seed, kind, fold) into independent
/// per-job seeds.
fn derive_seed(base: u64, kind: ModelKind, fold: usize, salt: u64) -> u64 {
    let kind_idx = ModelKind::ALL.iter().position(|k| *k == kind).unwrap() as u64;
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(1 + kind_idx))
        .wrapping_add(0x6a09e667f3bcc909u64.wrapping_mul(1 + fold as u64))
        .wrapping_add(salt.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Raw rows of the oriented series covered by the training window ranges,
/// used to fit the fold-local normalizer.
fn train_range_rows(series: &StSeries, fold: &FoldSpec, span: usize) -> Tensor {
    let s = series.s();
    let mut rows: Vec<(usize, usize)> = fold
        .train
        .iter()
        .map(|&(lo, hi)| (lo, hi - 1 + span))
        .collect();
    rows.sort_unstable();
    let mut data = Vec::new();
    let mut count = 0usize;
    for (lo, hi) in rows {
        data.extend_from_slice(&series.values().data()[lo * s..hi * s]);
        count += hi - lo;
    }
    Tensor::from_vec(&[count, s], data).expect("contiguous training rows")
}

/// Per-location reduction in sorted value order, so column permutations
/// cannot perturb the floating-point result.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

struct KindContext {
    kind: ModelKind,
    dataset: Dataset,
    adjacency: Option<Vec<u8>>,
    s: usize,
}

fn context_for(kind: ModelKind, series: &StSeries, cfg: &ExperimentConfig) -> Result<KindContext> {
    // Traditional models consume columns in dendrogram order; agnostic ones
    // take file order.
    let oriented = if kind.is_agnostic() {
        series.clone()
    } else {
        let order = dendrogram_order(series.coords())?;
        series.reorder_columns(&order)?
    };
    let adjacency = match kind {
        ModelKind::GcnLstm => Some(build_adjacency(oriented.coords())?),
        _ => None,
    };
    let samples = make_windows(&oriented, cfg.windows.t, cfg.windows.t_out)?;
    let dataset = stack_samples(&samples)?;
    Ok(KindContext {
        kind,
        dataset,
        adjacency,
        s: oriented.s(),
    })
}

fn base_model_config(ctx: &KindContext, cfg: &ExperimentConfig) -> Result<ModelConfig> {
    let mut mc = ModelConfig {
        kind: ctx.kind,
        t: cfg.windows.t,
        t_out: cfg.windows.t_out,
        s: ctx.s,
        h: cfg.model.h.unwrap_or(4),
        t_past: None,
        k: None,
        adjacency: ctx.adjacency.clone(),
        seed: 0,
    };
    match ctx.kind {
        ModelKind::ACnn => {
            mc.t_past = Some(
                cfg.model
                    .t_past
                    .unwrap_or_else(|| cfg.windows.t.min(3)),
            );
        }
        ModelKind::AGcnLstm | ModelKind::GcnLstm => {
            mc.k = Some(cfg.model.k.unwrap_or(3));
        }
        _ => {}
    }
    if let Some(target) = cfg.model.target_params {
        mc = match_hidden_width(target, &mc)?;
    }
    Ok(mc)
}

fn tpast_grid(cfg: &ExperimentConfig) -> Option<Vec<usize>> {
    match (&cfg.model.t_past, &cfg.model.t_past_grid) {
        (Some(_), _) => None,
        (None, Some(grid)) => Some(grid.clone()),
        (None, None) => None,
    }
}

fn normalized_split(
    ctx: &KindContext,
    fold: &FoldSpec,
    span: usize,
    series: &StSeries,
) -> Result<(Zscore, Dataset, Dataset, Dataset, Tensor)> {
    let z = Zscore::fit(&train_range_rows(series, fold, span))?;
    let split = |idx: &[usize]| -> Result<Dataset> {
        let (x, y) = ctx.dataset.gather(idx);
        Dataset::new(z.apply(&x)?, z.apply(&y)?)
    };
    let train_set = split(&fold.train_indices())?;
    let val_set = split(&fold.val_indices())?;
    let test_idx = fold.test_indices();
    let test_set = split(&test_idx)?;
    let (_, raw_test_y) = ctx.dataset.gather(&test_idx);
    Ok((z, train_set, val_set, test_set, raw_test_y))
}

/// De-normalized test metrics, accumulated per location and reduced in
/// sorted order so spatial permutations leave the result bit-identical.
fn evaluate_fold(
    model: &mut stlab_core::models::Forecaster,
    test_set: &Dataset,
    raw_y: &Tensor,
    z: &Zscore,
    batch: usize,
) -> Result<(f64, f64)> {
    let s = test_set.x().shape()[2];
    let mut sse = vec![0.0f64; s];
    let mut err = vec![0.0f64; s];
    let mut count = 0usize;
    let n = test_set.len();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = test_set.gather(chunk);
        let pred = model.predict(&x)?;
        let pred = z.invert(&pred)?;
        let tp = pred.shape()[1];
        for (row, &i) in chunk.iter().enumerate() {
            for t in 0..tp {
                for loc in 0..s {
                    let p = pred.data()[(row * tp + t) * s + loc];
                    let y = raw_y.data()[(i * tp + t) * s + loc];
                    let d = p - y;
                    sse[loc] += d * d;
                    err[loc] += d;
                }
            }
        }
        count += chunk.len() * tp;
    }
    let total = (count * s) as f64;
    let rmse = (sorted_sum(&mut sse) / total).sqrt();
    let bias = sorted_sum(&mut err) / total;
    Ok((rmse, bias))
}

fn run_one_fold(
    ctx: &KindContext,
    fold: &FoldSpec,
    cfg: &ExperimentConfig,
    series: &StSeries,
) -> Result<FoldRow> {
    let span = cfg.windows.t + cfg.windows.t_out;
    let (z, train_set, val_set, test_set, raw_y) = normalized_split(ctx, fold, span, series)?;
    let mut mc = base_model_config(ctx, cfg)?;
    mc.seed = derive_seed(cfg.seed, ctx.kind, fold.fold_id, 0);
    let mut tc = cfg.train_config();
    tc.seed = derive_seed(cfg.seed, ctx.kind, fold.fold_id, 1);

    if ctx.kind == ModelKind::ACnn {
        if let Some(grid) = tpast_grid(cfg) {
            let (best, _) = grid_search_tpast(&grid, &mc, &train_set, &val_set, &tc)?;
            mc.t_past = Some(best);
        }
    }

    let mut model = build_model(&mc)?;
    let params = count_parameters(&model).total();
    match train(&mut model, &train_set, &val_set, &tc) {
        Ok(_) => {}
        Err(Error::Diverged { .. }) => {
            return Ok(FoldRow {
                model: ctx.kind.name().to_string(),
                fold: fold.fold_id,
                rmse: f64::NAN,
                bias: f64::NAN,
                params,
            });
        }
        Err(e) => return Err(e),
    }
    let (rmse, bias) = evaluate_fold(&mut model, &test_set, &raw_y, &z, tc.batch_size)?;
    Ok(FoldRow {
        model: ctx.kind.name().to_string(),
        fold: fold.fold_id,
        rmse,
        bias,
        params,
    })
}

/// Trains and evaluates every configured model on every fold. Jobs may run
/// on up to `jobs` threads; results are assembled in (model, fold) order
/// regardless of completion order.
pub fn run_suite(cfg: &ExperimentConfig, series: &StSeries, jobs: usize) -> Result<RunOutput> {
    let kinds = cfg.model_kinds()?;
    let span = cfg.windows.t + cfg.windows.t_out;
    if series.n() < span {
        return Err(Error::Config(format!(
            "series of {} rows cannot host windows of span {span}",
            series.n()
        )));
    }
    let num_windows = series.n() - span + 1;
    let folds = blocked_cv(num_windows, cfg.windows.t, cfg.windows.t_out)?;

    let contexts: Vec<KindContext> = kinds
        .iter()
        .map(|&k| context_for(k, series, cfg))
        .collect::<Result<_>>()?;

    let job_list: Vec<(usize, usize)> = (0..contexts.len())
        .flat_map(|c| (0..folds.len()).map(move |f| (c, f)))
        .collect();
    let results: Mutex<Vec<Option<Result<(FoldRow, f64)>>>> =
        Mutex::new((0..job_list.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = jobs.max(1).min(job_list.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= job_list.len() {
                    break;
                }
                let (c, f) = job_list[i];
                let start = Instant::now();
                let row = run_one_fold(&contexts[c], &folds[f], cfg, series);
                let secs = start.elapsed().as_secs_f64();
                results.lock().unwrap()[i] = Some(row.map(|r| (r, secs)));
            });
        }
    });

    let mut rows = Vec::with_capacity(job_list.len());
    let mut timings = Vec::with_capacity(job_list.len());
    let mut diverged = 0usize;
    for slot in results.into_inner().unwrap() {
        let (row, secs) = slot.expect("all jobs completed")?;
        if row.rmse.is_nan() {
            diverged += 1;
        }
        timings.push(Timing {
            model: row.model.clone(),
            fold: row.fold,
            seconds: secs,
        });
        rows.push(row);
    }
    Ok(RunOutput {
        rows,
        timings,
        folds,
        diverged,
    })
}

/// Original-vs-permuted comparison for one model.
#[derive(Debug, Clone)]
pub struct PermComparison {
    pub model: String,
    pub original: Vec<f64>,
    pub permuted: Vec<f64>,
    pub report: StatReport,
}

/// The spatial permutation experiment: reruns the suite with the value
/// columns shuffled away from their coordinates (the arrangement semantics
/// are destroyed while the data distribution is preserved), then compares
/// per-fold RMSE with Wilcoxon under a joint Holm/BH family.
pub fn permutation_experiment(
    cfg: &ExperimentConfig,
    series: &StSeries,
    jobs: usize,
) -> Result<(RunOutput, RunOutput, Vec<PermComparison>)> {
    let original = run_suite(cfg, series, jobs)?;
    let broken = break_spatial_association(series, cfg.permutation.seed)?;
    let permuted = run_suite(cfg, &broken, jobs)?;

    let kinds = cfg.model_kinds()?;
    let mut comparisons = Vec::new();
    for kind in &kinds {
        let name = kind.name();
        let pick = |out: &RunOutput| -> Vec<f64> {
            let mut v: Vec<(usize, f64)> = out
                .rows
                .iter()
                .filter(|r| r.model == name)
                .map(|r| (r.fold, r.rmse))
                .collect();
            v.sort_by_key(|&(f, _)| f);
            v.into_iter().map(|(_, r)| r).collect()
        };
        let a = pick(&original);
        let b = pick(&permuted);
        let report = wilcoxon_signed_rank(&b, &a, cfg.alpha)?;
        comparisons.push(PermComparison {
            model: name.to_string(),
            original: a,
            permuted: b,
            report,
        });
    }
    let raw: Vec<f64> = comparisons.iter().map(|c| c.report.p_raw).collect();
    let holm = adjust_holm(&raw);
    let bh = adjust_bh(&raw);
    let m = comparisons.len();
    for (i, c) in comparisons.iter_mut().enumerate() {
        c.report.test_name = format!("{} vs {}-perm", c.model, c.model);
        c.report.p_holm = Some(holm[i]);
        c.report.p_bh = Some(bh[i]);
        c.report.n_hypotheses = m;
        c.report.reject = !c.report.degenerate && holm[i] < cfg.alpha;
    }
    Ok((original, permuted, comparisons))
}

/// Shuffles the value columns while leaving coordinates and names in place,
/// so every spatial prior derived from the coordinates (orderings,
/// adjacency) stops matching the data.
pub fn break_spatial_association(series: &StSeries, seed: u64) -> Result<StSeries> {
    let (permuted, _) = stlab_core::data::permute_space(series, seed);
    StSeries::new(
        permuted.values().clone(),
        series.timestamps().to_vec(),
        series.coords().to_vec(),
        series.names().to_vec(),
    )
}
