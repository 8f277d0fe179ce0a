//! Ingestion, normalization, windowing, spatial ordering, adjacency,
//! blocked cross-validation, permutation perturbation and synthetic series.

use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Dataset;

/// A spatio-temporal series: N observations over S locations, time-major.
#[derive(Debug, Clone)]
pub struct StSeries {
    values: Tensor,
    timestamps: Vec<NaiveDateTime>,
    coords: Vec<(f64, f64)>,
    names: Vec<String>,
    timestep: Duration,
}

impl StSeries {
    /// Validates the monotone constant-stride timestamp invariant and the
    /// dimension agreement between values, coords and names.
    pub fn new(
        values: Tensor,
        timestamps: Vec<NaiveDateTime>,
        coords: Vec<(f64, f64)>,
        names: Vec<String>,
    ) -> Result<Self> {
        let shape = values.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Data(format!(
                "series values must be a 2-d matrix, got shape {shape:?}"
            )));
        }
        let (n, s) = (shape[0], shape[1]);
        if timestamps.len() != n {
            return Err(Error::Data(format!(
                "{} timestamps for {n} rows",
                timestamps.len()
            )));
        }
        if coords.len() != s || names.len() != s {
            return Err(Error::Data(format!(
                "{} coords / {} names for {s} columns",
                coords.len(),
                names.len()
            )));
        }
        if n < 2 {
            return Err(Error::Data("series needs at least 2 rows".into()));
        }
        let step = timestamps[1] - timestamps[0];
        if step <= Duration::zero() {
            return Err(Error::Data("timestamps not strictly increasing".into()));
        }
        for w in timestamps.windows(2) {
            if w[1] - w[0] != step {
                return Err(Error::Data(format!(
                    "timestep changes at {}: expected stride {}s",
                    w[1],
                    step.num_seconds()
                )));
            }
        }
        if coords.iter().any(|c| !c.0.is_finite() || !c.1.is_finite()) {
            return Err(Error::Data("non-finite coordinate".into()));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite {
                context: "series values".into(),
            });
        }
        Ok(StSeries {
            values,
            timestamps,
            coords,
            names,
            timestep: step,
        })
    }

    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn s(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn timestep(&self) -> Duration {
        self.timestep
    }

    /// New series with columns (values, coords, names) arranged so that new
    /// column k is old column `order[k]`.
    pub fn reorder_columns(&self, order: &[usize]) -> Result<StSeries> {
        let s = self.s();
        let mut seen = vec![false; s];
        if order.len() != s || order.iter().any(|&i| i >= s || std::mem::replace(&mut seen[i], true))
        {
            return Err(Error::Data(format!("not a permutation of 0..{s}")));
        }
        let n = self.n();
        let mut values = vec![0.0; n * s];
        for t in 0..n {
            for (k, &src) in order.iter().enumerate() {
                values[t * s + k] = self.values.data()[t * s + src];
            }
        }
        Ok(StSeries {
            values: Tensor::from_vec(&[n, s], values)?,
            timestamps: self.timestamps.clone(),
            coords: order.iter().map(|&i| self.coords[i]).collect(),
            names: order.iter().map(|&i| self.names[i].clone()).collect(),
            timestep: self.timestep,
        })
    }
}

fn parse_timestamp(raw: &str) -> Result<NaiveDateTime> {
    let raw = raw.trim();
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(ts);
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).unwrap());
    }
    Err(Error::Data(format!("unparseable timestamp {raw:?}")))
}

/// Loads a wide data CSV (first column timestamp, remaining columns one per
/// location) plus a `name,x,y` coordinates sidecar. Missing cells are
/// forward-filled then back-filled; the fill count is returned alongside.
/// Any column more than 20% missing is rejected.
pub fn load_csv(data_path: &Path, coords_path: &Path) -> Result<(StSeries, usize)> {
    let mut coord_rows = csv::Reader::from_path(coords_path)?;
    let mut coord_map = std::collections::HashMap::new();
    for rec in coord_rows.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Data(format!(
                "coordinate row needs name,x,y, got {} fields",
                rec.len()
            )));
        }
        let x: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad coordinate {:?}", &rec[1])))?;
        let y: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad coordinate {:?}", &rec[2])))?;
        coord_map.insert(rec[0].trim().to_string(), (x, y));
    }

    let mut reader = csv::Reader::from_path(data_path)?;
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Data("data CSV needs a timestamp column and at least one location".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut coords = Vec::with_capacity(names.len());
    for name in &names {
        match coord_map.get(name) {
            Some(&c) => coords.push(c),
            None => {
                return Err(Error::Data(format!(
                    "location {name:?} missing from coordinates file"
                )))
            }
        }
    }

    let s = names.len();
    let mut timestamps = Vec::new();
    let mut cells: Vec<Option<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != s + 1 {
            return Err(Error::Data(format!(
                "row {} has {} fields, expected {}",
                timestamps.len() + 2,
                rec.len(),
                s + 1
            )));
        }
        timestamps.push(parse_timestamp(&rec[0])?);
        for field in rec.iter().skip(1) {
            let field = field.trim();
            if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                cells.push(None);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Data(format!("unparseable value {field:?}")))?;
                cells.push(Some(v));
            }
        }
    }
    let n = timestamps.len();
    if n < 2 {
        return Err(Error::Data("data CSV needs at least 2 rows".into()));
    }

    let mut filled = 0usize;
    let mut values = vec![0.0; n * s];
    for col in 0..s {
        let missing = (0..n).filter(|&t| cells[t * s + col].is_none()).count();
        if missing * 5 > n {
            return Err(Error::Data(format!(
                "column {:?} is {missing}/{n} missing (over 20%)",
                names[col]
            )));
        }
        if missing == n {
            return Err(Error::Data(format!("column {:?} entirely missing", names[col])));
        }
        filled += missing;
        let mut last: Option<f64> = None;
        for t in 0..n {
            if let Some(v) = cells[t * s + col] {
                last = Some(v);
            }
            if let Some(v) = last {
                values[t * s + col] = v;
            } else {
                values[t * s + col] = f64::NAN; // back-filled below
            }
        }
        let mut next = values[(n - 1) * s + col];
        for t in (0..n).rev() {
            if values[t * s + col].is_nan() {
                values[t * s + col] = next;
            } else {
                next = values[t * s + col];
            }
        }
    }

    let series = StSeries::new(Tensor::from_vec(&[n, s], values)?, timestamps, coords, names)?;
    Ok((series, filled))
}

/// Writes the wide data CSV and coordinates sidecar consumed by `load_csv`.
/// Floats use the shortest round-trippable decimal form.
pub fn write_csv(series: &StSeries, data_path: &Path, coords_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(data_path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(series.names.iter().cloned());
    w.write_record(&header)?;
    let s = series.s();
    for (t, ts) in series.timestamps.iter().enumerate() {
        let mut row = vec![ts.format("%Y-%m-%dT%H:%M:%S").to_string()];
        for col in 0..s {
            row.push(format!("{}", series.values.data()[t * s + col]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(coords_path)?;
    w.write_record(["name", "x", "y"])?;
    for (name, (x, y)) in series.names.iter().zip(&series.coords) {
        w.write_record([name.as_str(), &format!("{x}"), &format!("{y}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-location standardization fitted on a training range only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Zscore {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Zscore {
    /// Fits population mean and standard deviation per column of an [N, S]
    /// matrix. A constant column is rejected by name of its index.
    pub fn fit(train_values: &Tensor) -> Result<Zscore> {
        let shape = train_values.shape();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "zscore_fit",
                detail: format!("expected [N, S], got {shape:?}"),
            });
        }
        let (n, s) = (shape[0], shape[1]);
        let mut mean = vec![0.0; s];
        let mut std = vec![0.0; s];
        for col in 0..s {
            let m = (0..n).map(|t| train_values.data()[t * s + col]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|t| {
                    let d = train_values.data()[t * s + col] - m;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            if var == 0.0 {
                return Err(Error::Data(format!(
                    "column {col} is constant; cannot standardize"
                )));
            }
            mean[col] = m;
            std[col] = var.sqrt();
        }
        Ok(Zscore { mean, std })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    fn check(&self, x: &Tensor, op: &'static str) -> Result<usize> {
        let s = self.mean.len();
        match x.shape().last() {
            Some(&last) if last == s => Ok(s),
            _ => Err(Error::Shape {
                op,
                detail: format!(
                    "last dimension of {:?} must be {s} locations",
                    x.shape()
                ),
            }),
        }
    }

    /// (x - mean) / std along the trailing location axis.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.check(x, "zscore_apply")?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let col = i % s;
            *v = (*v - self.mean[col]) / self.std[col];
        }
        Ok(out)
    }

    /// Inverse of `apply`.
    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.check(x, "zscore_invert")?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let col = i % s;
            *v = *v * self.std[col] + self.mean[col];
        }
        Ok(out)
    }
}

/// One supervised window: `y` starts at the timestep right after `x` ends.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Tensor,
    pub y: Tensor,
    pub origin_index: usize,
}

/// Stride-1 sliding windows: N - T - T' + 1 samples in series order.
pub fn make_windows(series: &StSeries, t: usize, t_out: usize) -> Result<Vec<Sample>> {
    let (n, s) = (series.n(), series.s());
    if t == 0 || t_out == 0 {
        return Err(Error::Config("window lengths must be positive".into()));
    }
    if n < t + t_out {
        return Err(Error::Data(format!(
            "series of {n} rows too short for T={t} plus T'={t_out}"
        )));
    }
    let data = series.values().data();
    let mut out = Vec::with_capacity(n - t - t_out + 1);
    for start in 0..=(n - t - t_out) {
        let x = data[start * s..(start + t) * s].to_vec();
        let y = data[(start + t) * s..(start + t + t_out) * s].to_vec();
        out.push(Sample {
            x: Tensor::from_vec(&[t, s], x)?,
            y: Tensor::from_vec(&[t_out, s], y)?,
            origin_index: start,
        });
    }
    Ok(out)
}

/// Stacks samples into a training `Dataset` ([B, T, S] inputs, [B, T', S]
/// targets).
pub fn stack_samples(samples: &[Sample]) -> Result<Dataset> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot stack zero samples".into()))?;
    let (xs, ys) = (first.x.shape().to_vec(), first.y.shape().to_vec());
    let mut x = Vec::with_capacity(samples.len() * first.x.len());
    let mut y = Vec::with_capacity(samples.len() * first.y.len());
    for sample in samples {
        if sample.x.shape() != xs || sample.y.shape() != ys {
            return Err(Error::Shape {
                op: "stack_samples",
                detail: "samples have mixed window shapes".into(),
            });
        }
        x.extend_from_slice(sample.x.data());
        y.extend_from_slice(sample.y.data());
    }
    Dataset::new(
        Tensor::from_vec(&[samples.len(), xs[0], xs[1]], x)?,
        Tensor::from_vec(&[samples.len(), ys[0], ys[1]], y)?,
    )
}

/// Half-open window-index ranges for one cross-validation fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub gap: usize,
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl FoldSpec {
    fn expand(ranges: &[(usize, usize)]) -> Vec<usize> {
        ranges.iter().flat_map(|&(a, b)| a..b).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        Self::expand(&self.train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        Self::expand(&self.val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        Self::expand(&self.test)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum SetKind {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// Ten-fold blocked scheme: the window timeline is cut into ten contiguous
/// blocks; fold f tests on block f and validates on the block before it
/// (cyclically), training on the rest. A gap of T + T' - 1 windows is carved
/// out at every boundary between sets so no raw timestep is shared; the gap
/// comes out of the lower-priority side (train < val < test).
pub fn blocked_cv(num_windows: usize, t: usize, t_out: usize) -> Result<Vec<FoldSpec>> {
    let gap = t + t_out - 1;
    if num_windows < 10 * (t + t_out) {
        return Err(Error::Config(format!(
            "{num_windows} windows cannot support 10 folds of span {} plus gaps",
            t + t_out
        )));
    }
    let bound = |f: usize| f * num_windows / 10;
    let mut folds = Vec::with_capacity(10);
    for f in 0..10 {
        let val_block = (f + 9) % 10;
        // Contiguous segments in timeline order, merging adjacent train blocks.
        let mut segments: Vec<(SetKind, usize, usize)> = Vec::new();
        for b in 0..10 {
            let kind = if b == f {
                SetKind::Test
            } else if b == val_block {
                SetKind::Val
            } else {
                SetKind::Train
            };
            let (lo, hi) = (bound(b), bound(b + 1));
            match segments.last_mut() {
                Some((k, _, end)) if *k == kind => *end = hi,
                _ => segments.push((kind, lo, hi)),
            }
        }
        // Trim the separation gap from the lower-priority side of each
        // boundary.
        for i in 0..segments.len() - 1 {
            if segments[i].0 < segments[i + 1].0 {
                segments[i].2 = segments[i].2.saturating_sub(gap);
            } else {
                segments[i + 1].1 += gap;
            }
        }
        let mut spec = FoldSpec {
            fold_id: f,
            gap,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (kind, lo, hi) in segments {
            if lo >= hi {
                return Err(Error::Config(format!(
                    "fold {f}: a block vanished entirely into separation gaps"
                )));
            }
            let dest = match kind {
                SetKind::Train => &mut spec.train,
                SetKind::Val => &mut spec.val,
                SetKind::Test => &mut spec.test,
            };
            dest.push((lo, hi));
        }
        folds.push(spec);
    }
    Ok(folds)
}

/// Audit artifact: the fold layout as JSON.
pub fn write_folds_json(folds: &[FoldSpec], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, folds)?;
    Ok(())
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Leaf order of agglomerative clustering with average linkage on Euclidean
/// distance. Merge ties break on the smallest minimum leaf index; the left
/// subtree is the cluster holding the smaller minimum index.
pub fn dendrogram_order(coords: &[(f64, f64)]) -> Result<Vec<usize>> {
    let s = coords.len();
    if s < 2 {
        return Err(Error::Data("dendrogram needs at least 2 locations".into()));
    }
    if coords.iter().any(|c| !c.0.is_finite() || !c.1.is_finite()) {
        return Err(Error::Data("non-finite coordinate".into()));
    }
    // Each live cluster: leaves in traversal order, minimum leaf index.
    struct Cluster {
        leaves: Vec<usize>,
        min: usize,
    }
    let mut clusters: Vec<Cluster> = (0..s)
        .map(|i| Cluster {
            leaves: vec![i],
            min: i,
        })
        .collect();
    while clusters.len() > 1 {
        // Average linkage: mean pairwise leaf distance between clusters.
        // Ties break on the (smaller-min, larger-min) leaf indices.
        let mut best: Option<((f64, usize, usize), usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut sum = 0.0;
                for &a in &clusters[i].leaves {
                    for &b in &clusters[j].leaves {
                        sum += euclid(coords[a], coords[b]);
                    }
                }
                let d = sum / (clusters[i].leaves.len() * clusters[j].leaves.len()) as f64;
                let key = (
                    d,
                    clusters[i].min.min(clusters[j].min),
                    clusters[i].min.max(clusters[j].min),
                );
                let better = match &best {
                    None => true,
                    Some((bk, _, _)) => {
                        key.0 < bk.0 || (key.0 == bk.0 && (key.1, key.2) < (bk.1, bk.2))
                    }
                };
                if better {
                    best = Some((key, i, j));
                }
            }
        }
        let (_, i, j) = best.unwrap();
        let (lo, hi) = (i.min(j), i.max(j));
        let right = clusters.swap_remove(hi);
        let left = clusters.swap_remove(lo);
        let (first, second) = if left.min < right.min {
            (left, right)
        } else {
            (right, left)
        };
        let mut leaves = first.leaves;
        leaves.extend(second.leaves);
        let min = first.min.min(second.min);
        clusters.push(Cluster { leaves, min });
    }
    Ok(clusters.pop().unwrap().leaves)
}

/// 4-nearest-neighbour adjacency, symmetrized by OR. Distance ties break on
/// the smaller candidate index.
pub fn build_adjacency(coords: &[(f64, f64)]) -> Result<Vec<u8>> {
    let s = coords.len();
    if s < 5 {
        return Err(Error::Data(format!(
            "4-nearest-neighbour adjacency needs at least 5 locations, got {s}"
        )));
    }
    let mut a = vec![0u8; s * s];
    for i in 0..s {
        let mut others: Vec<usize> = (0..s).filter(|&j| j != i).collect();
        others.sort_by(|&p, &q| {
            euclid(coords[i], coords[p])
                .total_cmp(&euclid(coords[i], coords[q]))
                .then(p.cmp(&q))
        });
        for &j in others.iter().take(4) {
            a[i * s + j] = 1;
            a[j * s + i] = 1;
        }
    }
    Ok(a)
}

/// Applies a seeded uniform random permutation to the spatial dimension.
/// New column k holds old column perm[k]; the permutation is returned for
/// audit and inversion.
pub fn permute_space(series: &StSeries, seed: u64) -> (StSeries, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..series.s()).collect();
    perm.shuffle(&mut rng);
    let permuted = series
        .reorder_columns(&perm)
        .expect("identity-length permutation");
    (permuted, perm)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix,
/// with a small jitter retry for near-singular fields.
fn cholesky(mut m: Vec<f64>, s: usize) -> Result<Vec<f64>> {
    for attempt in 0..2 {
        let mut l = vec![0.0; s * s];
        let mut ok = true;
        'outer: for i in 0..s {
            for j in 0..=i {
                let mut sum = m[i * s + j];
                for k in 0..j {
                    sum -= l[i * s + k] * l[j * s + k];
                }
                if i == j {
                    if sum <= 0.0 {
                        ok = false;
                        break 'outer;
                    }
                    l[i * s + j] = sum.sqrt();
                } else {
                    l[i * s + j] = sum / l[j * s + j];
                }
            }
        }
        if ok {
            return Ok(l);
        }
        if attempt == 0 {
            for d in 0..s {
                m[d * s + d] += 1e-9;
            }
        }
    }
    Err(Error::Data("spatial covariance is not positive definite".into()))
}

/// Synthetic series on a square grid: a shared diurnal sinusoid with
/// location-specific amplitude and phase drawn from a squared-exponential
/// Gaussian field of length-scale `corr_len`, plus AR(1) noise whose
/// innovations share the same field, plus small independent measurement
/// noise. `corr_len = 0` makes every location independent.
pub fn synth_generate(s: usize, n: usize, corr_len: f64, seed: u64) -> Result<StSeries> {
    if s == 0 || n < 2 {
        return Err(Error::Config("need at least 1 location and 2 rows".into()));
    }
    if !(corr_len >= 0.0) {
        return Err(Error::Config(format!("corr_len must be >= 0, got {corr_len}")));
    }
    let side = (s as f64).sqrt().ceil() as usize;
    let coords: Vec<(f64, f64)> = (0..s)
        .map(|i| ((i % side) as f64, (i / side) as f64))
        .collect();
    let names: Vec<String> = (0..s).map(|i| format!("loc{i:03}")).collect();

    // Squared-exponential field factor; identity when uncorrelated.
    let l = if corr_len == 0.0 {
        let mut eye = vec![0.0; s * s];
        for d in 0..s {
            eye[d * s + d] = 1.0;
        }
        eye
    } else {
        let mut cov = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                let d = euclid(coords[i], coords[j]);
                cov[i * s + j] = (-d * d / (2.0 * corr_len * corr_len)).exp();
            }
            cov[i * s + i] += 1e-9;
        }
        cholesky(cov, s)?
    };
    let correlate = |z: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; s];
        for i in 0..s {
            for k in 0..=i {
                out[i] += l[i * s + k] * z[k];
            }
        }
        out
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..s)
            .map(|_| {
                // Box-Muller keeps the dependency surface small.
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect()
    };
    let amp_field = correlate(&draw(&mut rng));
    let phase_field = correlate(&draw(&mut rng));
    let amp: Vec<f64> = amp_field.iter().map(|g| 1.0 + 0.3 * g).collect();
    let phase: Vec<f64> = phase_field.iter().map(|g| 0.5 * g).collect();

    let (rho, noise_scale, meas) = (0.7f64, 0.5, 0.3);
    let mut ar = vec![0.0; s];
    let mut values = vec![0.0; n * s];
    for t in 0..n {
        let innov = correlate(&draw(&mut rng));
        let white = draw(&mut rng);
        for loc in 0..s {
            ar[loc] = rho * ar[loc] + (1.0 - rho * rho).sqrt() * innov[loc];
            let diurnal = amp[loc]
                * (std::f64::consts::TAU * t as f64 / 24.0 + phase[loc]).sin();
            values[t * s + loc] = diurnal + noise_scale * ar[loc] + meas * white[loc];
        }
    }

    let start = NaiveDate::from_ymd_opt(2021, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let timestamps: Vec<NaiveDateTime> = (0..n)
        .map(|t| start + Duration::hours(t as i64))
        .collect();
    StSeries::new(Tensor::from_vec(&[n, s], values)?, timestamps, coords, names)
}
