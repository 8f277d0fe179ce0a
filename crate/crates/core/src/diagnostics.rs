//! Data-characterization statistics: Moran's I for spatial structure, and
//! the cort / ATDM pair for temporal structure.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::StSeries;
use crate::error::{Error, Result};

/// Nonnegative spatial weights with a zero diagonal.
#[derive(Debug, Clone)]
pub struct SpatialWeights {
    s: usize,
    w: Vec<f64>,
    // Nonzero entries, for statistics that loop over neighbour pairs.
    entries: Vec<(usize, usize, f64)>,
    w_sum: f64,
}

impl SpatialWeights {
    pub fn new(w: Vec<f64>, s: usize) -> Result<Self> {
        if w.len() != s * s {
            return Err(Error::Shape {
                op: "spatial_weights",
                detail: format!("{} entries for an {s}x{s} matrix", w.len()),
            });
        }
        let mut entries = Vec::new();
        let mut w_sum = 0.0;
        for i in 0..s {
            for j in 0..s {
                let v = w[i * s + j];
                if !(v >= 0.0) {
                    return Err(Error::Data(format!(
                        "weight ({i},{j}) = {v} is negative or NaN"
                    )));
                }
                if i == j && v != 0.0 {
                    return Err(Error::Data(format!("nonzero diagonal weight at {i}")));
                }
                if v > 0.0 {
                    entries.push((i, j, v));
                    w_sum += v;
                }
            }
        }
        if w_sum <= 0.0 {
            return Err(Error::Data("all spatial weights are zero".into()));
        }
        Ok(SpatialWeights { s, w, entries, w_sum })
    }

    /// Binary weights from an adjacency matrix (the 4-NN default).
    pub fn from_adjacency(adj: &[u8], s: usize) -> Result<Self> {
        Self::new(adj.iter().map(|&v| f64::from(v)).collect(), s)
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn matrix(&self) -> &[f64] {
        &self.w
    }

    pub fn w_sum(&self) -> f64 {
        self.w_sum
    }
}

/// I = S/W * sum_ij w_ij (x_i - xbar)(x_j - xbar) / sum_i (x_i - xbar)^2.
pub fn morans_i(x: &[f64], w: &SpatialWeights) -> Result<f64> {
    let s = w.s();
    if x.len() != s {
        return Err(Error::Shape {
            op: "morans_i",
            detail: format!("{} values for {s} locations", x.len()),
        });
    }
    if s < 2 {
        return Err(Error::Stats("Moran's I needs at least 2 locations".into()));
    }
    let mean = x.iter().sum::<f64>() / s as f64;
    let denom: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return Err(Error::Stats("constant field has no spatial variance".into()));
    }
    let num: f64 = w
        .entries
        .iter()
        .map(|&(i, j, wij)| wij * (x[i] - mean) * (x[j] - mean))
        .sum();
    Ok(s as f64 / w.w_sum() * num / denom)
}

/// Moran's I over a whole series: per-timestep values, their average, and a
/// permutation p-value.
#[derive(Debug, Clone)]
pub struct MoranSeries {
    pub mean_i: f64,
    pub p_value: f64,
    pub per_timestep: Vec<f64>,
    pub skipped_timesteps: usize,
}

/// Averages per-timestep I (constant timesteps skipped and counted) and
/// attaches a two-sided permutation p-value: each timestep's I is ranked
/// against `perms` random shuffles of its values, and the per-timestep
/// p-values are Fisher-combined.
pub fn morans_i_series(
    series: &StSeries,
    w: &SpatialWeights,
    perms: usize,
    seed: u64,
) -> Result<MoranSeries> {
    let (n, s) = (series.n(), series.s());
    if w.s() != s {
        return Err(Error::Shape {
            op: "morans_i_series",
            detail: format!("weights for {} locations, series has {s}", w.s()),
        });
    }
    if perms == 0 {
        return Err(Error::Config("need at least one permutation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_timestep = Vec::new();
    let mut skipped = 0usize;
    let mut log_p_sum = 0.0;
    let mut kept = 0usize;
    let mut row = vec![0.0; s];
    for t in 0..n {
        row.copy_from_slice(&series.values().data()[t * s..(t + 1) * s]);
        let observed = match morans_i(&row, w) {
            Ok(v) => v,
            Err(Error::Stats(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        per_timestep.push(observed);
        let mut extreme = 0usize;
        let mut shuffled = row.clone();
        for _ in 0..perms {
            shuffled.shuffle(&mut rng);
            let i_perm = morans_i(&shuffled, w)?;
            if i_perm.abs() >= observed.abs() {
                extreme += 1;
            }
        }
        let p_t = (1 + extreme) as f64 / (perms + 1) as f64;
        log_p_sum += p_t.ln();
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::Stats("every timestep is spatially constant".into()));
    }
    // Fisher combination: -2 sum ln p ~ chi^2 with 2*kept df under the null.
    let chi = ChiSquared::new(2.0 * kept as f64)
        .map_err(|e| Error::Stats(format!("chi-squared setup: {e}")))?;
    let stat = -2.0 * log_p_sum;
    let p_value = 1.0 - chi.cdf(stat);
    let mean_i = per_timestep.iter().sum::<f64>() / kept as f64;
    Ok(MoranSeries {
        mean_i,
        p_value,
        per_timestep,
        skipped_timesteps: skipped,
    })
}

/// Temporal correlation: cosine similarity of first-difference vectors.
pub fn cort(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cort",
            detail: format!("series lengths {} vs {}", a.len(), b.len()),
        });
    }
    if a.len() < 2 {
        return Err(Error::Stats("cort needs at least 2 observations".into()));
    }
    let (mut num, mut na, mut nb) = (0.0, 0.0, 0.0);
    for t in 0..a.len() - 1 {
        let da = a[t + 1] - a[t];
        let db = b[t + 1] - b[t];
        num += da * db;
        na += da * da;
        nb += db * db;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Stats("series with zero increments has no cort".into()));
    }
    Ok(num / (na.sqrt() * nb.sqrt()))
}

/// The tuning function f(x) = 2 / (1 + exp(k x)): strictly decreasing,
/// f(0) = 1, range inside (0, 2).
pub fn tuning(x: f64, k: f64) -> f64 {
    2.0 / (1.0 + (k * x).exp())
}

/// ATDM(a, b) = f(cort(a, b)) * delta(a, b) with delta the Euclidean
/// distance divided by sqrt(N) so values compare across series lengths.
pub fn atdm(a: &[f64], b: &[f64], k: f64) -> Result<f64> {
    if k < 0.0 {
        return Err(Error::Config(format!("k must be >= 0, got {k}")));
    }
    let delta = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
        / (a.len() as f64).sqrt();
    if delta == 0.0 {
        // Identical series: distance settles the product before cort, whose
        // zero-increment guard would otherwise reject constant columns.
        return Ok(0.0);
    }
    Ok(tuning(cort(a, b)?, k) * delta)
}

/// Centered moving average, truncated to the fully covered range.
pub fn moving_average(x: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > x.len() {
        return Err(Error::Config(format!(
            "window {window} invalid for series of {}",
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(x.len() - window + 1);
    let mut sum: f64 = x[..window].iter().sum();
    out.push(sum / window as f64);
    for t in window..x.len() {
        sum += x[t] - x[t - window];
        out.push(sum / window as f64);
    }
    Ok(out)
}

/// Mean ATDM over unordered location pairs, raw and on the moving-average
/// smoothed series.
pub fn atdm_dataset(series: &StSeries, k: f64, window: usize) -> Result<(f64, f64)> {
    let (n, s) = (series.n(), series.s());
    if s < 2 {
        return Err(Error::Stats("ATDM needs at least 2 locations".into()));
    }
    if window >= n {
        return Err(Error::Config(format!(
            "smoothing window {window} must be below series length {n}"
        )));
    }
    let col = |j: usize| -> Vec<f64> {
        (0..n).map(|t| series.values().data()[t * s + j]).collect()
    };
    let columns: Vec<Vec<f64>> = (0..s).map(col).collect();
    let smoothed: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| moving_average(c, window))
        .collect::<Result<_>>()?;
    let (mut raw_sum, mut adj_sum) = (0.0, 0.0);
    let pairs = (s * (s - 1) / 2) as f64;
    for i in 0..s {
        for j in i + 1..s {
            raw_sum += atdm(&columns[i], &columns[j], k)?;
            adj_sum += atdm(&smoothed[i], &smoothed[j], k)?;
        }
    }
    Ok((raw_sum / pairs, adj_sum / pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rook_2x2() -> SpatialWeights {
        // Locations 0 1 / 2 3 on a 2x2 grid, rook neighbours.
        let mut w = vec![0.0; 16];
        for (i, j) in [(0, 1), (0, 2), (1, 3), (2, 3)] {
            w[i * 4 + j] = 1.0;
            w[j * 4 + i] = 1.0;
        }
        SpatialWeights::new(w, 4).unwrap()
    }

    #[test]
    fn morans_i_checkerboard_is_minus_one() {
        let i = morans_i(&[1.0, -1.0, -1.0, 1.0], &rook_2x2()).unwrap();
        assert!((i + 1.0).abs() < 1e-12, "{i}");
    }

    #[test]
    fn morans_i_rejects_constant_field() {
        assert!(morans_i(&[2.0; 4], &rook_2x2()).is_err());
    }

    #[test]
    fn morans_i_affine_invariance() {
        let w = rook_2x2();
        let x = [0.3, -1.2, 2.5, 0.7];
        let base = morans_i(&x, &w).unwrap();
        let mapped: Vec<f64> = x.iter().map(|v| -3.7 * v + 11.0).collect();
        let moved = morans_i(&mapped, &w).unwrap();
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(SpatialWeights::new(vec![0.0; 4], 2).is_err(), "all zero");
        let mut w = vec![0.0; 4];
        w[0] = 1.0;
        assert!(SpatialWeights::new(w, 2).is_err(), "diagonal");
        assert!(SpatialWeights::new(vec![0.0, -1.0, -1.0, 0.0], 2).is_err());
    }

    #[test]
    fn cort_proportional_and_flipped() {
        let x = [1.0, 3.0, 2.0, 5.0, 4.0];
        let scaled: Vec<f64> = x.iter().map(|v| 2.0 * v + 7.0).collect();
        let negated: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((cort(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((cort(&x, &scaled).unwrap() - 1.0).abs() < 1e-12);
        assert!((cort(&x, &negated).unwrap() + 1.0).abs() < 1e-12);
        assert!(cort(&x, &[5.0; 5]).is_err(), "zero increments");
    }

    #[test]
    fn tuning_hand_values() {
        assert!((tuning(0.0, 2.0) - 1.0).abs() < 1e-15);
        assert!((tuning(1.0, 2.0) - 2.0 / (1.0 + std::f64::consts::E.powi(2))).abs() < 1e-15);
        assert!((tuning(-1.0, 2.0) - 2.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        // Printed three-decimal checks.
        assert!((tuning(1.0, 2.0) - 0.2384).abs() < 5e-5);
        assert!((tuning(-1.0, 2.0) - 1.7616).abs() < 5e-5);
    }

    #[test]
    fn atdm_basics() {
        let x = [1.0, 3.0, 2.0, 5.0];
        assert_eq!(atdm(&x, &x, 2.0).unwrap(), 0.0);
        // Orthogonal increments: f(0) = 1 so ATDM equals the normalized
        // distance exactly.
        let a = [0.0, 1.0, 1.0, 2.0, 2.0];
        let b = [0.0, 0.0, 5.0, 5.0, 10.0];
        assert!((cort(&a, &b).unwrap()).abs() < 1e-12);
        let delta = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
            / (a.len() as f64).sqrt();
        assert!((atdm(&a, &b, 2.0).unwrap() - delta).abs() < 1e-12);
    }

    #[test]
    fn moving_average_window_edges() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(moving_average(&x, 1).unwrap(), x.to_vec());
        assert_eq!(moving_average(&x, 2).unwrap(), vec![1.5, 2.5, 3.5]);
        assert_eq!(moving_average(&x, 4).unwrap(), vec![2.5]);
        assert!(moving_average(&x, 5).is_err());
        assert!(moving_average(&x, 0).is_err());
    }
}
