//! Layer-level measurements: output error, numerical rank, spectral energy
//! concentration, outlier coverage, the sparse full-rank condition and the
//! low-rank SVD comparator.

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationFactor;
use crate::error::{Error, Result};
use crate::init::{InitReport, Strategy};
use crate::matrix::Matrix;
use crate::sparse_adapter::SparseAdapter;
use crate::transforms::{cached_plan, Side, TransformKind, TransformPlan};

pub const DEFAULT_RANK_TOL: f64 = 1e-7;
pub const DEFAULT_OUTLIER_FRACTION: f64 = 0.10;
pub const MAX_HILL_TOP_K: usize = 1024;

/// `‖(ΔW_Q − ΔW) R‖_F`, with `ΔW = 0` when no adapter is given.
pub fn output_error(dw: &Matrix, adapter: Option<&SparseAdapter>, calib: &CalibrationFactor) -> Result<f64> {
    if calib.dim() != dw.cols() {
        return Err(Error::Shape(format!(
            "calibration dimension {} for d_in = {}",
            calib.dim(),
            dw.cols()
        )));
    }
    let residual = match adapter {
        Some(a) => {
            if a.shape() != dw.shape() {
                return Err(Error::Shape(format!(
                    "error matrix {:?} vs adapter {:?}",
                    dw.shape(),
                    a.shape()
                )));
            }
            dw.sub(&a.materialize()?)?
        }
        None => dw.clone(),
    };
    Ok(calib.weighted_frobenius_sq(&residual)?.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub rank: usize,
    /// `rank / min(rows, cols)`
    pub normalized: f64,
}

pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = SVD::new(m.to_nalgebra(), false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Counts singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> RankEstimate {
    let full = m.rows().min(m.cols());
    let sv = singular_values(m);
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = if smax > 0.0 {
        sv.iter().filter(|&&s| s > rel_tol * smax).count()
    } else {
        0
    };
    RankEstimate {
        rank,
        normalized: if full == 0 { 0.0 } else { rank as f64 / full as f64 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EnergyMode {
    SingularValues,
    /// Entries of `M H`, or `H′ M H` when two-sided.
    Coefficients { kind: TransformKind, two_sided: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    /// Cumulative sums of squared magnitudes, largest first.
    pub curve: Vec<f64>,
    pub hill: f64,
    pub top_k: usize,
    /// Set when zeros fell inside the top `k` and were dropped.
    pub zeros_excluded: bool,
}

/// `min(1024, 10% of n)`, and at least 2.
pub fn default_hill_top_k(n: usize) -> usize {
    (n / 10).clamp(2, MAX_HILL_TOP_K)
}

/// Mean log-ratio of consecutive order statistics over the `k` largest
/// magnitudes (sorted descending).
pub fn hill_index(sorted_desc: &[f64], k: usize) -> Result<(f64, usize, bool)> {
    let k = k.min(sorted_desc.len());
    let top: Vec<f64> = sorted_desc[..k].iter().copied().filter(|&a| a > 0.0).collect();
    if top.len() < 2 {
        return Err(Error::Numerical(format!(
            "hill index needs at least 2 nonzero magnitudes, found {}",
            top.len()
        )));
    }
    let n = top.len();
    let sum: f64 = top.windows(2).map(|w| (w[0] / w[1]).ln()).sum();
    Ok((sum / (n - 1) as f64, n, n < k))
}

pub fn energy_curve_and_hill(m: &Matrix, mode: EnergyMode, top_k: Option<usize>) -> Result<EnergySummary> {
    let mut mags: Vec<f64> = match mode {
        EnergyMode::SingularValues => singular_values(m),
        EnergyMode::Coefficients { kind, two_sided } => {
            let right = cached_plan(kind, m.cols())?;
            let mut c = right.apply(m, Side::RightByH)?;
            if two_sided {
                c = cached_plan(kind, m.rows())?.apply(&c, Side::LeftByH)?;
            }
            c.into_vec().into_iter().map(f64::abs).collect()
        }
    };
    mags.sort_by(|a, b| b.total_cmp(a));
    let k = top_k.unwrap_or_else(|| default_hill_top_k(mags.len()));
    if k < 2 {
        return Err(Error::InvalidConfig(format!("hill top-k must be at least 2, got {k}")));
    }
    let (hill, used, zeros_excluded) = hill_index(&mags, k)?;
    let mut acc = 0.0;
    let curve = mags
        .iter()
        .map(|a| {
            acc += a * a;
            acc
        })
        .collect();
    Ok(EnergySummary {
        curve,
        hill,
        top_k: used,
        zeros_excluded,
    })
}

/// Keeps the `⌈fraction · n⌉` largest-magnitude entries of `dw`, ties to the
/// lower row-major index.
pub fn outlier_mask(dw: &Matrix, fraction: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "outlier fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let data = dw.as_slice();
    let count = ((fraction * data.len() as f64).ceil() as usize).min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
    let mut masked = Matrix::zeros(dw.rows(), dw.cols());
    for &k in &order[..count] {
        masked.as_mut_slice()[k] = data[k];
    }
    Ok(masked)
}

/// Share of the outliers' transform-domain ℓ1 mass that falls on the
/// adapter's positions.
pub fn outlier_coverage(
    dw: &Matrix,
    adapter: &SparseAdapter,
    plan: &TransformPlan,
    left: Option<&TransformPlan>,
    fraction: f64,
) -> Result<f64> {
    if adapter.kernel() != plan.kind() || plan.size() != dw.cols() || adapter.shape() != dw.shape() {
        return Err(Error::Shape(format!(
            "adapter {}/{:?} and plan {}/{} do not match the {:?} error matrix",
            adapter.kernel(),
            adapter.shape(),
            plan.kind(),
            plan.size(),
            dw.shape()
        )));
    }
    if adapter.is_empty() {
        return Ok(0.0);
    }
    let mut c = plan.apply(&outlier_mask(dw, fraction)?, Side::RightByH)?;
    if adapter.two_sided() {
        let left = left.ok_or_else(|| Error::InvalidConfig("two-sided adapter needs a left plan".into()))?;
        if left.size() != dw.rows() || left.kind() != plan.kind() {
            return Err(Error::Shape("left plan does not match d_out".into()));
        }
        c = left.apply(&c, Side::LeftByH)?;
    }
    let total: f64 = c.as_slice().iter().map(|x| x.abs()).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let captured: f64 = adapter.indices().iter().map(|&(i, j)| c[(i, j)].abs()).sum();
    Ok((captured / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullRankCheck {
    /// Strictly negative margin at every grid point.
    pub holds: bool,
    /// Largest margin seen.
    pub worst_margin: f64,
}

/// `Φ(z) − Φ(0) = (1 − z^{l−1})^k + k z^{l−1} − (k(l−1)/l) z^l − 1`
pub fn full_rank_margin(k: f64, l: f64, z: f64) -> f64 {
    let zl1 = z.powf(l - 1.0);
    (1.0 - zl1).powf(k) + k * zl1 - k * (l - 1.0) / l * z.powf(l) - 1.0
}

/// Scans `z = i / grid` for `i = 1..=grid`.
pub fn full_rank_condition(k: f64, l: f64, grid: usize) -> FullRankCheck {
    let grid = grid.max(1);
    let worst_margin = (1..=grid)
        .map(|i| full_rank_margin(k, l, i as f64 / grid as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    FullRankCheck {
        holds: worst_margin < 0.0,
        worst_margin,
    }
}

#[derive(Debug, Clone)]
pub struct LowRankBaseline {
    /// `B A` mapped back through `R⁻¹`.
    pub delta: Matrix,
    /// `d_out × rank`
    pub b: Matrix,
    /// `rank × d_in`
    pub a: Matrix,
    /// `‖(ΔW_Q − ΔW) R‖_F²`
    pub objective: f64,
    /// `R` was inverted by pseudo-inverse.
    pub pseudo_inverse: bool,
}

/// Calibrated low-rank optimum: truncated SVD of `ΔW_Q R`, then `ΔW = B A′ R⁻¹`.
pub fn svd_lowrank_baseline(dw: &Matrix, calib: &CalibrationFactor, rank: usize) -> Result<LowRankBaseline> {
    let (d_out, d_in) = dw.shape();
    if rank > d_out.min(d_in) {
        return Err(Error::InvalidConfig(format!(
            "rank {rank} exceeds min(d_out, d_in) = {}",
            d_out.min(d_in)
        )));
    }
    if calib.dim() != d_in {
        return Err(Error::Shape(format!(
            "calibration dimension {} for d_in = {d_in}",
            calib.dim()
        )));
    }
    let target = dw.matmul(calib.r())?;
    let svd = SVD::new(target.to_nalgebra(), true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let keep = &order[..rank];
    let b = Matrix::from_fn(d_out, rank, |i, c| u[(i, keep[c])] * svd.singular_values[keep[c]]);
    let a_prime = Matrix::from_fn(rank, d_in, |c, j| vt[(keep[c], j)]);

    let (r_inv, pseudo_inverse) = invert_factor(calib.r());
    let a = a_prime.matmul(&r_inv)?;
    let delta = b.matmul(&a)?;
    let objective = calib.weighted_frobenius_sq(&dw.sub(&delta)?)?;
    Ok(LowRankBaseline {
        delta,
        b,
        a,
        objective,
        pseudo_inverse,
    })
}

fn invert_factor(r: &Matrix) -> (Matrix, bool) {
    let svd = SVD::new(r.to_nalgebra(), true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let smin = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    let singular = smin.is_nan() || smin <= smax * 1e-12;
    let eps = if singular { smax * 1e-12 } else { 0.0 };
    let pinv = svd.pseudo_inverse(eps).expect("U and Vᵀ computed");
    (Matrix::from_nalgebra(&pinv), singular)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub layer: String,
    pub strategy: Option<Strategy>,
    pub kernel: TransformKind,
    pub two_sided: bool,
    pub seed: u64,
    pub budget: usize,
    pub pre_error: f64,
    pub post_error: f64,
    pub rank_f: usize,
    pub normalized_rank_f: f64,
    pub rank_delta: usize,
    pub normalized_rank_delta: f64,
    /// `None` when fewer than two coefficients are nonzero.
    pub hill: Option<f64>,
    pub hill_top_k: usize,
    pub hill_zeros_excluded: bool,
    pub outlier_coverage: f64,
    pub ill_conditioned_channels: usize,
    pub energy_curve: Vec<f64>,
}

/// Runs every measurement for one initialized layer.
pub fn analyze(
    layer: impl Into<String>,
    dw: &Matrix,
    calib: &CalibrationFactor,
    adapter: &SparseAdapter,
    init: Option<&InitReport>,
) -> Result<AnalysisReport> {
    let kind = adapter.kernel();
    let plan = cached_plan(kind, dw.cols())?;
    let left = if adapter.two_sided() {
        Some(cached_plan(kind, dw.rows())?)
    } else {
        None
    };
    let pre = output_error(dw, None, calib)?;
    let post = output_error(dw, Some(adapter), calib)?;
    let rank_f = numerical_rank(&adapter.coefficient_matrix(), DEFAULT_RANK_TOL);
    let rank_delta = numerical_rank(&adapter.materialize()?, DEFAULT_RANK_TOL);
    let energy = energy_curve_and_hill(
        dw,
        EnergyMode::Coefficients {
            kind,
            two_sided: adapter.two_sided(),
        },
        None,
    );
    let (hill, hill_top_k, hill_zeros_excluded, energy_curve) = match energy {
        Ok(e) => (Some(e.hill), e.top_k, e.zeros_excluded, e.curve),
        Err(_) => (None, 0, true, vec![0.0; dw.rows() * dw.cols()]),
    };
    let coverage = outlier_coverage(dw, adapter, &plan, left.as_deref(), DEFAULT_OUTLIER_FRACTION)?;
    Ok(AnalysisReport {
        layer: layer.into(),
        strategy: init.map(|r| r.strategy),
        kernel: kind,
        two_sided: adapter.two_sided(),
        seed: init.map_or(0, |r| r.seed),
        budget: adapter.len(),
        pre_error: pre,
        post_error: post,
        rank_f: rank_f.rank,
        normalized_rank_f: rank_f.normalized,
        rank_delta: rank_delta.rank,
        normalized_rank_delta: rank_delta.normalized,
        hill,
        hill_top_k,
        hill_zeros_excluded,
        outlier_coverage: coverage,
        ill_conditioned_channels: init.map_or(0, |r| r.ill_conditioned_channels.len()),
        energy_curve,
    })
}
