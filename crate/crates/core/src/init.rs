//! Quantization-aware adapter initialization.
//!
//! Given the quantization error `ΔW_Q`, a calibration factor `R` and a kernel
//! `H`, the reduced objective `‖(ΔW_Q − F Hᵀ) R‖_F²` splits into one problem
//! per output channel `i`:
//!
//! ```text
//! minimize ‖v − x B_S‖²,  v = (ΔW_Q)_i · R,  B = Hᵀ R,  |S| = p_i
//! ```
//!
//! The support `S` is chosen from the dense solution `(ΔW_Q H)_i` and the
//! values `x` are then refit by least squares on that support.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationFactor;
use crate::error::{Error, Result};
use crate::matrix::{dot, norm_sq, Matrix};
use crate::sparse_adapter::SparseAdapter;
use crate::transforms::{Side, TransformKind, TransformPlan};

/// Condition number above which a support is solved by pseudo-inverse.
pub const CONDITION_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Error-proportional per-channel budgets, top magnitude within each channel.
    #[serde(rename = "adaalloc")]
    AdaAlloc,
    /// Uniform positions over the whole matrix.
    #[serde(rename = "random")]
    Random,
    /// Global top-`p` of the dense solution.
    #[serde(rename = "magnitude")]
    Magnitude,
    /// Half global top magnitude, half uniform from the rest.
    #[serde(rename = "ssh")]
    SshHalfHalf,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::AdaAlloc,
        Strategy::Random,
        Strategy::Magnitude,
        Strategy::SshHalfHalf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::AdaAlloc => "adaalloc",
            Strategy::Random => "random",
            Strategy::Magnitude => "magnitude",
            Strategy::SshHalfHalf => "ssh",
        }
    }

    pub fn is_randomized(self) -> bool {
        matches!(self, Strategy::Random | Strategy::SshHalfHalf)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "adaalloc" => Ok(Strategy::AdaAlloc),
            "random" => Ok(Strategy::Random),
            "magnitude" => Ok(Strategy::Magnitude),
            "ssh" | "sshhalfhalf" => Ok(Strategy::SshHalfHalf),
            _ => Err(Error::InvalidConfig(format!(
                "unknown strategy {s:?} (expected adaalloc, random, magnitude or ssh)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocConfig {
    pub temperature: f64,
    pub min_per_channel: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for AllocConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            min_per_channel: 2,
            strategy: Strategy::AdaAlloc,
            seed: 0,
        }
    }
}

impl AllocConfig {
    pub fn with_strategy(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    pub alpha: f64,
    /// Refit values by least squares; otherwise keep the dense-solution values.
    pub refine: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            refine: true,
        }
    }
}

/// `P(r) = (d_in + d_out) · r`, the parameter count of a rank-`r` adapter.
pub fn rank_equivalent_budget(d_out: usize, d_in: usize, r: usize) -> usize {
    (d_in + d_out) * r
}

fn check_budget(d_out: usize, d_in: usize, p: usize, min: usize) -> Result<()> {
    if min > d_in {
        return Err(Error::InvalidConfig(format!(
            "min-per-channel {min} exceeds d_in = {d_in}"
        )));
    }
    if p < min * d_out {
        return Err(Error::InfeasibleBudget(format!(
            "p = {p} is below min-per-channel × d_out = {}",
            min * d_out
        )));
    }
    if p > d_out * d_in {
        return Err(Error::InfeasibleBudget(format!(
            "p = {p} exceeds d_out × d_in = {}",
            d_out * d_in
        )));
    }
    Ok(())
}

/// Per-channel budgets proportional to `‖(ΔW_Q)_i‖^t`, summing to `p`.
pub fn ada_alloc(dw: &Matrix, p: usize, cfg: &AllocConfig) -> Result<Vec<usize>> {
    dw.ensure_finite()?;
    let (d_out, d_in) = dw.shape();
    if !cfg.temperature.is_finite() || cfg.temperature < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "temperature must be non-negative, got {}",
            cfg.temperature
        )));
    }
    check_budget(d_out, d_in, p, cfg.min_per_channel)?;
    if d_out == 0 {
        return Ok(Vec::new());
    }

    let mut weights: Vec<f64> = dw
        .rows_iter()
        .map(|row| norm_sq(row).sqrt().powf(cfg.temperature))
        .collect();
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        weights.iter_mut().for_each(|w| *w = 1.0);
    }
    let total: f64 = weights.iter().sum();
    let mut alloc: Vec<usize> = weights
        .iter()
        .map(|w| ((p as f64) * w / total).floor() as usize)
        .collect();
    // Float round-off can push the floors past p by a unit or two.
    while alloc.iter().sum::<usize>() > p {
        let i = (0..d_out).max_by_key(|&i| (alloc[i], i)).expect("non-empty");
        alloc[i] -= 1;
    }

    let remainder = p - alloc.iter().sum::<usize>();
    give_to_smallest(&mut alloc, remainder, d_in);

    let min = cfg.min_per_channel;
    let mut donors: BTreeSet<(usize, usize)> = (0..d_out)
        .filter(|&i| alloc[i] > min)
        .map(|i| (alloc[i], i))
        .collect();
    for i in 0..d_out {
        while alloc[i] < min {
            let (a, j) = donors.pop_last().expect("feasible budget has donors");
            alloc[j] = a - 1;
            if alloc[j] > min {
                donors.insert((alloc[j], j));
            }
            alloc[i] += 1;
        }
    }

    let overflow: usize = alloc.iter().map(|&a| a.saturating_sub(d_in)).sum();
    if overflow > 0 {
        alloc.iter_mut().for_each(|a| *a = (*a).min(d_in));
        give_to_smallest(&mut alloc, overflow, d_in);
    }
    debug_assert_eq!(alloc.iter().sum::<usize>(), p);
    Ok(alloc)
}

/// Hands out `units` one at a time to the smallest allocation below `cap`,
/// ties to the lowest index.
fn give_to_smallest(alloc: &mut [usize], units: usize, cap: usize) {
    let mut open: BTreeSet<(usize, usize)> = alloc
        .iter()
        .enumerate()
        .filter(|(_, &a)| a < cap)
        .map(|(i, &a)| (a, i))
        .collect();
    for _ in 0..units {
        let (a, i) = open.pop_first().expect("budget within capacity");
        alloc[i] = a + 1;
        if alloc[i] < cap {
            open.insert((alloc[i], i));
        }
    }
}

/// Indices of the `k` largest `|·|` entries, ties to the lower index, in
/// descending order of magnitude.
fn top_magnitude(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Chooses `p_i` column indices of one channel from its dense solution.
/// The result is sorted ascending.
pub fn select_channel(v_dense: &[f64], p_i: usize, strategy: Strategy, seed: u64) -> Result<Vec<usize>> {
    let n = v_dense.len();
    if p_i > n {
        return Err(Error::InfeasibleBudget(format!(
            "channel budget {p_i} exceeds d_in = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = match strategy {
        Strategy::AdaAlloc | Strategy::Magnitude => top_magnitude(v_dense, p_i),
        Strategy::Random => sample(&mut rng, n, p_i).into_vec(),
        Strategy::SshHalfHalf => half_half(v_dense, p_i, &mut rng),
    };
    picked.sort_unstable();
    Ok(picked)
}

fn half_half(scores: &[f64], p: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let head = p.div_ceil(2);
    let mut picked = top_magnitude(scores, head);
    let mut taken = vec![false; scores.len()];
    picked.iter().for_each(|&i| taken[i] = true);
    let rest: Vec<usize> = (0..scores.len()).filter(|&i| !taken[i]).collect();
    picked.extend(sample(rng, rest.len(), p - head).into_iter().map(|k| rest[k]));
    picked
}

/// Per-channel supports for a whole matrix of dense-solution scores.
fn select_supports(dense: &Matrix, p: usize, cfg: &AllocConfig, alloc_source: &Matrix) -> Result<Vec<Vec<usize>>> {
    let (d_out, d_in) = dense.shape();
    let mut supports = vec![Vec::new(); d_out];
    match cfg.strategy {
        Strategy::AdaAlloc => {
            let budgets = ada_alloc(alloc_source, p, cfg)?;
            supports = (0..d_out)
                .into_par_iter()
                .map(|i| select_channel(dense.row(i), budgets[i], Strategy::AdaAlloc, 0))
                .collect::<Result<_>>()?;
        }
        strategy => {
            if p > d_out * d_in {
                return Err(Error::InfeasibleBudget(format!(
                    "p = {p} exceeds d_out × d_in = {}",
                    d_out * d_in
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed));
            let flat = match strategy {
                Strategy::Magnitude => top_magnitude(dense.as_slice(), p),
                Strategy::Random => sample(&mut rng, d_out * d_in, p).into_vec(),
                _ => half_half(dense.as_slice(), p, &mut rng),
            };
            for k in flat {
                supports[k / d_in].push(k % d_in);
            }
            supports.iter_mut().for_each(|s| s.sort_unstable());
        }
    }
    Ok(supports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub values: Vec<f64>,
    pub ill_conditioned: bool,
}

/// Least-squares values `x* = v B′ᵀ (B′ B′ᵀ)⁻¹` for the selected rows `b_sub`
/// of `B = H⁻¹ R`.
pub fn refine_values(v: &[f64], b_sub: &Matrix) -> Result<Refined> {
    if b_sub.cols() != v.len() {
        return Err(Error::Shape(format!(
            "target of length {} against basis rows of length {}",
            v.len(),
            b_sub.cols()
        )));
    }
    let gram = b_sub.matmul_transposed(b_sub)?;
    let rhs: Vec<f64> = b_sub.rows_iter().map(|row| dot(row, v)).collect();
    Ok(solve_normal(&gram, &rhs, true))
}

/// Solves `x K = t` for symmetric PSD `K`. Cholesky is used when `K` is
/// known (or found) to be well conditioned; otherwise eigenvalues at or
/// below `λ_max / CONDITION_CAP` are discarded.
fn solve_normal(k: &Matrix, t: &[f64], check_condition: bool) -> Refined {
    let n = t.len();
    if n == 0 {
        return Refined {
            values: Vec::new(),
            ill_conditioned: false,
        };
    }
    let km = DMatrix::from_row_slice(n, n, k.as_slice());
    let rhs = DVector::from_column_slice(t);
    if !check_condition {
        if let Some(chol) = km.clone().cholesky() {
            return Refined {
                values: chol.solve(&rhs).iter().copied().collect(),
                ill_conditioned: false,
            };
        }
    }
    let eig = SymmetricEigen::new(km);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let ill = lmin.is_nan() || lmin <= 0.0 || lmax / lmin > CONDITION_CAP;
    let cutoff = if ill { lmax / CONDITION_CAP } else { 0.0 };
    let proj = eig.eigenvectors.transpose() * &rhs;
    let mut coeffs = DVector::zeros(n);
    for j in 0..n {
        let l = eig.eigenvalues[j];
        if l > cutoff {
            coeffs[j] = proj[j] / l;
        }
    }
    let x = &eig.eigenvectors * coeffs;
    Refined {
        values: x.iter().copied().collect(),
        ill_conditioned: ill,
    }
}

/// Quantities shared by every channel for a fixed `(R, H)`.
#[derive(Debug, Clone)]
pub struct Basis {
    kind: TransformKind,
    size: usize,
    /// `B = Hᵀ R`
    b: Matrix,
    /// `G H` with `G = R Rᵀ`
    gram_h: Matrix,
    /// `K = B Bᵀ = Hᵀ G H`
    k: Matrix,
    well_conditioned: bool,
}

impl Basis {
    pub fn new(calib: &CalibrationFactor, plan: &TransformPlan) -> Result<Self> {
        if calib.dim() != plan.size() {
            return Err(Error::Shape(format!(
                "calibration dimension {} vs plan size {}",
                calib.dim(),
                plan.size()
            )));
        }
        let b = plan.apply(calib.r(), Side::LeftByHInverse)?;
        let gram_h = plan.apply(&calib.gram(), Side::RightByH)?;
        let k = plan.apply(&gram_h, Side::LeftByHInverse)?;
        Ok(Self {
            kind: plan.kind(),
            size: plan.size(),
            b,
            gram_h,
            k,
            well_conditioned: calib.gram_condition() <= CONDITION_CAP,
        })
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSolve {
    pub channel: usize,
    pub budget: usize,
    pub selected: Vec<usize>,
    /// Coefficients `x` on the support, before division by `α`.
    pub values: Vec<f64>,
    /// `‖v‖²`, the error with no adapter.
    pub pre_error: f64,
    /// `‖v − x B_S‖²` for the stored values.
    pub post_error: f64,
    /// Error with the dense-solution values on the same support.
    pub unrefined_error: f64,
    pub ill_conditioned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub strategy: Strategy,
    pub kernel: TransformKind,
    pub two_sided: bool,
    pub seed: u64,
    pub temperature: f64,
    pub min_per_channel: usize,
    pub budget: usize,
    pub alpha: f64,
    pub refine: bool,
    pub pre_objective: f64,
    pub post_objective: f64,
    pub ill_conditioned_channels: Vec<usize>,
    pub channels: Vec<ChannelSolve>,
}

impl InitReport {
    pub fn budgets(&self) -> Vec<usize> {
        self.channels.iter().map(|c| c.budget).collect()
    }
}

/// Builds the adapter for `ΔW_Q` with budget `p`.
pub fn initialize(
    dw: &Matrix,
    calib: &CalibrationFactor,
    plan: &TransformPlan,
    p: usize,
    cfg: &AllocConfig,
) -> Result<(SparseAdapter, InitReport)> {
    initialize_with(dw, calib, plan, p, cfg, &InitOptions::default())
}

pub fn initialize_with(
    dw: &Matrix,
    calib: &CalibrationFactor,
    plan: &TransformPlan,
    p: usize,
    cfg: &AllocConfig,
    opts: &InitOptions,
) -> Result<(SparseAdapter, InitReport)> {
    let basis = Basis::new(calib, plan)?;
    initialize_on_basis(dw, calib, &basis, plan, p, cfg, opts)
}

/// [`initialize_with`] reusing a precomputed [`Basis`].
pub fn initialize_on_basis(
    dw: &Matrix,
    calib: &CalibrationFactor,
    basis: &Basis,
    plan: &TransformPlan,
    p: usize,
    cfg: &AllocConfig,
    opts: &InitOptions,
) -> Result<(SparseAdapter, InitReport)> {
    let report = solve_all(dw, calib, basis, plan, p, cfg, opts, false)?;
    let adapter = assemble(dw.shape(), &report, plan.kind(), false, opts.alpha)?;
    Ok((adapter, report))
}

/// Two-sided initialization for `ΔW = α H′ᵀ F Hᵀ` (`H′` of size `d_out`).
///
/// Since `H′` is orthogonal, `‖(ΔW_Q − H′ᵀ F Hᵀ) R‖ = ‖(H′ ΔW_Q − F Hᵀ) R‖`,
/// so this is the single-transform problem on `H′ ΔW_Q`.
pub fn initialize_two_sided(
    dw: &Matrix,
    calib: &CalibrationFactor,
    plan: &TransformPlan,
    left: &TransformPlan,
    p: usize,
    cfg: &AllocConfig,
    opts: &InitOptions,
) -> Result<(SparseAdapter, InitReport)> {
    let basis = Basis::new(calib, plan)?;
    initialize_two_sided_on_basis(dw, calib, &basis, plan, left, p, cfg, opts)
}

#[allow(clippy::too_many_arguments)]
pub fn initialize_two_sided_on_basis(
    dw: &Matrix,
    calib: &CalibrationFactor,
    basis: &Basis,
    plan: &TransformPlan,
    left: &TransformPlan,
    p: usize,
    cfg: &AllocConfig,
    opts: &InitOptions,
) -> Result<(SparseAdapter, InitReport)> {
    if left.kind() != plan.kind() || left.size() != dw.rows() {
        return Err(Error::Shape(format!(
            "left plan {}/{} does not match {}/{}",
            left.kind(),
            left.size(),
            plan.kind(),
            dw.rows()
        )));
    }
    let rotated = left.apply(dw, Side::LeftByH)?;
    let report = solve_all(&rotated, calib, basis, plan, p, cfg, opts, true)?;
    let adapter = assemble(dw.shape(), &report, plan.kind(), true, opts.alpha)?;
    Ok((adapter, report))
}

fn assemble(
    shape: (usize, usize),
    report: &InitReport,
    kind: TransformKind,
    two_sided: bool,
    alpha: f64,
) -> Result<SparseAdapter> {
    let mut values = Vec::with_capacity(report.budget);
    let mut indices = Vec::with_capacity(report.budget);
    for ch in &report.channels {
        for (&j, &x) in ch.selected.iter().zip(&ch.values) {
            indices.push((ch.channel, j));
            values.push(x / alpha);
        }
    }
    SparseAdapter::new(shape, values, indices, kind, two_sided, alpha)
}

#[allow(clippy::too_many_arguments)]
fn solve_all(
    dw: &Matrix,
    calib: &CalibrationFactor,
    basis: &Basis,
    plan: &TransformPlan,
    p: usize,
    cfg: &AllocConfig,
    opts: &InitOptions,
    two_sided: bool,
) -> Result<InitReport> {
    dw.ensure_finite()?;
    let (d_out, d_in) = dw.shape();
    if plan.size() != d_in || basis.size != d_in || basis.kind != plan.kind() || calib.dim() != d_in {
        return Err(Error::Shape(format!(
            "d_in = {d_in} but plan is {}/{}, basis {}/{}, calibration {}",
            plan.kind(),
            plan.size(),
            basis.kind,
            basis.size,
            calib.dim()
        )));
    }
    if !opts.alpha.is_finite() || opts.alpha <= 0.0 {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", opts.alpha)));
    }

    // x₀ = v B⁻¹ = (ΔW_Q H)_i row by row, without forming B⁻¹.
    let dense = plan.apply(dw, Side::RightByH)?;
    let supports = select_supports(&dense, p, cfg, dw)?;
    let v_all = dw.matmul(calib.r())?;
    let t_all = dw.matmul(&basis.gram_h)?;

    let channels: Vec<ChannelSolve> = (0..d_out)
        .into_par_iter()
        .map(|i| {
            let selected = supports[i].clone();
            let x0: Vec<f64> = selected.iter().map(|&j| dense[(i, j)]).collect();
            let v = v_all.row(i);
            let (values, ill) = if opts.refine {
                let n = selected.len();
                let k_ss = Matrix::from_fn(n, n, |a, b| basis.k[(selected[a], selected[b])]);
                let t_s: Vec<f64> = selected.iter().map(|&j| t_all[(i, j)]).collect();
                let r = solve_normal(&k_ss, &t_s, !basis.well_conditioned);
                (r.values, r.ill_conditioned)
            } else {
                (x0.clone(), false)
            };
            ChannelSolve {
                channel: i,
                budget: selected.len(),
                pre_error: norm_sq(v),
                post_error: residual(v, &basis.b, &selected, &values),
                unrefined_error: residual(v, &basis.b, &selected, &x0),
                ill_conditioned: ill,
                selected,
                values,
            }
        })
        .collect();

    let report = InitReport {
        strategy: cfg.strategy,
        kernel: plan.kind(),
        two_sided,
        seed: cfg.seed,
        temperature: cfg.temperature,
        min_per_channel: cfg.min_per_channel,
        budget: p,
        alpha: opts.alpha,
        refine: opts.refine,
        pre_objective: channels.iter().map(|c| c.pre_error).sum(),
        post_objective: channels.iter().map(|c| c.post_error).sum(),
        ill_conditioned_channels: channels
            .iter()
            .filter(|c| c.ill_conditioned)
            .map(|c| c.channel)
            .collect(),
        channels,
    };
    Ok(report)
}

/// `‖v − Σ_k x_k B_{s_k}‖²`
fn residual(v: &[f64], b: &Matrix, support: &[usize], x: &[f64]) -> f64 {
    let mut r = v.to_vec();
    for (&j, &xj) in support.iter().zip(x) {
        for (ri, &bj) in r.iter_mut().zip(b.row(j)) {
            *ri -= xj * bj;
        }
    }
    norm_sq(&r)
}
