use std::hint::black_box;
use std::time::Instant;

use qwha_core::{build_plan, ErrorKind, TransformKind};
use serde::Serialize;

use crate::args::BenchArgs;
use crate::report::write_csv;
use crate::{CliResult, Failure};

/// Target wall time of one timing sample, in nanoseconds.
const SAMPLE_NS: u128 = 200_000;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub kernel: String,
    pub size: usize,
    pub repeats: usize,
    pub fast_median_ns: Option<f64>,
    pub dense_median_ns: Option<f64>,
    pub speedup: Option<f64>,
    pub max_rel_error: Option<f64>,
    pub note: String,
}

fn test_vector(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919 + 13) % 1009) as f64 / 1009.0 - 0.5).collect()
}

/// Median nanoseconds per call of `f`, batching calls so each sample is long
/// enough to time.
fn median_ns(repeats: usize, mut f: impl FnMut()) -> f64 {
    let start = Instant::now();
    f();
    let once = start.elapsed().as_nanos().max(1);
    let batch = (SAMPLE_NS / once).clamp(1, 100_000) as usize;
    let mut samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..batch {
                f();
            }
            t.elapsed().as_nanos() as f64 / batch as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    if samples.len().is_multiple_of(2) {
        (samples[mid - 1] + samples[mid]) / 2.0
    } else {
        samples[mid]
    }
}

/// Times `v · H` through the plan against an explicit dense product.
pub fn measure(kind: TransformKind, size: usize, repeats: usize) -> CliResult<BenchRow> {
    let mut row = BenchRow {
        kernel: kind.to_string(),
        size,
        repeats,
        fast_median_ns: None,
        dense_median_ns: None,
        speedup: None,
        max_rel_error: None,
        note: String::new(),
    };
    let plan = match build_plan(kind, size) {
        Ok(p) => p,
        Err(e) if e.kind() == ErrorKind::Validation => {
            row.note = format!("skipped: {e}");
            return Ok(row);
        }
        Err(e) => return Err(e.into()),
    };
    let kernel = plan.kernel_matrix();
    let v = test_vector(size);

    let mut fast = v.clone();
    plan.forward_row(&mut fast)?;
    let dense = kernel.vecmul(&v)?;
    let norm = dense.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let err = fast.iter().zip(&dense).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm;
    if err > 1e-10 {
        return Err(Failure {
            kind: ErrorKind::Numerical,
            message: format!("{kind} size {size}: fast and dense results differ (rel. error {err:.3e})"),
        });
    }
    row.max_rel_error = Some(err);

    let mut buf = v.clone();
    let fast_ns = median_ns(repeats, || {
        buf.copy_from_slice(&v);
        plan.forward_row(black_box(&mut buf)).expect("size checked");
    });
    let dense_ns = median_ns(repeats, || {
        black_box(kernel.vecmul(black_box(&v)).expect("size checked"));
    });
    row.fast_median_ns = Some(fast_ns);
    row.dense_median_ns = Some(dense_ns);
    row.speedup = Some(dense_ns / fast_ns);
    if kind != TransformKind::Wht {
        row.note = "explicit kernel on both paths".into();
    }
    Ok(row)
}

pub fn run(a: BenchArgs) -> CliResult<()> {
    if a.repeats == 0 {
        return Err(Failure::validation("--repeats must be at least 1"));
    }
    if a.sizes.contains(&0) {
        return Err(Failure::validation("sizes must be positive"));
    }
    let mut rows = Vec::new();
    for &kernel in &a.kernels {
        for &size in &a.sizes {
            let row = measure(kernel.into(), size, a.repeats)?;
            if !row.note.is_empty() && row.fast_median_ns.is_none() {
                eprintln!("note: {} size {}: {}", row.kernel, size, row.note);
            }
            rows.push(row);
        }
    }
    write_csv(&rows, a.out.as_deref())
}
