use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qwha_core::analysis::{analyze, svd_lowrank_baseline, numerical_rank, AnalysisReport, DEFAULT_RANK_TOL};
use qwha_core::calibration::{read_calibration, write_calibration};
use qwha_core::init::{initialize_on_basis, initialize_two_sided_on_basis, AllocConfig, Basis, InitOptions, InitReport};
use qwha_core::quantizer::{dequantize, quant_error, quantize, write_quantized};
use qwha_core::sparse_adapter::{read_adapter, write_adapter, SparseAdapter};
use qwha_core::synth::SynthConfig;
use qwha_core::tensor_io::{read_any, write_matrix};
use qwha_core::{cached_plan, CalibrationFactor, GramAccumulator, Matrix, QuantConfig, TransformKind};
use serde::Serialize;

use crate::args::*;
use crate::report::{write_csv, write_json, ReportRow};
use crate::{bench, CliResult, Failure, Stage};

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Init(a) => init(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Bench(a) => bench::run(a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))
}

fn quant_config(q: &QuantArgs) -> CliResult<QuantConfig> {
    Ok(QuantConfig::new(q.bits, q.group_size)?)
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        kind: a.kind.into(),
        d_out: a.d_out,
        d_in: a.d_in,
        samples: a.samples,
        sigma: a.sigma,
        spike_fraction: a.spike_fraction,
        spike_scale: a.spike_scale,
        spike_channel_fraction: a.spike_channel_fraction,
        seed: a.seed,
    };
    let layer = cfg.generate()?;
    create_dir(&a.out_dir)?;
    write_matrix(&layer.weights, a.out_dir.join("weights.sadp"))?;
    write_matrix(&layer.activations, a.out_dir.join("activations.sadp"))?;
    #[derive(Serialize)]
    struct Meta<'a> {
        config: &'a SynthConfig,
        spike_channels: &'a [usize],
        spike_count: usize,
    }
    let meta = Meta {
        config: &cfg,
        spike_channels: &layer.spike_channels,
        spike_count: layer.spike_count,
    };
    write_json(&meta, &a.out_dir.join("synth.json"))
}

fn quantize_weights(w: &Matrix, cfg: QuantConfig) -> CliResult<(qwha_core::QuantizedLayer, Matrix)> {
    let q = quantize(w, cfg)?;
    let dw = quant_error(w, &q)?;
    Ok((q, dw))
}

fn cmd_quantize(a: QuantizeArgs) -> CliResult<()> {
    let cfg = quant_config(&a.quant)?;
    let w = read_any(&a.weights)?;
    let (q, dw) = quantize_weights(&w, cfg)?;
    write_quantized(&q, &a.out)?;
    write_matrix(&dw, &a.error_out)?;
    if let Some(path) = &a.dequant_out {
        write_matrix(&dequantize(&q), path)?;
    }
    Ok(())
}

fn accumulate(paths: &[PathBuf]) -> CliResult<CalibrationFactor> {
    let mut acc: Option<GramAccumulator> = None;
    for path in paths {
        let x = read_any(path)?;
        let acc = acc.get_or_insert_with(|| GramAccumulator::new(x.rows()));
        acc.accumulate(&x)?;
    }
    let acc = acc.ok_or_else(|| Failure::validation("no activation files given"))?;
    Ok(acc.factorize()?)
}

fn calibrate(a: CalibrateArgs) -> CliResult<()> {
    let calib = accumulate(&a.activations)?;
    write_calibration(&calib, &a.out)?;
    Ok(())
}

fn alloc_config(a: &AdapterArgs) -> AllocConfig {
    AllocConfig {
        temperature: a.temperature,
        min_per_channel: a.min_per_channel,
        strategy: a.strategy.into(),
        seed: a.seed,
    }
}

fn build_adapter(dw: &Matrix, calib: &CalibrationFactor, a: &AdapterArgs) -> CliResult<(SparseAdapter, InitReport)> {
    let kind: TransformKind = a.kernel.into();
    let plan = cached_plan(kind, dw.cols())?;
    let basis = Basis::new(calib, &plan)?;
    let p = a.budget.resolve(dw.rows(), dw.cols());
    let cfg = alloc_config(a);
    let opts = InitOptions {
        alpha: a.alpha,
        refine: !a.no_refine,
    };
    let out = if a.two_sided {
        let left = cached_plan(kind, dw.rows())?;
        initialize_two_sided_on_basis(dw, calib, &basis, &plan, &left, p, &cfg, &opts)?
    } else {
        initialize_on_basis(dw, calib, &basis, &plan, p, &cfg, &opts)?
    };
    Ok(out)
}

fn init(a: InitArgs) -> CliResult<()> {
    let dw = match (&a.error, &a.weights) {
        (Some(path), _) => read_any(path)?,
        (None, Some(path)) => quantize_weights(&read_any(path)?, quant_config(&a.quant)?)?.1,
        (None, None) => return Err(Failure::validation("either --error or --weights is required")),
    };
    let calib = read_calibration(&a.calib)?;
    let (adapter, report) = build_adapter(&dw, &calib, &a.adapter)?;
    write_adapter(&adapter, &a.out)?;
    if let Some(path) = &a.report {
        write_json(&report, path)?;
    }
    Ok(())
}

fn emit(reports: &[AnalysisReport], rows: &[ReportRow], json: Option<&Path>, csv: Option<&Path>) -> CliResult<()> {
    if let Some(path) = json {
        write_json(&reports, path)?;
    }
    write_csv(rows, csv)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let dw = read_any(&a.error)?;
    let calib = read_calibration(&a.calib)?;
    let adapter = read_adapter(&a.adapter)?;
    let report = analyze(a.label, &dw, &calib, &adapter, None)?;
    let rows = [ReportRow::from(&report)];
    emit(&[report], &rows, a.out_json.as_deref(), a.out_csv.as_deref())
}

fn compare(a: CompareArgs) -> CliResult<()> {
    let dw = read_any(&a.error)?;
    let calib = read_calibration(&a.calib)?;
    let p = a.budget.resolve(dw.rows(), dw.cols());
    let mut reports = Vec::new();
    for &kernel in &a.kernels {
        let kind: TransformKind = kernel.into();
        let two_sided = kind != TransformKind::Wht && !a.single_sided;
        for &strategy in &a.strategies {
            let args = AdapterArgs {
                budget: BudgetArgs {
                    p: Some(p),
                    rank_equivalent: None,
                },
                strategy,
                kernel,
                two_sided,
                temperature: a.temperature,
                min_per_channel: 2,
                alpha: 1.0,
                seed: a.seed,
                no_refine: false,
            };
            let (adapter, init) = build_adapter(&dw, &calib, &args).stage(&format!("{kind}/{}", init_name(strategy)))?;
            reports.push(analyze(a.label.clone(), &dw, &calib, &adapter, Some(&init))?);
        }
    }
    let mut rows: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
    if let Some(rank) = a.svd_rank {
        let base = svd_lowrank_baseline(&dw, &calib, rank).stage("svd baseline")?;
        let delta_rank = numerical_rank(&base.delta, DEFAULT_RANK_TOL);
        let pre = calib.weighted_frobenius_sq(&dw)?.sqrt();
        rows.push(ReportRow {
            layer: a.label.clone(),
            method: format!("svd-rank-{rank}"),
            kernel: "none".into(),
            two_sided: false,
            seed: a.seed,
            budget: rank * (dw.rows() + dw.cols()),
            pre_error: pre,
            post_error: base.objective.sqrt(),
            rank_f: None,
            normalized_rank_f: None,
            rank_delta: delta_rank.rank,
            normalized_rank_delta: delta_rank.normalized,
            hill: None,
            hill_top_k: 0,
            outlier_coverage: None,
            ill_conditioned_channels: usize::from(base.pseudo_inverse),
        });
    }
    emit(&reports, &rows, a.out_json.as_deref(), a.out_csv.as_deref())
}

fn init_name(s: StrategyArg) -> String {
    qwha_core::init::Strategy::from(s).to_string()
}

#[derive(Debug, Serialize)]
struct RunConfig {
    bits: u8,
    group_size: usize,
    budget: usize,
    strategy: String,
    kernel: String,
    two_sided: bool,
    temperature: f64,
    min_per_channel: usize,
    alpha: f64,
    seed: u64,
    refine: bool,
    threads: usize,
}

#[derive(Debug, Default, Serialize)]
struct StageTimes {
    quantize_s: f64,
    calibrate_s: f64,
    init_s: f64,
    eval_s: f64,
}

#[derive(Debug, Serialize)]
struct PipelineReport {
    config: RunConfig,
    wall_times: StageTimes,
    analysis: AnalysisReport,
    init: InitReport,
}

fn pipeline(a: PipelineArgs) -> CliResult<()> {
    let mut times = StageTimes::default();
    let quant = quant_config(&a.quant).stage("quantize")?;
    create_dir(&a.out_dir)?;

    let t = Instant::now();
    let w = read_any(&a.weights).stage("quantize")?;
    let (q, dw) = quantize_weights(&w, quant).stage("quantize")?;
    write_quantized(&q, a.out_dir.join("quantized.sadq")).stage("quantize")?;
    write_matrix(&dw, a.out_dir.join("error.sadp")).stage("quantize")?;
    times.quantize_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let calib = accumulate(&a.activations).stage("calibrate")?;
    write_calibration(&calib, a.out_dir.join("calib.sadp")).stage("calibrate")?;
    times.calibrate_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (adapter, init) = build_adapter(&dw, &calib, &a.adapter).stage("init")?;
    write_adapter(&adapter, a.out_dir.join("adapter.sada")).stage("init")?;
    times.init_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let analysis = analyze("layer", &dw, &calib, &adapter, Some(&init)).stage("eval")?;
    times.eval_s = t.elapsed().as_secs_f64();

    let row = ReportRow::from(&analysis);
    let report = PipelineReport {
        config: RunConfig {
            bits: quant.bits,
            group_size: quant.group_size,
            budget: adapter.len(),
            strategy: init.strategy.to_string(),
            kernel: init.kernel.to_string(),
            two_sided: init.two_sided,
            temperature: init.temperature,
            min_per_channel: init.min_per_channel,
            alpha: init.alpha,
            seed: init.seed,
            refine: init.refine,
            threads: rayon::current_num_threads(),
        },
        wall_times: times,
        analysis,
        init,
    };
    write_json(&report, &a.out_dir.join("report.json"))?;
    write_csv(&[row], Some(&a.out_dir.join("report.csv")))
}
