//! Benchmark suites and verification commands behind the `ftpose` binary.
//!
//! Every command takes a [`BenchConfig`]: a JSON file (all fields optional)
//! with command-line overrides applied on top. Reports embed the resolved
//! config so a run can be repeated exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ftpose::cost::{self, MacBreakdown};
use ftpose::gradcheck::{self, GradcheckOptions, GradcheckReport};
use ftpose::model::{self, ModelConfig, ModelParams, Sample, Variant};
use ftpose::synth::{self, SynthScene};
use ftpose::tensor::{mac_count, reset_mac_count};
use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA: &str = "ftpose-report/1";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ftpose::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// Settings for the training-based commands, on a model small enough to
/// differentiate numerically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Training steps per cell of the ratio grid.
    pub grid_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            steps: 200,
            lr: 0.01,
            batch: 2,
            grid_steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Model used for timing and MAC counts.
    pub model: ModelConfig,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Pruning ratios swept on both axes of the ratio grid.
    pub ratios: Vec<usize>,
    /// Timed iterations per grid cell.
    pub grid_iters: usize,
    pub train: TrainConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            warmup: 1,
            iters: 5,
            seed: 0,
            out: None,
            ratios: vec![1, 3, 6, 10],
            grid_iters: 2,
            train: TrainConfig::default(),
        }
    }
}

/// Command-line values that replace config fields when present.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eps_hrb: Option<usize>,
    pub eps_lrb: Option<usize>,
    pub out: Option<PathBuf>,
    pub iters: Option<usize>,
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Pruning ratios apply to both the timed and the trained model.
    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(e) = o.eps_hrb {
            self.model.hr.epsilon = e;
            self.train.model.hr.epsilon = e;
        }
        if let Some(e) = o.eps_lrb {
            self.model.lr.epsilon = e;
            self.train.model.lr.epsilon = e;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(iters) = o.iters {
            self.iters = iters;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.iters == 0 {
            return bad("iters must be >= 1".into());
        }
        if self.grid_iters == 0 {
            return bad("grid_iters must be >= 1".into());
        }
        if self.ratios.is_empty() || self.ratios.contains(&0) {
            return bad(format!("ratios must be non-empty and >= 1, got {:?}", self.ratios));
        }
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be finite and >= 0, got {}", t.lr));
        }
        if t.steps == 0 || t.batch == 0 {
            return bad("train.steps and train.batch must be >= 1".into());
        }
        for m in [&self.model, &t.model] {
            m.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iters: usize,
    pub total_s: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Triplets per second: `iters / total_s`.
    pub throughput: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl LatencyStats {
    pub fn from_seconds(samples: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let total_s: f64 = samples.iter().sum();
        Self {
            iters: samples.len(),
            total_s,
            mean_ms: 1e3 * total_s / samples.len() as f64,
            p50_ms: 1e3 * percentile(&sorted, 0.5),
            p95_ms: 1e3 * percentile(&sorted, 0.95),
            throughput: samples.len() as f64 / total_s,
        }
    }
}

/// The three encoder settings compared by `bench`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchVariant {
    /// Low-resolution branch only, no pruning.
    Baseline,
    /// Both branches, no pruning.
    Unpruned,
    /// Both branches with the configured ratios.
    Pruned,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 3] = [Self::Baseline, Self::Unpruned, Self::Pruned];

    pub fn resolve(self, base: &ModelConfig) -> (ModelConfig, Variant) {
        match self {
            Self::Baseline => (base.clone().with_ratios(1, 1), Variant::LowResOnly),
            Self::Unpruned => (base.clone().with_ratios(1, 1), Variant::MultiGrained),
            Self::Pruned => (base.clone(), Variant::MultiGrained),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: BenchVariant,
    pub eps_hrb: usize,
    pub eps_lrb: usize,
    /// Counted while running the model.
    pub macs: u64,
    pub mac_breakdown: MacBreakdown,
    pub latency: LatencyStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trends {
    pub pruned_over_unpruned_throughput: f64,
    pub pruned_over_unpruned_macs: f64,
    pub unpruned_macs_above_baseline: bool,
    pub pruned_faster_than_baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub config: BenchConfig,
    pub variants: Vec<VariantReport>,
    pub trends: Trends,
}

impl BenchReport {
    pub fn get(&self, v: BenchVariant) -> &VariantReport {
        self.variants.iter().find(|r| r.variant == v).expect("all variants measured")
    }
}

/// A labelled key-frame triplet for a model configuration.
pub fn sample_for(cfg: &ModelConfig, seed: u64) -> Result<Sample> {
    Ok(synth::make_sample(&SynthScene::new(seed, cfg.joints), 1, cfg)?)
}

/// Forward-pass MACs as counted by the kernels, checked against the
/// analytic model.
pub fn measured_macs(cfg: &ModelConfig, variant: Variant, sample: &Sample, params: &ModelParams) -> Result<u64> {
    let bound = params.constants();
    reset_mac_count();
    model::forward_graph(&sample.triplet, cfg, &bound, variant, None)?;
    let counted = mac_count();
    let expected = cost::forward_macs(cfg, variant).total();
    if counted != expected {
        return Err(ftpose::Error::Contract(format!("counted {counted} MACs, cost model says {expected}")).into());
    }
    Ok(counted)
}

/// Single-threaded timing of inference after `warmup` untimed runs.
pub fn time_forward(
    cfg: &ModelConfig,
    variant: Variant,
    sample: &Sample,
    params: &ModelParams,
    warmup: usize,
    iters: usize,
) -> Result<LatencyStats> {
    let bound = params.constants();
    for _ in 0..warmup {
        model::forward_graph(&sample.triplet, cfg, &bound, variant, None)?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        let out = model::forward_graph(&sample.triplet, cfg, &bound, variant, None)?;
        std::hint::black_box(out.heatmap.value());
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(LatencyStats::from_seconds(&samples))
}

fn measure(cfg: &BenchConfig, which: BenchVariant, sample: &Sample, params: &ModelParams) -> Result<VariantReport> {
    let (model_cfg, variant) = which.resolve(&cfg.model);
    Ok(VariantReport {
        variant: which,
        eps_hrb: model_cfg.hr.epsilon,
        eps_lrb: model_cfg.lr.epsilon,
        macs: measured_macs(&model_cfg, variant, sample, params)?,
        mac_breakdown: cost::forward_macs(&model_cfg, variant),
        latency: time_forward(&model_cfg, variant, sample, params, cfg.warmup, cfg.iters)?,
    })
}

/// Times inference for the baseline, unpruned and pruned encoders.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let params = ModelParams::init(&cfg.model, cfg.seed)?;
    let sample = sample_for(&cfg.model, cfg.seed)?;
    let variants = BenchVariant::ALL
        .iter()
        .map(|&v| measure(cfg, v, &sample, &params))
        .collect::<Result<Vec<_>>>()?;
    let [base, a, b] = [&variants[0], &variants[1], &variants[2]];
    let trends = Trends {
        pruned_over_unpruned_throughput: b.latency.throughput / a.latency.throughput,
        pruned_over_unpruned_macs: b.macs as f64 / a.macs as f64,
        unpruned_macs_above_baseline: a.macs > base.macs,
        pruned_faster_than_baseline: b.latency.throughput > base.latency.throughput,
    };
    Ok(BenchReport {
        schema: REPORT_SCHEMA.into(),
        config: cfg.clone(),
        variants,
        trends,
    })
}

#[derive(Serialize)]
struct VariantRow {
    variant: BenchVariant,
    eps_hrb: usize,
    eps_lrb: usize,
    macs: u64,
    mean_ms: f64,
    p50_ms: f64,
    p95_ms: f64,
    throughput: f64,
}

pub fn bench_csv(report: &BenchReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for v in &report.variants {
        w.serialize(VariantRow {
            variant: v.variant,
            eps_hrb: v.eps_hrb,
            eps_lrb: v.eps_lrb,
            macs: v.macs,
            mean_ms: v.latency.mean_ms,
            p50_ms: v.latency.p50_ms,
            p95_ms: v.latency.p95_ms,
            throughput: v.latency.throughput,
        })?;
    }
    csv_string(w)
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// A fixed training batch: `size` scenes with consecutive seeds.
pub fn training_batch(cfg: &ModelConfig, seed: u64, size: usize) -> Result<Vec<Sample>> {
    Ok(synth::synthetic_batch(cfg, seed, size)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema: String,
    pub config: BenchConfig,
    pub curve: Vec<f64>,
    pub initial: f64,
    pub final_loss: f64,
    /// `final_loss / initial`.
    pub ratio: f64,
    pub passed: bool,
}

/// Loss must fall to this fraction of its starting value.
pub const SMOKE_THRESHOLD: f64 = 0.5;

/// Gradient descent on a fixed synthetic batch.
pub fn run_train_smoke(cfg: &BenchConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let t = &cfg.train;
    let batch = training_batch(&t.model, cfg.seed, t.batch)?;
    let params = ModelParams::init(&t.model, cfg.seed)?;
    let (curve, _) = model::train_loop(&batch, &t.model, params, t.lr, t.steps)?;
    let initial = curve[0];
    let final_loss = *curve.last().unwrap();
    let ratio = final_loss / initial;
    Ok(TrainReport {
        schema: REPORT_SCHEMA.into(),
        config: cfg.clone(),
        passed: ratio <= SMOKE_THRESHOLD,
        curve,
        initial,
        final_loss,
        ratio,
    })
}

pub fn curve_csv(curve: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"])?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    csv_string(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub eps_hrb: usize,
    pub eps_lrb: usize,
    pub macs: u64,
    pub throughput: Option<f64>,
    pub final_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub schema: String,
    pub config: BenchConfig,
    pub ratios: Vec<usize>,
    /// Row-major: `eps_hrb` outer, `eps_lrb` inner.
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn cell(&self, eps_hrb: usize, eps_lrb: usize) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.eps_hrb == eps_hrb && c.eps_lrb == eps_lrb)
    }

    /// Cost strictly falls as either ratio grows with the other held fixed,
    /// for every adjacent pair of sorted ratios.
    pub fn macs_monotone(&self) -> bool {
        let mut r = self.ratios.clone();
        r.sort_unstable();
        r.dedup();
        let macs = |h, l| self.cell(h, l).map(|c| c.macs);
        r.iter().all(|&fixed| {
            r.windows(2).all(|w| {
                macs(fixed, w[1]) < macs(fixed, w[0]) && macs(w[1], fixed) < macs(w[0], fixed)
            })
        })
    }
}

fn mean_loss(batch: &[Sample], cfg: &ModelConfig, params: &ModelParams) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let h = model::forward_full(&s.triplet, cfg, params)?;
        total += model::heatmap_loss(
            &ftpose::Var::constant(h.maps),
            &ftpose::Var::constant(s.target.maps.clone()),
        )?
        .value()
        .item();
    }
    Ok(total / batch.len() as f64)
}

/// Trains the small model and evaluates it on held-out scenes.
fn grid_training(cfg: &BenchConfig, eps_hrb: usize, eps_lrb: usize) -> Result<(f64, f64)> {
    let t = &cfg.train;
    let m = t.model.clone().with_ratios(eps_hrb, eps_lrb);
    let batch = training_batch(&m, cfg.seed, t.batch)?;
    let held_out = training_batch(&m, cfg.seed + 10_000, t.batch)?;
    let (curve, params) = model::train_loop(&batch, &m, ModelParams::init(&m, cfg.seed)?, t.lr, t.grid_steps)?;
    Ok((*curve.last().unwrap(), mean_loss(&held_out, &m, &params)?))
}

/// Sweeps every pair of pruning ratios. A failing cell records its error
/// and the sweep continues.
pub fn run_ratio_grid(cfg: &BenchConfig) -> Result<GridReport> {
    cfg.validate()?;
    let params = ModelParams::init(&cfg.model, cfg.seed)?;
    let sample = sample_for(&cfg.model, cfg.seed)?;
    let mut cells = Vec::new();
    for &h in &cfg.ratios {
        for &l in &cfg.ratios {
            let m = cfg.model.clone().with_ratios(h, l);
            let mut cell = GridCell {
                eps_hrb: h,
                eps_lrb: l,
                macs: cost::forward_macs(&m, Variant::MultiGrained).total(),
                throughput: None,
                final_loss: None,
                eval_loss: None,
                error: None,
            };
            let timed = time_forward(&m, Variant::MultiGrained, &sample, &params, 0, cfg.grid_iters);
            let trained = grid_training(cfg, h, l);
            match (timed, trained) {
                (Ok(stats), Ok((train, eval))) => {
                    cell.throughput = Some(stats.throughput);
                    cell.final_loss = Some(train);
                    cell.eval_loss = Some(eval);
                }
                (timed, trained) => {
                    cell.throughput = timed.as_ref().ok().map(|s| s.throughput);
                    if let Ok((train, eval)) = &trained {
                        cell.final_loss = Some(*train);
                        cell.eval_loss = Some(*eval);
                    }
                    let errs: Vec<String> = [timed.err(), trained.err()].into_iter().flatten().map(|e| e.to_string()).collect();
                    cell.error = Some(errs.join("; "));
                }
            }
            cells.push(cell);
        }
    }
    Ok(GridReport {
        schema: REPORT_SCHEMA.into(),
        config: cfg.clone(),
        ratios: cfg.ratios.clone(),
        cells,
    })
}

#[derive(Serialize)]
struct GridRow {
    eps_hrb: usize,
    eps_lrb: usize,
    macs: u64,
    throughput: Option<f64>,
    final_loss: Option<f64>,
    eval_loss: Option<f64>,
    error: Option<String>,
}

pub fn grid_csv(report: &GridReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &report.cells {
        w.serialize(GridRow {
            eps_hrb: c.eps_hrb,
            eps_lrb: c.eps_lrb,
            macs: c.macs,
            throughput: c.throughput,
            final_loss: c.final_loss,
            eval_loss: c.eval_loss,
            error: c.error.clone(),
        })?;
    }
    csv_string(w)
}

/// Tab-separated loss table with `eps_hrb` rows and `eps_lrb` columns.
pub fn grid_table(report: &GridReport) -> String {
    let mut out = String::from("hrb\\lrb");
    for l in &report.ratios {
        out.push_str(&format!("\t{l}"));
    }
    out.push('\n');
    for h in &report.ratios {
        out.push_str(&h.to_string());
        for l in &report.ratios {
            match report.cell(*h, *l).and_then(|c| c.eval_loss) {
                Some(v) => out.push_str(&format!("\t{v:.5}")),
                None => out.push_str("\terr"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutcome {
    pub schema: String,
    pub config: BenchConfig,
    pub tolerance: f64,
    pub passed: bool,
    pub report: GradcheckReport,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Numerical gradient check of every parameter of the training model.
pub fn run_gradcheck(cfg: &BenchConfig, corrupt: Option<(String, f64)>) -> Result<GradcheckOutcome> {
    cfg.validate()?;
    let m = &cfg.train.model;
    if m.image_height > gradcheck::MAX_SIDE || m.image_width > gradcheck::MAX_SIDE {
        return Err(BenchError::Config(format!(
            "gradcheck needs an image of at most {0}x{0}, got {1}x{2}",
            gradcheck::MAX_SIDE,
            m.image_height,
            m.image_width
        )));
    }
    let params = ModelParams::init(m, cfg.seed)?;
    let sample = sample_for(m, cfg.seed)?;
    let opts = GradcheckOptions {
        corrupt,
        ..Default::default()
    };
    let report = gradcheck::check_model(m, &params, &sample, &opts)?;
    Ok(GradcheckOutcome {
        schema: REPORT_SCHEMA.into(),
        config: cfg.clone(),
        tolerance: GRADCHECK_TOLERANCE,
        passed: report.passed(GRADCHECK_TOLERANCE),
        report,
    })
}

/// Renders a scene for the training model and writes it to `dir`.
pub fn run_dump_synth(cfg: &BenchConfig, dir: &Path, frames: usize) -> Result<usize> {
    cfg.validate()?;
    let scene = SynthScene::new(cfg.seed, cfg.train.model.joints);
    let seq = synth::generate_sequence(&scene, frames)?;
    synth::dump_sequence(dir, &scene, &seq)?;
    Ok(seq.len())
}
