//! Experiment orchestration: training runs over seeds, the ablation ladder,
//! one-knob scaling sweeps and report merging.
//!
//! Every command writes deterministic artifacts (`report.json`,
//! `epochs.csv`, aggregates, checkpoints) and keeps wall-clock time in
//! separate `timing.json` files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datagen::{self, bayes_auc, read_json, write_json, Dataset, GeneratorConfig, GroundTruth};
use crate::encoder::NormPlacement;
use crate::error::{HhftError, Result};
use crate::features::{FeatureSchema, SequencePooling};
use crate::model::{Model, ModelConfig, ModelKind, Precision};
use crate::training::{init_params, train, InitConfig, InitScheme, RunReport, TrainConfig};

pub const REPORT_FILE: &str = "report.json";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const AGGREGATE_CSV: &str = "aggregate.csv";

/// Where records come from: an on-disk dataset directory or an in-memory
/// generator run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Path(PathBuf),
    Generator(GeneratorConfig),
}

fn d1() -> usize {
    1
}
fn d4() -> usize {
    4
}
fn d8() -> usize {
    8
}
fn default_eps() -> f64 {
    1e-5
}

/// Backbone and head dimensions. `d_trfm` overrides the schema's token
/// width, `d_ffn` defaults to the token width and `head_hidden` to `[4d, d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(default = "d1")]
    pub n1: usize,
    #[serde(default)]
    pub d_trfm: Option<usize>,
    #[serde(default)]
    pub d_ffn: Option<usize>,
    #[serde(default = "d4")]
    pub n_heads: usize,
    #[serde(default = "d1")]
    pub n2: usize,
    #[serde(default = "d8")]
    pub d_hifm: usize,
    #[serde(default = "d4")]
    pub n_h: usize,
    #[serde(default)]
    pub head_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub norm_placement: NormPlacement,
    #[serde(default)]
    pub pooling: SequencePooling,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl Default for Dims {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all dims have defaults")
    }
}

impl Dims {
    /// Fills every optional field from `schema` so that nothing depends on
    /// an implicit default any more.
    pub fn resolve(&self, schema: &FeatureSchema) -> Dims {
        let d = self.d_trfm.unwrap_or(schema.d);
        Dims {
            d_trfm: Some(d),
            d_ffn: Some(self.d_ffn.unwrap_or(d)),
            head_hidden: Some(self.head_hidden.clone().unwrap_or_else(|| vec![4 * d, d])),
            ..self.clone()
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn hhft() -> ModelKind {
    ModelKind::Hhft
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Prefix of run ids and the output directory name; defaults to the
    /// model name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "hhft")]
    pub model: ModelKind,
    pub data: DataSource,
    #[serde(default)]
    pub dims: Dims,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.model.name().to_string())
    }

    pub fn model_config(&self, schema: &FeatureSchema) -> Result<ModelConfig> {
        let dims = self.dims.resolve(schema);
        let schema = FeatureSchema {
            d: dims.d_trfm.expect("resolved"),
            ..schema.clone()
        };
        let config = ModelConfig {
            kind: self.model,
            schema,
            n1: dims.n1,
            d_ffn: dims.d_ffn.expect("resolved"),
            n_heads: dims.n_heads,
            n2: dims.n2,
            d_h: dims.d_hifm,
            n_h: dims.n_h,
            head_hidden: dims.head_hidden,
            norm_placement: dims.norm_placement,
            pooling: dims.pooling,
            ln_eps: dims.ln_eps,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HhftError::Config("seeds must list at least one seed".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(HhftError::Config(format!("seed {s} is listed twice")));
        }
        self.init.validate()?;
        self.train.validate()?;
        self.model_config(schema).map(|_| ())
    }
}

/// Overrides from the command line.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub out_dir: PathBuf,
    /// Threads for independent runs; 1 runs them in order.
    pub parallel: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: None,
            precision: None,
            out_dir: PathBuf::from("out"),
            parallel: 1,
        }
    }
}

impl RunOptions {
    fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = cfg.clone();
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(p) = self.precision {
            cfg.train.precision = p;
        }
        cfg
    }
}

pub struct LoadedData {
    pub dataset: Dataset,
    /// Set when the generator that produced the data is known.
    pub bayes_auc: Option<f64>,
}

pub fn load_data(source: &DataSource) -> Result<LoadedData> {
    let (dataset, truth) = match source {
        DataSource::Path(dir) => {
            let ds = Dataset::load(dir)?;
            let truth = match &ds.header.generator {
                Some(g) => Some(GroundTruth::new(g)?),
                None => None,
            };
            (ds, truth)
        }
        DataSource::Generator(g) => {
            let truth = GroundTruth::new(g)?;
            let records = datagen::generate_records(&truth);
            let header = datagen::DatasetHeader {
                format_version: 1,
                schema: g.schema.clone(),
                split_seed: g.seed,
                counts: datagen::SplitCounts { records: records.len(), train: 0, eval: 0 },
                generator: Some(g.clone()),
                expected_positive_rate: Some(truth.expected_positive_rate()),
            };
            (Dataset::from_records(header, records), Some(truth))
        }
    };
    if dataset.train.is_empty() || dataset.eval.is_empty() {
        return Err(HhftError::Data(format!(
            "dataset needs train and eval records, got {} and {}",
            dataset.train.len(),
            dataset.eval.len()
        )));
    }
    let bayes = match truth {
        Some(t) => Some(bayes_auc(&t, &dataset)?),
        None => None,
    };
    Ok(LoadedData { dataset, bayes_auc: bayes })
}

/// One trained seed.
pub struct SeedRun {
    pub report: RunReport,
    pub seconds: Vec<f64>,
    pub model: Model,
}

/// Trains one seed in memory.
pub fn run_seed(cfg: &ExperimentConfig, data: &LoadedData, seed: u64) -> Result<SeedRun> {
    let schema = &data.dataset.header.schema;
    let mut model = Model::new(cfg.model_config(schema)?)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    init_params(&mut model, &cfg.init, seed, train_cfg.precision)?;
    let out = train(&mut model, &data.dataset.train, &data.dataset.eval, &train_cfg)?;
    let echo = ExperimentConfig {
        dims: cfg.dims.resolve(schema),
        seeds: vec![seed],
        train: train_cfg,
        ..cfg.clone()
    };
    let mut report = out.report;
    report.run_id = format!("{}-seed{seed}", cfg.run_name());
    report.bayes_auc = data.bayes_auc;
    report.config = serde_json::to_value(&echo).expect("config serializes");
    Ok(SeedRun {
        report,
        seconds: out.seconds,
        model,
    })
}

/// Trains every seed of `cfg` (after command-line overrides), on
/// `opts.parallel` threads.
pub fn run_experiment(cfg: &ExperimentConfig, data: &LoadedData, opts: &RunOptions) -> Result<Vec<SeedRun>> {
    let cfg = opts.apply(cfg);
    cfg.validate(&data.dataset.header.schema)?;
    if opts.parallel <= 1 {
        return cfg.seeds.iter().map(|&s| run_seed(&cfg, data, s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallel)
        .build()
        .map_err(|e| HhftError::Config(format!("cannot start {} threads: {e}", opts.parallel)))?;
    pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(&cfg, data, s)).collect())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub run: String,
    pub model: ModelKind,
    pub seeds: Vec<u64>,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub logloss_mean: f64,
    pub logloss_std: f64,
    pub dense_params: usize,
    pub embedding_params: usize,
    pub flops_per_record: usize,
    pub bayes_auc: Option<f64>,
}

pub fn aggregate(run: &str, reports: &[&RunReport]) -> Aggregate {
    let aucs: Vec<f64> = reports.iter().map(|r| r.final_auc).collect();
    let losses: Vec<f64> = reports.iter().map(|r| r.final_logloss).collect();
    let (auc_mean, auc_std) = mean_std(&aucs);
    let (logloss_mean, logloss_std) = mean_std(&losses);
    let first = reports[0];
    Aggregate {
        run: run.to_string(),
        model: first.model,
        seeds: reports.iter().map(|r| r.seed).collect(),
        auc_mean,
        auc_std,
        logloss_mean,
        logloss_std,
        dense_params: first.param_count.dense,
        embedding_params: first.param_count.embedding,
        flops_per_record: first.flops_per_record,
        bayes_auc: first.bayes_auc,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> HhftError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HhftError::io(path, io),
        other => HhftError::Data(format!("csv error on {}: {other:?}", path.display())),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| HhftError::io(path, e))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HhftError::io(dir, e))
}

#[derive(Serialize)]
struct Timing<'a> {
    run_id: &'a str,
    epoch_seconds: &'a [f64],
    total_seconds: f64,
}

/// Writes one seed's artifacts into `dir`.
pub fn write_seed_run(run: &SeedRun, dir: &Path, precision: Precision) -> Result<()> {
    mkdir(dir)?;
    write_json(&dir.join(REPORT_FILE), &run.report)?;
    let rows: Vec<Vec<String>> = run
        .report
        .epochs
        .iter()
        .map(|e| vec![e.epoch.to_string(), e.train_loss.to_string(), opt(e.eval_auc), opt(e.eval_logloss)])
        .collect();
    write_rows(&dir.join(EPOCHS_FILE), &["epoch", "train_loss", "eval_auc", "eval_logloss"], &rows)?;
    let timing = Timing {
        run_id: &run.report.run_id,
        epoch_seconds: &run.seconds,
        total_seconds: run.seconds.iter().sum(),
    };
    write_json(&dir.join(TIMING_FILE), &timing)?;
    checkpoint::save(&run.model, &dir.join(CHECKPOINT_FILE), precision)
}

/// Writes per-seed directories plus `aggregate.json` and `aggregate.csv`
/// (one row per seed, then a `mean` row carrying the standard deviations).
pub fn write_experiment(runs: &[SeedRun], name: &str, dir: &Path, precision: Precision) -> Result<Aggregate> {
    mkdir(dir)?;
    for r in runs {
        write_seed_run(r, &dir.join(format!("seed-{}", r.report.seed)), precision)?;
    }
    let reports: Vec<&RunReport> = runs.iter().map(|r| &r.report).collect();
    let agg = aggregate(name, &reports);
    write_json(&dir.join(AGGREGATE_JSON), &agg)?;
    let mut rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.run_id.clone(),
                r.seed.to_string(),
                r.final_auc.to_string(),
                String::new(),
                r.final_logloss.to_string(),
                String::new(),
                r.param_count.dense.to_string(),
                r.flops_per_record.to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        name.to_string(),
        "mean".into(),
        agg.auc_mean.to_string(),
        agg.auc_std.to_string(),
        agg.logloss_mean.to_string(),
        agg.logloss_std.to_string(),
        agg.dense_params.to_string(),
        agg.flops_per_record.to_string(),
    ]);
    write_rows(
        &dir.join(AGGREGATE_CSV),
        &["run_id", "seed", "auc", "auc_std", "logloss", "logloss_std", "dense_params", "flops_per_record"],
        &rows,
    )?;
    Ok(agg)
}

/// `generate`: writes the dataset described by the generator config at
/// `config_path` into `opts.out_dir`.
pub fn cmd_generate(config_path: &Path, opts: &RunOptions) -> Result<Dataset> {
    let mut cfg: GeneratorConfig = read_json(config_path)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    Ok(datagen::generate(&cfg, &opts.out_dir)?.0)
}

/// `train`: every seed under `out_dir/<name>/seed-<s>/` plus the aggregate.
pub fn cmd_train(config_path: &Path, opts: &RunOptions) -> Result<Aggregate> {
    let cfg = ExperimentConfig::load(config_path)?;
    let data = load_data(&cfg.data)?;
    let runs = run_experiment(&cfg, &data, opts)?;
    let precision = opts.precision.unwrap_or(cfg.train.precision);
    write_experiment(&runs, &cfg.run_name(), &opts.out_dir.join(cfg.run_name()), precision)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Knob {
    #[serde(rename = "n1")]
    N1,
    #[serde(rename = "d_trfm")]
    DTrfm,
    #[serde(rename = "d_ffn")]
    DFfn,
    #[serde(rename = "n2")]
    N2,
    #[serde(rename = "d_hifm")]
    DHifm,
    #[serde(rename = "n_h")]
    NH,
}

impl Knob {
    pub fn name(self) -> &'static str {
        match self {
            Knob::N1 => "n1",
            Knob::DTrfm => "d_trfm",
            Knob::DFfn => "d_ffn",
            Knob::N2 => "n2",
            Knob::DHifm => "d_hifm",
            Knob::NH => "n_h",
        }
    }

    pub fn get(self, dims: &Dims) -> usize {
        match self {
            Knob::N1 => dims.n1,
            Knob::DTrfm => dims.d_trfm.expect("resolved dims"),
            Knob::DFfn => dims.d_ffn.expect("resolved dims"),
            Knob::N2 => dims.n2,
            Knob::DHifm => dims.d_hifm,
            Knob::NH => dims.n_h,
        }
    }

    fn set(self, dims: &mut Dims, v: usize) {
        match self {
            Knob::N1 => dims.n1 = v,
            Knob::DTrfm => dims.d_trfm = Some(v),
            Knob::DFfn => dims.d_ffn = Some(v),
            Knob::N2 => dims.n2 = v,
            Knob::DHifm => dims.d_hifm = v,
            Knob::NH => dims.n_h = v,
        }
    }
}

/// One knob or, for error reporting only, several.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnobSpec {
    One(Knob),
    Many(Vec<Knob>),
}

fn default_multipliers() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 4.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub knob: KnobSpec,
    #[serde(default = "default_multipliers")]
    pub multipliers: Vec<f64>,
    /// Seeds per point; the base config's seeds when absent.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

impl SweepSpec {
    pub fn knob(&self) -> Result<Knob> {
        match &self.knob {
            KnobSpec::One(k) => Ok(*k),
            KnobSpec::Many(ks) if ks.len() == 1 => Ok(ks[0]),
            KnobSpec::Many(ks) => Err(HhftError::Config(format!(
                "a sweep scales exactly one knob, keeping other parameters fixed; got {:?}",
                ks.iter().map(|k| k.name()).collect::<Vec<_>>()
            ))),
        }
    }

    /// The configuration of every point, sorted by multiplier. Dims are
    /// resolved against `schema` first so that exactly one field differs
    /// from the base.
    pub fn points(&self, schema: &FeatureSchema) -> Result<Vec<(f64, ExperimentConfig)>> {
        let knob = self.knob()?;
        if self.multipliers.is_empty() {
            return Err(HhftError::Config("sweep needs at least one multiplier".into()));
        }
        let mut ms = self.multipliers.clone();
        if let Some(m) = ms.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(HhftError::Config(format!("multiplier {m} must be positive")));
        }
        ms.sort_by(f64::total_cmp);
        if ms.windows(2).any(|w| w[0] == w[1]) {
            return Err(HhftError::Config("multipliers must be distinct".into()));
        }
        let base_dims = self.base.dims.resolve(schema);
        let base_value = knob.get(&base_dims);
        let base_name = self.base.run_name();
        ms.into_iter()
            .map(|m| {
                let scaled = base_value as f64 * m;
                if scaled.fract() != 0.0 || scaled < 1.0 {
                    return Err(HhftError::Config(format!(
                        "{} = {base_value} scaled by {m} is {scaled}, not a positive whole number",
                        knob.name()
                    )));
                }
                let mut dims = base_dims.clone();
                knob.set(&mut dims, scaled as usize);
                let cfg = ExperimentConfig {
                    name: Some(format!("{base_name}-{}x{m}", knob.name())),
                    dims,
                    seeds: self.seeds.clone().unwrap_or_else(|| self.base.seeds.clone()),
                    ..self.base.clone()
                };
                Ok((m, cfg))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub knob: Knob,
    pub multiplier: f64,
    pub value: usize,
    pub dense_params: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub flops_per_record: usize,
    pub seeds: usize,
    pub dims: Dims,
}

pub fn sweep_row(knob: Knob, multiplier: f64, cfg: &ExperimentConfig, agg: &Aggregate) -> SweepRow {
    SweepRow {
        knob,
        multiplier,
        value: knob.get(&cfg.dims),
        dense_params: agg.dense_params,
        auc_mean: agg.auc_mean,
        auc_std: agg.auc_std,
        flops_per_record: agg.flops_per_record,
        seeds: agg.seeds.len(),
        dims: cfg.dims.clone(),
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.knob.name().to_string(),
                r.multiplier.to_string(),
                r.value.to_string(),
                r.dense_params.to_string(),
                r.auc_mean.to_string(),
                r.auc_std.to_string(),
                r.flops_per_record.to_string(),
                r.seeds.to_string(),
            ]
        })
        .collect();
    write_rows(
        path,
        &["knob", "multiplier", "value", "dense_params", "auc_mean", "auc_std", "flops_per_record", "seeds"],
        &body,
    )
}

/// `sweep`: one experiment per multiplier under
/// `out_dir/sweep-<knob>/x<m>/`, then `sweep.csv` and `sweep.json`.
pub fn cmd_sweep(spec_path: &Path, opts: &RunOptions) -> Result<Vec<SweepRow>> {
    let spec: SweepSpec = read_json(spec_path)?;
    let knob = spec.knob()?;
    let data = load_data(&spec.base.data)?;
    let points = spec.points(&data.dataset.header.schema)?;
    let root = opts.out_dir.join(format!("sweep-{}", knob.name()));
    let precision = opts.precision.unwrap_or(spec.base.train.precision);
    let mut rows = Vec::with_capacity(points.len());
    for (m, cfg) in &points {
        let runs = run_experiment(cfg, &data, opts).map_err(|e| e.context(format!("sweep point x{m}")))?;
        let agg = write_experiment(&runs, &cfg.run_name(), &root.join(format!("x{m}")), precision)?;
        rows.push(sweep_row(knob, *m, cfg, &agg));
    }
    write_sweep_csv(&rows, &root.join("sweep.csv"))?;
    write_json(&root.join("sweep.json"), &rows)?;
    Ok(rows)
}

fn default_init_arm() -> InitConfig {
    InitConfig::new(InitScheme::ZerosResidualOut)
}

fn default_scaled() -> Scale {
    Scale {
        knob: Knob::DTrfm,
        multiplier: 2.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub knob: Knob,
    pub multiplier: f64,
}

/// The ladder runs on `base`'s data, dims, training config and seeds;
/// `base.model` is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub base: ExperimentConfig,
    /// Initialization of the `hhft+init` rung.
    #[serde(default = "default_init_arm")]
    pub init_arm: InitConfig,
    /// Scaling of the `hhft-scaled` rung, applied on top of `hhft+init`.
    #[serde(default = "default_scaled")]
    pub scaled: Scale,
}

pub const RUNGS: [&str; 6] = ["mlp", "shared-transformer", "hhft(n2=0)", "hhft", "hhft+init", "hhft-scaled"];

fn rung_slug(rung: &str) -> String {
    rung.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

impl AblationConfig {
    /// The six rungs in ladder order.
    pub fn rungs(&self, schema: &FeatureSchema) -> Result<Vec<(&'static str, ExperimentConfig)>> {
        let with = |model: ModelKind, name: &str| ExperimentConfig {
            name: Some(rung_slug(name)),
            model,
            ..self.base.clone()
        };
        let mut no_hif = with(ModelKind::Hhft, RUNGS[2]);
        no_hif.dims.n2 = 0;
        let mut init = with(ModelKind::Hhft, RUNGS[4]);
        init.init = self.init_arm.clone();
        let spec = SweepSpec {
            base: init.clone(),
            knob: KnobSpec::One(self.scaled.knob),
            multipliers: vec![self.scaled.multiplier],
            seeds: None,
        };
        let (_, mut scaled) = spec.points(schema)?.remove(0);
        scaled.name = Some(rung_slug(RUNGS[5]));
        Ok(vec![
            (RUNGS[0], with(ModelKind::Mlp, RUNGS[0])),
            (RUNGS[1], with(ModelKind::SharedTransformer, RUNGS[1])),
            (RUNGS[2], no_hif),
            (RUNGS[3], with(ModelKind::Hhft, RUNGS[3])),
            (RUNGS[4], init),
            (RUNGS[5], scaled),
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub rung: String,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub delta_vs_mlp: f64,
    pub dense_params: usize,
    pub flops_per_record: usize,
}

/// `ablate`: trains the ladder on identical data and seeds and writes
/// `ablation.json` and `ablation.csv` under `out_dir/ablation/`.
pub fn cmd_ablate(config_path: &Path, opts: &RunOptions) -> Result<Vec<LadderRow>> {
    let cfg: AblationConfig = read_json(config_path)?;
    let data = load_data(&cfg.base.data)?;
    let rungs = cfg.rungs(&data.dataset.header.schema)?;
    let root = opts.out_dir.join("ablation");
    let precision = opts.precision.unwrap_or(cfg.base.train.precision);
    let mut aggs = Vec::with_capacity(rungs.len());
    for (rung, rc) in &rungs {
        let runs = run_experiment(rc, &data, opts).map_err(|e| e.context(format!("rung `{rung}`")))?;
        let agg = write_experiment(&runs, &rc.run_name(), &root.join(rc.run_name()), precision)
            .map_err(|e| e.context(format!("rung `{rung}`")))?;
        aggs.push((*rung, agg));
    }
    let mlp = aggs[0].1.auc_mean;
    let rows: Vec<LadderRow> = aggs
        .iter()
        .map(|(rung, a)| LadderRow {
            rung: rung.to_string(),
            auc_mean: a.auc_mean,
            auc_std: a.auc_std,
            delta_vs_mlp: a.auc_mean - mlp,
            dense_params: a.dense_params,
            flops_per_record: a.flops_per_record,
        })
        .collect();
    write_json(&root.join("ablation.json"), &rows)?;
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.rung.clone(),
                r.auc_mean.to_string(),
                r.auc_std.to_string(),
                r.delta_vs_mlp.to_string(),
                r.dense_params.to_string(),
                r.flops_per_record.to_string(),
            ]
        })
        .collect();
    write_rows(
        &root.join("ablation.csv"),
        &["rung", "auc_mean", "auc_std", "delta_vs_mlp", "dense_params", "flops_per_record"],
        &body,
    )?;
    Ok(rows)
}

/// Every `report.json` at or below `dir`, in path order.
fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let direct = dir.join(REPORT_FILE);
    if direct.is_file() {
        out.push(direct);
        return Ok(());
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| HhftError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for s in subdirs {
        find_reports(&s, out)?;
    }
    Ok(())
}

/// `report`: merges the run reports found under `run_dirs` into
/// `out_dir/report.json` (keyed by run id) and `out_dir/report.csv`.
pub fn cmd_report(run_dirs: &[PathBuf], opts: &RunOptions) -> Result<BTreeMap<String, RunReport>> {
    let mut merged: BTreeMap<String, (PathBuf, RunReport)> = BTreeMap::new();
    for dir in run_dirs {
        if !dir.is_dir() {
            return Err(HhftError::MissingPath(dir.clone()));
        }
        let mut paths = Vec::new();
        find_reports(dir, &mut paths)?;
        if paths.is_empty() {
            return Err(HhftError::Data(format!("no {REPORT_FILE} under {}", dir.display())));
        }
        for p in paths {
            let r: RunReport = read_json(&p)?;
            if let Some((prev, _)) = merged.get(&r.run_id) {
                return Err(HhftError::Config(format!(
                    "run id `{}` appears in both {} and {}",
                    r.run_id,
                    prev.display(),
                    p.display()
                )));
            }
            merged.insert(r.run_id.clone(), (p, r));
        }
    }
    let reports: BTreeMap<String, RunReport> = merged.into_iter().map(|(k, (_, r))| (k, r)).collect();
    mkdir(&opts.out_dir)?;
    write_json(&opts.out_dir.join("report.json"), &reports)?;
    let body: Vec<Vec<String>> = reports
        .values()
        .map(|r| {
            vec![
                r.run_id.clone(),
                r.model.name().to_string(),
                r.seed.to_string(),
                r.final_auc.to_string(),
                r.final_logloss.to_string(),
                r.best_auc.to_string(),
                r.param_count.dense.to_string(),
                r.flops_per_record.to_string(),
                opt(r.bayes_auc),
            ]
        })
        .collect();
    write_rows(
        &opts.out_dir.join("report.csv"),
        &["run_id", "model", "seed", "final_auc", "final_logloss", "best_auc", "dense_params", "flops_per_record", "bayes_auc"],
        &body,
    )?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SeqLenRange;
    use crate::features::BlockSpec;

    fn tiny_generator() -> GeneratorConfig {
        GeneratorConfig {
            schema: FeatureSchema {
                blocks: vec![
                    BlockSpec::categorical("u", &[6, 3], 4),
                    BlockSpec::categorical("i", &[6], 4),
                    BlockSpec::sequence("s", 6, 3, 4),
                ],
                d: 8,
            },
            records: 300,
            seq_len: SeqLenRange { min: 1, max: 3 },
            ..GeneratorConfig::planted_three_way(5, 300)
        }
    }

    fn tiny(model: ModelKind) -> ExperimentConfig {
        let mut g = tiny_generator();
        g.interactions[0].blocks = vec!["u".into(), "i".into()];
        ExperimentConfig {
            name: None,
            model,
            data: DataSource::Generator(g),
            dims: Dims {
                n_heads: 2,
                d_hifm: 2,
                n_h: 2,
                ..Dims::default()
            },
            init: InitConfig::default(),
            train: TrainConfig {
                batch_size: 64,
                epochs: 2,
                lr: 0.01,
                ..TrainConfig::default()
            },
            seeds: vec![1, 2],
        }
    }

    #[test]
    fn defaults_round_trip() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"data":{"path":"x"}}"#).unwrap();
        assert_eq!(cfg.model, ModelKind::Hhft);
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!((cfg.dims.n1, cfg.dims.n2, cfg.dims.d_hifm, cfg.dims.n_h), (1, 1, 8, 4));
        let back: ExperimentConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn mean_std_sample() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn parallel_matches_sequential() {
        let cfg = tiny(ModelKind::Hhft);
        let data = load_data(&cfg.data).unwrap();
        let seq = run_experiment(&cfg, &data, &RunOptions::default()).unwrap();
        let par = run_experiment(&cfg, &data, &RunOptions { parallel: 2, ..RunOptions::default() }).unwrap();
        assert_eq!(seq.len(), 2);
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.report, b.report);
        }
        assert_eq!(seq[0].report.run_id, "hhft-seed1");
        assert!(seq[0].report.bayes_auc.is_some());
    }

    #[test]
    fn sweep_points_change_one_field() {
        let mut cfg = tiny(ModelKind::Hhft);
        cfg.dims.n_heads = 1;
        let schema = tiny_generator().schema;
        let spec = SweepSpec {
            base: cfg.clone(),
            knob: KnobSpec::One(Knob::DTrfm),
            multipliers: vec![2.0, 0.5, 1.0],
            seeds: None,
        };
        let pts = spec.points(&schema).unwrap();
        assert_eq!(pts.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0.5, 1.0, 2.0]);
        let base = serde_json::to_value(cfg.dims.resolve(&schema)).unwrap();
        for (m, p) in &pts {
            let v = serde_json::to_value(&p.dims).unwrap();
            let diff: Vec<&String> = base
                .as_object()
                .unwrap()
                .iter()
                .filter(|(k, x)| v[k.as_str()] != **x)
                .map(|(k, _)| k)
                .collect();
            let expect: Vec<&str> = if *m == 1.0 { vec![] } else { vec!["d_trfm"] };
            assert_eq!(diff, expect);
        }
        let multi = SweepSpec {
            knob: KnobSpec::Many(vec![Knob::N1, Knob::DTrfm]),
            ..spec.clone()
        };
        let err = multi.points(&schema).unwrap_err().to_string();
        assert!(err.contains("keeping other parameters fixed"), "{err}");
        let frac = SweepSpec {
            knob: KnobSpec::One(Knob::N1),
            multipliers: vec![0.5],
            ..spec
        };
        assert!(matches!(frac.points(&schema), Err(HhftError::Config(_))));
    }

    #[test]
    fn ladder_order_and_shape() {
        let base = tiny(ModelKind::Mlp);
        let abl = AblationConfig {
            base,
            init_arm: default_init_arm(),
            scaled: default_scaled(),
        };
        let rungs = abl.rungs(&tiny_generator().schema).unwrap();
        let names: Vec<&str> = rungs.iter().map(|r| r.0).collect();
        assert_eq!(names, RUNGS);
        assert_eq!(rungs[2].1.dims.n2, 0);
        assert_eq!(rungs[4].1.init, default_init_arm());
        assert_eq!(rungs[5].1.dims.d_trfm, Some(16));
        assert_eq!(rungs[5].1.init, default_init_arm());
    }

    #[test]
    fn missing_dataset_path_is_user_error() {
        let err = load_data(&DataSource::Path("/nonexistent/data".into())).err().unwrap();
        assert!(err.is_user_error());
        assert!(err.to_string().contains("/nonexistent/data"));
    }
}
