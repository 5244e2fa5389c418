//! Synthetic click data with planted cross-block interactions.
//!
//! Each interaction term `t` multiplies one ±1 sign per involved block. A
//! block's sign is a fixed function of its first categorical field: ids are
//! ranked by a seeded hash and the lower half maps to −1, so for uniform ids
//! every sign has mean exactly zero (even vocabularies) and a product over
//! several blocks carries no lower-order marginal effect. The click logit is
//!
//! ```text
//! logit* = base + Σ_t w_t · Π_{b ∈ t} σ_{t,b}(id_b)
//! ```
//!
//! and the label is `Bernoulli(sigmoid(logit*))`, then flipped with the
//! configured noise probability. All other fields are distractors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HhftError, Result};
use crate::features::{BlockKind, BlockSpec, BlockValue, ExampleRecord, FeatureSchema};
use crate::model::sigmoid;
use crate::seeding::{mix, splitmix64, stream};
use crate::training::auc;

pub const HEADER_FILE: &str = "header.json";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    /// Names of the 1 to 3 categorical blocks whose signs are multiplied.
    pub blocks: Vec<String>,
    pub strength: f64,
    /// Terms with the same salt reuse sign tables for shared blocks;
    /// defaults to the term's position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salt: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqLenRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub schema: FeatureSchema,
    pub interactions: Vec<Interaction>,
    #[serde(default)]
    pub base_logit: f64,
    /// Label flip probability, in `[0, 0.5)`.
    pub noise: f64,
    pub records: usize,
    /// True sequence lengths are uniform on `min..=max` (capped by each
    /// block's `max_seq_len`).
    pub seq_len: SeqLenRange,
}

impl GeneratorConfig {
    /// Four blocks (three categorical, one sequence), one pure 3-way sign
    /// interaction across the categorical blocks.
    pub fn planted_three_way(seed: u64, records: usize) -> Self {
        let vocab = 32;
        GeneratorConfig {
            seed,
            schema: FeatureSchema {
                blocks: vec![
                    BlockSpec::categorical("user", &[vocab, 8], 16),
                    BlockSpec::categorical("item", &[vocab, 8], 16),
                    BlockSpec::categorical("query", &[vocab], 16),
                    BlockSpec::sequence("behavior", vocab, 8, 16),
                ],
                d: 32,
            },
            interactions: vec![Interaction {
                blocks: vec!["user".into(), "item".into(), "query".into()],
                strength: 2.0,
                salt: None,
            }],
            base_logit: 0.0,
            noise: 0.1,
            records,
            seq_len: SeqLenRange { min: 1, max: 8 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let err = |m: String| Err(HhftError::Config(m));
        if self.records == 0 {
            return err("records must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.noise) {
            return err(format!("noise must be in [0, 0.5), got {}", self.noise));
        }
        if self.seq_len.min > self.seq_len.max {
            return err(format!("seq_len min {} exceeds max {}", self.seq_len.min, self.seq_len.max));
        }
        if !self.base_logit.is_finite() {
            return err("base_logit must be finite".into());
        }
        for (t, term) in self.interactions.iter().enumerate() {
            if term.blocks.is_empty() || term.blocks.len() > 3 {
                return err(format!("interaction {t} must involve 1 to 3 blocks, got {}", term.blocks.len()));
            }
            if term.strength.is_nan() {
                return err(format!("interaction {t} strength is not a number"));
            }
            if term.strength.is_infinite() && self.interactions.len() > 1 {
                return err(format!("interaction {t}: infinite strength needs a single term"));
            }
            let mut seen = std::collections::HashSet::new();
            for name in &term.blocks {
                let Some(k) = self.schema.block_index(name) else {
                    return err(format!("interaction {t} references unknown block `{name}`"));
                };
                if self.schema.blocks[k].kind != BlockKind::CategoricalSet {
                    return err(format!("interaction {t}: block `{name}` is not categorical"));
                }
                if !seen.insert(name) {
                    return err(format!("interaction {t} lists block `{name}` twice"));
                }
            }
        }
        Ok(())
    }

    fn salt(&self, t: usize) -> u64 {
        self.interactions[t].salt.unwrap_or(t as u64)
    }
}

/// The generator's exact click probability.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    /// `signs[t][j][id]` for block `j` of term `t`.
    signs: Vec<Vec<Vec<i8>>>,
    /// Schema index of block `j` of term `t`.
    block_of: Vec<Vec<usize>>,
}

/// ±1 per id, exactly balanced for even `vocab`: ids ranked by hash, the
/// first half get −1.
fn sign_table(seed: u64, salt: u64, block: &str, vocab: usize) -> Vec<i8> {
    let key = crate::seeding::name_hash(block);
    let mut ranked: Vec<(u64, usize)> = (0..vocab).map(|id| (mix(&[seed, salt, key, id as u64]), id)).collect();
    ranked.sort_unstable();
    let mut table = vec![1i8; vocab];
    for &(_, id) in &ranked[..vocab / 2] {
        table[id] = -1;
    }
    table
}

impl GroundTruth {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut signs = Vec::new();
        let mut block_of = Vec::new();
        for (t, term) in config.interactions.iter().enumerate() {
            let idx: Vec<usize> = term.blocks.iter().map(|b| config.schema.block_index(b).unwrap()).collect();
            signs.push(
                idx.iter()
                    .map(|&k| {
                        let spec = &config.schema.blocks[k];
                        sign_table(config.seed, config.salt(t), &spec.name, spec.vocab_sizes[0])
                    })
                    .collect(),
            );
            block_of.push(idx);
        }
        Ok(GroundTruth {
            config: config.clone(),
            signs,
            block_of,
        })
    }

    pub fn logit(&self, record: &ExampleRecord) -> f64 {
        let mut z = self.config.base_logit;
        for (t, term) in self.config.interactions.iter().enumerate() {
            let mut s = 1i8;
            for (j, &k) in self.block_of[t].iter().enumerate() {
                let id = match &record.values[k] {
                    BlockValue::Categorical(ids) => ids[0],
                    _ => unreachable!("interaction blocks are categorical"),
                };
                s *= self.signs[t][j][id];
            }
            z += term.strength * f64::from(s);
        }
        z
    }

    /// Clean click probability `p*` (before label noise).
    pub fn p_star(&self, record: &ExampleRecord) -> f64 {
        sigmoid(self.logit(record))
    }

    /// Probability of an observed positive label after flipping.
    pub fn observed_p(&self, record: &ExampleRecord) -> f64 {
        let n = self.config.noise;
        n + (1.0 - 2.0 * n) * self.p_star(record)
    }

    /// `E[p*]` over the id distribution, by exhaustive enumeration of each
    /// involved block's sign pattern.
    pub fn analytic_mean(&self) -> f64 {
        // For each involved block, the probability of each joint sign pattern
        // across all terms that use it.
        let mut involved: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (t, blocks) in self.block_of.iter().enumerate() {
            for (j, &k) in blocks.iter().enumerate() {
                involved.entry(k).or_default().push((t, j));
            }
        }
        let per_block: Vec<(Vec<(usize, usize)>, BTreeMap<Vec<i8>, f64>)> = involved
            .into_iter()
            .map(|(k, uses)| {
                let vocab = self.config.schema.blocks[k].vocab_sizes[0];
                let mut dist = BTreeMap::new();
                for id in 0..vocab {
                    let pattern: Vec<i8> = uses.iter().map(|&(t, j)| self.signs[t][j][id]).collect();
                    *dist.entry(pattern).or_insert(0.0) += 1.0 / vocab as f64;
                }
                (uses, dist)
            })
            .collect();
        let n_terms = self.config.interactions.len();
        let mut total = 0.0;
        let mut stack: Vec<(usize, Vec<i8>, f64)> = vec![(0, vec![1; n_terms], 1.0)];
        while let Some((b, prod, prob)) = stack.pop() {
            if b == per_block.len() {
                let z: f64 = self.config.base_logit
                    + self
                        .config
                        .interactions
                        .iter()
                        .zip(&prod)
                        .map(|(term, &s)| term.strength * f64::from(s))
                        .sum::<f64>();
                total += prob * sigmoid(z);
                continue;
            }
            let (uses, dist) = &per_block[b];
            for (pattern, p) in dist {
                let mut next = prod.clone();
                for (&(t, _), &s) in uses.iter().zip(pattern) {
                    next[t] *= s;
                }
                stack.push((b + 1, next, prob * p));
            }
        }
        total
    }

    /// Expected positive rate of the observed (noisy) labels.
    pub fn expected_positive_rate(&self) -> f64 {
        let n = self.config.noise;
        n + (1.0 - 2.0 * n) * self.analytic_mean()
    }
}

fn draw_block(spec: &BlockSpec, seq_len: SeqLenRange, rng: &mut impl Rng) -> BlockValue {
    match spec.kind {
        BlockKind::CategoricalSet => BlockValue::Categorical(spec.vocab_sizes.iter().map(|&v| rng.gen_range(0..v)).collect()),
        BlockKind::ContinuousVector => BlockValue::Continuous((0..spec.cont_dim).map(|_| rng.sample(StandardNormal)).collect()),
        BlockKind::Sequence => {
            let max = seq_len.max.min(spec.max_seq_len);
            let len = rng.gen_range(seq_len.min.min(max)..=max);
            let mut items = vec![0; spec.max_seq_len];
            for item in &mut items[..len] {
                *item = rng.gen_range(0..spec.vocab_sizes[0]);
            }
            BlockValue::Sequence { items, len }
        }
    }
}

/// Record `index` of the dataset; depends only on `(seed, index)`.
pub fn generate_record(truth: &GroundTruth, index: u64) -> ExampleRecord {
    let c = &truth.config;
    let mut rng = stream(&[c.seed, 0x5245_434f_5244, index]);
    let values = c.schema.blocks.iter().map(|b| draw_block(b, c.seq_len, &mut rng)).collect();
    let mut record = ExampleRecord { values, label: 0 };
    let click = rng.gen::<f64>() < truth.p_star(&record);
    let flip = rng.gen::<f64>() < c.noise;
    record.label = u8::from(click != flip);
    record
}

pub fn generate_records(truth: &GroundTruth) -> Vec<ExampleRecord> {
    (0..truth.config.records as u64).map(|i| generate_record(truth, i)).collect()
}

/// Roughly one record in ten goes to the eval split.
pub fn is_eval(split_seed: u64, index: u64) -> bool {
    splitmix64(mix(&[split_seed, 0x0053_504c_4954]) ^ index).is_multiple_of(10)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub records: usize,
    pub train: usize,
    pub eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub schema: FeatureSchema,
    pub split_seed: u64,
    pub counts: SplitCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_positive_rate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub train: Vec<ExampleRecord>,
    pub eval: Vec<ExampleRecord>,
}

impl Dataset {
    /// Splits records by index hash.
    pub fn from_records(header: DatasetHeader, records: Vec<ExampleRecord>) -> Self {
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for (i, r) in records.into_iter().enumerate() {
            if is_eval(header.split_seed, i as u64) {
                eval.push(r);
            } else {
                train.push(r);
            }
        }
        Dataset { header, train, eval }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(HhftError::MissingPath(dir.to_path_buf()));
        }
        let header_path = dir.join(HEADER_FILE);
        let header: DatasetHeader = read_json(&header_path)?;
        header.schema.validate()?;
        let records_path = dir.join(RECORDS_FILE);
        let file = fs::File::open(&records_path).map_err(|e| HhftError::io(&records_path, e))?;
        let mut records = Vec::with_capacity(header.counts.records);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| HhftError::io(&records_path, e))?;
            if line.is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| HhftError::Parse {
                path: records_path.clone(),
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            let record = ExampleRecord::from_json(&header.schema, &value)
                .and_then(|r| r.validate(&header.schema).map(|_| r))
                .map_err(|e| e.at_record(records.len()))?;
            records.push(record);
        }
        if records.len() != header.counts.records {
            return Err(HhftError::Data(format!(
                "{} declares {} records, {} has {}",
                header_path.display(),
                header.counts.records,
                records_path.display(),
                records.len()
            )));
        }
        Ok(Dataset::from_records(header, records))
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(HhftError::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| HhftError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HhftError::parse(path, &e))
}

/// Writes `header.json` and `records.jsonl` into `out_dir`.
pub fn generate(config: &GeneratorConfig, out_dir: &Path) -> Result<(Dataset, GroundTruth)> {
    let truth = GroundTruth::new(config)?;
    let records = generate_records(&truth);
    fs::create_dir_all(out_dir).map_err(|e| HhftError::io(out_dir, e))?;
    let records_path = out_dir.join(RECORDS_FILE);
    let file = fs::File::create(&records_path).map_err(|e| HhftError::io(&records_path, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        let line = serde_json::to_string(&r.to_json(&config.schema)).expect("records serialize");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| HhftError::io(&records_path, e))?;
    }
    w.flush().map_err(|e| HhftError::io(&records_path, e))?;
    let eval = (0..records.len() as u64).filter(|&i| is_eval(config.seed, i)).count();
    let header = DatasetHeader {
        format_version: 1,
        schema: config.schema.clone(),
        split_seed: config.seed,
        counts: SplitCounts {
            records: records.len(),
            train: records.len() - eval,
            eval,
        },
        generator: Some(config.clone()),
        expected_positive_rate: Some(truth.expected_positive_rate()),
    };
    write_json(&out_dir.join(HEADER_FILE), &header)?;
    Ok((Dataset::from_records(header, records), truth))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| HhftError::io(path, e))
}

/// AUC of scoring each eval record by its true click probability.
pub fn bayes_auc(truth: &GroundTruth, dataset: &Dataset) -> Result<f64> {
    match &dataset.header.generator {
        Some(g) if *g == truth.config => {}
        Some(_) => {
            return Err(HhftError::Oracle(
                "ground truth config differs from the dataset's generator config".into(),
            ))
        }
        None => return Err(HhftError::Oracle("dataset was not produced by the generator".into())),
    }
    let scores: Vec<f64> = dataset.eval.iter().map(|r| truth.p_star(r)).collect();
    let labels: Vec<f64> = dataset.eval.iter().map(|r| f64::from(r.label)).collect();
    auc(&scores, &labels)
}

/// Eval AUC of every scorer that looks at a single raw feature: for each
/// categorical field and sequence block, the smoothed training click rate
/// of the value (last item for sequences); for each continuous coordinate,
/// the raw value. Reported as `max(auc, 1 − auc)`.
pub fn single_feature_aucs(dataset: &Dataset) -> Result<Vec<(String, f64)>> {
    let schema = &dataset.header.schema;
    let labels: Vec<f64> = dataset.eval.iter().map(|r| f64::from(r.label)).collect();
    let prior = dataset.train.iter().map(|r| f64::from(r.label)).sum::<f64>() / dataset.train.len().max(1) as f64;
    let mut out = Vec::new();
    let rate_scorer = |key: &dyn Fn(&ExampleRecord) -> usize| -> Result<f64> {
        let mut stats: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for r in &dataset.train {
            let e = stats.entry(key(r)).or_insert((0.0, 0.0));
            e.0 += f64::from(r.label);
            e.1 += 1.0;
        }
        let scores: Vec<f64> = dataset
            .eval
            .iter()
            .map(|r| {
                let (pos, n) = stats.get(&key(r)).copied().unwrap_or((0.0, 0.0));
                (pos + prior) / (n + 1.0)
            })
            .collect();
        auc(&scores, &labels)
    };
    for (k, spec) in schema.blocks.iter().enumerate() {
        match spec.kind {
            BlockKind::CategoricalSet => {
                for f in 0..spec.vocab_sizes.len() {
                    let a = rate_scorer(&|r: &ExampleRecord| match &r.values[k] {
                        BlockValue::Categorical(ids) => ids[f],
                        _ => 0,
                    })?;
                    out.push((format!("{}.{f}", spec.name), a.max(1.0 - a)));
                }
            }
            BlockKind::Sequence => {
                let a = rate_scorer(&|r: &ExampleRecord| match &r.values[k] {
                    BlockValue::Sequence { items, len } if *len > 0 => items[len - 1] + 1,
                    _ => 0,
                })?;
                out.push((format!("{}.last", spec.name), a.max(1.0 - a)));
            }
            BlockKind::ContinuousVector => {
                for c in 0..spec.cont_dim {
                    let scores: Vec<f64> = dataset
                        .eval
                        .iter()
                        .map(|r| match &r.values[k] {
                            BlockValue::Continuous(xs) => xs[c],
                            _ => 0.0,
                        })
                        .collect();
                    let a = auc(&scores, &labels)?;
                    out.push((format!("{}.{c}", spec.name), a.max(1.0 - a)));
                }
            }
        }
    }
    Ok(out)
}

pub fn dataset_dir_files(dir: &Path) -> [PathBuf; 2] {
    [dir.join(HEADER_FILE), dir.join(RECORDS_FILE)]
}
