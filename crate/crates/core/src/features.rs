//! Semantic feature blocks and their tokenization.
//!
//! A [`FeatureSchema`] partitions the raw input into `K` named blocks. Each
//! block is embedded on its own (categorical lookups, an affine lift for
//! continuous values, or a pooled item sequence), and every block embedding
//! is then projected by its own affine map to the shared token width `d`.
//! Stacking the projected blocks in schema order gives the `[B, K, d]`
//! token matrix consumed by the encoder stack.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{HhftError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{ParamId, ParamRole, ParamStore, ParamVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    CategoricalSet,
    ContinuousVector,
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
    /// Vocabulary per categorical field; for a sequence block, the single
    /// item vocabulary.
    #[serde(default)]
    pub vocab_sizes: Vec<usize>,
    /// Embedding width per categorical field; defaults to an even split of `e_k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub cont_dim: usize,
    pub e_k: usize,
    #[serde(default)]
    pub max_seq_len: usize,
}

impl BlockSpec {
    pub fn categorical(name: &str, vocab_sizes: &[usize], e_k: usize) -> Self {
        BlockSpec {
            name: name.into(),
            kind: BlockKind::CategoricalSet,
            vocab_sizes: vocab_sizes.to_vec(),
            field_dims: None,
            cont_dim: 0,
            e_k,
            max_seq_len: 0,
        }
    }

    pub fn continuous(name: &str, cont_dim: usize, e_k: usize) -> Self {
        BlockSpec {
            name: name.into(),
            kind: BlockKind::ContinuousVector,
            vocab_sizes: vec![],
            field_dims: None,
            cont_dim,
            e_k,
            max_seq_len: 0,
        }
    }

    pub fn sequence(name: &str, item_vocab: usize, max_seq_len: usize, e_k: usize) -> Self {
        BlockSpec {
            name: name.into(),
            kind: BlockKind::Sequence,
            vocab_sizes: vec![item_vocab],
            field_dims: None,
            cont_dim: 0,
            e_k,
            max_seq_len,
        }
    }

    /// Number of raw fields the block carries.
    pub fn field_arity(&self) -> usize {
        match self.kind {
            BlockKind::CategoricalSet => self.vocab_sizes.len(),
            BlockKind::ContinuousVector => self.cont_dim,
            BlockKind::Sequence => 1,
        }
    }

    /// Embedding width of each categorical field.
    pub fn resolved_field_dims(&self) -> Result<Vec<usize>> {
        if let Some(dims) = &self.field_dims {
            return Ok(dims.clone());
        }
        let arity = self.vocab_sizes.len().max(1);
        if !self.e_k.is_multiple_of(arity) {
            return Err(HhftError::Schema(format!(
                "block `{}`: e_k={} does not split evenly over {} fields; set field_dims",
                self.name, self.e_k, arity
            )));
        }
        Ok(vec![self.e_k / arity; self.vocab_sizes.len()])
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(HhftError::Schema(format!("block `{}`: {msg}", self.name)));
        if self.e_k == 0 {
            return err("e_k must be at least 1".into());
        }
        if self.vocab_sizes.contains(&0) {
            return err("vocabulary sizes must be at least 1".into());
        }
        match self.kind {
            BlockKind::CategoricalSet => {
                if self.vocab_sizes.is_empty() {
                    return err("categorical block needs at least one field".into());
                }
                let dims = self.resolved_field_dims()?;
                if dims.len() != self.vocab_sizes.len() || dims.iter().sum::<usize>() != self.e_k {
                    return err(format!("field_dims {dims:?} must have one entry per field and sum to e_k"));
                }
                if dims.contains(&0) {
                    return err("field dims must be at least 1".into());
                }
            }
            BlockKind::ContinuousVector => {
                if self.cont_dim == 0 {
                    return err("continuous block needs cont_dim >= 1".into());
                }
            }
            BlockKind::Sequence => {
                if self.vocab_sizes.len() != 1 {
                    return err("sequence block needs exactly one item vocabulary".into());
                }
                if self.max_seq_len == 0 {
                    return err("sequence block needs max_seq_len >= 1".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub blocks: Vec<BlockSpec>,
    /// Unified token width.
    pub d: usize,
}

impl FeatureSchema {
    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(HhftError::Schema(format!(
                "schema needs at least 2 blocks, got {}",
                self.blocks.len()
            )));
        }
        if self.d == 0 {
            return Err(HhftError::Schema("token dimension d must be at least 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for b in &self.blocks {
            if !seen.insert(b.name.as_str()) {
                return Err(HhftError::Schema(format!("duplicate block name `{}`", b.name)));
            }
            b.validate()?;
        }
        Ok(())
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn total_embedding_width(&self) -> usize {
        self.blocks.iter().map(|b| b.e_k).sum()
    }
}

/// Raw values of one block inside a record.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockValue {
    Categorical(Vec<usize>),
    Continuous(Vec<f64>),
    /// Item ids; only the first `len` are real, the rest is padding.
    Sequence { items: Vec<usize>, len: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleRecord {
    /// One entry per schema block, in schema order.
    pub values: Vec<BlockValue>,
    pub label: u8,
}

impl ExampleRecord {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.values.len() != schema.k() {
            return Err(HhftError::Schema(format!(
                "record has {} blocks, schema has {}",
                self.values.len(),
                schema.k()
            )));
        }
        if self.label > 1 {
            return Err(HhftError::Data(format!("label {} is not binary", self.label)));
        }
        for (spec, value) in schema.blocks.iter().zip(&self.values) {
            validate_block(spec, value)?;
        }
        Ok(())
    }

    pub fn to_json(&self, schema: &FeatureSchema) -> Value {
        let mut obj = Map::new();
        for (spec, value) in schema.blocks.iter().zip(&self.values) {
            let v = match value {
                BlockValue::Categorical(ids) => json!(ids),
                BlockValue::Continuous(xs) => json!(xs),
                BlockValue::Sequence { items, len } => json!({ "items": items, "len": len }),
            };
            obj.insert(spec.name.clone(), v);
        }
        obj.insert("label".into(), json!(self.label));
        Value::Object(obj)
    }

    pub fn from_json(schema: &FeatureSchema, value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| HhftError::Data("record is not a JSON object".into()))?;
        let ids = |v: &Value, block: &str| -> Result<Vec<usize>> {
            v.as_array()
                .ok_or_else(|| HhftError::Data(format!("block `{block}`: expected an array of ids")))?
                .iter()
                .map(|x| {
                    x.as_u64()
                        .map(|u| u as usize)
                        .ok_or_else(|| HhftError::Data(format!("block `{block}`: id {x} is not a non-negative integer")))
                })
                .collect()
        };
        let mut values = Vec::with_capacity(schema.k());
        for spec in &schema.blocks {
            let raw = obj
                .get(&spec.name)
                .ok_or_else(|| HhftError::Data(format!("missing block `{}`", spec.name)))?;
            let value = match spec.kind {
                BlockKind::CategoricalSet => BlockValue::Categorical(ids(raw, &spec.name)?),
                BlockKind::ContinuousVector => BlockValue::Continuous(
                    raw.as_array()
                        .ok_or_else(|| HhftError::Data(format!("block `{}`: expected an array", spec.name)))?
                        .iter()
                        .map(|x| {
                            x.as_f64().ok_or_else(|| {
                                HhftError::Data(format!("block `{}`: {x} is not a number", spec.name))
                            })
                        })
                        .collect::<Result<_>>()?,
                ),
                BlockKind::Sequence => {
                    let items = ids(
                        raw.get("items")
                            .ok_or_else(|| HhftError::Data(format!("block `{}`: missing items", spec.name)))?,
                        &spec.name,
                    )?;
                    let len = raw
                        .get("len")
                        .and_then(Value::as_u64)
                        .ok_or_else(|| HhftError::Data(format!("block `{}`: missing len", spec.name)))?
                        as usize;
                    BlockValue::Sequence { items, len }
                }
            };
            values.push(value);
        }
        let label = obj
            .get("label")
            .and_then(Value::as_u64)
            .ok_or_else(|| HhftError::Data("missing or non-integer label".into()))?;
        if label > 1 {
            return Err(HhftError::Data(format!("label {label} is not binary")));
        }
        let record = ExampleRecord {
            values,
            label: label as u8,
        };
        record.validate(schema)?;
        Ok(record)
    }
}

fn validate_block(spec: &BlockSpec, value: &BlockValue) -> Result<()> {
    match (spec.kind, value) {
        (BlockKind::CategoricalSet, BlockValue::Categorical(ids)) => {
            if ids.len() != spec.vocab_sizes.len() {
                return Err(HhftError::Schema(format!(
                    "block `{}`: expected {} categorical fields, got {}",
                    spec.name,
                    spec.vocab_sizes.len(),
                    ids.len()
                )));
            }
            for (&id, &vocab) in ids.iter().zip(&spec.vocab_sizes) {
                if id >= vocab {
                    return Err(HhftError::Index {
                        block: spec.name.clone(),
                        id,
                        size: vocab,
                    });
                }
            }
        }
        (BlockKind::ContinuousVector, BlockValue::Continuous(xs)) => {
            if xs.len() != spec.cont_dim {
                return Err(HhftError::Schema(format!(
                    "block `{}`: expected {} continuous values, got {}",
                    spec.name,
                    spec.cont_dim,
                    xs.len()
                )));
            }
            if xs.iter().any(|x| !x.is_finite()) {
                return Err(HhftError::Data(format!("block `{}`: non-finite continuous value", spec.name)));
            }
        }
        (BlockKind::Sequence, BlockValue::Sequence { items, len }) => {
            if *len > spec.max_seq_len || *len > items.len() {
                return Err(HhftError::Schema(format!(
                    "block `{}`: sequence length {len} exceeds max_seq_len {} or item count {}",
                    spec.name,
                    spec.max_seq_len,
                    items.len()
                )));
            }
            let vocab = spec.vocab_sizes[0];
            if let Some(&id) = items[..*len].iter().find(|&&id| id >= vocab) {
                return Err(HhftError::Index {
                    block: spec.name.clone(),
                    id,
                    size: vocab,
                });
            }
        }
        _ => {
            return Err(HhftError::Schema(format!(
                "block `{}`: value kind does not match {:?}",
                spec.name, spec.kind
            )))
        }
    }
    Ok(())
}

/// How a behaviour sequence is reduced to a single block embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequencePooling {
    /// Mean over the first `len` items.
    #[default]
    Mean,
    /// Embedding of item `len − 1`.
    Last,
}

/// Column-oriented view of one block across a batch.
#[derive(Clone, Debug)]
pub enum BlockBatch {
    /// `fields[f][b]` is the id of field `f` in record `b`.
    Categorical { fields: Vec<Vec<usize>> },
    Continuous { values: Tensor },
    /// Valid item ids of all records back to back; `segments[b]` is
    /// `(start, len)` into `ids`.
    Sequence {
        ids: Vec<usize>,
        segments: Vec<(usize, usize)>,
    },
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub blocks: Vec<BlockBatch>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn from_records(schema: &FeatureSchema, records: &[ExampleRecord]) -> Result<Self> {
        let idx: Vec<usize> = (0..records.len()).collect();
        Self::gather(schema, records, &idx)
    }

    /// Builds a batch from `records[i]` for each `i` in `indices`; errors
    /// carry the offending record index.
    pub fn gather(schema: &FeatureSchema, records: &[ExampleRecord], indices: &[usize]) -> Result<Self> {
        let size = indices.len();
        let mut blocks: Vec<BlockBatch> = schema
            .blocks
            .iter()
            .map(|spec| match spec.kind {
                BlockKind::CategoricalSet => BlockBatch::Categorical {
                    fields: vec![Vec::with_capacity(size); spec.vocab_sizes.len()],
                },
                BlockKind::ContinuousVector => BlockBatch::Continuous {
                    values: Tensor::zeros(&[size, spec.cont_dim]),
                },
                BlockKind::Sequence => BlockBatch::Sequence {
                    ids: Vec::new(),
                    segments: Vec::with_capacity(size),
                },
            })
            .collect();
        let mut labels = Vec::with_capacity(size);
        for (row, &i) in indices.iter().enumerate() {
            let record = records
                .get(i)
                .ok_or_else(|| HhftError::Contract(format!("record index {i} out of range")))?;
            record.validate(schema).map_err(|e| e.at_record(i))?;
            for (block, value) in blocks.iter_mut().zip(&record.values) {
                match (block, value) {
                    (BlockBatch::Categorical { fields }, BlockValue::Categorical(ids)) => {
                        for (col, &id) in fields.iter_mut().zip(ids) {
                            col.push(id);
                        }
                    }
                    (BlockBatch::Continuous { values }, BlockValue::Continuous(xs)) => {
                        let c = xs.len();
                        values.data_mut()[row * c..(row + 1) * c].copy_from_slice(xs);
                    }
                    (BlockBatch::Sequence { ids, segments }, BlockValue::Sequence { items, len }) => {
                        segments.push((ids.len(), *len));
                        ids.extend_from_slice(&items[..*len]);
                    }
                    _ => unreachable!("validated above"),
                }
            }
            labels.push(f64::from(record.label));
        }
        Ok(Batch { size, blocks, labels })
    }
}

#[derive(Clone, Debug)]
pub enum BlockEmbedParams {
    Categorical { tables: Vec<ParamId> },
    Continuous { weight: ParamId, bias: ParamId },
    Sequence { table: ParamId },
}

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Embedding and projection parameters for every block of a schema.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub embeds: Vec<BlockEmbedParams>,
    /// Per-block `[e_k, d]` projections; empty when the model consumes raw
    /// block embeddings.
    pub projections: Vec<Projection>,
    pub pooling: SequencePooling,
}

impl Tokenizer {
    pub fn declare(
        schema: &FeatureSchema,
        store: &mut ParamStore,
        project: bool,
        pooling: SequencePooling,
    ) -> Result<Self> {
        schema.validate()?;
        let mut embeds = Vec::with_capacity(schema.k());
        let mut projections = Vec::new();
        for spec in &schema.blocks {
            let prefix = format!("tok.{}", spec.name);
            let p = match spec.kind {
                BlockKind::CategoricalSet => {
                    let dims = spec.resolved_field_dims()?;
                    let tables = spec
                        .vocab_sizes
                        .iter()
                        .zip(&dims)
                        .enumerate()
                        .map(|(f, (&v, &e))| store.add(format!("{prefix}.emb{f}"), &[v, e], ParamRole::Embedding))
                        .collect();
                    BlockEmbedParams::Categorical { tables }
                }
                BlockKind::ContinuousVector => BlockEmbedParams::Continuous {
                    weight: store.add(format!("{prefix}.lift.w"), &[spec.cont_dim, spec.e_k], ParamRole::Weight),
                    bias: store.add(format!("{prefix}.lift.b"), &[spec.e_k], ParamRole::Bias),
                },
                BlockKind::Sequence => BlockEmbedParams::Sequence {
                    table: store.add(
                        format!("{prefix}.items"),
                        &[spec.vocab_sizes[0], spec.e_k],
                        ParamRole::Embedding,
                    ),
                },
            };
            embeds.push(p);
            if project {
                projections.push(Projection {
                    weight: store.add(format!("{prefix}.proj.w"), &[spec.e_k, schema.d], ParamRole::Weight),
                    bias: store.add(format!("{prefix}.proj.b"), &[schema.d], ParamRole::Bias),
                });
            }
        }
        Ok(Tokenizer {
            embeds,
            projections,
            pooling,
        })
    }

    /// Block embedding `E_k` for every record of the batch, `[B, e_k]`.
    pub fn embed_block(
        &self,
        tape: &Tape,
        vars: &ParamVars,
        spec: &BlockSpec,
        k: usize,
        block: &BlockBatch,
    ) -> Result<Var> {
        match (&self.embeds[k], block) {
            (BlockEmbedParams::Categorical { tables }, BlockBatch::Categorical { fields }) => {
                if tables.len() != fields.len() {
                    return Err(HhftError::Schema(format!(
                        "block `{}`: expected {} fields, got {}",
                        spec.name,
                        tables.len(),
                        fields.len()
                    )));
                }
                let parts = tables
                    .iter()
                    .zip(fields)
                    .map(|(&t, ids)| tape.embedding_lookup(vars[t], ids, &spec.name))
                    .collect::<Result<Vec<_>>>()?;
                if parts.len() == 1 {
                    Ok(parts[0])
                } else {
                    tape.concat(&parts, 1)
                }
            }
            (BlockEmbedParams::Continuous { weight, bias }, BlockBatch::Continuous { values }) => {
                let x = tape.constant(values.clone());
                let lifted = tape.block_matmul(x, &[vars[*weight]])?;
                tape.add_bias(lifted, vars[*bias])
            }
            (BlockEmbedParams::Sequence { table }, BlockBatch::Sequence { ids, segments }) => match self.pooling {
                SequencePooling::Mean => {
                    let rows = tape.embedding_lookup(vars[*table], ids, &spec.name)?;
                    tape.segment_mean(rows, segments)
                }
                SequencePooling::Last => {
                    let mut last_ids = Vec::with_capacity(segments.len());
                    let mut last_segments = Vec::with_capacity(segments.len());
                    for &(start, len) in segments {
                        if len == 0 {
                            last_segments.push((last_ids.len(), 0));
                        } else {
                            last_segments.push((last_ids.len(), 1));
                            last_ids.push(ids[start + len - 1]);
                        }
                    }
                    let rows = tape.embedding_lookup(vars[*table], &last_ids, &spec.name)?;
                    tape.segment_mean(rows, &last_segments)
                }
            },
            _ => Err(HhftError::Schema(format!(
                "block `{}`: batch column does not match parameters",
                spec.name
            ))),
        }
    }

    pub fn embed_all(&self, tape: &Tape, vars: &ParamVars, schema: &FeatureSchema, batch: &Batch) -> Result<Vec<Var>> {
        if batch.blocks.len() != schema.k() {
            return Err(HhftError::Schema(format!(
                "batch has {} blocks, schema has {}",
                batch.blocks.len(),
                schema.k()
            )));
        }
        schema
            .blocks
            .iter()
            .zip(&batch.blocks)
            .enumerate()
            .map(|(k, (spec, block))| self.embed_block(tape, vars, spec, k, block))
            .collect()
    }

    /// Stacks the projected blocks into the `[B, K, d]` token matrix.
    pub fn tokenize(&self, tape: &Tape, vars: &ParamVars, schema: &FeatureSchema, batch: &Batch) -> Result<Var> {
        if self.projections.len() != schema.k() {
            return Err(HhftError::Config("tokenizer has no projections for this schema".into()));
        }
        let embeds = self.embed_all(tape, vars, schema, batch)?;
        let tokens = embeds
            .iter()
            .zip(&self.projections)
            .map(|(&e, p)| {
                let h = project_block(tape, e, vars[p.weight], vars[p.bias])?;
                tape.reshape(h, &[batch.size, 1, schema.d])
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&tokens, 1)
    }
}

/// `E·W + b` applied row-wise: `[.., e_k] → [.., d]`.
pub fn project_block(tape: &Tape, embedding: Var, weight: Var, bias: Var) -> Result<Var> {
    let h = tape.block_matmul(embedding, &[weight])?;
    tape.add_bias(h, bias)
}

/// Masked mean of the first `true_len` rows of `[L, e]` item embeddings,
/// returned as an `[e]` vector (zeros when `true_len == 0`).
pub fn pool_sequence(tape: &Tape, seq_embeds: Var, true_len: usize) -> Result<Var> {
    let shape = tape.shape(seq_embeds);
    if shape.len() != 2 {
        return Err(HhftError::shape("pool_sequence", &shape, &[2]));
    }
    if true_len > shape[0] {
        return Err(HhftError::Schema(format!(
            "sequence true length {true_len} exceeds padded length {}",
            shape[0]
        )));
    }
    let pooled = tape.segment_mean(seq_embeds, &[(0, true_len)])?;
    tape.reshape(pooled, &[shape[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn schema2() -> FeatureSchema {
        FeatureSchema {
            blocks: vec![
                BlockSpec::categorical("user", &[3, 4], 4),
                BlockSpec::sequence("history", 5, 3, 2),
            ],
            d: 3,
        }
    }

    fn record(u: [usize; 2], items: Vec<usize>, len: usize, label: u8) -> ExampleRecord {
        ExampleRecord {
            values: vec![BlockValue::Categorical(u.to_vec()), BlockValue::Sequence { items, len }],
            label,
        }
    }

    fn set_tokenizer(store: &mut ParamStore, seed: f64) {
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id);
            let data = (0..t.len()).map(|i| ((i as f64 + seed) * 0.37).sin()).collect();
            let v = Tensor::new(t.shape().to_vec(), data).unwrap();
            store.set(id, v).unwrap();
        }
    }

    #[test]
    fn schema_validation() {
        assert!(schema2().validate().is_ok());
        let mut one = schema2();
        one.blocks.truncate(1);
        assert!(matches!(one.validate(), Err(HhftError::Schema(_))));
        let mut dup = schema2();
        dup.blocks[1].name = "user".into();
        assert!(dup.validate().is_err());
        let mut uneven = schema2();
        uneven.blocks[0].e_k = 5;
        assert!(uneven.validate().is_err());
        let mut seq = schema2();
        seq.blocks[1].max_seq_len = 0;
        assert!(seq.validate().is_err());
    }

    #[test]
    fn record_validation_errors() {
        let s = schema2();
        assert!(record([2, 3], vec![4, 1], 2, 1).validate(&s).is_ok());
        assert!(matches!(
            record([3, 0], vec![], 0, 0).validate(&s),
            Err(HhftError::Index { id: 3, .. })
        ));
        assert!(matches!(
            record([0, 0], vec![0, 0, 0, 0], 4, 0).validate(&s),
            Err(HhftError::Schema(_))
        ));
        let wrong_arity = ExampleRecord {
            values: vec![BlockValue::Categorical(vec![0]), BlockValue::Sequence { items: vec![], len: 0 }],
            label: 0,
        };
        assert!(matches!(wrong_arity.validate(&s), Err(HhftError::Schema(_))));
        // Padding beyond len is never checked against the vocabulary.
        assert!(record([0, 0], vec![1, 99], 1, 0).validate(&s).is_ok());
    }

    #[test]
    fn embed_single_categorical_field_gathers_row() {
        let schema = FeatureSchema {
            blocks: vec![BlockSpec::categorical("a", &[3], 3), BlockSpec::categorical("b", &[2], 3)],
            d: 3,
        };
        let mut store = ParamStore::new();
        let tok = Tokenizer::declare(&schema, &mut store, true, SequencePooling::Mean).unwrap();
        store.set_by_name("tok.a.emb0", Tensor::eye(3)).unwrap();
        let rec = ExampleRecord {
            values: vec![BlockValue::Categorical(vec![1]), BlockValue::Categorical(vec![0])],
            label: 0,
        };
        let batch = Batch::from_records(&schema, &[rec]).unwrap();
        let tape = Tape::new();
        let vars = store.register(&tape);
        let e = tok.embed_block(&tape, &vars, &schema.blocks[0], 0, &batch.blocks[0]).unwrap();
        assert_eq!(tape.value(e).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn embed_two_fields_concatenates_lookups() {
        let s = schema2();
        let mut store = ParamStore::new();
        let tok = Tokenizer::declare(&s, &mut store, true, SequencePooling::Mean).unwrap();
        set_tokenizer(&mut store, 1.0);
        let rec = record([2, 1], vec![3], 1, 0);
        let batch = Batch::from_records(&s, &[rec]).unwrap();
        let tape = Tape::new();
        let vars = store.register(&tape);
        let e = tok.embed_block(&tape, &vars, &s.blocks[0], 0, &batch.blocks[0]).unwrap();
        let t0 = tape.embedding_lookup(vars[store.find("tok.user.emb0").unwrap()], &[2], "user").unwrap();
        let t1 = tape.embedding_lookup(vars[store.find("tok.user.emb1").unwrap()], &[1], "user").unwrap();
        let manual = [tape.value(t0).data(), tape.value(t1).data()].concat();
        assert_eq!(tape.value(e).data(), manual.as_slice());
    }

    #[test]
    fn continuous_zero_lift_gives_zero_embedding() {
        let schema = FeatureSchema {
            blocks: vec![BlockSpec::continuous("ctx", 2, 3), BlockSpec::categorical("b", &[2], 2)],
            d: 2,
        };
        let mut store = ParamStore::new();
        let tok = Tokenizer::declare(&schema, &mut store, true, SequencePooling::Mean).unwrap();
        let rec = ExampleRecord {
            values: vec![BlockValue::Continuous(vec![4.0, -1.5]), BlockValue::Categorical(vec![1])],
            label: 1,
        };
        let batch = Batch::from_records(&schema, &[rec]).unwrap();
        let tape = Tape::new();
        let vars = store.register(&tape);
        let e = tok.embed_block(&tape, &vars, &schema.blocks[0], 0, &batch.blocks[0]).unwrap();
        assert_eq!(tape.value(e).data(), &[0.0; 3]);
    }

    #[test]
    fn pool_sequence_examples() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert_eq!(tape.value(pool_sequence(&tape, one, 1).unwrap()).data(), &[1.0, 2.0]);
        let two = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap());
        assert_eq!(tape.value(pool_sequence(&tape, two, 2).unwrap()).data(), &[2.0, 2.0]);
        assert_eq!(tape.value(pool_sequence(&tape, two, 0).unwrap()).data(), &[0.0, 0.0]);
        assert!(matches!(pool_sequence(&tape, two, 3), Err(HhftError::Schema(_))));
    }

    #[test]
    fn pooling_ignores_padding_contents() {
        let s = schema2();
        for pooling in [SequencePooling::Mean, SequencePooling::Last] {
            let mut store = ParamStore::new();
            let tok = Tokenizer::declare(&s, &mut store, true, pooling).unwrap();
            set_tokenizer(&mut store, 2.0);
            let a = record([0, 0], vec![1, 2, 0], 2, 0);
            let b = record([0, 0], vec![1, 2, 4], 2, 0);
            let batch = Batch::from_records(&s, &[a, b]).unwrap();
            let tape = Tape::new();
            let vars = store.register(&tape);
            let e = tok.embed_block(&tape, &vars, &s.blocks[1], 1, &batch.blocks[1]).unwrap();
            let v = tape.value(e);
            assert_eq!(v.data()[0..2], v.data()[2..4]);
        }
    }

    #[test]
    fn last_pooling_takes_final_valid_item() {
        let s = schema2();
        let mut store = ParamStore::new();
        let tok = Tokenizer::declare(&s, &mut store, true, SequencePooling::Last).unwrap();
        set_tokenizer(&mut store, 0.5);
        let batch = Batch::from_records(&s, &[record([0, 0], vec![1, 3, 2], 2, 0), record([0, 0], vec![], 0, 1)]).unwrap();
        let tape = Tape::new();
        let vars = store.register(&tape);
        let e = tok.embed_block(&tape, &vars, &s.blocks[1], 1, &batch.blocks[1]).unwrap();
        let table = store.get(store.find("tok.history.items").unwrap());
        assert_eq!(&tape.value(e).data()[0..2], &table.data()[6..8]);
        assert_eq!(&tape.value(e).data()[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn project_block_examples() {
        let tape = Tape::new();
        let e = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let eye = tape.constant(Tensor::eye(2));
        let zero_b = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(tape.value(project_block(&tape, e, eye, zero_b).unwrap()).data(), &[1.0, 2.0]);

        let zero_e = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::vector(vec![0.5, -1.0]));
        let w = tape.constant(Tensor::from_rows(&[vec![3.0, 1.0], vec![2.0, 7.0]]).unwrap());
        assert_eq!(tape.value(project_block(&tape, zero_e, w, b).unwrap()).data(), &[0.5, -1.0]);

        // [1,2]·[[1,0],[0,2]] + [1,1] = [1+1, 4+1].
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let ones = tape.constant(Tensor::ones(&[2]));
        assert_eq!(tape.value(project_block(&tape, e, w, ones).unwrap()).data(), &[2.0, 5.0]);

        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(project_block(&tape, e, bad, ones), Err(HhftError::Shape { .. })));
    }

    #[test]
    fn tokenize_shapes_and_bias_only_tokens() {
        let s = schema2();
        let mut store = ParamStore::new();
        let tok = Tokenizer::declare(&s, &mut store, true, SequencePooling::Mean).unwrap();
        store.set_by_name("tok.user.proj.b", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        store.set_by_name("tok.history.proj.b", Tensor::vector(vec![-1.0, 0.5, 0.0])).unwrap();
        let rec = record([1, 2], vec![0, 4], 2, 1);
        let batch = Batch::from_records(&s, std::slice::from_ref(&rec)).unwrap();
        let tape = Tape::new();
        let vars = store.register(&tape);
        let h = tok.tokenize(&tape, &vars, &s, &batch).unwrap();
        assert_eq!(tape.shape(h), vec![1, 2, 3]);
        assert_eq!(tape.value(h).data(), &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);

        set_tokenizer(&mut store, 3.0);
        let batch = Batch::from_records(&s, &[rec.clone(), rec]).unwrap();
        let tape = Tape::new();
        let vars = store.register(&tape);
        let h = tape.value(tok.tokenize(&tape, &vars, &s, &batch).unwrap());
        assert_eq!(h.data()[0..6], h.data()[6..12]);
    }

    #[test]
    fn batch_errors_carry_record_index() {
        let s = schema2();
        let recs = vec![record([0, 0], vec![], 0, 0), record([0, 9], vec![], 0, 0)];
        match Batch::from_records(&s, &recs) {
            Err(HhftError::Record { index, source }) => {
                assert_eq!(index, 1);
                assert!(matches!(*source, HhftError::Index { .. }));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let s = FeatureSchema {
            blocks: vec![
                BlockSpec::categorical("user", &[3, 4], 4),
                BlockSpec::continuous("ctx", 2, 2),
                BlockSpec::sequence("history", 5, 3, 2),
            ],
            d: 3,
        };
        let rec = ExampleRecord {
            values: vec![
                BlockValue::Categorical(vec![2, 3]),
                BlockValue::Continuous(vec![0.1 + 0.2, -1e-300]),
                BlockValue::Sequence { items: vec![4, 0], len: 2 },
            ],
            label: 1,
        };
        let text = rec.to_json(&s).to_string();
        let back = ExampleRecord::from_json(&s, &serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, rec);
        let bad: Value = serde_json::from_str(r#"{"user":[0,0],"ctx":[0,0],"history":{"items":[],"len":0},"label":2}"#).unwrap();
        assert!(matches!(ExampleRecord::from_json(&s, &bad), Err(HhftError::Data(_))));
    }
}
