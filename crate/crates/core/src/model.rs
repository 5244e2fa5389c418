//! Full ranking models behind one interface.
//!
//! * [`ModelKind::Mlp`]: block embeddings concatenated straight into the head.
//! * [`ModelKind::SharedTransformer`]: tokens through `n1` encoder layers that
//!   share one parameter set across positions.
//! * [`ModelKind::Hhft`]: tokens through `n1` heterogeneous encoder layers and
//!   `n2` hiformer layers.
//!
//! All three use the same tokenizer code and the same head, so parameters
//! with equal names mean the same thing across kinds.

use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_forward, EncoderBlockParams, EncoderConfig, EncoderLayerParams, NormPlacement};
use crate::error::{HhftError, Result};
use crate::features::{Batch, BlockKind, FeatureSchema, SequencePooling, Tokenizer};
use crate::hiformer::{hiformer_forward, HiformerConfig, HiformerLayerParams};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{ParamCount, ParamId, ParamRole, ParamStore, ParamVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    SharedTransformer,
    Hhft,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::SharedTransformer => "shared-transformer",
            ModelKind::Hhft => "hhft",
        }
    }
}

/// Storage and optimizer precision. Arithmetic is always 64-bit; in `F32`
/// mode parameters are rounded to `f32` after init and after every update
/// and checkpoints store 4-byte floats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = HhftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(HhftError::Config(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub schema: FeatureSchema,
    /// Encoder depth; unused by `mlp`.
    pub n1: usize,
    pub d_ffn: usize,
    /// Encoder head count.
    pub n_heads: usize,
    /// Hiformer depth; only `hhft` uses it.
    pub n2: usize,
    pub d_h: usize,
    pub n_h: usize,
    /// Head hidden widths; `None` means `[4d, d]`.
    #[serde(default)]
    pub head_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub norm_placement: NormPlacement,
    #[serde(default)]
    pub pooling: SequencePooling,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults around a schema.
    pub fn desk(kind: ModelKind, schema: FeatureSchema) -> Self {
        let d = schema.d;
        ModelConfig {
            kind,
            schema,
            n1: 1,
            d_ffn: d,
            n_heads: 4,
            n2: 1,
            d_h: 8,
            n_h: 4,
            head_hidden: None,
            norm_placement: NormPlacement::Pre,
            pooling: SequencePooling::Mean,
            ln_eps: 1e-5,
        }
    }

    pub fn head_widths(&self) -> Vec<usize> {
        self.head_hidden
            .clone()
            .unwrap_or_else(|| vec![4 * self.schema.d, self.schema.d])
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            n1: self.n1,
            d_ffn: self.d_ffn,
            n_heads: self.n_heads,
            norm_placement: self.norm_placement,
        }
    }

    pub fn hiformer_config(&self) -> HiformerConfig {
        HiformerConfig {
            n2: self.n2,
            d_h: self.d_h,
            n_h: self.n_h,
            d_ffn: self.d_ffn,
            norm_placement: self.norm_placement,
        }
    }

    fn uses_encoder(&self) -> bool {
        self.kind != ModelKind::Mlp && self.n1 > 0
    }

    fn uses_hiformer(&self) -> bool {
        self.kind == ModelKind::Hhft && self.n2 > 0
    }

    fn head_input(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => self.schema.total_embedding_width(),
            _ => self.schema.k() * self.schema.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.uses_encoder() {
            self.encoder_config().validate(self.schema.d)?;
        }
        if self.uses_hiformer() {
            self.hiformer_config().validate()?;
        }
        if self.head_widths().contains(&0) {
            return Err(HhftError::Config("head hidden widths must be at least 1".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(HhftError::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Dense parameter count from layer arithmetic alone.
    pub fn dense_param_formula(&self) -> usize {
        let s = &self.schema;
        let (k, d) = (s.k(), s.d);
        let project = self.kind != ModelKind::Mlp;
        let tokenizer: usize = s
            .blocks
            .iter()
            .map(|b| {
                let lift = if b.kind == BlockKind::ContinuousVector { b.cont_dim * b.e_k + b.e_k } else { 0 };
                lift + if project { b.e_k * d + d } else { 0 }
            })
            .sum();
        let encoder = if self.uses_encoder() {
            let copies = if self.kind == ModelKind::Hhft { k } else { 1 };
            self.n1 * copies * EncoderBlockParams::size(d, self.d_ffn)
        } else {
            0
        };
        let hiformer = if self.uses_hiformer() {
            self.n2 * HiformerLayerParams::size(k, d, &self.hiformer_config())
        } else {
            0
        };
        let mut head = 0;
        let mut fan_in = self.head_input();
        for w in self.head_widths().into_iter().chain([1]) {
            head += fan_in * w + w;
            fan_in = w;
        }
        tokenizer + encoder + hiformer + head
    }

    /// Analytic forward multiply count per batch of `batch_size` records.
    ///
    /// Contractions count `m·k·n`; each attention head over `K` tokens adds
    /// `2·K²·d_head` for the score and mixing products plus `K²` for the
    /// softmax; each layer norm adds `3` per element (centre/scale, gain).
    /// Sequence mean pooling is counted as `e_k` per record.
    pub fn flops_estimate(&self, batch_size: usize) -> FlopsBreakdown {
        let s = &self.schema;
        let (k, d) = (s.k(), s.d);
        let project = self.kind != ModelKind::Mlp;
        let tokenizer: usize = s
            .blocks
            .iter()
            .map(|b| {
                let embed = match b.kind {
                    BlockKind::ContinuousVector => b.cont_dim * b.e_k,
                    BlockKind::Sequence if self.pooling == SequencePooling::Mean => b.e_k,
                    _ => 0,
                };
                embed + if project { b.e_k * d } else { 0 }
            })
            .sum();
        let norms = 2 * 3 * k * d;
        let attention = |heads: usize, dh: usize| heads * (2 * k * k * dh + k * k);
        let ffn = 2 * k * d * self.d_ffn;
        let encoder = if self.uses_encoder() {
            let dh = d / self.n_heads;
            self.n1 * (4 * k * d * d + ffn + attention(self.n_heads, dh) + norms)
        } else {
            0
        };
        let hiformer = if self.uses_hiformer() {
            let width = self.n_h * self.d_h;
            let composite = 2 * self.n_h * (k * d) * (k * self.d_h);
            self.n2 * (2 * k * d * width + composite + ffn + attention(self.n_h, self.d_h) + norms)
        } else {
            0
        };
        let mut head = 0;
        let mut fan_in = self.head_input();
        for w in self.head_widths().into_iter().chain([1]) {
            head += fan_in * w;
            fan_in = w;
        }
        let b = batch_size;
        FlopsBreakdown {
            tokenizer: b * tokenizer,
            encoder: b * encoder,
            hiformer: b * hiformer,
            head: b * head,
            total: b * (tokenizer + encoder + hiformer + head),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub tokenizer: usize,
    pub encoder: usize,
    pub hiformer: usize,
    pub head: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub encoder: Vec<EncoderLayerParams>,
    pub hiformer: Vec<HiformerLayerParams>,
    pub head: Vec<Dense>,
}

impl Model {
    /// Declares every parameter with value zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &config.schema;
        let names: Vec<String> = s.blocks.iter().map(|b| b.name.clone()).collect();
        let tokenizer = Tokenizer::declare(s, &mut store, config.kind != ModelKind::Mlp, config.pooling)?;
        let encoder = if config.uses_encoder() {
            (0..config.n1)
                .map(|l| {
                    let prefix = format!("enc{l}");
                    if config.kind == ModelKind::Hhft {
                        EncoderLayerParams::declare(&mut store, &prefix, &names, s.d, config.d_ffn)
                    } else {
                        EncoderLayerParams::declare_shared(&mut store, &prefix, s.d, config.d_ffn)
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let hiformer = if config.uses_hiformer() {
            let hc = config.hiformer_config();
            (0..config.n2)
                .map(|l| HiformerLayerParams::declare(&mut store, &format!("hif{l}"), &names, s.d, &hc))
                .collect()
        } else {
            Vec::new()
        };
        let mut head = Vec::new();
        let mut fan_in = config.head_input();
        for (i, w) in config.head_widths().into_iter().chain([1]).enumerate() {
            head.push(Dense {
                weight: store.add(format!("head.l{i}.w"), &[fan_in, w], ParamRole::Weight),
                bias: store.add(format!("head.l{i}.b"), &[w], ParamRole::Bias),
            });
            fan_in = w;
        }
        Ok(Model {
            config,
            store,
            tokenizer,
            encoder,
            hiformer,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Backbone output before the head, `[B, width]`.
    pub fn features(&self, tape: &Tape, vars: &ParamVars, batch: &Batch) -> Result<Var> {
        let c = &self.config;
        let s = &c.schema;
        if c.kind == ModelKind::Mlp {
            let embeds = self.tokenizer.embed_all(tape, vars, s, batch)?;
            return tape.concat(&embeds, 1);
        }
        let h0 = self.tokenizer.tokenize(tape, vars, s, batch)?;
        let h = encoder_forward(tape, vars, h0, &self.encoder, &c.encoder_config(), c.ln_eps)?;
        let h = hiformer_forward(tape, vars, h, &self.hiformer, &c.hiformer_config(), c.ln_eps)?;
        tape.reshape(h, &[batch.size, s.k() * s.d])
    }

    /// Prediction head on `[B, width]` features.
    pub fn head_forward(&self, tape: &Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        let mut x = x;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            x = tape.matmul(x, vars[layer.weight])?;
            x = tape.add_bias(x, vars[layer.bias])?;
            if i < last {
                x = tape.relu(x);
            }
        }
        let b = tape.shape(x)[0];
        tape.reshape(x, &[b])
    }

    /// One logit per record, `[B]`.
    pub fn forward(&self, tape: &Tape, vars: &ParamVars, batch: &Batch) -> Result<Var> {
        let x = self.features(tape, vars, batch)?;
        self.head_forward(tape, vars, x)
    }

    /// Inference-only logits.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.store.register_frozen(&tape);
        let out = self.forward(&tape, &vars, batch)?;
        Ok((*tape.value(out)).clone())
    }

    pub fn predict_proba(&self, batch: &Batch) -> Result<Tensor> {
        Ok(self.logits(batch)?.map(sigmoid))
    }

    pub fn param_count(&self) -> ParamCount {
        self.store.count()
    }

    pub fn flops_estimate(&self, batch_size: usize) -> FlopsBreakdown {
        self.config.flops_estimate(batch_size)
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            for x in self.store.value_mut(id).data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{BlockSpec, BlockValue, ExampleRecord};
    use crate::nesting;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schema(d: usize) -> FeatureSchema {
        FeatureSchema {
            blocks: vec![
                BlockSpec::categorical("user", &[5, 3], 4),
                BlockSpec::continuous("item", 3, 4),
                BlockSpec::sequence("seq", 6, 4, 4),
            ],
            d,
        }
    }

    fn small(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            n1: 1,
            d_ffn: 6,
            n_heads: 2,
            n2: 1,
            d_h: 2,
            n_h: 2,
            head_hidden: Some(vec![5]),
            ..ModelConfig::desk(kind, schema(4))
        }
    }

    fn records(n: usize, rng: &mut ChaCha8Rng) -> Vec<ExampleRecord> {
        (0..n)
            .map(|_| {
                let len = rng.gen_range(0..=4);
                ExampleRecord {
                    values: vec![
                        BlockValue::Categorical(vec![rng.gen_range(0..5), rng.gen_range(0..3)]),
                        BlockValue::Continuous((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                        BlockValue::Sequence { items: (0..4).map(|_| rng.gen_range(0..6)).collect(), len },
                    ],
                    label: rng.gen_range(0..2),
                }
            })
            .collect()
    }

    fn randomize(model: &mut Model, rng: &mut ChaCha8Rng) {
        for id in model.store.ids().collect::<Vec<_>>() {
            for x in model.store.value_mut(id).data_mut() {
                *x = rng.gen_range(-0.8..0.8);
            }
        }
    }

    #[test]
    fn zero_model_outputs_final_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Batch::from_records(&schema(4), &records(5, &mut rng)).unwrap();
        for kind in [ModelKind::Mlp, ModelKind::SharedTransformer, ModelKind::Hhft] {
            let mut model = Model::new(small(kind)).unwrap();
            let last = model.head.last().unwrap().bias;
            model.store.set(last, Tensor::vector(vec![0.75])).unwrap();
            let logits = model.logits(&batch).unwrap();
            assert_eq!(logits.data(), &[0.75; 5]);
        }
    }

    #[test]
    fn identical_records_identical_logits_and_batch_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut recs = records(6, &mut rng);
        recs[3] = recs[1].clone();
        let s = schema(4);
        for kind in [ModelKind::Mlp, ModelKind::SharedTransformer, ModelKind::Hhft] {
            let mut model = Model::new(small(kind)).unwrap();
            randomize(&mut model, &mut rng);
            let logits = model.logits(&Batch::from_records(&s, &recs).unwrap()).unwrap();
            assert_eq!(logits.data()[1], logits.data()[3]);
            let perm = [4, 0, 5, 2, 1, 3];
            let permuted: Vec<ExampleRecord> = perm.iter().map(|&i| recs[i].clone()).collect();
            let p = model.logits(&Batch::from_records(&s, &permuted).unwrap()).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                assert_eq!(p.data()[j].to_bits(), logits.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn forward_matches_stage_by_stage_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = schema(4);
        let mut model = Model::new(small(ModelKind::Hhft)).unwrap();
        randomize(&mut model, &mut rng);
        let batch = Batch::from_records(&s, &records(4, &mut rng)).unwrap();
        let tape = Tape::new();
        let vars = model.store.register(&tape);
        let h0 = model.tokenizer.tokenize(&tape, &vars, &s, &batch).unwrap();
        let c = &model.config;
        let h1 = crate::encoder::encoder_layer(&tape, &vars, h0, &model.encoder[0], &c.encoder_config(), 1e-5).unwrap();
        let h2 = crate::hiformer::hiformer_attention(&tape, &vars, h1, &model.hiformer[0], &c.hiformer_config(), 1e-5).unwrap();
        let flat = tape.value(h2).as_ref().clone().reshape(&[4, 12]).unwrap();
        // Head by hand.
        let w0 = model.store.get(model.head[0].weight);
        let b0 = model.store.get(model.head[0].bias);
        let w1 = model.store.get(model.head[1].weight);
        let b1 = model.store.get(model.head[1].bias);
        let mut hidden = flat.matmul(w0).unwrap();
        for row in hidden.data_mut().chunks_mut(5) {
            for (x, b) in row.iter_mut().zip(b0.data()) {
                *x = (*x + b).max(0.0);
            }
        }
        let out = hidden.matmul(w1).unwrap();
        let expect: Vec<f64> = out.data().iter().map(|x| x + b1.data()[0]).collect();
        let got = model.logits(&batch).unwrap();
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_proba_is_sigmoid_of_logits() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(20.0) > 0.999999);
        assert!((sigmoid(-1.0) - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-12);
        assert!((sigmoid(1.0) - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = Model::new(small(ModelKind::Hhft)).unwrap();
        randomize(&mut model, &mut rng);
        let batch = Batch::from_records(&schema(4), &records(8, &mut rng)).unwrap();
        let l = model.logits(&batch).unwrap();
        let p = model.predict_proba(&batch).unwrap();
        for (a, b) in l.data().iter().zip(p.data()) {
            assert_eq!(sigmoid(*a), *b);
            assert!(*b > 0.0 && *b < 1.0);
        }
    }

    #[test]
    fn dense_count_formula_matches_enumeration() {
        for kind in [ModelKind::Mlp, ModelKind::SharedTransformer, ModelKind::Hhft] {
            for (n1, n2) in [(0, 0), (1, 1), (2, 3)] {
                let config = ModelConfig { n1, n2, ..small(kind) };
                let model = Model::new(config.clone()).unwrap();
                assert_eq!(model.param_count().dense, config.dense_param_formula(), "{kind:?} {n1} {n2}");
            }
        }
        // 4 → 2 → 1 head over a 4-wide input: 4·2+2 + 2·1+1 = 13.
        let s = FeatureSchema {
            blocks: vec![BlockSpec::categorical("a", &[3], 2), BlockSpec::categorical("b", &[3], 2)],
            d: 2,
        };
        let mlp = ModelConfig { head_hidden: Some(vec![2]), ..ModelConfig::desk(ModelKind::Mlp, s) };
        assert_eq!(Model::new(mlp.clone()).unwrap().param_count().dense, 13);
        assert_eq!(mlp.dense_param_formula(), 13);
    }

    #[test]
    fn shared_transformer_has_fewer_dense_params_than_heterogeneous() {
        let shared = Model::new(small(ModelKind::SharedTransformer)).unwrap();
        let het = Model::new(ModelConfig { n2: 0, ..small(ModelKind::Hhft) }).unwrap();
        assert!(shared.param_count().dense < het.param_count().dense);
        let k = 3;
        let per = EncoderBlockParams::size(4, 6);
        assert_eq!(het.param_count().dense - shared.param_count().dense, (k - 1) * per);
    }

    #[test]
    fn flops_estimate_tracks_counter_and_is_linear_in_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = schema(8);
        let config = ModelConfig { d_ffn: 8, head_hidden: None, ..ModelConfig::desk(ModelKind::Hhft, s.clone()) };
        let config = ModelConfig { n_heads: 2, d_h: 2, n_h: 2, ..config };
        let model = Model::new(config.clone()).unwrap();
        // Full-length sequences so the pooling term matches its analytic count.
        let mut recs = records(3, &mut rng);
        for r in &mut recs {
            if let BlockValue::Sequence { len, .. } = &mut r.values[2] {
                *len = 4;
            }
        }
        let batch = Batch::from_records(&s, &recs).unwrap();
        let tape = Tape::new();
        let vars = model.store.register_frozen(&tape);
        model.forward(&tape, &vars, &batch).unwrap();
        let counted = tape.multiply_count() as f64;
        let est = model.flops_estimate(3).total as f64;
        assert!((counted - est).abs() / counted < 0.05, "{counted} vs {est}");

        let doubled = ModelConfig { d_ffn: 16, ..config.clone() };
        let (a, b) = (config.flops_estimate(1), doubled.flops_estimate(1));
        let ffn = 2 * 3 * 8 * 8;
        assert_eq!(b.encoder - a.encoder, ffn);
        assert_eq!(b.hiformer - a.hiformer, ffn);
    }

    #[test]
    fn ladder_nesting_holds_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = schema(4);
        let batch = Batch::from_records(&s, &records(5, &mut rng)).unwrap();

        // Shared transformer ⊂ heterogeneous encoder (tied blocks).
        let mut shared = Model::new(ModelConfig { n1: 2, ..small(ModelKind::SharedTransformer) }).unwrap();
        randomize(&mut shared, &mut rng);
        let mut het = Model::new(ModelConfig { n1: 2, n2: 0, ..small(ModelKind::Hhft) }).unwrap();
        nesting::tie_from(&mut het, &shared).unwrap();
        let diff = het.logits(&batch).unwrap().max_abs_diff(&shared.logits(&batch).unwrap());
        assert!(diff <= 1e-12, "{diff}");

        // HHFT(n2=0) ⊂ HHFT (silent hiformer).
        let mut full = Model::new(ModelConfig { n1: 2, ..small(ModelKind::Hhft) }).unwrap();
        randomize(&mut full, &mut rng);
        nesting::tie_from(&mut full, &het).unwrap();
        nesting::silence_hiformer(&mut full);
        assert_eq!(full.logits(&batch).unwrap(), het.logits(&batch).unwrap());

        // MLP ⊂ shared transformer: identity projections (e_k = d), silent encoder.
        let mut mlp = Model::new(small(ModelKind::Mlp)).unwrap();
        randomize(&mut mlp, &mut rng);
        let mut st = Model::new(small(ModelKind::SharedTransformer)).unwrap();
        randomize(&mut st, &mut rng);
        nesting::tie_from(&mut st, &mlp).unwrap();
        nesting::identity_projections(&mut st).unwrap();
        nesting::silence_encoder(&mut st);
        assert!(st.logits(&batch).unwrap().max_abs_diff(&mlp.logits(&batch).unwrap()) <= 1e-12);
    }

    #[test]
    fn zeroed_backbone_equals_head_only_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = schema(4);
        let batch = Batch::from_records(&s, &records(5, &mut rng)).unwrap();
        let mut full = Model::new(ModelConfig { n1: 2, n2: 2, ..small(ModelKind::Hhft) }).unwrap();
        randomize(&mut full, &mut rng);
        nesting::silence_encoder(&mut full);
        nesting::silence_hiformer(&mut full);
        let mut head_only = Model::new(ModelConfig { n1: 0, n2: 0, ..small(ModelKind::Hhft) }).unwrap();
        nesting::tie_from(&mut head_only, &full).unwrap();
        assert_eq!(full.logits(&batch).unwrap(), head_only.logits(&batch).unwrap());
    }

    #[test]
    fn f32_rounding_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = Model::new(small(ModelKind::Hhft)).unwrap();
        randomize(&mut model, &mut rng);
        model.round_to_f32();
        let once = model.store.values().to_vec();
        model.round_to_f32();
        assert_eq!(once, model.store.values());
        assert!(once.iter().flat_map(|t| t.data()).all(|&x| x as f32 as f64 == x));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { n_heads: 3, ..small(ModelKind::Hhft) };
        assert!(matches!(Model::new(bad), Err(HhftError::Config(_))));
        let bad = ModelConfig { head_hidden: Some(vec![0]), ..small(ModelKind::Mlp) };
        assert!(Model::new(bad).is_err());
        // Mlp ignores encoder dims.
        assert!(Model::new(ModelConfig { n_heads: 3, ..small(ModelKind::Mlp) }).is_ok());
        assert_eq!("f32".parse::<Precision>().unwrap(), Precision::F32);
        assert!("f16".parse::<Precision>().is_err());
    }
}
