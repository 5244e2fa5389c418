//! Heterogeneous transformer encoder.
//!
//! Every token position (semantic block) owns its Q/K/V projections, its
//! attention output projection, its FFN and its two layer norms; the
//! attention itself is the ordinary multi-head computation over all `K`
//! tokens. A layer whose parameter list holds a single entry shares that
//! entry across all positions, which is the plain transformer used as the
//! shared-parameter baseline.

use serde::{Deserialize, Serialize};

use crate::error::{HhftError, Result};
use crate::numerics::{Tape, Var};
use crate::params::{ParamId, ParamRole, ParamStore, ParamVars};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    /// `x + f(LN(x))`
    #[default]
    Pre,
    /// `LN(x + f(x))`
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n1: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub norm_placement: NormPlacement,
}

impl EncoderConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.d_ffn == 0 || self.n_heads == 0 {
            return Err(HhftError::Config("encoder d_ffn and n_heads must be at least 1".into()));
        }
        if !d.is_multiple_of(self.n_heads) {
            return Err(HhftError::Config(format!(
                "token dimension {d} is not divisible by n_heads {}",
                self.n_heads
            )));
        }
        Ok(())
    }
}

/// Parameters of one token position in one encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderBlockParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl EncoderBlockParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, d: usize, d_ffn: usize) -> Self {
        let mut add = |name: &str, shape: &[usize], role| store.add(format!("{prefix}.{name}"), shape, role);
        EncoderBlockParams {
            w_q: add("w_q", &[d, d], ParamRole::Weight),
            w_k: add("w_k", &[d, d], ParamRole::Weight),
            w_v: add("w_v", &[d, d], ParamRole::Weight),
            w_o: add("w_o", &[d, d], ParamRole::ResidualWeight),
            b_o: add("b_o", &[d], ParamRole::ResidualBias),
            w1: add("ffn.w1", &[d, d_ffn], ParamRole::Weight),
            b1: add("ffn.b1", &[d_ffn], ParamRole::Bias),
            w2: add("ffn.w2", &[d_ffn, d], ParamRole::ResidualWeight),
            b2: add("ffn.b2", &[d], ParamRole::ResidualBias),
            ln1_gain: add("ln1.gain", &[d], ParamRole::NormGain),
            ln1_bias: add("ln1.bias", &[d], ParamRole::NormBias),
            ln2_gain: add("ln2.gain", &[d], ParamRole::NormGain),
            ln2_bias: add("ln2.bias", &[d], ParamRole::NormBias),
        }
    }

    /// Dense parameters of one instance.
    pub fn size(d: usize, d_ffn: usize) -> usize {
        4 * d * d + 2 * d * d_ffn + d_ffn + 2 * d + 4 * d
    }
}

/// One encoder layer: `K` per-block parameter sets, or one shared set.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub blocks: Vec<EncoderBlockParams>,
}

impl EncoderLayerParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, block_names: &[String], d: usize, d_ffn: usize) -> Self {
        EncoderLayerParams {
            blocks: block_names
                .iter()
                .map(|n| EncoderBlockParams::declare(store, &format!("{prefix}.{n}"), d, d_ffn))
                .collect(),
        }
    }

    pub fn declare_shared(store: &mut ParamStore, prefix: &str, d: usize, d_ffn: usize) -> Self {
        EncoderLayerParams {
            blocks: vec![EncoderBlockParams::declare(store, &format!("{prefix}.shared"), d, d_ffn)],
        }
    }

    fn check_blocks(&self, k: usize) -> Result<()> {
        let n = self.blocks.len();
        if n == k || n == 1 {
            Ok(())
        } else {
            Err(HhftError::Config(format!(
                "encoder layer has {n} block parameter sets for {k} tokens"
            )))
        }
    }

    fn vars(&self, vars: &ParamVars, pick: impl Fn(&EncoderBlockParams) -> ParamId) -> Vec<Var> {
        vars.collect(self.blocks.iter().map(pick))
    }
}

fn token_count(tape: &Tape, h: Var) -> Result<usize> {
    match tape.shape(h).as_slice() {
        [_, k, _] => Ok(*k),
        s => Err(HhftError::shape("token matrix", s, &[3])),
    }
}

/// Block-specific Q, K, V: row `k` uses only block `k`'s matrices.
pub fn qkv_project(tape: &Tape, vars: &ParamVars, h: Var, layer: &EncoderLayerParams) -> Result<(Var, Var, Var)> {
    layer.check_blocks(token_count(tape, h)?)?;
    let q = tape.block_matmul(h, &layer.vars(vars, |b| b.w_q))?;
    let k = tape.block_matmul(h, &layer.vars(vars, |b| b.w_k))?;
    let v = tape.block_matmul(h, &layer.vars(vars, |b| b.w_v))?;
    Ok((q, k, v))
}

/// Multi-head attention over the token axis followed by the per-block
/// output projection.
pub fn multi_head_attention(
    tape: &Tape,
    vars: &ParamVars,
    q: Var,
    k: Var,
    v: Var,
    layer: &EncoderLayerParams,
    n_heads: usize,
) -> Result<Var> {
    let mixed = tape.attention(q, k, v, n_heads)?;
    let out = tape.block_matmul(mixed, &layer.vars(vars, |b| b.w_o))?;
    tape.block_add(out, &layer.vars(vars, |b| b.b_o))
}

/// `ReLU(x·W1 + b1)·W2 + b2` with block `k`'s weights on row `k`.
pub fn block_ffn(tape: &Tape, vars: &ParamVars, x: Var, layer: &EncoderLayerParams) -> Result<Var> {
    layer.check_blocks(token_count(tape, x)?)?;
    let hidden = tape.block_matmul(x, &layer.vars(vars, |b| b.w1))?;
    let hidden = tape.block_add(hidden, &layer.vars(vars, |b| b.b1))?;
    let hidden = tape.relu(hidden);
    let out = tape.block_matmul(hidden, &layer.vars(vars, |b| b.w2))?;
    tape.block_add(out, &layer.vars(vars, |b| b.b2))
}

/// Wraps two sub-layers with residual connections and layer norms.
///
/// `attend` and `ffn` see the (possibly normalized) input and return a
/// same-shaped update.
#[allow(clippy::too_many_arguments)]
pub(crate) fn residual_layer(
    tape: &Tape,
    h: Var,
    placement: NormPlacement,
    eps: f64,
    ln1: (&[Var], &[Var]),
    ln2: (&[Var], &[Var]),
    attend: impl FnOnce(Var) -> Result<Var>,
    ffn: impl FnOnce(Var) -> Result<Var>,
) -> Result<Var> {
    match placement {
        NormPlacement::Pre => {
            let normed = tape.block_layer_norm(h, ln1.0, ln1.1, eps)?;
            let x = tape.add(h, attend(normed)?)?;
            let normed = tape.block_layer_norm(x, ln2.0, ln2.1, eps)?;
            tape.add(x, ffn(normed)?)
        }
        NormPlacement::Post => {
            let sum = tape.add(h, attend(h)?)?;
            let x = tape.block_layer_norm(sum, ln1.0, ln1.1, eps)?;
            let sum = tape.add(x, ffn(x)?)?;
            tape.block_layer_norm(sum, ln2.0, ln2.1, eps)
        }
    }
}

pub fn encoder_layer(
    tape: &Tape,
    vars: &ParamVars,
    h: Var,
    layer: &EncoderLayerParams,
    config: &EncoderConfig,
    eps: f64,
) -> Result<Var> {
    layer.check_blocks(token_count(tape, h)?)?;
    let ln1 = (layer.vars(vars, |b| b.ln1_gain), layer.vars(vars, |b| b.ln1_bias));
    let ln2 = (layer.vars(vars, |b| b.ln2_gain), layer.vars(vars, |b| b.ln2_bias));
    residual_layer(
        tape,
        h,
        config.norm_placement,
        eps,
        (&ln1.0, &ln1.1),
        (&ln2.0, &ln2.1),
        |x| {
            let (q, k, v) = qkv_project(tape, vars, x, layer)?;
            multi_head_attention(tape, vars, q, k, v, layer, config.n_heads)
        },
        |x| block_ffn(tape, vars, x, layer),
    )
}

/// Applies the layers in order; an empty stack is the identity.
pub fn encoder_forward(
    tape: &Tape,
    vars: &ParamVars,
    h0: Var,
    layers: &[EncoderLayerParams],
    config: &EncoderConfig,
    eps: f64,
) -> Result<Var> {
    layers
        .iter()
        .try_fold(h0, |h, layer| encoder_layer(tape, vars, h, layer, config, eps))
}
