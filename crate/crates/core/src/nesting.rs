//! Parameter surgery that makes one model reproduce another.
//!
//! Used to check that each rung of the ablation ladder contains the one
//! below it: tie a richer model's parameters to a simpler model's values (or
//! zero its extra residual branches) and the two compute the same function.

use crate::encoder::EncoderLayerParams;
use crate::error::{HhftError, Result};
use crate::hiformer::HiformerLayerParams;
use crate::model::Model;
use crate::numerics::Tensor;
use crate::params::ParamStore;

/// `k` copies of `block` on the diagonal of a `[k·r, k·c]` matrix.
pub fn block_diagonal(block: &Tensor, k: usize) -> Tensor {
    let (r, c) = (block.shape()[0], block.shape()[1]);
    let mut out = Tensor::zeros(&[k * r, k * c]);
    let data = out.data_mut();
    for b in 0..k {
        for i in 0..r {
            let row = (b * r + i) * k * c + b * c;
            data[row..row + c].copy_from_slice(&block.data()[i * c..(i + 1) * c]);
        }
    }
    out
}

/// Columns `start..start+len` of a matrix.
pub fn column_slice(w: &Tensor, start: usize, len: usize) -> Tensor {
    let cols = w.shape()[1];
    let data = w
        .data()
        .chunks(cols)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    Tensor::new(vec![w.shape()[0], len], data).expect("slice shape")
}

/// Name of the shared-encoder parameter that `name` would take its value
/// from, e.g. `enc0.user.w_q` → `enc0.shared.w_q`.
fn shared_counterpart(name: &str) -> Option<String> {
    let mut parts = name.splitn(3, '.');
    let layer = parts.next()?;
    let _block = parts.next()?;
    let rest = parts.next()?;
    layer.starts_with("enc").then(|| format!("{layer}.shared.{rest}"))
}

/// Copies into `dst` every parameter that `src` has under the same name,
/// or, for heterogeneous encoder blocks, under the shared-encoder name.
/// Parameters with no counterpart keep their values.
pub fn tie_from(dst: &mut Model, src: &Model) -> Result<()> {
    for id in dst.store.ids().collect::<Vec<_>>() {
        let name = dst.store.spec(id).name.clone();
        let source = src
            .store
            .find(&name)
            .or_else(|| shared_counterpart(&name).and_then(|n| src.store.find(&n)));
        if let Some(sid) = source {
            dst.store.set(id, src.store.get(sid).clone())?;
        }
    }
    Ok(())
}

/// Copies a shared encoder layer (block 0 of `enc`) into every block of
/// `layer`.
pub fn tie_encoder_layer(dst: &mut ParamStore, layer: &EncoderLayerParams, src: &ParamStore, enc: &EncoderLayerParams) -> Result<()> {
    let s = &enc.blocks[0];
    for b in &layer.blocks {
        for (d, from) in [
            (b.w_q, s.w_q), (b.w_k, s.w_k), (b.w_v, s.w_v), (b.w_o, s.w_o), (b.b_o, s.b_o), (b.w1, s.w1),
            (b.b1, s.b1), (b.w2, s.w2), (b.b2, s.b2), (b.ln1_gain, s.ln1_gain), (b.ln1_bias, s.ln1_bias),
            (b.ln2_gain, s.ln2_gain), (b.ln2_bias, s.ln2_bias),
        ] {
            dst.set(d, src.get(from).clone())?;
        }
    }
    Ok(())
}

/// Sets a hiformer layer so that it computes the shared encoder layer
/// `enc`: per-token queries tied to the shared `W_Q`, and each head's
/// composite key/value matrix block-diagonal in that head's column slice
/// of `W_K`/`W_V`. Needs `n_h` equal to the encoder head count and
/// `d_h = d / n_h`.
pub fn tie_hiformer_to_encoder(
    dst: &mut ParamStore,
    layer: &HiformerLayerParams,
    src: &ParamStore,
    enc: &EncoderLayerParams,
) -> Result<()> {
    let s = &enc.blocks[0];
    let k = layer.tokens.len();
    let n_heads = layer.w_k_hat.len();
    let d = src.get(s.w_k).shape()[0];
    if !d.is_multiple_of(n_heads) || dst.get(layer.w_k_hat[0]).shape() != [k * d, k * (d / n_heads)] {
        return Err(HhftError::Config("hiformer shape cannot reproduce the encoder layer".into()));
    }
    let dh = d / n_heads;
    for t in &layer.tokens {
        for (d, from) in [
            (t.w_q, s.w_q), (t.w_o, s.w_o), (t.b_o, s.b_o), (t.w1, s.w1), (t.b1, s.b1), (t.w2, s.w2),
            (t.b2, s.b2), (t.ln1_gain, s.ln1_gain), (t.ln1_bias, s.ln1_bias), (t.ln2_gain, s.ln2_gain),
            (t.ln2_bias, s.ln2_bias),
        ] {
            dst.set(d, src.get(from).clone())?;
        }
    }
    for h in 0..n_heads {
        dst.set(layer.w_k_hat[h], block_diagonal(&column_slice(src.get(s.w_k), h * dh, dh), k))?;
        dst.set(layer.w_v_hat[h], block_diagonal(&column_slice(src.get(s.w_v), h * dh, dh), k))?;
    }
    Ok(())
}

fn zero(store: &mut ParamStore, id: crate::params::ParamId) {
    store.value_mut(id).data_mut().fill(0.0);
}

/// Zeroes the last projection of both residual branches in every encoder
/// layer. Under pre-norm each layer is then the identity.
pub fn silence_encoder(model: &mut Model) {
    for layer in &model.encoder {
        for b in &layer.blocks {
            for id in [b.w_o, b.b_o, b.w2, b.b2] {
                zero(&mut model.store, id);
            }
        }
    }
}

/// Same as [`silence_encoder`] for the hiformer layers.
pub fn silence_hiformer(model: &mut Model) {
    for layer in &model.hiformer {
        for t in &layer.tokens {
            for id in [t.w_o, t.b_o, t.w2, t.b2] {
                zero(&mut model.store, id);
            }
        }
    }
}

/// Identity block projections; requires `e_k == d` for every block.
pub fn identity_projections(model: &mut Model) -> Result<()> {
    let d = model.config.schema.d;
    for (spec, p) in model.config.schema.blocks.iter().zip(&model.tokenizer.projections) {
        if spec.e_k != d {
            return Err(HhftError::Config(format!(
                "block `{}` has e_k {} but d is {d}",
                spec.name, spec.e_k
            )));
        }
        model.store.set(p.weight, Tensor::eye(d))?;
        zero(&mut model.store, p.bias);
    }
    Ok(())
}
