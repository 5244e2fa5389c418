//! Hiformer layer with global composite projections.
//!
//! Queries are per token and per head. Keys and values for head `h` come
//! from flattening the whole `[K, d]` token matrix of a record and
//! multiplying by one `(K·d) × (K·d_h)` matrix, so every key may depend on
//! every token. The residual, normalization and FFN wrapping is the same
//! as in [`crate::encoder`].

use serde::{Deserialize, Serialize};

use crate::encoder::{residual_layer, NormPlacement};
use crate::error::{HhftError, Result};
use crate::numerics::{Tape, Var};
use crate::params::{ParamId, ParamRole, ParamStore, ParamVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiformerConfig {
    pub n2: usize,
    /// Per-head projection width.
    pub d_h: usize,
    /// Head count.
    pub n_h: usize,
    pub d_ffn: usize,
    #[serde(default)]
    pub norm_placement: NormPlacement,
}

impl HiformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.n_h == 0 || self.d_ffn == 0 {
            return Err(HhftError::Config("hiformer d_h, n_h and d_ffn must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-token parameters of one hiformer layer.
///
/// `w_q` holds the `n_h` per-head query matrices side by side: columns
/// `h·d_h .. (h+1)·d_h` are head `h`.
#[derive(Clone, Debug)]
pub struct HiformerTokenParams {
    pub w_q: ParamId,
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

#[derive(Clone, Debug)]
pub struct HiformerLayerParams {
    pub tokens: Vec<HiformerTokenParams>,
    /// Composite key projection per head, `[(K·d), (K·d_h)]`.
    pub w_k_hat: Vec<ParamId>,
    /// Composite value projection per head, same shape.
    pub w_v_hat: Vec<ParamId>,
}

impl HiformerLayerParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, block_names: &[String], d: usize, config: &HiformerConfig) -> Self {
        let k = block_names.len();
        let width = config.n_h * config.d_h;
        let tokens = block_names
            .iter()
            .map(|name| {
                let mut add = |p: &str, shape: &[usize], role| store.add(format!("{prefix}.{name}.{p}"), shape, role);
                HiformerTokenParams {
                    w_q: add("w_q", &[d, width], ParamRole::Weight),
                    w_o: add("w_o", &[width, d], ParamRole::ResidualWeight),
                    b_o: add("b_o", &[d], ParamRole::ResidualBias),
                    w1: add("ffn.w1", &[d, config.d_ffn], ParamRole::Weight),
                    b1: add("ffn.b1", &[config.d_ffn], ParamRole::Bias),
                    w2: add("ffn.w2", &[config.d_ffn, d], ParamRole::ResidualWeight),
                    b2: add("ffn.b2", &[d], ParamRole::ResidualBias),
                    ln1_gain: add("ln1.gain", &[d], ParamRole::NormGain),
                    ln1_bias: add("ln1.bias", &[d], ParamRole::NormBias),
                    ln2_gain: add("ln2.gain", &[d], ParamRole::NormGain),
                    ln2_bias: add("ln2.bias", &[d], ParamRole::NormBias),
                }
            })
            .collect();
        let composite = |store: &mut ParamStore, kind: &str| -> Vec<ParamId> {
            (0..config.n_h)
                .map(|h| store.add(format!("{prefix}.head{h}.{kind}"), &[k * d, k * config.d_h], ParamRole::Weight))
                .collect()
        };
        let w_k_hat = composite(store, "w_k_hat");
        let w_v_hat = composite(store, "w_v_hat");
        HiformerLayerParams { tokens, w_k_hat, w_v_hat }
    }

    /// Dense parameters of one layer.
    pub fn size(k: usize, d: usize, config: &HiformerConfig) -> usize {
        let width = config.n_h * config.d_h;
        let per_token = 2 * d * width + d + 2 * d * config.d_ffn + config.d_ffn + d + 4 * d;
        k * per_token + 2 * config.n_h * (k * d) * (k * config.d_h)
    }

    fn vars(&self, vars: &ParamVars, pick: impl Fn(&HiformerTokenParams) -> ParamId) -> Vec<Var> {
        vars.collect(self.tokens.iter().map(pick))
    }
}

fn dims(tape: &Tape, h: Var) -> Result<(usize, usize, usize)> {
    match tape.shape(h).as_slice() {
        [b, k, d] => Ok((*b, *k, *d)),
        s => Err(HhftError::shape("token matrix", s, &[3])),
    }
}

/// Flatten each record's tokens, multiply by `w_hat`, split into `K`
/// segments: `[B, K, d] → [B, K, d_h]`.
pub fn composite_project(tape: &Tape, h: Var, w_hat: Var) -> Result<Var> {
    let (b, k, d) = dims(tape, h)?;
    let ws = tape.shape(w_hat);
    if ws.len() != 2 || ws[0] != k * d || !ws[1].is_multiple_of(k) {
        return Err(HhftError::Config(format!(
            "composite projection has shape {ws:?}, expected [{}, {k}·d_h]",
            k * d
        )));
    }
    let flat = tape.reshape(h, &[b, k * d])?;
    let out = tape.matmul(flat, w_hat)?;
    tape.reshape(out, &[b, k, ws[1] / k])
}

/// Attention sub-layer: per-token queries against composite keys/values,
/// heads concatenated then mapped back to `d` per token.
fn composite_attention(
    tape: &Tape,
    vars: &ParamVars,
    x: Var,
    layer: &HiformerLayerParams,
    config: &HiformerConfig,
) -> Result<Var> {
    let q = tape.block_matmul(x, &layer.vars(vars, |t| t.w_q))?;
    let project = |ws: &[ParamId]| -> Result<Var> {
        let heads = ws
            .iter()
            .map(|&w| composite_project(tape, x, vars[w]))
            .collect::<Result<Vec<_>>>()?;
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            tape.concat(&heads, 2)
        }
    };
    let k_hat = project(&layer.w_k_hat)?;
    let v_hat = project(&layer.w_v_hat)?;
    let mixed = tape.attention(q, k_hat, v_hat, config.n_h)?;
    let out = tape.block_matmul(mixed, &layer.vars(vars, |t| t.w_o))?;
    tape.block_add(out, &layer.vars(vars, |t| t.b_o))
}

fn token_ffn(tape: &Tape, vars: &ParamVars, x: Var, layer: &HiformerLayerParams) -> Result<Var> {
    let hidden = tape.block_matmul(x, &layer.vars(vars, |t| t.w1))?;
    let hidden = tape.block_add(hidden, &layer.vars(vars, |t| t.b1))?;
    let hidden = tape.relu(hidden);
    let out = tape.block_matmul(hidden, &layer.vars(vars, |t| t.w2))?;
    tape.block_add(out, &layer.vars(vars, |t| t.b2))
}

/// One full hiformer layer (attention, FFN, residuals and norms).
pub fn hiformer_attention(
    tape: &Tape,
    vars: &ParamVars,
    h: Var,
    layer: &HiformerLayerParams,
    config: &HiformerConfig,
    eps: f64,
) -> Result<Var> {
    let (_, k, _) = dims(tape, h)?;
    if layer.tokens.len() != k || layer.w_k_hat.len() != config.n_h || layer.w_v_hat.len() != config.n_h {
        return Err(HhftError::Config(format!(
            "hiformer layer has {} token sets and {} heads for {k} tokens and {} heads",
            layer.tokens.len(),
            layer.w_k_hat.len(),
            config.n_h
        )));
    }
    let ln1 = (layer.vars(vars, |t| t.ln1_gain), layer.vars(vars, |t| t.ln1_bias));
    let ln2 = (layer.vars(vars, |t| t.ln2_gain), layer.vars(vars, |t| t.ln2_bias));
    residual_layer(
        tape,
        h,
        config.norm_placement,
        eps,
        (&ln1.0, &ln1.1),
        (&ln2.0, &ln2.1),
        |x| composite_attention(tape, vars, x, layer, config),
        |x| token_ffn(tape, vars, x, layer),
    )
}

pub fn hiformer_forward(
    tape: &Tape,
    vars: &ParamVars,
    h0: Var,
    layers: &[HiformerLayerParams],
    config: &HiformerConfig,
    eps: f64,
) -> Result<Var> {
    layers
        .iter()
        .try_fold(h0, |h, layer| hiformer_attention(tape, vars, h, layer, config, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encoder_layer, EncoderConfig, EncoderLayerParams};
    use crate::nesting::{block_diagonal, tie_hiformer_to_encoder};
    use crate::numerics::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("b{i}")).collect()
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
            store.set(id, Tensor::new(shape, data).unwrap()).unwrap();
        }
    }

    fn tokens(b: usize, k: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..b * k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(vec![b, k, d], data).unwrap()
    }

    fn config(d_h: usize, n_h: usize, d_ffn: usize) -> HiformerConfig {
        HiformerConfig { n2: 1, d_h, n_h, d_ffn, norm_placement: NormPlacement::Pre }
    }

    #[test]
    fn composite_block_diagonal_reduces_to_per_token_projection() {
        let (k, d, d_h) = (3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::new(vec![d, d_h], (0..d * d_h).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let h = tokens(2, k, d, &mut rng);
        let tape = Tape::new();
        let hv = tape.constant(h.clone());
        let out = tape.value(composite_project(&tape, hv, tape.constant(block_diagonal(&w, k))).unwrap());
        let flat = h.clone().reshape(&[2 * k, d]).unwrap().matmul(&w).unwrap();
        assert!(out.max_abs_diff(&flat.reshape(&[2, k, d_h]).unwrap()) < 1e-15);
    }

    #[test]
    fn composite_hand_example_and_zero() {
        // K=2, d=2, d_h=1: flatten [1,2,3,4], multiply by a dense 4×2 matrix.
        let h = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 1.0]]).unwrap();
        let tape = Tape::new();
        let hv = tape.constant(h);
        let out = composite_project(&tape, hv, tape.constant(w)).unwrap();
        // key0 = 1·1 + 2·0 + 3·2 + 4·0.5 = 9; key1 = 0 + 2 − 3 + 4 = 3
        assert_eq!(tape.value(out).data(), &[9.0, 3.0]);
        assert_eq!(tape.shape(out), vec![1, 2, 1]);

        let zero = composite_project(&tape, hv, tape.constant(Tensor::zeros(&[4, 2]))).unwrap();
        assert!(tape.value(zero).data().iter().all(|&x| x == 0.0));

        let bad = composite_project(&tape, hv, tape.constant(Tensor::zeros(&[3, 2])));
        assert!(matches!(bad, Err(HhftError::Config(_))));
    }

    #[test]
    fn zero_weights_are_residual_identity() {
        let (k, d) = (3, 4);
        let cfg = config(2, 2, 5);
        let mut store = ParamStore::new();
        let layer = HiformerLayerParams::declare(&mut store, "hif0", &names(k), d, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = tokens(2, k, d, &mut rng);
        let tape = Tape::new();
        let vars = store.register(&tape);
        let hv = tape.constant(h.clone());
        let out = hiformer_attention(&tape, &vars, hv, &layer, &cfg, 1e-5).unwrap();
        assert_eq!(*tape.value(out), h);
        let probs = &tape.attention_probs()[0];
        assert!(probs.data().iter().all(|&p| (p - 1.0 / k as f64).abs() < 1e-15));
        assert_eq!(*tape.value(hiformer_forward(&tape, &vars, hv, &[], &cfg, 1e-5).unwrap()), h);
    }

    /// Scripted single-record computation with plain loops.
    fn scripted(store: &ParamStore, layer: &HiformerLayerParams, h: &Tensor, cfg: &HiformerConfig) -> Vec<f64> {
        let (k, d) = (h.shape()[1], h.shape()[2]);
        let (n_h, d_h) = (cfg.n_h, cfg.d_h);
        let ln = |x: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / d as f64;
            let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
            x.iter().enumerate().map(|(i, a)| (a - m) / (v + 1e-5).sqrt() * g.data()[i] + b.data()[i]).collect()
        };
        let vecmat = |x: &[f64], w: &Tensor| -> Vec<f64> {
            let (r, c) = (w.shape()[0], w.shape()[1]);
            (0..c).map(|j| (0..r).map(|i| x[i] * w.get(&[i, j])).sum()).collect()
        };
        let rows: Vec<Vec<f64>> = (0..k).map(|t| h.data()[t * d..(t + 1) * d].to_vec()).collect();
        let z: Vec<Vec<f64>> = (0..k)
            .map(|t| ln(&rows[t], store.get(layer.tokens[t].ln1_gain), store.get(layer.tokens[t].ln1_bias)))
            .collect();
        let flat: Vec<f64> = z.concat();
        let mut heads_out = vec![vec![0.0; n_h * d_h]; k];
        for hd in 0..n_h {
            let kh = vecmat(&flat, store.get(layer.w_k_hat[hd]));
            let vh = vecmat(&flat, store.get(layer.w_v_hat[hd]));
            for t in 0..k {
                let q = vecmat(&z[t], store.get(layer.tokens[t].w_q));
                let q = &q[hd * d_h..(hd + 1) * d_h];
                let logits: Vec<f64> = (0..k)
                    .map(|s| (0..d_h).map(|c| q[c] * kh[s * d_h + c]).sum::<f64>() / (d_h as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for c in 0..d_h {
                    heads_out[t][hd * d_h + c] = (0..k).map(|s| e[s] / tot * vh[s * d_h + c]).sum();
                }
            }
        }
        let mut out = Vec::new();
        for t in 0..k {
            let p = &layer.tokens[t];
            let a = vecmat(&heads_out[t], store.get(p.w_o));
            let x: Vec<f64> = (0..d).map(|i| rows[t][i] + a[i] + store.get(p.b_o).data()[i]).collect();
            let z2 = ln(&x, store.get(p.ln2_gain), store.get(p.ln2_bias));
            let hid: Vec<f64> = vecmat(&z2, store.get(p.w1))
                .iter()
                .zip(store.get(p.b1).data())
                .map(|(a, b)| (a + b).max(0.0))
                .collect();
            let f = vecmat(&hid, store.get(p.w2));
            out.extend((0..d).map(|i| x[i] + f[i] + store.get(p.b2).data()[i]));
        }
        out
    }

    #[test]
    fn matches_scripted_pipeline_and_repeated_application() {
        let (k, d) = (2, 2);
        let cfg = config(1, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let l0 = HiformerLayerParams::declare(&mut store, "hif0", &names(k), d, &cfg);
        let l1 = HiformerLayerParams::declare(&mut store, "hif1", &names(k), d, &cfg);
        randomize(&mut store, &mut rng, 1.0);
        let h = tokens(1, k, d, &mut rng);
        let tape = Tape::new();
        let vars = store.register(&tape);
        let hv = tape.constant(h.clone());
        let one = tape.value(hiformer_attention(&tape, &vars, hv, &l0, &cfg, 1e-5).unwrap());
        let oracle = scripted(&store, &l0, &h, &cfg);
        for (a, b) in one.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let single = hiformer_forward(&tape, &vars, hv, std::slice::from_ref(&l0), &cfg, 1e-5).unwrap();
        assert_eq!(*tape.value(single), *one);

        let two = tape.value(hiformer_forward(&tape, &vars, hv, &[l0.clone(), l1.clone()], &cfg, 1e-5).unwrap());
        let mid = Tensor::new(vec![1, k, d], oracle).unwrap();
        let oracle2 = scripted(&store, &l1, &mid, &cfg);
        for (a, b) in two.data().iter().zip(&oracle2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_diagonal_tied_layer_equals_shared_encoder_layer() {
        let (k, d, d_ffn, n_heads) = (4, 8, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut shared_store = ParamStore::new();
        let enc = EncoderLayerParams::declare_shared(&mut shared_store, "enc0", d, d_ffn);
        randomize(&mut shared_store, &mut rng, 0.7);
        let cfg = config(d / n_heads, n_heads, d_ffn);
        let mut store = ParamStore::new();
        let layer = HiformerLayerParams::declare(&mut store, "hif0", &names(k), d, &cfg);
        tie_hiformer_to_encoder(&mut store, &layer, &shared_store, &enc).unwrap();
        let h = tokens(3, k, d, &mut rng);
        let enc_cfg = EncoderConfig { n1: 1, d_ffn, n_heads, norm_placement: NormPlacement::Pre };

        let tape = Tape::new();
        let vars = shared_store.register(&tape);
        let hv = tape.constant(h.clone());
        let expect = tape.value(encoder_layer(&tape, &vars, hv, &enc, &enc_cfg, 1e-5).unwrap());
        let tape = Tape::new();
        let vars = store.register(&tape);
        let hv = tape.constant(h);
        let got = tape.value(hiformer_attention(&tape, &vars, hv, &layer, &cfg, 1e-5).unwrap());
        let diff = got.max_abs_diff(&expect);
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn dense_composite_breaks_block_isolation() {
        let (k, d, d_h) = (3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = tokens(1, k, d, &mut rng);
        let dense = Tensor::new(vec![k * d, k * d_h], (0..k * d * k * d_h).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![d, d_h], (0..d * d_h).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for (w_hat, coupled) in [(dense, true), (block_diagonal(&w, k), false)] {
            let tape = Tape::new();
            let hv = tape.param(h.clone());
            let out = composite_project(&tape, hv, tape.constant(w_hat)).unwrap();
            // Key of token 0 only.
            let key0 = tape.slice(out, 1, 0, 1).unwrap();
            let loss = tape.sum(key0);
            let grads = tape.backward(loss).unwrap();
            let g = grads.get(hv).unwrap();
            let other: f64 = g.data()[d..].iter().map(|x| x.abs()).sum();
            assert_eq!(other > 0.0, coupled);
        }
    }

    #[test]
    fn full_layer_gradient_check() {
        for (seed, placement) in [(1, NormPlacement::Pre), (2, NormPlacement::Post)] {
            let (k, d) = (3, 4);
            let cfg = HiformerConfig { n2: 1, d_h: 2, n_h: 2, d_ffn: 5, norm_placement: placement };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let layer = HiformerLayerParams::declare(&mut store, "hif0", &names(k), d, &cfg);
            randomize(&mut store, &mut rng, 0.8);
            let mut params = store.values().to_vec();
            params.push(tokens(2, k, d, &mut rng));
            let report = grad_check(
                |tape, vars| {
                    let (ps, x) = vars.split_at(vars.len() - 1);
                    let pv = ParamVars::from_vars(ps.to_vec());
                    let out = hiformer_attention(tape, &pv, x[0], &layer, &cfg, 1e-5)?;
                    let w = tape.constant(Tensor::new(tape.shape(out), (0..2 * k * d).map(|i| (i as f64 * 0.9).sin()).collect())?);
                    let prod = tape.mul(out, w)?;
                    Ok(tape.sum(prod))
                },
                &params,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn param_size_matches_enumeration() {
        let cfg = config(3, 2, 7);
        let mut store = ParamStore::new();
        HiformerLayerParams::declare(&mut store, "hif0", &names(4), 5, &cfg);
        assert_eq!(store.count().dense, HiformerLayerParams::size(4, 5, &cfg));
    }
}
