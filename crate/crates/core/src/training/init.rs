//! Parameter initialization schemes.
//!
//! Every parameter draws from its own stream keyed by `(seed, name)`, so a
//! parameter's initial value does not depend on which other parameters the
//! model declares. Two models that share a tokenizer and head therefore
//! start from the same tokenizer and head values.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HhftError, Result};
use crate::model::{Model, Precision};
use crate::params::{ParamRole, ParamSpec};
use crate::seeding::{name_hash, stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitScheme {
    #[default]
    XavierUniform,
    XavierNormal,
    /// Normal with standard deviation `sigma`, resampled beyond `2·sigma`.
    TruncatedNormal { sigma: f64 },
    /// Xavier-uniform, then the last projection of every residual branch
    /// (attention output and second FFN matrix, with their biases) is zero.
    ZerosResidualOut,
}

/// A scheme for parameters whose name starts with `prefix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitOverride {
    pub prefix: String,
    pub scheme: InitScheme,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    #[serde(flatten)]
    pub scheme: InitScheme,
    /// First matching prefix wins.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<InitOverride>,
}

impl InitConfig {
    pub fn new(scheme: InitScheme) -> Self {
        InitConfig { scheme, overrides: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for s in std::iter::once(&self.scheme).chain(self.overrides.iter().map(|o| &o.scheme)) {
            if let InitScheme::TruncatedNormal { sigma } = s {
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(HhftError::Config(format!("truncated-normal sigma must be positive, got {sigma}")));
                }
            }
        }
        Ok(())
    }

    fn scheme_for(&self, name: &str) -> InitScheme {
        self.overrides
            .iter()
            .find(|o| name.starts_with(&o.prefix))
            .map_or(self.scheme, |o| o.scheme)
    }
}

/// `(fan_in, fan_out)` of a parameter. Embedding rows are treated as
/// `e → e` maps.
pub fn fans(spec: &ParamSpec) -> (usize, usize) {
    match (spec.role, spec.shape.as_slice()) {
        (ParamRole::Embedding, [_, e]) => (*e, *e),
        (_, [r, c]) => (*r, *c),
        (_, [n]) => (*n, *n),
        (_, s) => {
            let n = s.iter().product();
            (n, n)
        }
    }
}

pub fn xavier_uniform_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn sample(scheme: InitScheme, spec: &ParamSpec, rng: &mut impl Rng) -> f64 {
    let (fi, fo) = fans(spec);
    match scheme {
        InitScheme::XavierUniform | InitScheme::ZerosResidualOut => {
            let a = xavier_uniform_bound(fi, fo);
            rng.gen_range(-a..a)
        }
        InitScheme::XavierNormal => {
            let z: f64 = StandardNormal.sample(rng);
            z * (2.0 / (fi + fo) as f64).sqrt()
        }
        InitScheme::TruncatedNormal { sigma } => loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * sigma;
            }
        },
    }
}

/// Initializes every parameter of `model` in place.
pub fn init_params(model: &mut Model, init: &InitConfig, seed: u64, precision: Precision) -> Result<()> {
    init.validate()?;
    for id in model.store.ids().collect::<Vec<_>>() {
        let spec = model.store.spec(id).clone();
        let scheme = init.scheme_for(&spec.name);
        let value = model.store.value_mut(id);
        match spec.role {
            ParamRole::Bias | ParamRole::NormBias | ParamRole::ResidualBias => value.data_mut().fill(0.0),
            ParamRole::NormGain => value.data_mut().fill(1.0),
            ParamRole::ResidualWeight if scheme == InitScheme::ZerosResidualOut => value.data_mut().fill(0.0),
            _ => {
                let mut rng = stream(&[seed, name_hash(&spec.name)]);
                for x in value.data_mut() {
                    *x = sample(scheme, &spec, &mut rng);
                }
            }
        }
    }
    if precision == Precision::F32 {
        model.round_to_f32();
    }
    Ok(())
}
