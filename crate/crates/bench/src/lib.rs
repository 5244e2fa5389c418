//! Fixtures shared by the benchmarks.

use hhft_core::datagen::{generate_records, GeneratorConfig, GroundTruth};
use hhft_core::features::{Batch, ExampleRecord};
use hhft_core::model::{Model, ModelConfig, ModelKind, Precision};
use hhft_core::numerics::Tensor;
use hhft_core::training::{init_params, InitConfig};

/// Deterministic dense tensor with entries in `[-1, 1]`.
pub fn tensor(shape: &[usize], salt: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.618 + salt).sin()).collect()).expect("shape matches data")
}

/// Planted records and an initialized desk-scale model of `kind`.
pub fn desk(kind: ModelKind, records: usize) -> (Model, Vec<ExampleRecord>) {
    let gen = GeneratorConfig::planted_three_way(1, records);
    let truth = GroundTruth::new(&gen).expect("valid generator");
    let mut model = Model::new(ModelConfig::desk(kind, gen.schema.clone())).expect("valid config");
    init_params(&mut model, &InitConfig::default(), 1, Precision::F64).expect("init");
    (model, generate_records(&truth))
}

pub fn batch(model: &Model, records: &[ExampleRecord]) -> Batch {
    Batch::from_records(&model.config.schema, records).expect("records match schema")
}
