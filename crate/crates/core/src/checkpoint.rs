//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "HHFTCKPT"
//! version    u32
//! config     u64 length + UTF-8 JSON of the ModelConfig
//! count      u32 number of tensors
//! per tensor:
//!   name     u32 length + UTF-8
//!   dtype    u8 (4 = f32, 8 = f64)
//!   rank     u32, then rank × u64 dims
//!   data     product(dims) floats of the given width
//! ```
//!
//! Tensors appear in declaration order. Loading rebuilds the model from the
//! config and checks every name and shape against it.

use std::fs;
use std::path::Path;

use crate::error::{HhftError, Result};
use crate::model::{Model, ModelConfig, Precision};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"HHFTCKPT";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model, precision: Precision) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config).map_err(|e| HhftError::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + config.len() + 8 * model.param_count().total());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (spec, value) in model.store.specs().iter().zip(model.store.values()) {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        let width: u8 = match precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        out.push(width);
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in value.data() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn save(model: &Model, path: &Path, precision: Precision) -> Result<()> {
    let bytes = encode(model, precision)?;
    fs::write(path, bytes).map_err(|e| HhftError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            HhftError::Checkpoint {
                field: field.into(),
                message: format!("file truncated at byte {}", self.bytes.len()),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn len(&mut self, wide: bool, field: &str) -> Result<usize> {
        let n = if wide { self.u64(field)? } else { u64::from(self.u32(field)?) };
        usize::try_from(n).map_err(|_| HhftError::Checkpoint {
            field: field.into(),
            message: format!("length {n} does not fit in memory"),
        })
    }
}

fn bad(field: &str, message: impl Into<String>) -> HhftError {
    HhftError::Checkpoint {
        field: field.into(),
        message: message.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(bad("magic", "not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(bad("version", format!("unsupported version {version}, expected {VERSION}")));
    }
    let n = r.len(true, "config")?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n, "config")?).map_err(|e| bad("config", e.to_string()))?;
    let mut model = Model::new(config)?;
    let count = r.u32("count")? as usize;
    if count != model.store.len() {
        return Err(bad(
            "count",
            format!("file has {count} tensors, config declares {}", model.store.len()),
        ));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let expected = model.store.spec(id).name.clone();
        let n = r.len(false, &expected)?;
        let name = std::str::from_utf8(r.take(n, &expected)?).map_err(|_| bad(&expected, "name is not UTF-8"))?;
        if name != expected {
            return Err(bad(&expected, format!("found tensor `{name}` in its place")));
        }
        let width = r.u8(name)?;
        if width != 4 && width != 8 {
            return Err(bad(name, format!("unknown dtype width {width}")));
        }
        let rank = r.u32(name)? as usize;
        let shape = (0..rank).map(|_| r.len(true, name)).collect::<Result<Vec<_>>>()?;
        if shape != model.store.spec(id).shape {
            return Err(bad(
                name,
                format!("shape {shape:?} does not match configured {:?}", model.store.spec(id).shape),
            ));
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * width as usize, name)?;
        let data = if width == 4 {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        } else {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        model.store.set(id, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(bad("trailer", format!("{} unexpected bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(HhftError::MissingPath(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| HhftError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Batch, BlockSpec, BlockValue, ExampleRecord, FeatureSchema};
    use crate::model::ModelKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Model {
        let schema = FeatureSchema {
            blocks: vec![BlockSpec::categorical("a", &[4], 2), BlockSpec::categorical("b", &[3], 2)],
            d: 4,
        };
        let config = ModelConfig { n_heads: 2, d_h: 2, n_h: 2, ..ModelConfig::desk(ModelKind::Hhft, schema) };
        let mut m = Model::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in m.store.ids().collect::<Vec<_>>() {
            for x in m.store.value_mut(id).data_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        m
    }

    fn batch(m: &Model) -> Batch {
        let recs: Vec<ExampleRecord> = (0..4)
            .map(|i| ExampleRecord {
                values: vec![BlockValue::Categorical(vec![i % 4]), BlockValue::Categorical(vec![i % 3])],
                label: (i % 2) as u8,
            })
            .collect();
        Batch::from_records(&m.config.schema, &recs).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&m, &path, Precision::F64).unwrap();
        let back = load(&path).unwrap();
        for (a, b) in m.store.values().iter().zip(back.store.values()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let b = batch(&m);
        assert_eq!(m.logits(&b).unwrap(), back.logits(&b).unwrap());
    }

    #[test]
    fn f32_round_trip_of_rounded_model() {
        let mut m = model(2);
        m.round_to_f32();
        let back = decode(&encode(&m, Precision::F32).unwrap()).unwrap();
        assert_eq!(m.store.values(), back.store.values());
    }

    #[test]
    fn byte_size_matches_param_count() {
        let m = model(3);
        let config_len = serde_json::to_vec(&m.config).unwrap().len();
        let header: usize = 8 + 4 + 8 + config_len + 4;
        let per_tensor: usize = m
            .store
            .specs()
            .iter()
            .map(|s| 4 + s.name.len() + 1 + 4 + 8 * s.shape.len())
            .sum();
        let total = m.param_count().total();
        assert_eq!(encode(&m, Precision::F64).unwrap().len(), header + per_tensor + 8 * total);
        assert_eq!(encode(&m, Precision::F32).unwrap().len(), header + per_tensor + 4 * total);
    }

    #[test]
    fn edited_d_is_a_shape_error_naming_the_field() {
        let m = model(4);
        let bytes = encode(&m, Precision::F64).unwrap();
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut config: ModelConfig = serde_json::from_slice(&bytes[20..20 + n]).unwrap();
        config.schema.d = 6;
        let json = serde_json::to_vec(&config).unwrap();
        let mut edited = bytes[..12].to_vec();
        edited.extend_from_slice(&(json.len() as u64).to_le_bytes());
        edited.extend_from_slice(&json);
        edited.extend_from_slice(&bytes[20 + n..]);
        match decode(&edited) {
            Err(HhftError::Checkpoint { field, message }) => {
                assert_eq!(field, "tok.a.proj.w");
                assert!(message.contains("shape"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_truncation_errors() {
        let m = model(5);
        let mut bytes = encode(&m, Precision::F64).unwrap();
        let good = bytes.clone();
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(HhftError::Checkpoint { field, .. }) if field == "version"));
        let cut = &good[..good.len() - 3];
        match decode(cut) {
            Err(HhftError::Checkpoint { field, message }) => {
                assert_eq!(field, m.store.specs().last().unwrap().name);
                assert!(message.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"NOTACKPT"), Err(HhftError::Checkpoint { field, .. }) if field == "magic"));
        assert!(matches!(load(Path::new("/nonexistent/x.ckpt")), Err(HhftError::MissingPath(_))));
    }
}
