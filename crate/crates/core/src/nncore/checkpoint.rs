//! Checkpoint format: one JSON manifest line (layer specs, parameter names and
//! shapes, step count, model config) followed by every parameter as
//! little-endian `f32`, in manifest order.

use std::io::BufRead;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::layers::LayerSpec;
use super::ParamSet;
use crate::error::{Error, Result};
use crate::fsutil;

pub const CHECKPOINT_FORMAT: &str = "tge-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub model: serde_json::Value,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamMeta>,
}

pub fn encode(
    model: serde_json::Value,
    layers: Vec<LayerSpec>,
    step: u64,
    params: &ParamSet<f32>,
) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        step,
        model,
        layers,
        params: params
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    for p in params.iter() {
        fsutil::write_f32s(&mut out, p.value.iter().copied())?;
    }
    Ok(out)
}

pub fn decode<R: BufRead>(r: &mut R) -> Result<(Manifest, ParamSet<f32>)> {
    let header = fsutil::read_header_line(r)?;
    let manifest: Manifest = serde_json::from_str(&header)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let mut params = ParamSet::new();
    for meta in &manifest.params {
        let n: usize = meta.shape.iter().product();
        let data = fsutil::read_f32s(r, n)?;
        let value = ArrayD::from_shape_vec(IxDyn(&meta.shape), data)
            .map_err(|e| Error::format(e.to_string()))?;
        params.add(meta.name.clone(), value);
    }
    fsutil::expect_eof(r)?;
    Ok((manifest, params))
}

pub fn save(
    path: &Path,
    model: serde_json::Value,
    layers: Vec<LayerSpec>,
    step: u64,
    params: &ParamSet<f32>,
) -> Result<String> {
    let bytes = encode(model, layers, step, params)?;
    fsutil::atomic_write(path, &bytes)?;
    Ok(fsutil::short_hash(&bytes))
}

pub fn load(path: &Path) -> Result<(Manifest, ParamSet<f32>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    decode(&mut r)
}

/// Copies the tensors of `src` into `dst`, checking that names and shapes agree.
pub fn restore_into(dst: &mut ParamSet<f32>, src: &ParamSet<f32>) -> Result<()> {
    if !dst.same_layout(src) {
        return Err(Error::format(
            "checkpoint parameter layout does not match the model",
        ));
    }
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        d.value.assign(&s.value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::<f32>::new();
        let mlp = Mlp::new(
            &mut ps,
            "q",
            5,
            &[8, 8],
            1,
            Activation::Relu,
            true,
            &mut rng,
        );
        let bytes = encode(serde_json::json!({"kind": "critic"}), mlp.specs(), 42, &ps).unwrap();
        let (manifest, back) = decode(&mut &bytes[..]).unwrap();
        assert_eq!(manifest.step, 42);
        assert_eq!(manifest.layers, mlp.specs());
        assert!(ps.same_layout(&back));
        for (a, b) in ps.iter().zip(back.iter()) {
            assert!(a
                .value
                .iter()
                .zip(b.value.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let again = encode(manifest.model.clone(), manifest.layers.clone(), 42, &back).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn restore_rejects_other_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamSet::<f32>::new();
        Mlp::new(&mut a, "pi", 3, &[4], 2, Activation::Relu, false, &mut rng);
        let mut b = ParamSet::<f32>::new();
        Mlp::new(&mut b, "pi", 3, &[5], 2, Activation::Relu, false, &mut rng);
        assert!(restore_into(&mut a, &b).is_err());
        let c = a.clone();
        Mlp::new(&mut b, "x", 1, &[], 1, Activation::Relu, false, &mut rng);
        assert!(restore_into(&mut a, &c).is_ok());
    }
}
