use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Modality, ModelConfig};
use super::weights::ModelBundle;
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::io::TensorFile;
use crate::scalar::Scalar;
use crate::stats::{LayerGaussianStats, SourceStatsBank};

const CONFIG_KEY: &str = "meta/config";

fn stats_groups<T>(bank: &SourceStatsBank<T>) -> [(&'static str, &[LayerGaussianStats<T>]); 3] {
    [("a", &bank.audio), ("v", &bank.video), ("j", &bank.joint)]
}

/// Serializes a model and its source bank into a tensor container.
pub fn to_tensor_file<T: Scalar>(model: &ModelBundle<T>, bank: &SourceStatsBank<T>) -> TensorFile {
    let mut f = TensorFile::new();
    f.push(CONFIG_KEY, Tensor::from_parts(vec![9], model.config.to_values()));
    for (name, t) in model.frozen_named() {
        f.push(name, t.cast());
    }
    for (name, t) in model.prompts_named() {
        f.push(name, t.cast());
    }
    for (tag, layers) in stats_groups(bank) {
        for (i, s) in layers.iter().enumerate() {
            let to64 = |v: &[T]| Tensor::from_parts(vec![v.len()], v.iter().map(|x| x.as_f64()).collect());
            f.push(format!("stats/{tag}/layer{i}/mean"), to64(&s.mean));
            f.push(format!("stats/{tag}/layer{i}/std"), to64(&s.std));
        }
    }
    f
}

fn expect_shape<'a>(f: &'a TensorFile, name: &str, shape: &[usize]) -> Result<&'a Tensor<f64>> {
    let t = f.get(name)?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!("{name}: expected shape {shape:?}, found {:?}", t.shape())));
    }
    Ok(t)
}

/// Rebuilds a model and source bank from a tensor container.
pub fn from_tensor_file<T: Scalar>(f: &TensorFile) -> Result<(ModelBundle<T>, SourceStatsBank<T>)> {
    let config = ModelConfig::from_values(f.get(CONFIG_KEY)?.data()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = ModelBundle::<T>::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;

    let names: Vec<(String, Vec<usize>)> =
        model.frozen_named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    for ((name, shape), slot) in names.iter().zip(model.frozen_mut()) {
        *slot = expect_shape(f, name, shape)?.cast();
    }
    for m in Modality::BOTH {
        for i in 0..model.prompts.get(m).len() {
            let name = format!("prompts/{}/layer{i}", m.tag());
            let t = expect_shape(f, &name, &[config.prompts, config.dim])?.cast();
            model.prompts.get_mut(m)[i] = t;
        }
    }

    let read_layers = |tag: &str, n: usize, dim: usize| -> Result<Vec<LayerGaussianStats<T>>> {
        (0..n)
            .map(|i| {
                let grab = |what: &str| -> Result<Vec<T>> {
                    let t = expect_shape(f, &format!("stats/{tag}/layer{i}/{what}"), &[dim])?;
                    Ok(t.data().iter().map(|&v| T::of(v)).collect())
                };
                Ok(LayerGaussianStats { mean: grab("mean")?, std: grab("std")? })
            })
            .collect()
    };
    let bank = SourceStatsBank {
        audio: read_layers("a", config.layers, config.dim)?,
        video: read_layers("v", config.layers, config.dim)?,
        joint: read_layers("j", config.joint_layers, config.dim)?,
    };
    Ok((model, bank))
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &ModelBundle<T>, bank: &SourceStatsBank<T>) -> Result<()> {
    to_tensor_file(model, bank).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelBundle<T>, SourceStatsBank<T>)> {
    from_tensor_file(&TensorFile::load(path)?)
}
