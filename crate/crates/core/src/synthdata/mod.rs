//! Synthetic two-modality task, corruption ladder, test streams and source pretraining.

mod corrupt;
mod pretrain;
mod stream;
mod task;

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec, CHANNEL_SPREAD, DROPOUT_FRACTION, GAUSSIAN_SIGMA};
pub use pretrain::{accuracy, noise_floor, pretrain_source, PretrainConfig, SourceModel};
pub use stream::{gen_stream, Schedule, Stream, StreamConfig};
pub use task::{gen_labeled, LabeledSet, Task, TaskSpec};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::io::TensorFile;
use crate::scalar::Scalar;

/// Record name of the task description inside a checkpoint.
pub const TASK_KEY: &str = "meta/task";

pub fn push_task(f: &mut TensorFile, spec: &TaskSpec) {
    let v = spec.to_values();
    f.push(TASK_KEY, Tensor::from_parts(vec![v.len()], v));
}

pub fn read_task(f: &TensorFile) -> Result<TaskSpec> {
    TaskSpec::from_values(f.get(TASK_KEY)?.data()).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Appends a labeled set as `data/{split}/a/tokens`, `data/{split}/v/tokens`
/// (both `n × m × d_in`) and `data/{split}/y/labels` (`n`).
pub fn push_dataset<T: Scalar>(f: &mut TensorFile, split: &str, set: &LabeledSet<T>) -> Result<()> {
    let n = set.len();
    if n == 0 {
        return Err(crate::error::invalid(format!("split {split:?} is empty")));
    }
    for (tag, xs) in [("a", &set.audio), ("v", &set.video)] {
        let (m, d) = xs[0].dims2();
        let data = xs.iter().flat_map(|x| x.data().iter().map(|v| v.as_f64())).collect();
        f.push(format!("data/{split}/{tag}/tokens"), Tensor::new(vec![n, m, d], data)?);
    }
    f.push(format!("data/{split}/y/labels"), Tensor::new(vec![n], set.labels.iter().map(|&y| y as f64).collect())?);
    Ok(())
}

/// Inverse of [`push_dataset`].
pub fn read_dataset<T: Scalar>(f: &TensorFile, split: &str) -> Result<LabeledSet<T>> {
    let mut mods = Vec::with_capacity(2);
    for tag in ["a", "v"] {
        let name = format!("data/{split}/{tag}/tokens");
        let t = f.get(&name)?;
        let &[n, m, d] = t.shape() else {
            return Err(Error::Checkpoint(format!("{name}: expected rank 3, found {:?}", t.shape())));
        };
        let xs: Vec<Tensor<T>> = t
            .data()
            .chunks_exact(m * d)
            .map(|c| Tensor::from_parts(vec![m, d], c.iter().map(|&v| T::of(v)).collect()))
            .collect();
        debug_assert_eq!(xs.len(), n);
        mods.push(xs);
    }
    let labels: Vec<usize> = f.get(&format!("data/{split}/y/labels"))?.data().iter().map(|&v| v as usize).collect();
    let video = mods.pop().unwrap();
    let audio = mods.pop().unwrap();
    if audio.len() != labels.len() || video.len() != labels.len() {
        return Err(Error::Checkpoint(format!("split {split:?} has inconsistent sample counts")));
    }
    Ok(LabeledSet { audio, video, labels })
}
