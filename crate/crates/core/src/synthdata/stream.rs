use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corrupt::{corrupt, CorruptionSpec};
use super::task::{Task, TaskSpec};
use crate::adapt::Batch;
use crate::error::{invalid, Error, Result};
use crate::model::Modality;
use crate::scalar::Scalar;

/// Piecewise-constant corruption schedule over 1-based batch indices.
///
/// Text form: a single spec (`clean`, `gaussian-noise:5`) applied to every
/// batch, or comma-separated `<first batch>:<spec>` segments such as
/// `1:clean,21:gaussian-noise:5`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    segments: Vec<(usize, CorruptionSpec)>,
}

impl Schedule {
    pub fn fixed(spec: CorruptionSpec) -> Self {
        Self { segments: vec![(1, spec)] }
    }

    pub fn clean() -> Self {
        Self::fixed(CorruptionSpec::CLEAN)
    }

    /// Segments must start at batch 1 and have strictly increasing starts.
    pub fn piecewise(segments: Vec<(usize, CorruptionSpec)>) -> Result<Self> {
        if segments.first().map(|s| s.0) != Some(1) {
            return Err(invalid("schedule must start at batch 1"));
        }
        if segments.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(invalid("schedule segment starts must increase"));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[(usize, CorruptionSpec)] {
        &self.segments
    }

    /// Corruption active at 1-based batch `t`.
    pub fn at(&self, t: usize) -> CorruptionSpec {
        self.segments.iter().rev().find(|(start, _)| *start <= t).map_or(CorruptionSpec::CLEAN, |s| s.1)
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if !s.contains(',') && !s.starts_with(|c: char| c.is_ascii_digit()) {
            return Ok(Self::fixed(s.parse()?));
        }
        let segments = s
            .split(',')
            .map(|item| {
                let (start, spec) =
                    item.trim().split_once(':').ok_or_else(|| invalid(format!("bad schedule segment {item:?}")))?;
                let start = start.parse::<usize>().map_err(|_| invalid(format!("bad segment start in {item:?}")))?;
                Ok((start, spec.parse()?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::piecewise(segments)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let [(1, spec)] = self.segments.as_slice() {
            return write!(f, "{spec}");
        }
        let parts: Vec<String> = self.segments.iter().map(|(t, s)| format!("{t}:{s}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Shape and corruption schedule of a test stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub batch_size: usize,
    pub batches: usize,
    pub seed: u64,
    pub audio: Schedule,
    pub video: Schedule,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { batch_size: 16, batches: 50, seed: 0, audio: Schedule::clean(), video: Schedule::clean() }
    }
}

impl StreamConfig {
    pub fn schedule(&self, m: Modality) -> &Schedule {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// A generated stream: unlabeled batches plus an evaluator-only label channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream<T> {
    pub batches: Vec<Batch<T>>,
    pub labels: Vec<Vec<usize>>,
    /// Corruption applied to each batch, audio then video.
    pub corruption: Vec<[CorruptionSpec; 2]>,
}

/// Draws i.i.d. batches from the task and corrupts each modality per its
/// schedule. Clean draws and corruption noise come from separate streams of
/// the same seed, so the underlying samples do not depend on the schedule.
pub fn gen_stream<T: Scalar>(spec: &TaskSpec, cfg: &StreamConfig) -> Result<Stream<T>> {
    cfg.validate()?;
    let task = Task::new(*spec)?;
    let mut draw_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let mut out = Stream { batches: Vec::new(), labels: Vec::new(), corruption: Vec::new() };
    for t in 1..=cfg.batches {
        let set = task.gen_labeled::<T, _>(cfg.batch_size, &mut draw_rng);
        let (ca, cv) = (cfg.audio.at(t), cfg.video.at(t));
        let audio = set.audio.iter().map(|x| corrupt(x, &ca, &mut noise_rng)).collect();
        let video = set.video.iter().map(|x| corrupt(x, &cv, &mut noise_rng)).collect();
        out.batches.push(Batch { audio, video });
        out.labels.push(set.labels);
        out.corruption.push([ca, cv]);
    }
    Ok(out)
}
