//! Optimization loops for both stages, checkpoints, configuration and the
//! ablation grid.
//!
//! Every run draws from one ChaCha8 stream seeded by the config, in this
//! order: the validation split, parameter initialization, then one shuffle
//! of the training utterances per epoch.

mod ablation;
mod adam;
mod checkpoint;
mod config;
mod mdn_stage;
mod sfe_stage;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::error::{Error, Result};

pub use ablation::{
    component_trend, memory_trend, regression_trend, render_report, run_ablation, AblationGrid,
    AblationRow, TrendCheck,
};
pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_pairs, Stage, TrainConfig};
pub use mdn_stage::{reference_features, train_mdn, InferenceRule, Predictor};
pub use sfe_stage::{identity_eer, train_sfe, SfeBundle};

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub const METRIC_LOG_HEADER: &str = "epoch\tsplit\tmetric\tvalue";

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.epoch, self.split, self.metric, self.value
        )
    }
}

impl MetricRecord {
    fn new(epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricRecord {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// Parses a tab-separated metric log; the header line is optional.
pub fn parse_metric_log(text: &str) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line == METRIC_LOG_HEADER {
            continue;
        }
        let bad = || Error::Config(format!("metric log line {}: `{line}`", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(MetricRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            split: f[1].into(),
            metric: f[2].into(),
            value: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// State to continue from; its config must match the run's.
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
    /// Pretrained feature extractor for the MDN stage.
    pub sfe: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best state seen in this invocation, if any epoch improved on the
    /// resumed best.
    pub best: Option<Checkpoint>,
    pub last: Checkpoint,
    pub log: Vec<MetricRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

pub fn train(
    config: &TrainConfig,
    data: &[Utterance],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    match config.stage {
        Stage::Sfe => train_sfe(config, data, opts),
        Stage::Mdn => train_mdn(config, data, opts),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Holds out `max(1, round(fraction * n))` utterances (none when fewer than
/// two exist or `fraction` is zero). Speakers are shuffled internally and
/// dealt round-robin, so the held-out set spans as many speakers as it can.
pub fn split_by_speaker(data: &[Utterance], fraction: f64, rng: &mut ChaCha8Rng) -> Split {
    let n = data.len();
    let n_val = if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in data.iter().enumerate() {
        groups.entry(u.speaker_id.as_str()).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    for g in &mut groups {
        g.shuffle(rng);
    }
    let mut dealt = Vec::with_capacity(n);
    for round in 0.. {
        let before = dealt.len();
        dealt.extend(groups.iter().filter_map(|g| g.get(round)));
        if dealt.len() == before {
            break;
        }
    }
    let mut val = dealt[..n_val].to_vec();
    let mut train = dealt[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Split { train, val }
}

/// The split a run with `config` trains and validates on.
pub fn config_split(config: &TrainConfig, data: &[Utterance]) -> Split {
    use rand::SeedableRng;
    split_by_speaker(
        data,
        config.val_fraction,
        &mut ChaCha8Rng::seed_from_u64(config.seed),
    )
}

/// Shuffles `items` and chunks them into batches of `size`, folding a
/// trailing batch smaller than `min_last` into its predecessor.
fn shuffled_batches(
    items: &[usize],
    size: usize,
    min_last: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order = items.to_vec();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < min_last) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

pub(crate) fn state_tensor(name: &str, v: f64) -> (String, crate::autodiff::Tensor) {
    (name.to_string(), crate::autodiff::Tensor::scalar(v))
}

pub(crate) fn check_resume(config: &TrainConfig, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.config_text != config.to_text() {
        return Err(Error::Checkpoint(
            "resume checkpoint was written with a different config".into(),
        ));
    }
    Ok(())
}
