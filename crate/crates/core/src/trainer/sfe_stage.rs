use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::FbankSequence;
use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::data::{dataset_template, Utterance};
use crate::error::{Error, Result};
use crate::geometry::LandmarkFrame;
use crate::metrics::{eer, ScoredTrial};
use crate::nn::Standardizer;
use crate::sfe::{content_features, identity_features, SfeExample, SfeModel};

use super::{
    check_resume, shuffled_batches, split_by_speaker, state_tensor, Adam, AdamConfig, Checkpoint,
    MetricRecord, RngState, Stage, TrainConfig, TrainOptions, TrainOutcome,
};

pub(crate) fn frame_tensor(frame: &LandmarkFrame) -> Tensor {
    Tensor::matrix(frame.len(), 2, frame.flat()).expect("non-empty frame")
}

pub(crate) fn frame_from_tensor(t: &Tensor) -> Result<LandmarkFrame> {
    if t.rank() != 2 || t.cols() != 2 {
        return Err(Error::Checkpoint(format!(
            "template must be L x 2, got {:?}",
            t.shape()
        )));
    }
    LandmarkFrame::from_flat(t.data())
}

fn norm_from(ckpt: &Checkpoint, name: &str) -> Result<Standardizer> {
    Standardizer::from_tensor(ckpt.tensor(name)?)
}

/// A feature extractor with the normalization fitted on its training split.
#[derive(Clone, Debug)]
pub struct SfeBundle {
    pub config: TrainConfig,
    pub model: SfeModel,
    pub store: ParamStore,
    pub fbank_norm: Standardizer,
    pub content_norm: Standardizer,
    pub identity_norm: Standardizer,
    pub template: LandmarkFrame,
}

impl SfeBundle {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        if config.stage != Stage::Sfe {
            return Err(Error::Checkpoint(format!(
                "expected a feature-extractor checkpoint, got stage `{}`",
                config.stage
            )));
        }
        let mut store = ParamStore::new();
        let model = SfeModel::new(
            config.sfe_config(),
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        store.load_values(&ckpt.tensors)?;
        Ok(SfeBundle {
            config,
            model,
            store,
            fbank_norm: norm_from(ckpt, "norm/fbank")?,
            content_norm: norm_from(ckpt, "norm/sfe_content")?,
            identity_norm: norm_from(ckpt, "norm/sfe_identity")?,
            template: frame_from_tensor(ckpt.tensor("template")?)?,
        })
    }

    /// Parameters, normalizers and template.
    pub fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.store.snapshot();
        out.push(("norm/fbank".into(), self.fbank_norm.to_tensor()?));
        out.push(("norm/sfe_content".into(), self.content_norm.to_tensor()?));
        out.push(("norm/sfe_identity".into(), self.identity_norm.to_tensor()?));
        out.push(("template".into(), frame_tensor(&self.template)));
        Ok(out)
    }

    /// Content (`n_visual x C`) and identity (`C`) features of raw fbank.
    pub fn features(&self, fbank: &FbankSequence, n_visual: usize) -> Result<(Tensor, Vec<f64>)> {
        let x = self.fbank_norm.apply_matrix(&fbank.frames)?;
        self.model.features(&self.store, &x, n_visual)
    }

    pub fn example(&self, utt: &Utterance) -> Result<SfeExample> {
        let aligned = utt.aligned(&self.template)?;
        let content: Vec<Vec<f64>> = aligned
            .iter()
            .map(|a| {
                self.content_norm
                    .apply(&content_features(a, &self.template))
            })
            .collect();
        let identity = self
            .identity_norm
            .apply(&identity_features(&aligned, &self.template));
        Ok(SfeExample {
            fbank: self.fbank_norm.apply_matrix(&utt.fbank.frames)?,
            content_target: Tensor::from_rows(&content)?,
            identity_target: Tensor::matrix(1, identity.len(), identity)?,
        })
    }
}

/// Speaker-verification EER over every pair of `utts`, scored by cosine
/// similarity of identity features. `None` without both same-speaker and
/// different-speaker pairs.
pub fn identity_eer(bundle: &SfeBundle, utts: &[&Utterance]) -> Result<Option<f64>> {
    let feats = utts
        .iter()
        .map(|u| Ok(bundle.features(&u.fbank, u.num_frames())?.1))
        .collect::<Result<Vec<_>>>()?;
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(f64::MIN_POSITIVE)
    };
    let mut trials = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            trials.push(ScoredTrial {
                score: cos(&feats[i], &feats[j]),
                is_same: utts[i].speaker_id == utts[j].speaker_id,
            });
        }
    }
    let pos = trials.iter().filter(|t| t.is_same).count();
    if pos == 0 || pos == trials.len() {
        return Ok(None);
    }
    eer(&trials).map(Some)
}

struct SfeLosses {
    total: f64,
    content: f64,
    identity: f64,
}

/// Size-weighted mean loss over fixed, unshuffled batches of `indices`.
fn eval_loss(
    bundle: &SfeBundle,
    examples: &[SfeExample],
    indices: &[usize],
    batch: usize,
) -> Result<SfeLosses> {
    let mut acc = SfeLosses {
        total: 0.0,
        content: 0.0,
        identity: 0.0,
    };
    let mut chunks: Vec<Vec<usize>> = indices.chunks(batch).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let tail = chunks.pop().expect("non-empty");
        chunks.last_mut().expect("non-empty").extend(tail);
    }
    for c in &chunks {
        let exs: Vec<SfeExample> = c.iter().map(|&i| examples[i].clone()).collect();
        let mut tape = Tape::new();
        let l = bundle.model.loss(&mut tape, &bundle.store, &exs)?;
        let w = c.len() as f64 / indices.len() as f64;
        acc.total += w * tape.scalar(l.total);
        acc.content += w * tape.scalar(l.content);
        acc.identity += w * tape.scalar(l.identity);
    }
    Ok(acc)
}

pub fn train_sfe(
    config: &TrainConfig,
    data: &[Utterance],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if config.stage != Stage::Sfe {
        return Err(Error::Config("train_sfe needs stage = sfe".into()));
    }
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let split = split_by_speaker(data, config.val_fraction, &mut rng);
    if split.train.len() < 2 {
        return Err(Error::Config(format!(
            "feature-extractor training needs at least 2 training utterances, got {}",
            split.train.len()
        )));
    }
    let train_utts: Vec<Utterance> = split.train.iter().map(|&i| data[i].clone()).collect();
    let template = dataset_template(&train_utts)?;
    let fbank_norm = Standardizer::fit(
        train_utts
            .iter()
            .flat_map(|u| u.fbank.frames.data().chunks(u.fbank.frames.cols())),
    )?;
    let aligned: Vec<_> = train_utts
        .iter()
        .map(|u| u.aligned(&template))
        .collect::<Result<_>>()?;
    let content_rows: Vec<Vec<f64>> = aligned
        .iter()
        .flat_map(|seq| seq.iter().map(|a| content_features(a, &template)))
        .collect();
    let identity_rows: Vec<Vec<f64>> = aligned
        .iter()
        .map(|seq| identity_features(seq, &template))
        .collect();

    let mut store = ParamStore::new();
    let model = SfeModel::new(config.sfe_config(), &mut store, &mut rng)?;
    let mut bundle = SfeBundle {
        config: config.clone(),
        model,
        store,
        fbank_norm,
        content_norm: Standardizer::fit(content_rows.iter().map(Vec::as_slice))?,
        identity_norm: Standardizer::fit(identity_rows.iter().map(Vec::as_slice))?,
        template,
    };
    let examples: Vec<SfeExample> = data
        .iter()
        .map(|u| bundle.example(u))
        .collect::<Result<_>>()?;
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &bundle.store);
    let mut start = 0;
    let mut best_metric = f64::INFINITY;
    let mut best_epoch = 0;
    if let Some(ck) = &opts.resume {
        check_resume(config, ck)?;
        bundle.store.load_values(&ck.tensors)?;
        adam = Adam::from_tensors(adam_cfg, &bundle.store, &ck.tensors)?;
        rng = ck.rng.restore();
        start = ck.tensor("train/epoch")?.item() as usize;
        best_metric = ck.tensor("train/best_metric")?.item();
        best_epoch = ck.tensor("train/best_epoch")?.item() as usize;
    }

    let val_utts: Vec<&Utterance> = split.val.iter().map(|&i| &data[i]).collect();
    let mut log = Vec::new();
    let mut best = None;
    let evaluate = |bundle: &SfeBundle, epoch: usize, log: &mut Vec<MetricRecord>| -> Result<f64> {
        let tr = eval_loss(bundle, &examples, &split.train, config.batch_size)?;
        log.push(MetricRecord::new(epoch, "train", "loss", tr.total));
        log.push(MetricRecord::new(
            epoch,
            "train",
            "content_loss",
            tr.content,
        ));
        log.push(MetricRecord::new(
            epoch,
            "train",
            "identity_loss",
            tr.identity,
        ));
        let mut metric = tr.total;
        if split.val.len() >= 2 {
            let va = eval_loss(bundle, &examples, &split.val, config.batch_size)?;
            log.push(MetricRecord::new(epoch, "val", "loss", va.total));
            log.push(MetricRecord::new(epoch, "val", "content_loss", va.content));
            log.push(MetricRecord::new(
                epoch,
                "val",
                "identity_loss",
                va.identity,
            ));
            metric = va.total;
            if let Some(e) = identity_eer(bundle, &val_utts)? {
                log.push(MetricRecord::new(epoch, "val", "eer", e));
            }
        }
        Ok(metric)
    };
    let snapshot = |bundle: &SfeBundle,
                    adam: &Adam,
                    rng: &ChaCha8Rng,
                    epoch: usize,
                    best_metric: f64,
                    best_epoch: usize|
     -> Result<Checkpoint> {
        let mut tensors = bundle.tensors()?;
        tensors.extend(adam.to_tensors(&bundle.store));
        tensors.push(state_tensor("train/epoch", epoch as f64));
        tensors.push(state_tensor("train/best_metric", best_metric));
        tensors.push(state_tensor("train/best_epoch", best_epoch as f64));
        Ok(Checkpoint {
            config_text: config.to_text(),
            rng: RngState::capture(rng),
            tensors,
        })
    };

    if start == 0 {
        evaluate(&bundle, 0, &mut log)?;
    }
    let mut last = snapshot(&bundle, &adam, &rng, start, best_metric, best_epoch)?;
    let end = opts
        .stop_after
        .map_or(config.epochs, |s| s.min(config.epochs));
    for epoch in start + 1..=end {
        for batch in shuffled_batches(&split.train, config.batch_size, 2, &mut rng) {
            let exs: Vec<SfeExample> = batch.iter().map(|&i| examples[i].clone()).collect();
            bundle.store.zero_grad();
            let mut tape = Tape::new();
            let loss = bundle.model.loss(&mut tape, &bundle.store, &exs)?;
            tape.backward_into(loss.total, &mut bundle.store)?;
            adam.step(&mut bundle.store)?;
        }
        let metric = evaluate(&bundle, epoch, &mut log)?;
        let improved = metric < best_metric;
        if improved {
            best_metric = metric;
            best_epoch = epoch;
        }
        last = snapshot(&bundle, &adam, &rng, epoch, best_metric, best_epoch)?;
        if improved {
            best = Some(last.clone());
        }
        log::debug!("sfe epoch {epoch}: selection metric {metric:.6}");
    }
    Ok(TrainOutcome {
        best,
        last,
        log,
        best_epoch,
        best_metric,
    })
}
