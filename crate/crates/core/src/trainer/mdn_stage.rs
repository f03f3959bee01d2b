use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::FbankSequence;
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::data::{dataset_template, Utterance};
use crate::error::{Error, Result};
use crate::geometry::LandmarkFrame;
use crate::mdn::{decomposed_features, infer_max, infer_mixture, mdn_inputs, MdnModel};
use crate::metrics::track_metrics;
use crate::nn::{mean_rows, Standardizer};
use crate::sfe::{pooling_matrix, SfeModel};

use super::sfe_stage::{frame_from_tensor, frame_tensor, SfeBundle};
use super::{
    check_resume, shuffled_batches, split_by_speaker, state_tensor, Adam, AdamConfig, Checkpoint,
    MetricRecord, RngState, Stage, TrainConfig, TrainOptions, TrainOutcome,
};

/// Which mixture summary becomes the prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InferenceRule {
    /// Mean of the highest-weight component.
    #[default]
    Max,
    /// Weight-averaged mean.
    Mixture,
}

impl fmt::Display for InferenceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceRule::Max => "max",
            InferenceRule::Mixture => "mixture",
        })
    }
}

impl FromStr for InferenceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(InferenceRule::Max),
            "mixture" => Ok(InferenceRule::Mixture),
            other => Err(Error::Config(format!(
                "inference rule must be max or mixture, got `{other}`"
            ))),
        }
    }
}

/// Decomposed features of a reference frame given in image units, scaled
/// by its own inter-ocular distance.
pub fn reference_features(
    reference_px: &LandmarkFrame,
    template: &LandmarkFrame,
) -> Result<Vec<f64>> {
    let iod = reference_px.inter_ocular();
    if !(iod > 0.0 && iod.is_finite()) {
        return Err(Error::Degenerate(format!(
            "reference inter-ocular distance is {iod}"
        )));
    }
    decomposed_features(&reference_px.scaled(1.0 / iod), template)
}

/// Keys that fix the feature-extractor architecture.
const SFE_ARCH_KEYS: [&str; 7] = [
    "memory",
    "hidden",
    "feature_dim",
    "content_slots",
    "identity_slots",
    "addresser_hidden",
    "target_hidden",
];

/// Everything needed to turn audio and a reference frame into a landmark
/// track. The store holds the feature-extractor parameters (unless
/// bypassed) followed by the MDN parameters.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub sfe: Option<SfeModel>,
    pub fbank_norm: Standardizer,
    pub mdn: MdnModel,
    pub input_norm: Standardizer,
    pub target_norm: Standardizer,
    pub template: LandmarkFrame,
}

fn feature_width(config: &TrainConfig) -> usize {
    if config.sfe_bypass {
        crate::sfe::SfeConfig::default().input_dim
    } else {
        config.feature_dim
    }
}

fn input_width(config: &TrainConfig, n_points: usize) -> usize {
    let c = feature_width(config);
    (2 * config.context_frames + 2) * c + 2 * n_points + 3
}

impl Predictor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        if config.stage != Stage::Mdn {
            return Err(Error::Checkpoint(format!(
                "expected an MDN checkpoint, got stage `{}`",
                config.stage
            )));
        }
        let template = frame_from_tensor(ckpt.tensor("template")?)?;
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let sfe = if config.sfe_bypass {
            None
        } else {
            Some(SfeModel::new(config.sfe_config(), &mut store, &mut dummy)?)
        };
        let n = template.len();
        let mdn = MdnModel::new(
            config.mdn_config(),
            input_width(&config, n),
            config.regression.output_dim(n),
            &mut store,
            &mut dummy,
        )?;
        store.load_values(&ckpt.tensors)?;
        Ok(Predictor {
            store,
            sfe,
            fbank_norm: Standardizer::from_tensor(ckpt.tensor("norm/fbank")?)?,
            mdn,
            input_norm: Standardizer::from_tensor(ckpt.tensor("norm/mdn_input")?)?,
            target_norm: Standardizer::from_tensor(ckpt.tensor("norm/mdn_target")?)?,
            template,
            config,
        })
    }

    fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.store.snapshot();
        out.push(("norm/fbank".into(), self.fbank_norm.to_tensor()?));
        out.push(("norm/mdn_input".into(), self.input_norm.to_tensor()?));
        out.push(("norm/mdn_target".into(), self.target_norm.to_tensor()?));
        out.push(("template".into(), frame_tensor(&self.template)));
        Ok(out)
    }

    /// Content (`n_visual x C`) and identity (`C`) speech features. Without
    /// a feature extractor these are pooled standardized fbank frames.
    pub fn speech_features(
        &self,
        fbank: &FbankSequence,
        n_visual: usize,
    ) -> Result<(Tensor, Vec<f64>)> {
        let x = self.fbank_norm.apply_matrix(&fbank.frames)?;
        match &self.sfe {
            Some(model) => model.features(&self.store, &x, n_visual),
            None => {
                let mut tape = Tape::new();
                let p = tape.constant(pooling_matrix(x.rows(), n_visual)?);
                let xv = tape.constant(x);
                let pooled = tape.matmul(p, xv)?;
                let id = mean_rows(&mut tape, pooled)?;
                Ok((tape.value(pooled).clone(), tape.value(id).data().to_vec()))
            }
        }
    }

    /// Standardized MDN inputs, one row per visual frame.
    pub fn inputs(
        &self,
        fbank: &FbankSequence,
        n_visual: usize,
        reference_px: &LandmarkFrame,
    ) -> Result<Tensor> {
        let (content, identity) = self.speech_features(fbank, n_visual)?;
        let r = reference_features(reference_px, &self.template)?;
        let x = mdn_inputs(&content, &identity, &r, self.config.context_frames)?;
        self.input_norm.apply_matrix(&x)
    }

    /// Landmark track in the reference frame's image units.
    pub fn predict(
        &self,
        fbank: &FbankSequence,
        n_visual: usize,
        reference_px: &LandmarkFrame,
        rule: InferenceRule,
    ) -> Result<Vec<LandmarkFrame>> {
        let x = self.inputs(fbank, n_visual, reference_px)?;
        self.decode(&x, reference_px.inter_ocular(), rule)
    }

    fn decode(&self, x: &Tensor, scale: f64, rule: InferenceRule) -> Result<Vec<LandmarkFrame>> {
        self.mdn
            .mixtures(&self.store, x)?
            .iter()
            .map(|p| {
                let v = match rule {
                    InferenceRule::Max => infer_max(p),
                    InferenceRule::Mixture => infer_mixture(p),
                };
                let (frame, _) = self
                    .config
                    .regression
                    .decode(&self.target_norm.invert(&v), &self.template)?;
                Ok(frame.scaled(scale))
            })
            .collect()
    }

    /// Builds standardized inputs on `tape` so gradients reach the feature
    /// extractor. Matches [`Predictor::inputs`] value for value.
    fn inputs_on_tape(&self, tape: &mut Tape, utt: &Utterance) -> Result<Var> {
        let model = self
            .sfe
            .as_ref()
            .ok_or_else(|| Error::contract("no feature extractor to fine-tune"))?;
        let t = utt.num_frames();
        let x = self.fbank_norm.apply_matrix(&utt.fbank.frames)?;
        let out = model.encode(tape, &self.store, &x, t)?;
        let c = self.config.context_frames;
        let mut parts = Vec::with_capacity(2 * c + 3);
        for k in 0..=2 * c {
            let mut sel = vec![0.0; t * t];
            for row in 0..t {
                sel[row * t + (row + k).saturating_sub(c).min(t - 1)] = 1.0;
            }
            let s = tape.constant(Tensor::matrix(t, t, sel)?);
            parts.push(tape.matmul(s, out.content)?);
        }
        let ones = tape.constant(Tensor::full(&[t, 1], 1.0));
        parts.push(tape.matmul(ones, out.identity)?);
        let r = reference_features(&utt.landmarks_px[0], &self.template)?;
        let rows: Vec<Vec<f64>> = vec![r; t];
        parts.push(tape.constant(Tensor::from_rows(&rows)?));
        let raw = tape.concat(&parts, 1)?;
        let tile = |v: &[f64]| Tensor::from_rows(&vec![v.to_vec(); t]);
        let mean = tape.constant(tile(&self.input_norm.mean)?);
        let std = tape.constant(tile(&self.input_norm.std)?);
        let centered = tape.sub(raw, mean)?;
        tape.div(centered, std)
    }
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let rows: usize = parts.iter().map(|t| t.rows()).sum();
    Tensor::matrix(
        rows,
        cols,
        parts
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect(),
    )
}

pub fn train_mdn(
    config: &TrainConfig,
    data: &[Utterance],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if config.stage != Stage::Mdn {
        return Err(Error::Config("train_mdn needs stage = mdn".into()));
    }
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if config.finetune_sfe && config.sfe_bypass {
        return Err(Error::Config(
            "finetune_sfe and sfe_bypass are mutually exclusive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let split = split_by_speaker(data, config.val_fraction, &mut rng);
    let train_utts: Vec<Utterance> = split.train.iter().map(|&i| data[i].clone()).collect();
    let template = dataset_template(&train_utts)?;

    let mut store = ParamStore::new();
    let (sfe, fbank_norm) = if config.sfe_bypass {
        let cols = train_utts[0].fbank.frames.cols();
        let norm = Standardizer::fit(
            train_utts
                .iter()
                .flat_map(|u| u.fbank.frames.data().chunks(cols)),
        )?;
        (None, norm)
    } else {
        let ck = opts.sfe.as_ref().ok_or_else(|| {
            Error::Config(
                "the MDN stage needs a feature-extractor checkpoint or sfe_bypass = true".into(),
            )
        })?;
        let bundle = SfeBundle::from_checkpoint(ck)?;
        for key in SFE_ARCH_KEYS {
            let (want, got) = (bundle.config.get(key)?, config.get(key)?);
            if want != got {
                return Err(Error::Config(format!(
                    "`{key}` is {got} but the feature-extractor checkpoint was trained with {want}"
                )));
            }
        }
        let model = SfeModel::new(
            config.sfe_config(),
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        store.load_values(&bundle.store.snapshot())?;
        (Some(model), bundle.fbank_norm)
    };

    let n_points = template.len();
    let mode = config.regression;
    // Inputs need the final MDN to standardize, so build a provisional
    // predictor with identity normalizers first.
    let mut predictor = Predictor {
        config: config.clone(),
        store,
        sfe,
        fbank_norm,
        mdn: MdnModel::new(
            config.mdn_config(),
            input_width(config, n_points),
            mode.output_dim(n_points),
            &mut ParamStore::new(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?,
        input_norm: Standardizer::identity(input_width(config, n_points)),
        target_norm: Standardizer::identity(mode.output_dim(n_points)),
        template,
    };
    let raw_x: Vec<Tensor> = data
        .iter()
        .map(|u| predictor.inputs(&u.fbank, u.num_frames(), &u.landmarks_px[0]))
        .collect::<Result<_>>()?;
    let raw_y: Vec<Tensor> = data
        .iter()
        .map(|u| {
            let rows = u
                .landmarks
                .iter()
                .map(|f| mode.encode(f, &predictor.template))
                .collect::<Result<Vec<_>>>()?;
            Tensor::from_rows(&rows)
        })
        .collect::<Result<_>>()?;
    let fit = |ts: &[Tensor]| {
        Standardizer::fit(
            split
                .train
                .iter()
                .flat_map(|&i| ts[i].data().chunks(ts[i].cols())),
        )
    };
    predictor.input_norm = fit(&raw_x)?;
    predictor.target_norm = fit(&raw_y)?;
    predictor.mdn = MdnModel::new(
        config.mdn_config(),
        input_width(config, n_points),
        mode.output_dim(n_points),
        &mut predictor.store,
        &mut rng,
    )?;
    let xs: Vec<Tensor> = raw_x
        .iter()
        .map(|x| predictor.input_norm.apply_matrix(x))
        .collect::<Result<_>>()?;
    let ys: Vec<Tensor> = raw_y
        .iter()
        .map(|y| predictor.target_norm.apply_matrix(y))
        .collect::<Result<_>>()?;

    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &predictor.store);
    let mut start = 0;
    let mut best_metric = f64::INFINITY;
    let mut best_epoch = 0;
    if let Some(ck) = &opts.resume {
        check_resume(config, ck)?;
        predictor.store.load_values(&ck.tensors)?;
        adam = Adam::from_tensors(adam_cfg, &predictor.store, &ck.tensors)?;
        rng = ck.rng.restore();
        start = ck.tensor("train/epoch")?.item() as usize;
        best_metric = ck.tensor("train/best_metric")?.item();
        best_epoch = ck.tensor("train/best_epoch")?.item() as usize;
    }

    let finetune = config.finetune_sfe;
    let nll = |p: &Predictor, idx: &[usize]| -> Result<f64> {
        let fresh: Vec<Tensor>;
        let parts: Vec<&Tensor> = if finetune {
            fresh = idx
                .iter()
                .map(|&i| {
                    p.inputs(
                        &data[i].fbank,
                        data[i].num_frames(),
                        &data[i].landmarks_px[0],
                    )
                })
                .collect::<Result<_>>()?;
            fresh.iter().collect()
        } else {
            idx.iter().map(|&i| &xs[i]).collect()
        };
        let y = stack(&idx.iter().map(|&i| &ys[i]).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let xv = tape.constant(stack(&parts)?);
        let yv = tape.constant(y);
        let l = p.mdn.loss(&mut tape, &p.store, xv, yv)?;
        Ok(tape.scalar(l))
    };
    let evaluate = |p: &Predictor, epoch: usize, log: &mut Vec<MetricRecord>| -> Result<f64> {
        let train_nll = nll(p, &split.train)?;
        log.push(MetricRecord::new(epoch, "train", "nll", train_nll));
        if split.val.is_empty() {
            return Ok(train_nll);
        }
        log.push(MetricRecord::new(epoch, "val", "nll", nll(p, &split.val)?));
        let (mut lmd, mut rd) = (0.0, 0.0);
        for &i in &split.val {
            let u = &data[i];
            let gen = p.predict(
                &u.fbank,
                u.num_frames(),
                &u.landmarks_px[0],
                InferenceRule::Max,
            )?;
            let m = track_metrics(&gen, &u.landmarks_px)?;
            lmd += m.lmd;
            rd += m.rd;
        }
        let n = split.val.len() as f64;
        log.push(MetricRecord::new(epoch, "val", "lmd", lmd / n));
        log.push(MetricRecord::new(epoch, "val", "rd", rd / n));
        Ok(lmd / n)
    };
    let snapshot = |p: &Predictor,
                    adam: &Adam,
                    rng: &ChaCha8Rng,
                    epoch: usize,
                    best_metric: f64,
                    best_epoch: usize|
     -> Result<Checkpoint> {
        let mut tensors = p.tensors()?;
        tensors.extend(adam.to_tensors(&p.store));
        tensors.push(state_tensor("train/epoch", epoch as f64));
        tensors.push(state_tensor("train/best_metric", best_metric));
        tensors.push(state_tensor("train/best_epoch", best_epoch as f64));
        Ok(Checkpoint {
            config_text: config.to_text(),
            rng: RngState::capture(rng),
            tensors,
        })
    };

    let mut log = Vec::new();
    let mut best = None;
    if start == 0 {
        evaluate(&predictor, 0, &mut log)?;
    }
    let mut last = snapshot(&predictor, &adam, &rng, start, best_metric, best_epoch)?;
    let end = opts
        .stop_after
        .map_or(config.epochs, |s| s.min(config.epochs));
    for epoch in start + 1..=end {
        for batch in shuffled_batches(&split.train, config.batch_size, 1, &mut rng) {
            predictor.store.zero_grad();
            let mut tape = Tape::new();
            let x = if finetune {
                let rows = batch
                    .iter()
                    .map(|&i| predictor.inputs_on_tape(&mut tape, &data[i]))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat(&rows, 0)?
            } else {
                tape.constant(stack(&batch.iter().map(|&i| &xs[i]).collect::<Vec<_>>())?)
            };
            let y = tape.constant(stack(&batch.iter().map(|&i| &ys[i]).collect::<Vec<_>>())?);
            let loss = predictor.mdn.loss(&mut tape, &predictor.store, x, y)?;
            tape.backward_into(loss, &mut predictor.store)?;
            adam.step(&mut predictor.store)?;
        }
        let metric = evaluate(&predictor, epoch, &mut log)?;
        let improved = metric < best_metric;
        if improved {
            best_metric = metric;
            best_epoch = epoch;
        }
        last = snapshot(&predictor, &adam, &rng, epoch, best_metric, best_epoch)?;
        if improved {
            best = Some(last.clone());
        }
        log::debug!("mdn epoch {epoch}: selection metric {metric:.6}");
    }
    Ok(TrainOutcome {
        best,
        last,
        log,
        best_epoch,
        best_metric,
    })
}
