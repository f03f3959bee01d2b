//! Speech feature extractor: a bidirectional GRU over fbank frames feeding
//! content and identity memory readouts, trained contrastively against a
//! landmark-derived target encoder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::FBANK_PER_VISUAL;
use crate::error::{Error, Result};
use crate::geometry::{AlignedDecomposition, LandmarkFrame};
use crate::nn::{add_row, glorot, mean_rows, Mlp};

/// Which memory readouts sit between the encoder and the features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MemoryMode {
    /// No memory: perceptrons project straight to the feature space.
    Wo,
    /// One bank shared by content and identity, with separate addressers.
    W,
    /// Separate content and identity banks.
    Cs,
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryMode::Wo => "wo",
            MemoryMode::W => "w",
            MemoryMode::Cs => "cs",
        })
    }
}

impl FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wo" => Ok(MemoryMode::Wo),
            "w" => Ok(MemoryMode::W),
            "cs" => Ok(MemoryMode::Cs),
            other => Err(Error::Config(format!(
                "memory mode must be wo, w or cs, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SfeConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub content_slots: usize,
    pub identity_slots: usize,
    pub addresser_hidden: usize,
    pub target_hidden: usize,
    pub content_target_dim: usize,
    pub identity_target_dim: usize,
    pub memory: MemoryMode,
}

impl Default for SfeConfig {
    fn default() -> Self {
        SfeConfig {
            input_dim: 80,
            hidden: 64,
            feature_dim: 64,
            content_slots: 8,
            identity_slots: 8,
            addresser_hidden: 64,
            target_hidden: 64,
            content_target_dim: 136,
            identity_target_dim: 139,
            memory: MemoryMode::Cs,
        }
    }
}

impl SfeConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("content_slots", self.content_slots),
            ("identity_slots", self.identity_slots),
            ("addresser_hidden", self.addresser_hidden),
            ("target_hidden", self.target_hidden),
            ("content_target_dim", self.content_target_dim),
            ("identity_target_dim", self.identity_target_dim),
        ];
        match dims.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("sfe {name} must be at least 1"))),
            None => Ok(()),
        }
    }
}

/// GRU cell with per-gate input weights `W_*` (`F x H`), recurrent weights
/// `U_*` (`H x H`) and biases `b_*` (`1 x H`), gates ordered z, r, n.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub input: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["z", "r", "n"];

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut add =
            |kind: &str, g: usize, t: Tensor| store.add(format!("{name}/{kind}_{}", GATES[g]), t);
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for g in 0..3 {
            w.push(add("W", g, glorot(rng, input, hidden)?)?);
        }
        for g in 0..3 {
            u.push(add("U", g, glorot(rng, hidden, hidden)?)?);
        }
        for g in 0..3 {
            b.push(add("b", g, Tensor::zeros(&[1, hidden]))?);
        }
        Ok(GruCell {
            w: [w[0], w[1], w[2]],
            u: [u[0], u[1], u[2]],
            b: [b[0], b[1], b[2]],
            input,
            hidden,
        })
    }

    /// Runs the recurrence over the rows of `x` (`T x F`) from a zero state,
    /// back to front when `reverse`. Row `t` of the `T x H` result is the
    /// state after consuming input row `t`.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let t_len = tape.shape(x)[0];
        let mut proj = [x; 3];
        let mut u = [x; 3];
        for g in 0..3 {
            let w = tape.param(store, self.w[g]);
            let b = tape.param(store, self.b[g]);
            let xw = tape.matmul(x, w)?;
            proj[g] = add_row(tape, xw, b)?;
            u[g] = tape.param(store, self.u[g]);
        }
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut states = vec![h; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let xz = tape.row(proj[0], t)?;
            let xr = tape.row(proj[1], t)?;
            let xn = tape.row(proj[2], t)?;
            let hz = tape.matmul(h, u[0])?;
            let hr = tape.matmul(h, u[1])?;
            let hn = tape.matmul(h, u[2])?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, hn)?;
            let n = tape.add(xn, rh)?;
            let n = tape.tanh(n);
            // (1 - z) * n + z * h  ==  n + z * (h - n)
            let d = tape.sub(h, n)?;
            let zd = tape.mul(z, d)?;
            h = tape.add(n, zd)?;
            states[t] = h;
        }
        tape.concat(&states, 0)
    }
}

/// `T x 2H` concatenation of forward and backward GRU states.
pub fn bigru_encode(
    tape: &mut Tape,
    store: &ParamStore,
    fwd: &GruCell,
    bwd: &GruCell,
    x: Var,
) -> Result<Var> {
    let f = fwd.run(tape, store, x, false)?;
    let b = bwd.run(tape, store, x, true)?;
    tape.concat(&[f, b], 1)
}

/// `n_visual x n_fbank` averaging matrix: visual frame `v` averages fbank
/// frames `4v..4v+4` clipped to the sequence, or the last frame if the
/// audio ends early.
pub fn pooling_matrix(n_fbank: usize, n_visual: usize) -> Result<Tensor> {
    if n_fbank == 0 || n_visual == 0 {
        return Err(Error::contract(
            "pooling needs at least one frame on both sides",
        ));
    }
    let mut m = vec![0.0; n_visual * n_fbank];
    for v in 0..n_visual {
        let start = (v * FBANK_PER_VISUAL).min(n_fbank - 1);
        let end = ((v + 1) * FBANK_PER_VISUAL).clamp(start + 1, n_fbank);
        let w = 1.0 / (end - start) as f64;
        for t in start..end {
            m[v * n_fbank + t] = w;
        }
    }
    Tensor::matrix(n_visual, n_fbank, m)
}

/// `p . M`: rows of `p` (`n x k`) mix the `k` slots of `slots` (`k x C`).
pub fn memory_read(tape: &mut Tape, p: Var, slots: Var) -> Result<Var> {
    tape.matmul(p, slots)
}

/// Learnable slots addressed by a softmax over perceptron logits.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub slots: ParamId,
    pub addresser: Mlp,
}

impl MemoryBank {
    /// Addressing weights (`n x k`) and reads (`n x C`) for each row of `h`.
    pub fn read(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<(Var, Var)> {
        let logits = self.addresser.forward(tape, store, h)?;
        let p = tape.softmax(logits, 1)?;
        let m = tape.param(store, self.slots);
        let y = memory_read(tape, p, m)?;
        Ok((p, y))
    }
}

#[derive(Clone, Debug)]
pub enum Readout {
    Memory(MemoryBank),
    Direct(Mlp),
}

impl Readout {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<(Option<Var>, Var)> {
        match self {
            Readout::Memory(bank) => {
                let (p, y) = bank.read(tape, store, h)?;
                Ok((Some(p), y))
            }
            Readout::Direct(mlp) => Ok((None, mlp.forward(tape, store, h)?)),
        }
    }
}

/// Scale `w = softplus(raw)` and shift `b` of `exp(w * cos + b)`.
#[derive(Clone, Debug)]
pub struct SimilarityParams {
    pub raw_w: ParamId,
    pub b: ParamId,
}

pub const SIMILARITY_INIT_W: f64 = 10.0;
pub const SIMILARITY_INIT_B: f64 = -5.0;

/// Inverse of softplus.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SimilarityParams {
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        let raw_w = store.add(
            format!("{name}/raw_w"),
            Tensor::scalar(softplus_inverse(SIMILARITY_INIT_W)),
        )?;
        let b = store.add(format!("{name}/b"), Tensor::scalar(SIMILARITY_INIT_B))?;
        Ok(SimilarityParams { raw_w, b })
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> (Var, Var) {
        let raw = tape.param(store, self.raw_w);
        let w = tape.softplus(raw);
        let b = tape.param(store, self.b);
        (w, b)
    }
}

/// `exp(w * cos(u, v) + b)`.
pub fn similarity(u: &[f64], v: &[f64], w: f64, b: f64) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, c)| a * c).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt() + crate::autodiff::NORM_EPS;
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt() + crate::autodiff::NORM_EPS;
    (w * dot / (nu * nv) + b).exp()
}

/// InfoNCE over rows: row `t` of `y_hat` should match row `t` of `y`
/// against every other row of `y`. Returns the mean over rows of
/// `-log(S_tt / sum_k S_tk)` computed in log space.
pub fn contrastive_loss(tape: &mut Tape, y_hat: Var, y: Var, w: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(y_hat).to_vec(), tape.shape(y).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape {
            op: "contrastive_loss",
            left: sa,
            right: sb,
        });
    }
    let t = sa[0];
    if t < 2 {
        return Err(Error::contract(format!(
            "contrastive loss needs at least 2 rows for a negative, got {t}"
        )));
    }
    let a = tape.normalize_rows(y_hat);
    let c = tape.normalize_rows(y);
    let ct = tape.transpose(c)?;
    let cos = tape.matmul(a, ct)?;
    let scaled = tape.mul(cos, w)?;
    let z = tape.add(scaled, b)?;
    let lse = tape.logsumexp(z, 1)?;
    let eye = tape.constant(Tensor::identity(t));
    let masked = tape.mul(z, eye)?;
    let diag = tape.sum_axis(masked, 1)?;
    let per_row = tape.sub(lse, diag)?;
    Ok(tape.mean(per_row))
}

/// Flattened `p_align - template` of one frame.
pub fn content_features(a: &AlignedDecomposition, template: &LandmarkFrame) -> Vec<f64> {
    a.p_align
        .flat()
        .iter()
        .zip(template.flat())
        .map(|(p, q)| p - q)
        .collect()
}

/// Sequence mean of `[p_align - template, theta, t]`.
pub fn identity_features(seq: &[AlignedDecomposition], template: &LandmarkFrame) -> Vec<f64> {
    let d = 2 * template.len() + 3;
    let mut acc = vec![0.0; d];
    for a in seq {
        let c = content_features(a, template);
        for (x, v) in acc.iter_mut().zip(c) {
            *x += v;
        }
        acc[d - 3] += a.pose.theta;
        acc[d - 2] += a.pose.t[0];
        acc[d - 1] += a.pose.t[1];
    }
    let n = seq.len().max(1) as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    acc
}

/// One training sequence with standardized inputs.
#[derive(Clone, Debug)]
pub struct SfeExample {
    /// `T_fbank x input_dim`.
    pub fbank: Tensor,
    /// `T_visual x content_target_dim`.
    pub content_target: Tensor,
    /// `1 x identity_target_dim`.
    pub identity_target: Tensor,
}

pub struct SfeOutputs {
    /// `T_visual x 2H` pooled encoder states.
    pub pooled: Var,
    /// `T_visual x k` content addressing, absent without memory.
    pub content_probs: Option<Var>,
    /// `T_visual x C`.
    pub content: Var,
    /// `T_visual x k` identity addressing, absent without memory.
    pub identity_probs: Option<Var>,
    /// `1 x C`, the mean of the per-frame identity reads.
    pub identity: Var,
}

pub struct SfeLoss {
    pub total: Var,
    pub content: Var,
    pub identity: Var,
}

#[derive(Clone, Debug)]
pub struct SfeModel {
    pub config: SfeConfig,
    pub fwd: GruCell,
    pub bwd: GruCell,
    pub content: Readout,
    pub identity: Readout,
    pub content_target: Mlp,
    pub identity_target: Mlp,
    pub content_sim: SimilarityParams,
    pub identity_sim: SimilarityParams,
}

pub const SFE_PREFIX: &str = "sfe";

impl SfeModel {
    /// Registers every parameter under `sfe/` in a fixed order, drawing
    /// initial values from `rng`.
    pub fn new(config: SfeConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let p = SFE_PREFIX;
        let c = &config;
        let fwd = GruCell::new(store, &format!("{p}/gru_fwd"), c.input_dim, c.hidden, rng)?;
        let bwd = GruCell::new(store, &format!("{p}/gru_bwd"), c.input_dim, c.hidden, rng)?;
        let h2 = 2 * c.hidden;
        let slots = |store: &mut ParamStore, name: &str, k: usize, rng: &mut ChaCha8Rng| {
            let data = (0..k * c.feature_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            store.add(
                format!("{p}/{name}"),
                Tensor::matrix(k, c.feature_dim, data)?,
            )
        };
        let (content, identity) = match c.memory {
            MemoryMode::Wo => (
                Readout::Direct(Mlp::new(
                    store,
                    &format!("{p}/content_proj"),
                    &[h2, c.addresser_hidden, c.feature_dim],
                    rng,
                )?),
                Readout::Direct(Mlp::new(
                    store,
                    &format!("{p}/identity_proj"),
                    &[h2, c.addresser_hidden, c.feature_dim],
                    rng,
                )?),
            ),
            MemoryMode::W => {
                let shared = slots(store, "memory/slots", c.content_slots, rng)?;
                let phi_c = Mlp::new(
                    store,
                    &format!("{p}/content_addr"),
                    &[h2, c.addresser_hidden, c.content_slots],
                    rng,
                )?;
                let phi_s = Mlp::new(
                    store,
                    &format!("{p}/identity_addr"),
                    &[h2, c.addresser_hidden, c.content_slots],
                    rng,
                )?;
                (
                    Readout::Memory(MemoryBank {
                        slots: shared,
                        addresser: phi_c,
                    }),
                    Readout::Memory(MemoryBank {
                        slots: shared,
                        addresser: phi_s,
                    }),
                )
            }
            MemoryMode::Cs => {
                let mc = slots(store, "content_memory/slots", c.content_slots, rng)?;
                let phi_c = Mlp::new(
                    store,
                    &format!("{p}/content_addr"),
                    &[h2, c.addresser_hidden, c.content_slots],
                    rng,
                )?;
                let ms = slots(store, "identity_memory/slots", c.identity_slots, rng)?;
                let phi_s = Mlp::new(
                    store,
                    &format!("{p}/identity_addr"),
                    &[h2, c.addresser_hidden, c.identity_slots],
                    rng,
                )?;
                (
                    Readout::Memory(MemoryBank {
                        slots: mc,
                        addresser: phi_c,
                    }),
                    Readout::Memory(MemoryBank {
                        slots: ms,
                        addresser: phi_s,
                    }),
                )
            }
        };
        let content_target = Mlp::new(
            store,
            &format!("{p}/content_target"),
            &[c.content_target_dim, c.target_hidden, c.feature_dim],
            rng,
        )?;
        let identity_target = Mlp::new(
            store,
            &format!("{p}/identity_target"),
            &[c.identity_target_dim, c.target_hidden, c.feature_dim],
            rng,
        )?;
        let content_sim = SimilarityParams::new(store, &format!("{p}/content_sim"))?;
        let identity_sim = SimilarityParams::new(store, &format!("{p}/identity_sim"))?;
        Ok(SfeModel {
            config,
            fwd,
            bwd,
            content,
            identity,
            content_target,
            identity_target,
            content_sim,
            identity_sim,
        })
    }

    /// Encodes a standardized `T_fbank x input_dim` sequence into
    /// `n_visual` content features and one identity feature.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fbank: &Tensor,
        n_visual: usize,
    ) -> Result<SfeOutputs> {
        if fbank.rank() != 2 || fbank.cols() != self.config.input_dim {
            return Err(Error::Shape {
                op: "sfe encode",
                left: fbank.shape().to_vec(),
                right: vec![self.config.input_dim],
            });
        }
        let x = tape.constant(fbank.clone());
        let h = bigru_encode(tape, store, &self.fwd, &self.bwd, x)?;
        let pool = tape.constant(pooling_matrix(fbank.rows(), n_visual)?);
        let pooled = tape.matmul(pool, h)?;
        let (content_probs, content) = self.content.forward(tape, store, pooled)?;
        let (identity_probs, id_frames) = self.identity.forward(tape, store, pooled)?;
        let identity = mean_rows(tape, id_frames)?;
        Ok(SfeOutputs {
            pooled,
            content_probs,
            content,
            identity_probs,
            identity,
        })
    }

    /// Target-side features `(T_visual x C, 1 x C)`.
    pub fn targets(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        example: &SfeExample,
    ) -> Result<(Var, Var)> {
        let c = tape.constant(example.content_target.clone());
        let s = tape.constant(example.identity_target.clone());
        let yc = self.content_target.forward(tape, store, c)?;
        let ys = self.identity_target.forward(tape, store, s)?;
        Ok((yc, ys))
    }

    /// Mean content loss over the batch plus the identity loss across it.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[SfeExample],
    ) -> Result<SfeLoss> {
        if batch.len() < 2 {
            return Err(Error::contract(format!(
                "identity loss needs a batch of at least 2 sequences, got {}",
                batch.len()
            )));
        }
        let (wc, bc) = self.content_sim.vars(tape, store);
        let mut content_terms = Vec::with_capacity(batch.len());
        let mut id_hat = Vec::with_capacity(batch.len());
        let mut id_tgt = Vec::with_capacity(batch.len());
        for ex in batch {
            let n_visual = ex.content_target.rows();
            let out = self.encode(tape, store, &ex.fbank, n_visual)?;
            let (yc, ys) = self.targets(tape, store, ex)?;
            content_terms.push(contrastive_loss(tape, out.content, yc, wc, bc)?);
            id_hat.push(out.identity);
            id_tgt.push(ys);
        }
        let mut content = content_terms[0];
        for &term in &content_terms[1..] {
            content = tape.add(content, term)?;
        }
        let content = tape.scale(content, 1.0 / batch.len() as f64);
        let (ws, bs) = self.identity_sim.vars(tape, store);
        let ih = tape.concat(&id_hat, 0)?;
        let it = tape.concat(&id_tgt, 0)?;
        let identity = contrastive_loss(tape, ih, it, ws, bs)?;
        let total = tape.add(content, identity)?;
        Ok(SfeLoss {
            total,
            content,
            identity,
        })
    }

    /// Forward-only features: `(T_visual x C content, C identity)`.
    pub fn features(
        &self,
        store: &ParamStore,
        fbank: &Tensor,
        n_visual: usize,
    ) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let out = self.encode(&mut tape, store, fbank, n_visual)?;
        let content = tape.value(out.content).clone();
        Ok((content, tape.value(out.identity).data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, check_param_gradients};
    use rand::SeedableRng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn tiny_config(memory: MemoryMode) -> SfeConfig {
        SfeConfig {
            input_dim: 4,
            hidden: 3,
            feature_dim: 4,
            content_slots: 2,
            identity_slots: 2,
            addresser_hidden: 3,
            target_hidden: 3,
            content_target_dim: 5,
            identity_target_dim: 6,
            memory,
        }
    }

    fn tiny_batch(rng: &mut ChaCha8Rng, b: usize, t_visual: usize) -> Vec<SfeExample> {
        (0..b)
            .map(|_| SfeExample {
                fbank: random(rng, 4 * t_visual - 1, 4),
                content_target: random(rng, t_visual, 5),
                identity_target: random(rng, 1, 6),
            })
            .collect()
    }

    #[test]
    fn zero_weights_and_input_give_zero_states() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 3]));
        let h = bigru_encode(&mut tape, &store, &cell, &cell, x).unwrap();
        assert_eq!(tape.shape(h), &[5, 8]);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversing_input_swaps_directions_with_shared_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        let x = random(&mut rng, 6, 3);
        let rev = Tensor::from_rows(&(0..6).rev().map(|i| x.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let rv = tape.constant(rev);
        let h = bigru_encode(&mut tape, &store, &cell, &cell, xv).unwrap();
        let hr = bigru_encode(&mut tape, &store, &cell, &cell, rv).unwrap();
        let (h, hr) = (tape.value(h), tape.value(hr));
        for t in 0..6 {
            let m = 5 - t;
            assert_eq!(&h.row(t)[..4], &hr.row(m)[4..]);
            assert_eq!(&h.row(t)[4..], &hr.row(m)[..4]);
        }
    }

    /// Scalar GRU recurrence written out directly, the oracle for `run`.
    #[test]
    fn forward_matches_hand_recurrence() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = GruCell::new(&mut store, "g", 2, 3, &mut rng).unwrap();
        for g in 0..3 {
            let b = store.get_mut(cell.b[g]);
            b.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let x = random(&mut rng, 4, 2);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = cell.run(&mut tape, &store, xv, false).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mat = |id: ParamId| store.get(id).clone();
        let affine = |m: &Tensor, v: &[f64], j: usize| -> f64 {
            (0..v.len()).map(|i| v[i] * m.at(i, j)).sum()
        };
        let mut h = vec![0.0; 3];
        for t in 0..4 {
            let xt = x.row(t);
            let mut next = vec![0.0; 3];
            for j in 0..3 {
                let z = sig(affine(&mat(cell.w[0]), xt, j)
                    + mat(cell.b[0]).data()[j]
                    + affine(&mat(cell.u[0]), &h, j));
                let r = sig(affine(&mat(cell.w[1]), xt, j)
                    + mat(cell.b[1]).data()[j]
                    + affine(&mat(cell.u[1]), &h, j));
                let n = (affine(&mat(cell.w[2]), xt, j)
                    + mat(cell.b[2]).data()[j]
                    + r * affine(&mat(cell.u[2]), &h, j))
                .tanh();
                next[j] = (1.0 - z) * n + z * h[j];
            }
            h = next;
            for (j, &hj) in h.iter().enumerate() {
                assert!((tape.value(out).at(t, j) - hj).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bigru_gradient_three_steps() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = GruCell::new(&mut store, "f", 2, 3, &mut rng).unwrap();
        let b = GruCell::new(&mut store, "b", 2, 3, &mut rng).unwrap();
        let x = random(&mut rng, 3, 2);
        let w = random(&mut rng, 3, 6);
        let r = check_param_gradients(&store, 1e-5, |t, s| {
            let xv = t.constant(x.clone());
            let h = bigru_encode(t, s, &f, &b, xv)?;
            let wv = t.constant(w.clone());
            let p = t.mul(h, wv)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn memory_read_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let mv = tape.constant(m.clone());
        let onehot = tape.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap());
        let y = memory_read(&mut tape, onehot, mv).unwrap();
        assert_eq!(tape.value(y).data(), m.row(0));

        let zeros = tape.constant(Tensor::zeros(&[1, 3]));
        let uniform = tape.softmax(zeros, 1).unwrap();
        let y = memory_read(&mut tape, uniform, mv).unwrap();
        for j in 0..4 {
            let mean = (0..3).map(|i| m.at(i, j)).sum::<f64>() / 3.0;
            assert!((tape.value(y).data()[j] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn memory_read_stays_in_slot_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let k = rng.random_range(1..6);
            let m = random(&mut rng, k, 5);
            let logits = random(&mut rng, 1, k);
            let mut tape = Tape::new();
            let mv = tape.constant(m.clone());
            let lv = tape.constant(logits);
            let p = tape.softmax(lv, 1).unwrap();
            let y = memory_read(&mut tape, p, mv).unwrap();
            for j in 0..5 {
                let col: Vec<f64> = (0..k).map(|i| m.at(i, j)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = tape.value(y).data()[j];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn similarity_examples() {
        let e = similarity(&[1.0, 2.0], &[1.0, 2.0], 1.0, 0.0);
        assert!((e - std::f64::consts::E).abs() < 1e-7);
        let o = similarity(&[1.0, 0.0], &[0.0, 3.0], 5.0, -2.0);
        assert!((o - (-2f64).exp()).abs() < 1e-15);
        let mut last = 0.0;
        for i in 0..=20 {
            let a = std::f64::consts::PI * (1.0 - i as f64 / 20.0);
            let s = similarity(&[1.0, 0.0], &[a.cos(), a.sin()], 3.0, 0.0);
            assert!(s > last);
            last = s;
        }
        assert!((softplus_inverse(10.0) - (10f64.exp() - 1.0).ln()).abs() < 1e-12);
    }

    fn lit(tape: &mut Tape, v: f64) -> Var {
        tape.constant(Tensor::scalar(v))
    }

    #[test]
    fn contrastive_examples() {
        let mut tape = Tape::new();
        let yh = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.7]]).unwrap());
        let same = tape.constant(Tensor::from_rows(&[vec![2.0, 1.0], vec![2.0, 1.0]]).unwrap());
        let (w, b) = (lit(&mut tape, 4.0), lit(&mut tape, -1.0));
        let l = contrastive_loss(&mut tape, yh, same, w, b).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-12);

        // Row 0 has cosines 1, 0, -1 against the three targets.
        let yh = tape.constant(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap(),
        );
        let y = tape.constant(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap(),
        );
        let (w, b) = (lit(&mut tape, 1.0), lit(&mut tape, 0.0));
        let l = contrastive_loss(&mut tape, yh, y, w, b).unwrap();
        let e = std::f64::consts::E;
        let row0 = -(e / (e + 1.0 + 1.0 / e)).ln();
        assert!((row0 - 0.407606).abs() < 1e-6, "{row0}");
        let row1 = -(e / (1.0 + e + 1.0)).ln();
        let expected = (row0 + row1 + row0) / 3.0;
        assert!(
            (tape.scalar(l) - expected).abs() < 1e-7,
            "{} vs {expected}",
            tape.scalar(l)
        );

        let one = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(contrastive_loss(&mut tape, one, one, w, b).is_err());
    }

    #[test]
    fn contrastive_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let t = rng.random_range(2..8);
            let mut tape = Tape::new();
            let a = tape.constant(random(&mut rng, t, 3));
            let c = tape.constant(random(&mut rng, t, 3));
            let w = lit(&mut tape, rng.random_range(0.1..20.0));
            let b = lit(&mut tape, rng.random_range(-5.0..5.0));
            let l = contrastive_loss(&mut tape, a, c, w, b).unwrap();
            assert!(tape.scalar(l) >= 0.0);
        }
    }

    #[test]
    fn contrastive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            random(&mut rng, 4, 3),
            random(&mut rng, 4, 3),
            Tensor::scalar(1.5),
            Tensor::scalar(-0.5),
        ];
        let r = check_gradients(&inputs, 1e-5, |t, v| {
            contrastive_loss(t, v[0], v[1], v[2], v[3])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn identical_pair_has_log2_identity_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let model = SfeModel::new(tiny_config(MemoryMode::Cs), &mut store, &mut rng).unwrap();
        let ex = tiny_batch(&mut rng, 1, 3).remove(0);
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &store, &[ex.clone(), ex]).unwrap();
        assert!((tape.scalar(loss.identity) - 2f64.ln()).abs() < 1e-12);
        let mut tape = Tape::new();
        assert!(model
            .loss(&mut tape, &store, &tiny_batch(&mut rng, 1, 3))
            .is_err());
    }

    #[test]
    fn full_loss_gradient_every_memory_mode() {
        for (i, mode) in [MemoryMode::Cs, MemoryMode::W, MemoryMode::Wo]
            .into_iter()
            .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(9 + i as u64);
            let mut store = ParamStore::new();
            let model = SfeModel::new(tiny_config(mode), &mut store, &mut rng).unwrap();
            let batch = tiny_batch(&mut rng, 2, 3);
            let r = check_param_gradients(&store, 1e-5, |t, s| Ok(model.loss(t, s, &batch)?.total))
                .unwrap();
            assert!(r.max_rel_err < 1e-4, "{mode}: {r:?}");
        }
    }

    #[test]
    fn addressing_is_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let model = SfeModel::new(tiny_config(MemoryMode::Cs), &mut store, &mut rng).unwrap();
        let ex = tiny_batch(&mut rng, 1, 5).remove(0);
        let mut tape = Tape::new();
        let out = model.encode(&mut tape, &store, &ex.fbank, 5).unwrap();
        for p in [out.content_probs.unwrap(), out.identity_probs.unwrap()] {
            for row in tape.value(p).data().chunks(2) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pooling_groups_of_four() {
        let p = pooling_matrix(7, 2).unwrap();
        assert_eq!(p.row(0), &[0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0]);
        let third = 1.0 / 3.0;
        assert_eq!(p.row(1), &[0.0, 0.0, 0.0, 0.0, third, third, third]);
        let short = pooling_matrix(5, 3).unwrap();
        assert_eq!(short.row(2), &[0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn memory_mode_parsing() {
        for m in [MemoryMode::Wo, MemoryMode::W, MemoryMode::Cs] {
            assert_eq!(m.to_string().parse::<MemoryMode>().unwrap(), m);
        }
        assert!("x".parse::<MemoryMode>().is_err());
    }
}
