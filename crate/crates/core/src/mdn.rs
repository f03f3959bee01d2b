//! Mixture density network over per-frame landmark targets.
//!
//! In `f_tt` mode a target row is `[p_align - template (2L), theta, t (2)]`;
//! in `f_a` mode it is the flattened frame itself. Targets are modelled in
//! standardized units; callers own the standardizer.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{align, reconstruct, AlignedDecomposition, LandmarkFrame, Pose};
use crate::nn::{glorot, Linear, Mlp};
use crate::sfe::{content_features, softplus_inverse};

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const MAX_COMPONENTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegressionMode {
    /// Landmark coordinates directly.
    Fa,
    /// Aligned shape plus rotation and offset.
    Ftt,
}

impl fmt::Display for RegressionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegressionMode::Fa => "f_a",
            RegressionMode::Ftt => "f_tt",
        })
    }
}

impl FromStr for RegressionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f_a" => Ok(RegressionMode::Fa),
            "f_tt" => Ok(RegressionMode::Ftt),
            other => Err(Error::Config(format!(
                "regression mode must be f_a or f_tt, got `{other}`"
            ))),
        }
    }
}

impl RegressionMode {
    pub fn output_dim(self, n_points: usize) -> usize {
        match self {
            RegressionMode::Fa => 2 * n_points,
            RegressionMode::Ftt => 2 * n_points + 3,
        }
    }

    /// Unstandardized target row for one normalized frame.
    pub fn encode(self, frame: &LandmarkFrame, template: &LandmarkFrame) -> Result<Vec<f64>> {
        match self {
            RegressionMode::Fa => Ok(frame.flat()),
            RegressionMode::Ftt => decomposed_features(frame, template),
        }
    }

    /// Inverse of [`RegressionMode::encode`]. The pose of an `f_a` output is
    /// recovered by aligning it to `template`.
    pub fn decode(self, row: &[f64], template: &LandmarkFrame) -> Result<(LandmarkFrame, Pose)> {
        let want = self.output_dim(template.len());
        if row.len() != want {
            return Err(Error::Shape {
                op: "mdn decode",
                left: vec![row.len()],
                right: vec![want],
            });
        }
        match self {
            RegressionMode::Fa => {
                let frame = LandmarkFrame::from_flat(row)?;
                let pose = align(&frame, template)?.pose;
                Ok((frame, pose))
            }
            RegressionMode::Ftt => {
                let d = split_decomposition(row, template)?;
                Ok((reconstruct(&d.p_align, &d.pose), d.pose))
            }
        }
    }
}

/// `[p_align - template, theta, t]` of a frame aligned to `template`.
pub fn decomposed_features(frame: &LandmarkFrame, template: &LandmarkFrame) -> Result<Vec<f64>> {
    let a = align(frame, template)?;
    let mut v = content_features(&a, template);
    v.extend([a.pose.theta, a.pose.t[0], a.pose.t[1]]);
    Ok(v)
}

/// Splits an `f_tt` row into aligned shape and pose; theta is wrapped.
pub fn split_decomposition(row: &[f64], template: &LandmarkFrame) -> Result<AlignedDecomposition> {
    let n = 2 * template.len();
    if row.len() != n + 3 {
        return Err(Error::Shape {
            op: "split_decomposition",
            left: vec![row.len()],
            right: vec![n + 3],
        });
    }
    let shape: Vec<f64> = row[..n]
        .iter()
        .zip(template.flat())
        .map(|(d, t)| d + t)
        .collect();
    Ok(AlignedDecomposition {
        p_align: LandmarkFrame::from_flat(&shape)?,
        pose: Pose::new(row[n], [row[n + 1], row[n + 2]]),
    })
}

/// Per-frame inputs: content rows `t-c..=t+c` clamped at the sequence ends,
/// then the identity feature, then the reference features.
pub fn mdn_inputs(
    content: &Tensor,
    identity: &[f64],
    reference: &[f64],
    context: usize,
) -> Result<Tensor> {
    if content.rank() != 2 || content.rows() == 0 {
        return Err(Error::contract(
            "mdn inputs need a non-empty T x C content matrix",
        ));
    }
    let t_len = content.rows();
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut r = Vec::new();
        for k in 0..=2 * context {
            let idx = (t + k).saturating_sub(context).min(t_len - 1);
            r.extend_from_slice(content.row(idx));
        }
        r.extend_from_slice(identity);
        r.extend_from_slice(reference);
        rows.push(r);
    }
    Tensor::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdnConfig {
    pub components: usize,
    pub hidden: usize,
    /// Content frames on each side of the current one.
    pub context_frames: usize,
}

impl Default for MdnConfig {
    fn default() -> Self {
        MdnConfig {
            components: 3,
            hidden: 128,
            context_frames: 2,
        }
    }
}

impl MdnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_COMPONENTS).contains(&self.components) {
            return Err(Error::Config(format!(
                "mixture components must be in 1..={MAX_COMPONENTS}, got {}",
                self.components
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("mdn hidden size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mixture of diagonal Gaussians for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub alpha: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl MixtureParams {
    pub fn components(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }
}

/// Index of the largest weight; ties go to the lowest index.
pub fn argmax_alpha(alpha: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in alpha.iter().enumerate() {
        if a > alpha[best] {
            best = i;
        }
    }
    best
}

/// Mean of the highest-weight component.
pub fn infer_max(p: &MixtureParams) -> Vec<f64> {
    p.mu[argmax_alpha(&p.alpha)].clone()
}

/// Weight-averaged mean over components.
pub fn infer_mixture(p: &MixtureParams) -> Vec<f64> {
    let mut out = vec![0.0; p.dim()];
    for (a, mu) in p.alpha.iter().zip(&p.mu) {
        for (o, m) in out.iter_mut().zip(mu) {
            *o += a * m;
        }
    }
    out
}

/// Log density of one diagonal Gaussian.
pub fn gaussian_log_density(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    x.iter()
        .zip(mu.iter().zip(sigma))
        .map(|(x, (m, s))| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln())
        .sum()
}

/// `-log sum_m alpha_m N(target; mu_m, sigma_m^2)` via log-sum-exp.
pub fn mixture_nll(p: &MixtureParams, target: &[f64]) -> f64 {
    let terms: Vec<f64> = (0..p.components())
        .map(|m| p.alpha[m].ln() + gaussian_log_density(target, &p.mu[m], &p.sigma[m]))
        .collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    -(top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln())
}

/// `MD x M` matrix summing each component's block of `D` columns.
fn block_sum(components: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; components * dim * components];
    for m in 0..components {
        for d in 0..dim {
            data[(m * dim + d) * components + m] = 1.0;
        }
    }
    Tensor::matrix(components * dim, components, data).expect("block shape")
}

/// Mean over rows of the mixture NLL. `alpha_logits` is `N x M`; `mu` and
/// `sigma` are `N x MD` with component-major columns; `target` is `N x D`.
pub fn mixture_nll_loss(
    tape: &mut Tape,
    alpha_logits: Var,
    mu: Var,
    sigma: Var,
    target: Var,
) -> Result<Var> {
    let (n, m) = match tape.shape(alpha_logits) {
        [n, m] => (*n, *m),
        s => {
            return Err(Error::Shape {
                op: "mixture_nll_loss",
                left: s.to_vec(),
                right: vec![],
            })
        }
    };
    let d = tape.shape(target).get(1).copied().unwrap_or(0);
    if tape.shape(target) != [n, d]
        || tape.shape(mu) != [n, m * d]
        || tape.shape(sigma) != [n, m * d]
    {
        return Err(Error::Shape {
            op: "mixture_nll_loss",
            left: tape.shape(mu).to_vec(),
            right: vec![n, m * d],
        });
    }
    let tiled = tape.concat(&vec![target; m], 1)?;
    let diff = tape.sub(tiled, mu)?;
    let z = tape.div(diff, sigma)?;
    let sq = tape.mul(z, z)?;
    let log_sigma = tape.log(sigma)?;
    let blocks = tape.constant(block_sum(m, d));
    let sq_sum = tape.matmul(sq, blocks)?;
    let ls_sum = tape.matmul(log_sigma, blocks)?;
    let half_sq = tape.scale(sq_sum, -0.5);
    let comp = tape.sub(half_sq, ls_sum)?;
    let comp = tape.affine(comp, 1.0, -0.5 * d as f64 * (2.0 * PI).ln());
    let log_alpha = tape.log_softmax(alpha_logits, 1)?;
    let joint = tape.add(log_alpha, comp)?;
    let lse = tape.logsumexp(joint, 1)?;
    let mean = tape.mean(lse);
    Ok(tape.neg(mean))
}

pub struct MdnOutputs {
    pub alpha_logits: Var,
    pub alpha: Var,
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug)]
pub struct MdnModel {
    pub config: MdnConfig,
    pub in_dim: usize,
    pub out_dim: usize,
    pub trunk: Mlp,
    pub alpha_head: Linear,
    pub mu_head: Linear,
    pub sigma_head: Linear,
}

pub const MDN_PREFIX: &str = "mdn";

impl MdnModel {
    /// Registers parameters under `mdn/`. The weight head starts at zero so
    /// the initial mixture is uniform; mean biases are spread over `[-1, 1]`
    /// per component and scale biases start at `sigma = 1`.
    pub fn new(
        config: MdnConfig,
        in_dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(
                "mdn input and output sizes must be at least 1".into(),
            ));
        }
        let (h, m) = (config.hidden, config.components);
        let p = MDN_PREFIX;
        let trunk = Mlp::new(store, &format!("{p}/trunk"), &[in_dim, h, h], rng)?;
        let alpha_head = Linear::new(store, &format!("{p}/alpha"), h, m, rng)?;
        store.get_mut(alpha_head.weight).data_mut().fill(0.0);
        let mu_head = Linear::new(store, &format!("{p}/mu"), h, m * out_dim, rng)?;
        for c in 0..m {
            let b: f64 = rng.random_range(-1.0..1.0);
            store.get_mut(mu_head.bias).data_mut()[c * out_dim..(c + 1) * out_dim].fill(b);
        }
        // Means start nearly input-independent so a component claims the same
        // mode for every speaker instead of a speaker-specific one.
        for w in store.get_mut(mu_head.weight).data_mut() {
            *w *= 0.01;
        }
        let sigma_head = Linear::new(store, &format!("{p}/sigma"), h, m * out_dim, rng)?;
        let small = glorot(rng, h, m * out_dim)?;
        store
            .get_mut(sigma_head.weight)
            .data_mut()
            .iter_mut()
            .zip(small.data())
            .for_each(|(w, s)| *w = 0.1 * s);
        store
            .get_mut(sigma_head.bias)
            .data_mut()
            .fill(softplus_inverse(1.0 - SIGMA_FLOOR));
        Ok(MdnModel {
            config,
            in_dim,
            out_dim,
            trunk,
            alpha_head,
            mu_head,
            sigma_head,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<MdnOutputs> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Shape {
                op: "mdn forward",
                left: shape,
                right: vec![self.in_dim],
            });
        }
        let h = self.trunk.forward(tape, store, x)?;
        let h = tape.tanh(h);
        let alpha_logits = self.alpha_head.forward(tape, store, h)?;
        let alpha = tape.softmax(alpha_logits, 1)?;
        let mu = self.mu_head.forward(tape, store, h)?;
        let raw = self.sigma_head.forward(tape, store, h)?;
        let sp = tape.softplus(raw);
        let sigma = tape.affine(sp, 1.0, SIGMA_FLOOR);
        Ok(MdnOutputs {
            alpha_logits,
            alpha,
            mu,
            sigma,
        })
    }

    /// Mean NLL of standardized `target` rows under the mixtures for `x`.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, x: Var, target: Var) -> Result<Var> {
        let out = self.forward(tape, store, x)?;
        mixture_nll_loss(tape, out.alpha_logits, out.mu, out.sigma, target)
    }

    /// Forward-only mixture parameters for every row of `x`.
    pub fn mixtures(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<MixtureParams>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, store, xv)?;
        let (m, d) = (self.config.components, self.out_dim);
        let (alpha, mu, sigma) = (
            tape.value(out.alpha),
            tape.value(out.mu),
            tape.value(out.sigma),
        );
        Ok((0..x.rows())
            .map(|r| MixtureParams {
                alpha: alpha.row(r).to_vec(),
                mu: mu.row(r).chunks(d).map(<[f64]>::to_vec).collect(),
                sigma: sigma.row(r).chunks(d).map(<[f64]>::to_vec).collect(),
            })
            .inspect(|p| debug_assert_eq!(p.components(), m))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, check_param_gradients};
    use crate::trainer::{Adam, AdamConfig};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
        Tensor::matrix(
            r,
            c,
            (0..r * c)
                .map(|_| scale * rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn tiny(seed: u64, m: usize, in_dim: usize, out_dim: usize) -> (MdnModel, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = MdnConfig {
            components: m,
            hidden: 4,
            context_frames: 0,
        };
        (
            MdnModel::new(cfg, in_dim, out_dim, &mut store, &mut rng).unwrap(),
            store,
        )
    }

    fn single(alpha: Vec<f64>, mu: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>) -> MixtureParams {
        MixtureParams { alpha, mu, sigma }
    }

    #[test]
    fn zero_weight_head_gives_uniform_alpha() {
        let (model, store) = tiny(1, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in model
            .mixtures(&store, &random(&mut rng, 5, 3, 3.0))
            .unwrap()
        {
            assert!(p.alpha.iter().all(|a| (a - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_width() {
        let (model, store) = tiny(3, 3, 3, 2);
        let x = random(&mut ChaCha8Rng::seed_from_u64(4), 2, 3, 1.0);
        assert_eq!(
            model.mixtures(&store, &x).unwrap(),
            model.mixtures(&store, &x).unwrap()
        );
        assert!(model.mixtures(&store, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn nll_examples() {
        let p = single(vec![1.0], vec![vec![0.3]], vec![vec![1.0]]);
        assert!((mixture_nll(&p, &[0.3]) - 0.918939).abs() < 1e-6);
        let p = single(
            vec![0.5, 0.5],
            vec![vec![0.0], vec![2.0]],
            vec![vec![1.0], vec![1.0]],
        );
        let density = (-0.5f64).exp() / (2.0 * PI).sqrt();
        assert!((density - 0.241971).abs() < 1e-6);
        assert!((mixture_nll(&p, &[1.0]) - 1.418939).abs() < 1e-6);
    }

    #[test]
    fn tape_loss_matches_numeric_nll() {
        let (model, store) = tiny(5, 3, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 4, 2, 1.0);
        let y = random(&mut rng, 4, 3, 1.5);
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let l = model.loss(&mut tape, &store, xv, yv).unwrap();
        let params = model.mixtures(&store, &x).unwrap();
        let expected: f64 = params
            .iter()
            .enumerate()
            .map(|(r, p)| mixture_nll(p, y.row(r)))
            .sum::<f64>()
            / 4.0;
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                random(&mut rng, 3, 2, 1.0),
                random(&mut rng, 3, 4, 1.0),
                Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(0.3..1.5)).collect())
                    .unwrap(),
                random(&mut rng, 3, 2, 1.0),
            ];
            let r = check_gradients(&inputs, 1e-5, |t, v| {
                mixture_nll_loss(t, v[0], v[1], v[2], v[3])
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");

            let (model, store) = tiny(seed + 10, 2, 3, 2);
            let x = random(&mut rng, 3, 3, 1.0);
            let y = random(&mut rng, 3, 2, 1.0);
            let r = check_param_gradients(&store, 1e-5, |t, s| {
                let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
                model.loss(t, s, xv, yv)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn mixture_nll_bounded_by_each_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let m = rng.random_range(1..5);
            let d = rng.random_range(1..4);
            let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let p = single(
                raw.iter().map(|a| a / total).collect(),
                (0..m)
                    .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect(),
                (0..m)
                    .map(|_| (0..d).map(|_| rng.random_range(0.1..2.0)).collect())
                    .collect(),
            );
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let nll = mixture_nll(&p, &y);
            for c in 0..m {
                let alone = -gaussian_log_density(&y, &p.mu[c], &p.sigma[c]);
                assert!(nll <= alone - p.alpha[c].ln() + 1e-12);
            }
        }
    }

    #[test]
    fn nll_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let p = single(
                vec![0.2, 0.5, 0.3],
                (0..3)
                    .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect(),
                (0..3)
                    .map(|_| vec![rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)])
                    .collect(),
            );
            let order = [2, 0, 1];
            let q = single(
                order.iter().map(|&i| p.alpha[i]).collect(),
                order.iter().map(|&i| p.mu[i].clone()).collect(),
                order.iter().map(|&i| p.sigma[i].clone()).collect(),
            );
            let y = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            assert!((mixture_nll(&p, &y) - mixture_nll(&q, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_examples() {
        let mu = vec![vec![1.0], vec![2.0], vec![3.0]];
        let s = vec![vec![1.0]; 3];
        assert_eq!(
            infer_max(&single(vec![0.2, 0.7, 0.1], mu.clone(), s.clone())),
            vec![2.0]
        );
        assert_eq!(
            infer_max(&single(vec![0.5, 0.5], mu[..2].to_vec(), s[..2].to_vec())),
            vec![1.0]
        );
        let one = single(vec![1.0], vec![vec![0.4, -2.0]], vec![vec![1.0, 1.0]]);
        assert_eq!(infer_mixture(&one), infer_max(&one));
        let sharp = single(
            vec![1.0, 0.0],
            vec![vec![0.7], vec![9.0]],
            vec![vec![1.0]; 2],
        );
        assert_eq!(infer_mixture(&sharp), vec![0.7]);
        let sym = single(
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![1.0]; 2],
        );
        assert_eq!(infer_mixture(&sym), vec![0.0]);
        let alpha = [0.1, 0.6, 0.3];
        let scaled: Vec<f64> = alpha.iter().map(|a| a * 7.5).collect();
        assert_eq!(argmax_alpha(&alpha), argmax_alpha(&scaled));
    }

    #[test]
    fn decode_wraps_theta_and_identity_pose_keeps_shape() {
        let template = LandmarkFrame::new(
            (0..68)
                .map(|i| [(i as f64 * 0.7).cos(), (i as f64 * 1.3).sin()])
                .collect(),
        )
        .unwrap();
        let mut row = vec![0.0; 139];
        row[3] = 0.25;
        let (frame, pose) = RegressionMode::Ftt.decode(&row, &template).unwrap();
        assert_eq!(pose, Pose::IDENTITY);
        let expected: Vec<f64> = template
            .flat()
            .iter()
            .zip(&row[..136])
            .map(|(t, d)| t + d)
            .collect();
        assert_eq!(frame.flat(), expected);
        row[136] = 3.0 * PI / 2.0;
        let (_, pose) = RegressionMode::Ftt.decode(&row, &template).unwrap();
        assert!(pose.theta > -PI && pose.theta <= PI);
        assert!((pose.theta + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip() {
        let template = LandmarkFrame::new(
            (0..68)
                .map(|i| [(i as f64 * 0.7).cos(), (i as f64 * 1.3).sin()])
                .collect(),
        )
        .unwrap();
        let frame = template.transformed(&Pose::new(0.3, [1.0, -2.0]));
        for mode in [RegressionMode::Fa, RegressionMode::Ftt] {
            let row = mode.encode(&frame, &template).unwrap();
            assert_eq!(row.len(), mode.output_dim(68));
            let (back, pose) = mode.decode(&row, &template).unwrap();
            assert!((pose.theta - 0.3).abs() < 1e-9);
            for (a, b) in back.flat().iter().zip(frame.flat()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert_eq!(
            "f_tt".parse::<RegressionMode>().unwrap(),
            RegressionMode::Ftt
        );
        assert!("fa".parse::<RegressionMode>().is_err());
    }

    #[test]
    fn context_window_clamps_at_edges() {
        let content = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let x = mdn_inputs(&content, &[9.0], &[7.0, 8.0], 1).unwrap();
        assert_eq!(x.row(0), &[0.0, 0.0, 1.0, 9.0, 7.0, 8.0]);
        assert_eq!(x.row(2), &[1.0, 2.0, 2.0, 9.0, 7.0, 8.0]);
    }

    #[test]
    fn alpha_simplex_and_sigma_floor_hold_for_random_models() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (model, mut store) = tiny(seed, 3, 2, 2);
            for id in store.ids().collect::<Vec<_>>() {
                store
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-8.0..8.0));
            }
            for p in model
                .mixtures(&store, &random(&mut rng, 10, 2, 20.0))
                .unwrap()
            {
                assert!(p.alpha.iter().all(|&a| a >= 0.0));
                assert!((p.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(p.sigma.iter().flatten().all(|&s| s >= SIGMA_FLOOR));
            }
        }
    }

    /// Fits on targets `+-1 + eps * noise` with a constant input.
    fn fit_bimodal(components: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let y: Vec<f64> = (0..256)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 } + noise.sample(&mut rng))
            .collect();
        let (model, mut store) = tiny(41, components, 1, 1);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 2e-2,
                ..AdamConfig::default()
            },
            &store,
        );
        let x = Tensor::full(&[256, 1], 1.0);
        let yt = Tensor::matrix(256, 1, y).unwrap();
        let mut last = f64::NAN;
        for _ in 0..400 {
            store.zero_grad();
            let mut tape = Tape::new();
            let (xv, yv) = (tape.constant(x.clone()), tape.constant(yt.clone()));
            let l = model.loss(&mut tape, &store, xv, yv).unwrap();
            tape.backward_into(l, &mut store).unwrap();
            adam.step(&mut store).unwrap();
            last = tape.scalar(l);
        }
        last
    }

    #[test]
    fn two_components_beat_one_on_bimodal_targets() {
        let one = fit_bimodal(1);
        let two = fit_bimodal(2);
        let floor = 0.5 * (2.0 * PI * std::f64::consts::E * (1.0 + 0.05f64.powi(2))).ln();
        assert!(one > floor - 0.05, "{one} vs floor {floor}");
        assert!(two < one - 0.5, "{two} vs {one}");
    }
}
