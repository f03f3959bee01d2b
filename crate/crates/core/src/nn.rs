//! Small layers on top of the tape: affine maps, tanh perceptrons and
//! per-feature standardization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Adds a `1 x n` row to every row of an `m x n` matrix.
pub fn add_row(tape: &mut Tape, x: Var, row: Var) -> Result<Var> {
    let m = tape.shape(x)[0];
    let ones = tape.constant(Tensor::full(&[m, 1], 1.0));
    let tiled = tape.matmul(ones, row)?;
    tape.add(x, tiled)
}

/// Mean over rows of an `m x n` matrix as a `1 x n` row.
pub fn mean_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let m = tape.shape(x)[0];
    let avg = tape.constant(Tensor::full(&[1, m], 1.0 / m as f64));
    tape.matmul(avg, x)
}

/// Glorot-uniform `rows x cols` matrix.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-a..a)).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}/weight"), glorot(rng, in_dim, out_dim)?)?;
        let bias = store.add(format!("{name}/bias"), Tensor::zeros(&[1, out_dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x . W + b` for `x` of shape `n x in_dim`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        add_row(tape, y, b)
    }
}

/// Affine layers with tanh between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "{name}: perceptron needs at least 2 sizes"
            )));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}/{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Per-column affine standardization with statistics fixed at fit time.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Columns with spread below `1e-6` keep unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for r in rows {
            if sum.is_empty() {
                sum = vec![0.0; r.len()];
                sq = vec![0.0; r.len()];
            } else if r.len() != sum.len() {
                return Err(Error::contract("standardizer rows differ in length"));
            }
            for (i, v) in r.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::contract("standardizer fit on no rows"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / nf - m * m).max(0.0).sqrt();
                if s < 1e-6 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Standardizes every row of a matrix whose width is `dim()`.
    pub fn apply_matrix(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.cols() != self.dim() {
            return Err(Error::Shape {
                op: "standardize",
                left: x.shape().to_vec(),
                right: vec![self.dim()],
            });
        }
        let data = x
            .data()
            .chunks(self.dim())
            .flat_map(|r| self.apply(r))
            .collect();
        Tensor::matrix(x.rows(), x.cols(), data)
    }

    /// Serialized as a `2 x dim` tensor of means then standard deviations.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(
            2,
            self.dim(),
            [self.mean.clone(), self.std.clone()].concat(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.rows() != 2 {
            return Err(Error::Checkpoint(format!(
                "standardizer tensor must be 2 x d, got {:?}",
                t.shape()
            )));
        }
        Ok(Standardizer {
            mean: t.row(0).to_vec(),
            std: t.row(1).to_vec(),
        })
    }
}
