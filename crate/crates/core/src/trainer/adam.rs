use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over every tensor of one [`ParamStore`], with moment
/// buffers in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients accumulated in `store`. A
    /// non-finite gradient aborts before anything is modified; a parameter
    /// that turns non-finite aborts after the update.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let t = store.get(id);
            if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            let g = t
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            if !t.all_finite() {
                return Err(Error::NonFiniteParameter(store.name(id).to_string()));
            }
        }
        Ok(())
    }

    /// Moments as `(name, tensor)` pairs prefixed `adam/m/` and `adam/v/`,
    /// plus the step count.
    pub fn to_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam/step".to_string(), Tensor::scalar(self.step as f64))];
        for (k, (name, t)) in store.iter().enumerate() {
            for (tag, buf) in [("m", &self.m[k]), ("v", &self.v[k])] {
                let tensor =
                    Tensor::new(t.shape().to_vec(), buf.clone()).expect("moment mirrors param");
                out.push((format!("adam/{tag}/{name}"), tensor));
            }
        }
        out
    }

    pub fn from_tensors(
        config: AdamConfig,
        store: &ParamStore,
        tensors: &[(String, Tensor)],
    ) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{name}`")))
        };
        let step = find("adam/step")?.item();
        let mut adam = Adam::new(config, store);
        adam.step = step as u64;
        for (k, (name, t)) in store.iter().enumerate() {
            for (tag, buf) in [("m", &mut adam.m[k]), ("v", &mut adam.v[k])] {
                let src = find(&format!("adam/{tag}/{name}"))?;
                if src.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer moment for `{name}` has the wrong shape"
                    )));
                }
                buf.copy_from_slice(src.data());
            }
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(values).unwrap()).unwrap();
        s
    }

    fn set_grad(store: &mut ParamStore, g: &[f64]) {
        let id = store.id("x").unwrap();
        store.get_mut(id).zero_grad();
        store.get_mut(id).accumulate_grad(g);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store_with(vec![0.5, -0.5, 2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        set_grad(&mut s, &[3.0, -0.01, 1e-3]);
        adam.step(&mut s).unwrap();
        let lr = adam.config.lr;
        let x = s.get(s.id("x").unwrap()).data().to_vec();
        for (after, (before, sign)) in x.iter().zip([(0.5, 1.0), (-0.5, -1.0), (2.0, 1.0)]) {
            let delta = after - before;
            assert!(delta * sign < 0.0);
            assert!(delta.abs() >= 0.99 * lr && delta.abs() <= lr, "{delta}");
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut s = store_with(vec![0.25, -1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..50 {
            set_grad(&mut s, &[0.0, 0.0]);
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.get(s.id("x").unwrap()).data(), &[0.25, -1.0]);
    }

    #[test]
    fn minimizes_squared_norm() {
        let mut s = store_with(vec![1.0; 5]);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            &s,
        );
        let id = s.id("x").unwrap();
        let mut steps = 0;
        while s.get(id).data().iter().map(|v| v * v).sum::<f64>().sqrt() >= 1e-3 {
            let g: Vec<f64> = s.get(id).data().iter().map(|v| 2.0 * v).collect();
            set_grad(&mut s, &g);
            adam.step(&mut s).unwrap();
            steps += 1;
            assert!(steps <= 2000, "not converged in 2000 steps");
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store_with(vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        set_grad(&mut s, &[f64::NAN]);
        let err = adam.step(&mut s).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "x"));
        assert_eq!(s.get(s.id("x").unwrap()).data(), &[1.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn state_round_trips_through_tensors() {
        let mut s = store_with(vec![1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        set_grad(&mut s, &[0.3, -0.7]);
        adam.step(&mut s).unwrap();
        let back = Adam::from_tensors(adam.config, &s, &adam.to_tensors(&s)).unwrap();
        assert_eq!(back, adam);
    }
}
