use crate::error::{MetroError, Result};
use crate::model::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    ids: Vec<ParamId>,
    lr_scales: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let ids: Vec<ParamId> = params.ids().filter(|&id| params.entry(id).trainable).collect();
        let zeros = |id: &ParamId| vec![0.0; params.get(*id).len()];
        AdamState {
            config,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            lr_scales: vec![1.0; ids.len()],
            ids,
        }
    }

    /// Trainable parameters in update order.
    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Multiplies the step size of every parameter whose name starts with `prefix`.
    pub fn scale_lr(&mut self, params: &ParamStore, prefix: &str, scale: f64) {
        for (i, &id) in self.ids.iter().enumerate() {
            if params.entry(id).name.starts_with(prefix) {
                self.lr_scales[i] *= scale;
            }
        }
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    /// One bias-corrected update. `grads[i]` belongs to `ids()[i]`; `None` means zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(MetroError::dim("adam_step", &[self.ids.len()], &[grads.len()]));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let id = self.ids[i];
                if g.len() != self.m[i].len() {
                    return Err(MetroError::dim("adam_step", &[self.m[i].len()], &[g.len()]));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(MetroError::Numeric(format!(
                        "non-finite gradient for parameter {}",
                        params.entry(id).name
                    )));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let lr = lr * self.lr_scales[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(self.ids[i]).data_mut();
            match g {
                Some(g) => {
                    for j in 0..p.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
                None => {
                    for j in 0..p.len() {
                        m[j] *= beta1;
                        v[j] *= beta2;
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .flatten()
            .for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::vector(vec![x]), true).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let (mut s, id) = scalar_store(0.5);
        let mut st = AdamState::new(&s, AdamConfig::default());
        st.step(&mut s, &[Some(vec![1.0])], 0.1).unwrap();
        let before = s.get(id).data()[0];
        let (m0, v0) = (st.m[0][0], st.v[0][0]);
        let (mut s2, _) = scalar_store(0.5);
        let mut st2 = AdamState::new(&s2, AdamConfig::default());
        st2.step(&mut s2, &[Some(vec![0.0])], 0.1).unwrap();
        assert_eq!(s2.get(id).data()[0], 0.5);
        st.step(&mut s, &[Some(vec![0.0])], 0.0).unwrap();
        assert_eq!(s.get(id).data()[0], before);
        assert_eq!(st.m[0][0], 0.9 * m0);
        assert_eq!(st.v[0][0], 0.999 * v0);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let lr = 1e-3;
        let mut prev = 0.0;
        let mut last = 0.0;
        for _ in 0..5000 {
            st.step(&mut s, &[Some(vec![3.7])], lr).unwrap();
            let x = s.get(id).data()[0];
            last = prev - x;
            prev = x;
        }
        assert!((last / lr - 1.0).abs() < 0.01, "{last}");
    }

    #[test]
    fn three_hand_computed_steps() {
        // g = 1, 2, -1 with lr 0.1 from x = 1.
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [1.0f64, 2.0, -1.0].into_iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            st.step(&mut s, &[Some(vec![g])], 0.1).unwrap();
            assert!((s.get(id).data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let err = st.step(&mut s, &[Some(vec![f64::NAN])], 0.1).unwrap_err();
        assert!(err.to_string().contains("parameter x"));
        assert_eq!(s.get(id).data()[0], 1.0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Some(vec![3.0, 0.0]), None, Some(vec![4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
    }
}
