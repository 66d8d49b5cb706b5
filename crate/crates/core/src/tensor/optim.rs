use serde::{Deserialize, Serialize};

use super::{GradMap, ParamStore, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, idx: usize) -> &[f64] {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &[f64] {
        &self.v[idx]
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TensorError::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.numel() != self.m[id.0].len() {
                    return Err(TensorError::Shape(format!("gradient shape for {}", params.name(id))));
                }
                if !g.all_finite() {
                    return Err(TensorError::Numeric(format!("non-finite gradient for {}", params.name(id))));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id).data_mut();
            match grads.get(id) {
                Some(g) => {
                    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    }
                }
                None => {
                    // zero gradient: moments decay, parameter moves by the decayed momentum
                    for ((p, m), v) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= beta1;
                        *v *= beta2;
                        if *m != 0.0 {
                            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// `lr = factor · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoamSchedule {
    pub factor: f64,
    pub warmup: u64,
    pub d_model: usize,
}

impl NoamSchedule {
    pub fn new(factor: f64, warmup: u64, d_model: usize) -> Result<Self> {
        if factor <= 0.0 || warmup < 1 || d_model < 1 {
            return Err(TensorError::Domain(format!(
                "noam schedule needs factor>0, warmup>=1, d>=1 (got {factor}, {warmup}, {d_model})"
            )));
        }
        Ok(Self { factor, warmup, d_model })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(TensorError::Domain("noam schedule is defined from step 1".into()));
        }
        let s = step as f64;
        let w = self.warmup as f64;
        Ok(self.factor * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
    }

    pub fn peak(&self) -> f64 {
        self.factor * (self.d_model as f64).powf(-0.5) * (self.warmup as f64).powf(-0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::matrix(1, 1, vec![value]).unwrap());
        s
    }

    fn grad_of(store: &ParamStore, g: f64) -> GradMap {
        // loss = g * w, so dloss/dw = g
        let mut graph = Graph::new();
        let id = store.id("w").unwrap();
        let w = graph.param(store, id);
        let sum = graph.sum(w).unwrap();
        let loss = graph.scale(sum, g).unwrap();
        graph.backward(loss).unwrap()
    }

    #[test]
    fn noam_values() {
        let s = NoamSchedule::new(1.0, 25000, 256).unwrap();
        let peak = s.lr(25000).unwrap();
        assert!((peak - 3.953e-4).abs() < 1e-7, "{peak}");
        assert!((s.lr(12500).unwrap() - peak / 2.0).abs() < 1e-15);
        assert!((s.lr(100000).unwrap() - peak / 2.0).abs() < 1e-15);
        assert!(matches!(s.lr(0), Err(TensorError::Domain(_))));
        assert!(NoamSchedule::new(0.0, 1, 1).is_err());
    }

    #[test]
    fn noam_continuous_at_warmup() {
        let s = NoamSchedule::new(2.5, 400, 64).unwrap();
        let (a, b, c) = (s.lr(399).unwrap(), s.lr(400).unwrap(), s.lr(401).unwrap());
        assert!((a - b).abs() / b < 1e-2 && (c - b).abs() / b < 1e-2);
        assert!((b - s.peak()).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = single(1.5);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            let g = grad_of(&p, 0.0);
            opt.step(&mut p, &g, 1e-2).unwrap();
        }
        assert_eq!(p.get(p.id("w").unwrap()).data()[0], 1.5);
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        for &g in &[3.0, -0.01, 250.0] {
            let mut p = single(0.0);
            let mut opt = Adam::new(AdamConfig::default(), &p);
            let gm = grad_of(&p, g);
            opt.step(&mut p, &gm, 1e-3).unwrap();
            let w = p.get(p.id("w").unwrap()).data()[0];
            assert!((w + 1e-3 * g.signum()).abs() < 1e-9, "g={g} w={w}");
        }
    }

    #[test]
    fn matches_scalar_reference_trace() {
        // independent scalar Adam
        let (b1, b2, eps, lr, g) = (0.9f64, 0.98f64, 1e-9f64, 0.01f64, 0.7f64);
        let (mut w, mut m, mut v) = (0.25f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = single(0.25);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..2 {
            let gm = grad_of(&p, g);
            opt.step(&mut p, &gm, lr).unwrap();
        }
        assert!((p.get(p.id("w").unwrap()).data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = single(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let mut gm = grad_of(&p, 1.0);
        gm.scale(f64::NAN);
        assert!(matches!(opt.step(&mut p, &gm, 1e-3), Err(TensorError::Numeric(_))));
        assert_eq!(opt.step_count(), 0);
    }
}
