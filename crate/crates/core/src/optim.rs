//! Adam and the plateau learning-rate rule.

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are kept in the
/// parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: Parameters<T>>(config: AdamConfig, params: &P) -> Self {
        let zeros = || params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients stored on the parameters and
    /// clears them. Parameters without a gradient are left untouched.
    pub fn step<P: Parameters<T>>(&mut self, params: &mut P) -> Result<()> {
        let named = params.named_mut();
        if named.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                named.len()
            )));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((name, p), (m, v)) in named.into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if m.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "moment buffer {:?} does not match {name} {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
            let Some(grad) = p.take_grad() else { continue };
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (w, gr)) in p.data_mut().iter_mut().zip(grad).enumerate() {
                let gr = gr.as_f64();
                let mi = beta1 * md[i].as_f64() + (1.0 - beta1) * gr;
                let vi = beta2 * vd[i].as_f64() + (1.0 - beta2) * gr * gr;
                md[i] = T::lit(mi);
                vd[i] = T::lit(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Drops the learning rate when the windowed mean loss stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub window: usize,
    /// Relative improvement over the best window mean that counts as progress.
    pub threshold: f64,
    /// Consecutive non-improving windows that trigger a drop.
    pub patience: usize,
    pub factor: f64,
    pub max_drops: usize,
    pub drops: usize,
    best: Option<f64>,
    stalls: usize,
    acc: f64,
    count: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau::new(200, 0.01, 2, 10.0, 2)
    }
}

impl Plateau {
    pub fn new(window: usize, threshold: f64, patience: usize, factor: f64, max_drops: usize) -> Self {
        Plateau {
            window: window.max(1),
            threshold,
            patience: patience.max(1),
            factor,
            max_drops,
            drops: 0,
            best: None,
            stalls: 0,
            acc: 0.0,
            count: 0,
        }
    }

    /// Records one step's loss; returns the factor to divide the learning
    /// rate by when a drop fires.
    pub fn observe(&mut self, loss: f64) -> Option<f64> {
        self.acc += loss;
        self.count += 1;
        if self.count < self.window {
            return None;
        }
        let mean = self.acc / self.count as f64;
        self.acc = 0.0;
        self.count = 0;
        match self.best {
            Some(best) if mean > best * (1.0 - self.threshold) => {
                self.stalls += 1;
                self.best = Some(best.min(mean));
            }
            _ => {
                self.stalls = 0;
                self.best = Some(mean);
            }
        }
        if self.stalls >= self.patience && self.drops < self.max_drops {
            self.stalls = 0;
            self.drops += 1;
            Some(self.factor)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Two(Tensor<f64>);

    impl Parameters<f64> for Two {
        fn named(&self) -> Vec<(String, &Tensor<f64>)> {
            vec![("w".into(), &self.0)]
        }
        fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
            vec![("w".into(), &mut self.0)]
        }
    }

    #[test]
    fn adam_matches_hand_oracle() {
        let mut p = Two(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        // Gradient of f(w) = w0² + 3·w1 at each step.
        let (mut w, mut m, mut v) = ([1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
        for t in 1..=3 {
            let g = [2.0 * w[0], 3.0];
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                w[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
            let d = p.0.data().to_vec();
            p.0.accumulate_grad(&[2.0 * d[0], 3.0]);
            adam.step(&mut p).unwrap();
            for i in 0..2 {
                assert!((p.0.data()[i] - w[i]).abs() < 1e-10);
            }
            assert!(p.0.grad().is_none());
        }
        // The first Adam step moves each coordinate by lr·sign(g).
        assert!((w[1] - (-2.0 - 0.3)).abs() < 1e-6);
    }

    #[test]
    fn plateau_drops_twice_at_most() {
        let mut p = Plateau::new(10, 0.01, 2, 10.0, 2);
        let mut drops = Vec::new();
        for step in 0..200 {
            if let Some(f) = p.observe(1.0) {
                drops.push((step, f));
            }
        }
        // Window means: first sets the best, then stalls at windows 2 and 3.
        assert_eq!(drops, vec![(29, 10.0), (49, 10.0)]);
    }

    #[test]
    fn plateau_waits_while_improving() {
        let mut p = Plateau::default();
        for step in 0..2000 {
            assert!(p.observe(100.0 * 0.97f64.powi(step / 200)).is_none());
        }
        // One stall is not enough.
        let mut p = Plateau::new(5, 0.01, 2, 10.0, 2);
        let losses = [10.0, 10.0, 9.0, 9.0, 8.0];
        for (w, l) in losses.iter().enumerate() {
            for _ in 0..5 {
                assert!(p.observe(*l).is_none(), "window {w}");
            }
        }
    }
}
