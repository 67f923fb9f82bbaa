//! Landmark regularizers, template identity classification and the weighted
//! training objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{Linear, LinearVars};
use crate::synth::{Pose, RenderedSample};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Keypoints per pose; channel `4·pose + slot` supervises keypoint `slot`
/// of faces in that pose.
pub const KEYPOINTS_PER_POSE: usize = 4;
/// Landmark channels needed by the keypoint regularizer (3 poses × 4 keypoints).
pub const KEYPOINT_CHANNELS: usize = 3 * KEYPOINTS_PER_POSE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    Diversity,
    Keypoints,
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regularizer::Diversity => "diversity",
            Regularizer::Keypoints => "keypoints",
        })
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diversity" => Ok(Regularizer::Diversity),
            "keypoints" => Ok(Regularizer::Keypoints),
            other => Err(Error::Config(format!(
                "unknown regularizer {other:?} (expected diversity or keypoints)"
            ))),
        }
    }
}

/// `nK − Σ_cells max_k p` over self-normalized maps `p` (N×h×w×K).
pub fn diversity_loss_var<T: Real>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let s = g.shape(p).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("diversity loss expects N×h×w×K, got {s:?}")));
    }
    let nk = (s[0] * s[3]) as f64;
    let peak = g.max_reduce(p, 3)?;
    let total = g.sum(peak);
    Ok(g.affine(total, -T::one(), T::lit(nk)))
}

pub fn diversity_loss<T: Real>(p: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(p.clone());
    let l = diversity_loss_var(&mut g, v)?;
    Ok(g.scalar(l).as_f64())
}

/// Pseudo-groundtruth maps for the keypoint regularizer.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointTarget<T> {
    /// N×h×w×K; active channels hold a normalized Gaussian, others zero.
    pub target: Tensor<T>,
    /// N×h×w×K; 1 on active channels, 0 elsewhere.
    pub mask: Tensor<T>,
    /// Active channel indices per image.
    pub active_channels: Vec<Vec<usize>>,
}

/// Normalized Gaussian (σ = 1 cell) centred on pixel `(x, y)` over an
/// h×w grid of stride-8 cells.
pub fn keypoint_heatmap(x: f32, y: f32, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let u = x as f64 / stride as f64 - 0.5;
    let v = y as f64 / stride as f64 - 0.5;
    let mut m: Vec<f64> = (0..h * w)
        .map(|cell| {
            let (i, j) = ((cell / w) as f64, (cell % w) as f64);
            (-0.5 * ((j - u).powi(2) + (i - v).powi(2))).exp()
        })
        .collect();
    let total: f64 = m.iter().sum();
    m.iter_mut().for_each(|p| *p /= total);
    m
}

impl<T: Real> KeypointTarget<T> {
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a RenderedSample>,
        h: usize,
        w: usize,
        landmarks: usize,
        stride: usize,
    ) -> Result<Self> {
        if landmarks < KEYPOINT_CHANNELS {
            return Err(Error::invalid(format!(
                "keypoint regularizer needs {KEYPOINT_CHANNELS} landmark maps, model has {landmarks}"
            )));
        }
        let samples: Vec<&RenderedSample> = samples.into_iter().collect();
        let n = samples.len();
        let mut target = Tensor::zeros(&[n, h, w, landmarks]);
        let mut mask = Tensor::zeros(&[n, h, w, landmarks]);
        let mut active_channels = Vec::with_capacity(n);
        for (img, s) in samples.iter().enumerate() {
            let mut active = Vec::new();
            for (slot, kp) in s.keypoints.iter().enumerate() {
                let Some([x, y]) = kp else { continue };
                let ch = channel_for(s.pose, slot);
                active.push(ch);
                let heat = keypoint_heatmap(*x, *y, h, w, stride);
                for (cell, &p) in heat.iter().enumerate() {
                    let idx = (img * h * w + cell) * landmarks + ch;
                    target.data_mut()[idx] = T::lit(p);
                    mask.data_mut()[idx] = T::one();
                }
            }
            active_channels.push(active);
        }
        Ok(KeypointTarget {
            target,
            mask,
            active_channels,
        })
    }
}

pub fn channel_for(pose: Pose, slot: usize) -> usize {
    KEYPOINTS_PER_POSE * pose.index() + slot
}

/// `Σ ½ (p − p̂)²` over active channels only.
pub fn keypoint_loss_var<T: Real>(g: &mut Graph<T>, p: Var, target: &KeypointTarget<T>) -> Result<Var> {
    if g.shape(p) != target.target.shape() {
        return Err(Error::shape(format!(
            "keypoint loss: maps {:?} vs target {:?}",
            g.shape(p),
            target.target.shape()
        )));
    }
    let t = g.constant(target.target.clone());
    let m = g.constant(target.mask.clone());
    let d = g.sub(p, t)?;
    let d = g.mul(d, m)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, T::lit(0.5)))
}

pub fn keypoint_loss<T: Real>(p: &Tensor<T>, target: &KeypointTarget<T>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(p.clone());
    let l = keypoint_loss_var(&mut g, v, target)?;
    Ok(g.scalar(l).as_f64())
}

/// Mean identity cross-entropy of global descriptors (T×C).
pub fn template_cls_loss_var<T: Real>(
    g: &mut Graph<T>,
    global: Var,
    labels: &[usize],
    classifier: &LinearVars,
) -> Result<Var> {
    let logits = classifier.forward(g, global)?;
    g.cross_entropy(logits, labels)
}

pub fn template_cls_loss<T: Real>(global: &[T], identity: usize, classifier: &Linear<T>) -> Result<f64> {
    if identity >= classifier.fan_out() {
        return Err(Error::invalid(format!(
            "identity {identity} unknown to a {}-way classifier",
            classifier.fan_out()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, global.len()], global.to_vec())?);
    let vars = classifier.bind(&mut g);
    let l = template_cls_loss_var(&mut g, x, &[identity], &vars)?;
    Ok(g.scalar(l).as_f64())
}

/// Loss weights with the step-halving regularizer schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3_init: f64,
    /// Steps between halvings of α₃.
    pub decay_period: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 2.0,
            alpha2: 5.0,
            alpha3_init: 30.0,
            decay_period: 1_000,
        }
    }
}

impl LossWeights {
    pub fn alpha3(&self, step: usize) -> f64 {
        let halvings = (step / self.decay_period.max(1)).min(1_000) as i32;
        self.alpha3_init * 0.5f64.powi(halvings)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub cls1: f64,
    pub cls2: f64,
    pub sim: f64,
    pub reg: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,cls1,cls2,sim,reg,alpha3,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.cls1, self.cls2, self.sim, self.reg, self.alpha3, self.total
        )
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("cls1", self.cls1),
            ("cls2", self.cls2),
            ("sim", self.sim),
            ("reg", self.reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub fn total_loss(cls1: f64, cls2: f64, sim: f64, reg: f64, step: usize, weights: &LossWeights) -> LossBreakdown {
    let alpha3 = weights.alpha3(step);
    LossBreakdown {
        step,
        cls1,
        cls2,
        sim,
        reg,
        alpha1: weights.alpha1,
        alpha2: weights.alpha2,
        alpha3,
        total: weights.alpha1 * (cls1 + cls2) + weights.alpha2 * sim + alpha3 * reg,
    }
}

/// Graph form of [`total_loss`] over scalar component nodes.
pub fn total_loss_var<T: Real>(
    g: &mut Graph<T>,
    cls1: Var,
    cls2: Var,
    sim: Var,
    reg: Var,
    step: usize,
    weights: &LossWeights,
) -> Result<Var> {
    let cls = g.add(cls1, cls2)?;
    let cls = g.scale(cls, T::lit(weights.alpha1));
    let sim = g.scale(sim, T::lit(weights.alpha2));
    let reg = g.scale(reg, T::lit(weights.alpha3(step)));
    let t = g.add(cls, sim)?;
    g.add(t, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{derive_rng, generate_identity, render_sample, RenderOptions};
    use rand::Rng;

    fn one_hot_maps(n: usize, h: usize, w: usize, cells: &[usize]) -> Tensor<f64> {
        let k = cells.len();
        let mut t = Tensor::zeros(&[n, h, w, k]);
        for img in 0..n {
            for (ch, &cell) in cells.iter().enumerate() {
                t.data_mut()[(img * h * w + cell) * k + ch] = 1.0;
            }
        }
        t
    }

    #[test]
    fn diversity_analytic_cases() {
        let disjoint: Vec<usize> = (0..12).collect();
        assert_eq!(diversity_loss(&one_hot_maps(1, 6, 6, &disjoint)).unwrap(), 0.0);
        let same = vec![7; 12];
        assert!((diversity_loss(&one_hot_maps(1, 6, 6, &same)).unwrap() - 11.0).abs() < 1e-12);
        for n in [1, 3] {
            let uniform = Tensor::<f64>::full(&[n, 6, 6, 12], 1.0 / 36.0);
            let l = diversity_loss(&uniform).unwrap();
            assert!((l - (n * 11) as f64).abs() < 1e-9, "n={n}: {l}");
        }
    }

    fn target_for_frontal() -> (RenderedSample, KeypointTarget<f64>) {
        let spec = generate_identity(3, 0);
        let s = render_sample(&spec, 0.0, 1.0, &RenderOptions::default(), &mut derive_rng(1, &[]));
        let t = KeypointTarget::from_samples([&s], 6, 6, 12, 8).unwrap();
        (s, t)
    }

    #[test]
    fn keypoint_target_layout() {
        let (s, t) = target_for_frontal();
        assert_eq!(s.pose, Pose::Frontal);
        assert_eq!(t.active_channels[0], vec![4, 5, 6, 7]);
        for ch in 0..12 {
            let total: f64 = (0..36).map(|c| t.target.data()[c * 12 + ch]).sum();
            let expect = if (4..8).contains(&ch) { 1.0 } else { 0.0 };
            assert!((total - expect).abs() < 1e-12);
        }
        assert!(KeypointTarget::<f64>::from_samples([&s], 6, 6, 2, 8).is_err());
    }

    #[test]
    fn keypoint_loss_cases() {
        let (_, t) = target_for_frontal();
        let mut p = t.target.clone();
        assert_eq!(keypoint_loss(&p, &t).unwrap(), 0.0);

        // Inactive channel 0: arbitrary values do not matter.
        let mut rng = derive_rng(2, &[]);
        for cell in 0..36 {
            p.data_mut()[cell * 12] = rng.random_range(-5.0..5.0);
        }
        assert_eq!(keypoint_loss(&p, &t).unwrap(), 0.0);

        let delta = 0.125;
        p.data_mut()[3 * 12 + 5] += delta;
        p.data_mut()[9 * 12 + 5] -= delta;
        assert!((keypoint_loss(&p, &t).unwrap() - delta * delta).abs() < 1e-15);
    }

    #[test]
    fn template_cls_cases() {
        let mut rng = derive_rng(3, &[]);
        let mut clf = Linear::<f64>::new(4, 5, &mut rng);
        clf.weight = Tensor::zeros(&[4, 5]);
        let l = template_cls_loss(&[0.3, -0.2, 0.1, 0.9], 2, &clf).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        clf.bias = Tensor::new(&[5], vec![0.0, 0.0, 60.0, 0.0, 0.0]).unwrap();
        assert!(template_cls_loss(&[0.3, -0.2, 0.1, 0.9], 2, &clf).unwrap() < 1e-20);

        let clf = Linear::<f64>::new(4, 5, &mut rng);
        let x = [0.5, -1.0, 0.25, 2.0];
        let logits: Vec<f64> = (0..5)
            .map(|j| clf.bias.data()[j] + (0..4).map(|i| x[i] * clf.weight.data()[i * 5 + j]).sum::<f64>())
            .collect();
        let denom: f64 = logits.iter().map(|v| v.exp()).sum();
        let expect = -(logits[1].exp() / denom).ln();
        assert!((template_cls_loss(&x, 1, &clf).unwrap() - expect).abs() < 1e-7);
        assert!(template_cls_loss(&x, 5, &clf).is_err());
    }

    #[test]
    fn schedule_and_total() {
        let w = LossWeights::default();
        let b = total_loss(1.0, 1.0, 1.0, 1.0, 0, &w);
        assert_eq!(b.total, 39.0);
        assert_eq!(w.alpha3(w.decay_period), 15.0);
        assert_eq!(w.alpha3(w.decay_period - 1), 30.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 5, &w).total, 0.0);
        let full_scale = LossWeights {
            decay_period: 60_000,
            ..w
        };
        assert_eq!(full_scale.alpha3(60_000), 15.0);
        assert_eq!(full_scale.alpha3(120_000), 7.5);
        let mut last = f64::INFINITY;
        for step in (0..20_000).step_by(250) {
            assert!(w.alpha3(step) <= last);
            last = w.alpha3(step);
        }
    }

    #[test]
    fn regularizer_parse() {
        assert_eq!("diversity".parse::<Regularizer>().unwrap(), Regularizer::Diversity);
        assert_eq!("keypoints".parse::<Regularizer>().unwrap(), Regularizer::Keypoints);
        assert!("both".parse::<Regularizer>().is_err());
    }
}
