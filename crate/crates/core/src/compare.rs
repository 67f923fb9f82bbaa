//! Landmark-conditioned comparison of two descriptor sets.
//!
//! For each of the K+1 rows, `[v1 | v2 | one-hot(k)]` goes through one shared
//! fully-connected expert with ReLU; expert outputs are max-pooled
//! coordinate-wise and a final linear layer emits two logits
//! (index 0 = different, index 1 = same).

use rand::Rng;

use crate::attend::DescriptorSet;
use crate::detect::without_grad;
use crate::error::{Error, Result};
use crate::params::{prefixed, prefixed_mut, Linear, LinearVars, Parameters};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const DIFFERENT: usize = 0;
pub const SAME: usize = 1;

/// Width of one expert input: two descriptors plus the landmark tag.
pub fn expert_input_width(features: usize, landmarks: usize) -> usize {
    2 * features + landmarks + 1
}

/// `[v1 | v2 | one-hot(k)]` with the tag over K+1 slots.
pub fn build_expert_input<T: Real>(v1: &[T], v2: &[T], k: usize, landmarks: usize) -> Result<Vec<T>> {
    if v1.len() != v2.len() {
        return Err(Error::shape(format!(
            "descriptor widths differ: {} vs {}",
            v1.len(),
            v2.len()
        )));
    }
    if k > landmarks {
        return Err(Error::invalid(format!(
            "landmark index {k} outside 0..={landmarks}"
        )));
    }
    let mut x = Vec::with_capacity(expert_input_width(v1.len(), landmarks));
    x.extend_from_slice(v1);
    x.extend_from_slice(v2);
    x.extend((0..=landmarks).map(|i| if i == k { T::one() } else { T::zero() }));
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams<T> {
    pub features: usize,
    pub landmarks: usize,
    /// (2C + K + 1) → E, shared by all K+1 experts.
    pub expert: Linear<T>,
    /// E → 2.
    pub classifier: Linear<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub features: usize,
    pub landmarks: usize,
    pub expert: LinearVars,
    pub classifier: LinearVars,
}

impl<T: Real> ExpertParams<T> {
    pub fn new<R: Rng>(features: usize, landmarks: usize, width: usize, rng: &mut R) -> Self {
        ExpertParams {
            features,
            landmarks,
            expert: Linear::new(expert_input_width(features, landmarks), width, rng),
            classifier: Linear::new(width, 2, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.expert.fan_out()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ExpertVars {
        let ew = g.param(without_grad(&self.expert.weight));
        let eb = g.param(without_grad(&self.expert.bias));
        let cw = g.param(without_grad(&self.classifier.weight));
        let cb = g.param(without_grad(&self.classifier.bias));
        ExpertVars {
            features: self.features,
            landmarks: self.landmarks,
            expert: LinearVars {
                weight: ew,
                bias: eb,
            },
            classifier: LinearVars {
                weight: cw,
                bias: cb,
            },
        }
    }
}

impl<T: Real> Parameters<T> for ExpertParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("compare.expert", self.expert.items());
        v.extend(prefixed("compare.classifier", self.classifier.items()));
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed_mut("compare.expert", self.expert.items_mut());
        v.extend(prefixed_mut("compare.classifier", self.classifier.items_mut()));
        v
    }
}

impl ExpertVars {
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.expert.weight,
            self.expert.bias,
            self.classifier.weight,
            self.classifier.bias,
        ]
    }

    /// Logits (P×2) for pairs `(left[p], right[p])` of rows of `descriptors`,
    /// a T×(K+1)×C stack of L2-normalized descriptor sets.
    pub fn pair_logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        descriptors: Var,
        left: &[usize],
        right: &[usize],
    ) -> Result<Var> {
        let ds = g.shape(descriptors).to_vec();
        let rows = self.landmarks + 1;
        if ds.len() != 3 || ds[1] != rows || ds[2] != self.features {
            return Err(Error::shape(format!(
                "compare expects T×{rows}×{} descriptors, got {ds:?}",
                self.features
            )));
        }
        if left.len() != right.len() || left.is_empty() {
            return Err(Error::invalid("pair lists must be non-empty and equally long"));
        }
        let p = left.len();
        let l = g.gather_axis0(descriptors, left)?;
        let r = g.gather_axis0(descriptors, right)?;
        let tags = Tensor::from_fn(&[p, rows, rows], |i| {
            let k = (i / rows) % rows;
            if i % rows == k {
                T::one()
            } else {
                T::zero()
            }
        });
        let tags = g.constant(tags);
        let x = g.concat(&[l, r, tags], 2)?;
        let width = expert_input_width(self.features, self.landmarks);
        let x = g.reshape(x, &[p * rows, width])?;
        let h = self.expert.forward(g, x)?;
        let h = g.relu(h);
        let e = g.shape(h)[1];
        let h = g.reshape(h, &[p, rows, e])?;
        let pooled = g.max_reduce(h, 1)?;
        let pooled = g.reshape(pooled, &[p, e])?;
        self.classifier.forward(g, pooled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompareMode {
    /// Training: the caller's coin decides whether the pair is presented swapped.
    Train { swap: bool },
    /// Evaluation: logits of both presentation orders are averaged.
    Eval,
}

impl CompareMode {
    pub fn train<R: Rng>(rng: &mut R) -> Self {
        CompareMode::Train {
            swap: rng.random_bool(0.5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityOutput {
    /// `[different, same]`.
    pub logits: [f64; 2],
    pub probability_same: f64,
}

impl SimilarityOutput {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        SimilarityOutput {
            logits,
            probability_same: e1 / (e0 + e1),
        }
    }

    pub fn probability_different(&self) -> f64 {
        1.0 - self.probability_same
    }

    /// Log-odds of "same"; a strictly increasing function of `probability_same`
    /// that does not saturate.
    pub fn margin(&self) -> f64 {
        self.logits[SAME] - self.logits[DIFFERENT]
    }
}

fn ordered_logits<T: Real>(
    a: &DescriptorSet<T>,
    b: &DescriptorSet<T>,
    params: &ExpertParams<T>,
) -> Result<[f64; 2]> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let stacked = Tensor::concat_axis0(&[&a.vectors, &b.vectors])?.reshape(&[
        2,
        a.rows(),
        a.width(),
    ])?;
    let d = g.constant(stacked);
    let logits = vars.pair_logits(&mut g, d, &[0], &[1])?;
    let v = g.value(logits).data();
    Ok([v[0].as_f64(), v[1].as_f64()])
}

/// Compares two L2-normalized descriptor sets.
pub fn compare_templates<T: Real>(
    d1: &DescriptorSet<T>,
    d2: &DescriptorSet<T>,
    params: &ExpertParams<T>,
    mode: CompareMode,
) -> Result<SimilarityOutput> {
    let rows = params.landmarks + 1;
    for d in [d1, d2] {
        if d.rows() != rows || d.width() != params.features {
            return Err(Error::shape(format!(
                "descriptor set {:?} does not match expert input {rows}×{}",
                d.vectors.shape(),
                params.features
            )));
        }
    }
    let logits = match mode {
        CompareMode::Train { swap: false } => ordered_logits(d1, d2, params)?,
        CompareMode::Train { swap: true } => ordered_logits(d2, d1, params)?,
        CompareMode::Eval => {
            let ab = ordered_logits(d1, d2, params)?;
            let ba = ordered_logits(d2, d1, params)?;
            [0.5 * (ab[0] + ba[0]), 0.5 * (ab[1] + ba[1])]
        }
    };
    Ok(SimilarityOutput::from_logits(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::derive_rng;

    fn random_set(rows: usize, c: usize, seed: u64) -> DescriptorSet<f64> {
        let mut rng = derive_rng(seed, &[]);
        let t = Tensor::from_fn(&[rows, c], |_| rng.random_range(-1.0..1.0));
        DescriptorSet::new(t).unwrap().normalized()
    }

    #[test]
    fn expert_input_layout() {
        assert_eq!(expert_input_width(1024, 12), 2061);
        assert_eq!(expert_input_width(64, 12), 141);
        let x = build_expert_input(&[0.1, 0.2], &[0.3, 0.4], 0, 12).unwrap();
        assert_eq!(x.len(), 2 * 2 + 13);
        assert_eq!(&x[..4], &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(x[4], 1.0);
        assert!(x[5..].iter().all(|&v| v == 0.0));
        assert!(build_expert_input(&[0.0], &[0.0], 13, 12).is_err());
        assert!(build_expert_input(&[0.0], &[0.0, 1.0], 0, 12).is_err());
    }

    #[test]
    fn eval_is_symmetric_exactly() {
        let params = ExpertParams::<f64>::new(5, 3, 8, &mut derive_rng(1, &[]));
        let (a, b) = (random_set(4, 5, 2), random_set(4, 5, 3));
        let ab = compare_templates(&a, &b, &params, CompareMode::Eval).unwrap();
        let ba = compare_templates(&b, &a, &params, CompareMode::Eval).unwrap();
        assert_eq!(ab, ba);
        assert!((ab.probability_same + ab.probability_different() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn train_swap_presents_reverse_order() {
        let params = ExpertParams::<f64>::new(5, 3, 8, &mut derive_rng(4, &[]));
        let (a, b) = (random_set(4, 5, 5), random_set(4, 5, 6));
        let swapped = compare_templates(&a, &b, &params, CompareMode::Train { swap: true }).unwrap();
        let direct = compare_templates(&b, &a, &params, CompareMode::Train { swap: false }).unwrap();
        assert_eq!(swapped, direct);
    }

    #[test]
    fn equal_expert_outputs_pool_to_common_vector() {
        // Zero descriptor weights and tag weights make every expert row equal
        // to relu(bias), so the max-pool returns exactly that vector.
        let mut params = ExpertParams::<f64>::new(3, 2, 4, &mut derive_rng(7, &[]));
        params.expert.weight = Tensor::zeros(params.expert.weight.shape());
        params.expert.bias = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        params.classifier.weight = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.25);
        params.classifier.bias = Tensor::zeros(&[2]);
        let (a, b) = (random_set(3, 3, 8), random_set(3, 3, 9));
        let out = compare_templates(&a, &b, &params, CompareMode::Train { swap: false }).unwrap();
        let pooled = [0.5, 0.0, 2.0, 0.0];
        for c in 0..2 {
            let e: f64 = (0..4).map(|j| pooled[j] * params.classifier.weight.data()[j * 2 + c]).sum();
            assert!((out.logits[c] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_explicit_expert_loop() {
        let (k, c, e) = (2, 3, 4);
        let params = ExpertParams::<f64>::new(c, k, e, &mut derive_rng(10, &[]));
        let (a, b) = (random_set(k + 1, c, 11), random_set(k + 1, c, 12));
        let out = compare_templates(&a, &b, &params, CompareMode::Train { swap: false }).unwrap();

        let w = params.expert.weight.data();
        let bias = params.expert.bias.data();
        let mut pooled = vec![f64::NEG_INFINITY; e];
        for row in 0..=k {
            let x = build_expert_input(a.row(row), b.row(row), row, k).unwrap();
            for j in 0..e {
                let mut acc = bias[j];
                for (i, xv) in x.iter().enumerate() {
                    acc += xv * w[i * e + j];
                }
                pooled[j] = pooled[j].max(acc.max(0.0));
            }
        }
        let cw = params.classifier.weight.data();
        let cb = params.classifier.bias.data();
        for cls in 0..2 {
            let mut acc = cb[cls];
            for j in 0..e {
                acc += pooled[j] * cw[j * 2 + cls];
            }
            assert!((out.logits[cls] - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn row_count_mismatch_rejected() {
        let params = ExpertParams::<f64>::new(3, 2, 4, &mut derive_rng(7, &[]));
        let (a, b) = (random_set(3, 3, 1), random_set(4, 3, 2));
        assert!(matches!(
            compare_templates(&a, &b, &params, CompareMode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn probability_is_monotone_in_margin() {
        let mut last = 0.0;
        for i in -20..=20 {
            let out = SimilarityOutput::from_logits([0.3, 0.3 + i as f64 * 0.5]);
            assert!(out.probability_same > last);
            last = out.probability_same;
        }
    }
}
