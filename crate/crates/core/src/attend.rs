//! Template-level recalibration of score maps and attentional pooling.
//!
//! Two different normalisations of the score maps exist and never compose:
//! recalibration (softmax over every image and cell of a template, per
//! channel) feeds pooling, while self-normalisation (softmax over the cells
//! of one image, per channel) feeds only the landmark regularizers.

use crate::detect::LandmarkMaps;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Softmax of each channel jointly over images and cells (axes 0, 1, 2).
pub fn recalibrate_var<T: Real>(g: &mut Graph<T>, maps: Var) -> Result<Var> {
    if g.shape(maps).len() != 4 {
        return Err(Error::shape(format!(
            "recalibrate expects N×h×w×channels, got {:?}",
            g.shape(maps)
        )));
    }
    g.softmax_over(maps, &[0, 1, 2])
}

/// Softmax of each (image, channel) over its cells (axes 1, 2).
pub fn self_normalize_var<T: Real>(g: &mut Graph<T>, maps: Var) -> Result<Var> {
    if g.shape(maps).len() != 4 {
        return Err(Error::shape(format!(
            "self_normalize expects N×h×w×K, got {:?}",
            g.shape(maps)
        )));
    }
    g.softmax_over(maps, &[1, 2])
}

/// (K+1)×C descriptors: row k is Σ over images and cells of weight·feature.
pub fn attend_pool_var<T: Real>(g: &mut Graph<T>, features: Var, weights: Var) -> Result<Var> {
    let (fs, ws) = (g.shape(features), g.shape(weights));
    if fs.len() != 4 || ws.len() != 4 || fs[..3] != ws[..3] {
        return Err(Error::shape(format!(
            "attend_pool: features {fs:?} and attention {ws:?} disagree"
        )));
    }
    g.weighted_sum_pool(features, weights)
}

fn run_unary<T: Real>(t: &Tensor<T>, f: impl Fn(&mut Graph<T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let y = f(&mut g, x)?;
    Ok(g.value(y).clone())
}

pub fn recalibrate<T: Real>(maps: &Tensor<T>) -> Result<Tensor<T>> {
    run_unary(maps, recalibrate_var)
}

pub fn self_normalize<T: Real>(maps: &Tensor<T>) -> Result<Tensor<T>> {
    run_unary(maps, self_normalize_var)
}

pub fn attend_pool<T: Real>(features: &Tensor<T>, weights: &Tensor<T>) -> Result<DescriptorSet<T>> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let w = g.constant(weights.clone());
    let v = attend_pool_var(&mut g, f, w)?;
    Ok(DescriptorSet {
        vectors: g.value(v).clone(),
    })
}

/// K landmark descriptors followed by the global descriptor, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet<T> {
    pub vectors: Tensor<T>,
}

impl<T: Real> DescriptorSet<T> {
    pub fn new(vectors: Tensor<T>) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[0] < 2 {
            return Err(Error::shape(format!(
                "descriptor set needs (K+1)×C rows, got {:?}",
                vectors.shape()
            )));
        }
        Ok(DescriptorSet { vectors })
    }

    /// K + 1.
    pub fn rows(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[T] {
        let c = self.width();
        &self.vectors.data()[k * c..(k + 1) * c]
    }

    pub fn global(&self) -> &[T] {
        self.row(self.rows() - 1)
    }

    /// Copy with every row scaled to unit L2 norm.
    pub fn normalized(&self) -> Self {
        let mut g = Graph::new();
        let x = g.constant(self.vectors.clone());
        let y = g.l2_normalize(x);
        DescriptorSet {
            vectors: g.value(y).clone(),
        }
    }
}

/// Recalibrates the maps of one template and pools its descriptors.
pub fn describe<T: Real>(maps: &LandmarkMaps<T>) -> Result<DescriptorSet<T>> {
    let weights = recalibrate(&maps.combined())?;
    attend_pool(&maps.features, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
    }

    fn channel_totals(t: &Tensor<f64>) -> Vec<f64> {
        let k = *t.shape().last().unwrap();
        let mut totals = vec![0.0; k];
        for (i, v) in t.data().iter().enumerate() {
            totals[i % k] += v;
        }
        totals
    }

    #[test]
    fn recalibrated_channels_sum_to_one() {
        for (n, seed) in [(1, 1), (2, 2), (3, 3), (5, 4)] {
            let maps = random(&[n, 4, 4, 5], seed, 8.0);
            let r = recalibrate(&maps).unwrap();
            for total in channel_totals(&r) {
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_image_recalibration_is_spatial_softmax() {
        let maps = random(&[1, 3, 3, 4], 9, 3.0);
        assert!(recalibrate(&maps).unwrap().max_abs_diff(&self_normalize(&maps).unwrap()) < 1e-15);
    }

    #[test]
    fn identical_images_share_mass_equally() {
        let one = random(&[1, 3, 3, 4], 10, 3.0);
        let three = Tensor::concat_axis0(&[&one, &one, &one]).unwrap();
        let r = recalibrate(&three).unwrap();
        for n in 0..3 {
            let slice = r.slice_axis0(n, 1).unwrap();
            for total in channel_totals(&slice) {
                assert!((total - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_normalize_is_per_image() {
        let maps = random(&[3, 4, 4, 2], 11, 5.0);
        let p = self_normalize(&maps).unwrap();
        for n in 0..3 {
            for total in channel_totals(&p.slice_axis0(n, 1).unwrap()) {
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let alone = self_normalize(&maps.slice_axis0(1, 1).unwrap()).unwrap();
        assert_eq!(alone, p.slice_axis0(1, 1).unwrap());
        let uniform = self_normalize(&Tensor::<f64>::full(&[1, 2, 3, 1], 4.0)).unwrap();
        assert!(uniform.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn pooling_cases() {
        let features = random(&[2, 3, 3, 4], 12, 1.0);
        // One-hot at image 1, cell (2, 0) for channel 0; uniform for channel 1.
        let mut w = Tensor::<f64>::zeros(&[2, 3, 3, 2]);
        let hot = ((1 * 3 + 2) * 3) * 2;
        w.data_mut()[hot] = 1.0;
        for cell in 0..18 {
            w.data_mut()[cell * 2 + 1] = 1.0 / 18.0;
        }
        let d = attend_pool(&features, &w).unwrap();
        let fcell = ((1 * 3 + 2) * 3) * 4;
        assert_eq!(d.row(0), &features.data()[fcell..fcell + 4]);
        for c in 0..4 {
            let mean: f64 = (0..18).map(|cell| features.data()[cell * 4 + c]).sum::<f64>() / 18.0;
            assert!((d.row(1)[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_matches_triple_loop() {
        let (n, h, w, c, p) = (2, 3, 3, 4, 3);
        let features = random(&[n, h, w, c], 13, 1.0);
        let weights = random(&[n, h, w, p], 14, 1.0);
        let d = attend_pool(&features, &weights).unwrap();
        for k in 0..p {
            for ch in 0..c {
                let mut acc = 0.0;
                for img in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            let cell = (img * h + i) * w + j;
                            acc += features.data()[cell * c + ch] * weights.data()[cell * p + k];
                        }
                    }
                }
                assert!((d.row(k)[ch] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pooling_rejects_mismatch() {
        let f = Tensor::<f64>::zeros(&[2, 3, 3, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 2]);
        assert!(matches!(attend_pool(&f, &w), Err(Error::Shape(_))));
    }
}
