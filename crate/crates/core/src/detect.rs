//! Shared backbone producing dense features plus landmark score maps.
//!
//! Layout (output stride 8):
//! conv 7×7/2 → ReLU → max-pool 3×3/2 → conv 3×3 → ReLU → conv 3×3/2 → ReLU
//! gives the feature map F; a 1×1 convolution on F gives the K local score
//! maps A, and their channel-wise maximum is the global map G.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{kaiming, prefixed, prefixed_mut, Parameters};
use crate::synth::{RenderedSample, Template};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const OUTPUT_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub conv1: usize,
    pub conv2: usize,
    /// Channel count C of the output feature map.
    pub features: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            conv1: 16,
            conv2: 32,
            features: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub conv3_w: Tensor<T>,
    pub conv3_b: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub conv3_w: Var,
    pub conv3_b: Var,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let (c1, c2, c3) = (cfg.conv1, cfg.conv2, cfg.features);
        Backbone {
            conv1_w: kaiming(&[7, 7, 3, c1], 7 * 7 * 3, rng),
            conv1_b: Tensor::zeros(&[c1]),
            conv2_w: kaiming(&[3, 3, c1, c2], 9 * c1, rng),
            conv2_b: Tensor::zeros(&[c2]),
            conv3_w: kaiming(&[3, 3, c2, c3], 9 * c2, rng),
            conv3_b: Tensor::zeros(&[c3]),
        }
    }

    pub fn features(&self) -> usize {
        self.conv3_w.shape()[3]
    }

    pub fn config(&self) -> BackboneConfig {
        BackboneConfig {
            conv1: self.conv1_w.shape()[3],
            conv2: self.conv2_w.shape()[3],
            features: self.features(),
        }
    }

    fn items(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("conv1.weight", &self.conv1_w),
            ("conv1.bias", &self.conv1_b),
            ("conv2.weight", &self.conv2_w),
            ("conv2.bias", &self.conv2_b),
            ("conv3.weight", &self.conv3_w),
            ("conv3.bias", &self.conv3_b),
        ]
    }

    fn items_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("conv1.weight", &mut self.conv1_w),
            ("conv1.bias", &mut self.conv1_b),
            ("conv2.weight", &mut self.conv2_w),
            ("conv2.bias", &mut self.conv2_b),
            ("conv3.weight", &mut self.conv3_w),
            ("conv3.bias", &mut self.conv3_b),
        ]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BackboneVars {
        let v: Vec<Var> = self
            .items()
            .into_iter()
            .map(|(_, t)| g.param(without_grad(t)))
            .collect();
        BackboneVars {
            conv1_w: v[0],
            conv1_b: v[1],
            conv2_w: v[2],
            conv2_b: v[3],
            conv3_w: v[4],
            conv3_b: v[5],
        }
    }
}

impl BackboneVars {
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.conv3_w,
            self.conv3_b,
        ]
    }

    /// N×H×W×3 images to the N×(H/8)×(W/8)×C feature map.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[3] != 3 || s[1] % OUTPUT_STRIDE != 0 || s[2] % OUTPUT_STRIDE != 0 {
            return Err(Error::shape(format!(
                "backbone expects N×H×W×3 with H, W multiples of 8, got {s:?}"
            )));
        }
        let x = g.conv2d(images, self.conv1_w, 2, 3)?;
        let x = g.bias_add(x, self.conv1_b)?;
        let x = g.relu(x);
        let x = g.max_pool2d(x, 3, 2, 1)?;
        let x = g.conv2d(x, self.conv2_w, 1, 1)?;
        let x = g.bias_add(x, self.conv2_b)?;
        let x = g.relu(x);
        let x = g.conv2d(x, self.conv3_w, 2, 1)?;
        let x = g.bias_add(x, self.conv3_b)?;
        Ok(g.relu(x))
    }
}

pub(crate) fn without_grad<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut t = t.clone();
    t.take_grad();
    t
}

impl<T: Real> Parameters<T> for Backbone<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        prefixed("backbone", self.items())
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        prefixed_mut("backbone", self.items_mut())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectConfig {
    pub backbone: BackboneConfig,
    /// Number of local landmark maps K.
    pub landmarks: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            backbone: BackboneConfig::default(),
            landmarks: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectParams<T> {
    pub backbone: Backbone<T>,
    /// 1×1×C×K landmark head.
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct DetectVars {
    pub backbone: BackboneVars,
    pub head_w: Var,
    pub head_b: Var,
}

impl<T: Real> DetectParams<T> {
    pub fn new<R: Rng>(cfg: &DetectConfig, rng: &mut R) -> Self {
        let c = cfg.backbone.features;
        DetectParams {
            backbone: Backbone::new(&cfg.backbone, rng),
            head_w: kaiming(&[1, 1, c, cfg.landmarks], c, rng),
            head_b: Tensor::zeros(&[cfg.landmarks]),
        }
    }

    pub fn landmarks(&self) -> usize {
        self.head_w.shape()[3]
    }

    pub fn features(&self) -> usize {
        self.backbone.features()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> DetectVars {
        let backbone = self.backbone.bind(g);
        let head_w = g.param(without_grad(&self.head_w));
        let head_b = g.param(without_grad(&self.head_b));
        DetectVars {
            backbone,
            head_w,
            head_b,
        }
    }
}

impl<T: Real> Parameters<T> for DetectParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("detect", self.backbone.items());
        v.extend(prefixed(
            "detect",
            vec![("head.weight", &self.head_w), ("head.bias", &self.head_b)],
        ));
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed_mut("detect", self.backbone.items_mut());
        v.extend(prefixed_mut(
            "detect",
            vec![
                ("head.weight", &mut self.head_w),
                ("head.bias", &mut self.head_b),
            ],
        ));
        v
    }
}

/// Graph handles of the Detect outputs for a stack of images.
#[derive(Clone, Copy, Debug)]
pub struct MapVars {
    /// N×h×w×C features.
    pub features: Var,
    /// N×h×w×K local score maps.
    pub local: Var,
    /// N×h×w×1 global map (channel max of `local`).
    pub global: Var,
    /// N×h×w×(K+1): local maps followed by the global map.
    pub combined: Var,
}

impl DetectVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.backbone.all();
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, images: Var) -> Result<MapVars> {
        let features = self.backbone.forward(g, images)?;
        let a = g.conv2d(features, self.head_w, 1, 0)?;
        let local = g.bias_add(a, self.head_b)?;
        let global = g.max_reduce(local, 3)?;
        let combined = g.concat(&[local, global], 3)?;
        Ok(MapVars {
            features,
            local,
            global,
            combined,
        })
    }
}

/// Detect outputs for one template.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkMaps<T> {
    pub features: Tensor<T>,
    pub local: Tensor<T>,
    pub global: Tensor<T>,
}

impl<T: Real> LandmarkMaps<T> {
    /// Local maps followed by the global map along the channel axis.
    pub fn combined(&self) -> Tensor<T> {
        let s = self.local.shape();
        let k = s[3];
        let cells = s[0] * s[1] * s[2];
        let mut data = Vec::with_capacity(cells * (k + 1));
        for cell in 0..cells {
            data.extend_from_slice(&self.local.data()[cell * k..(cell + 1) * k]);
            data.push(self.global.data()[cell]);
        }
        Tensor::new(&[s[0], s[1], s[2], k + 1], data).expect("sized buffer")
    }
}

/// Network input for a stack of samples: N×H×W×3 with 0.5 subtracted.
pub fn image_batch<'a, T: Real>(samples: impl IntoIterator<Item = &'a RenderedSample>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut n = 0;
    for s in samples {
        let size = s.size();
        match shape {
            None => shape = Some(size),
            Some(prev) if prev != size => {
                return Err(Error::shape(format!(
                    "mixed image sizes in one batch: {prev:?} and {size:?}"
                )))
            }
            _ => {}
        }
        data.extend(s.image.data().iter().map(|&v| T::lit(v as f64 - 0.5)));
        n += 1;
    }
    let (h, w) = shape.ok_or_else(|| Error::invalid("empty image batch"))?;
    Tensor::new(&[n, h, w, 3], data)
}

/// Runs Detect on every image of `template` with shared weights.
pub fn detect_forward<T: Real>(template: &Template, params: &DetectParams<T>) -> Result<LandmarkMaps<T>> {
    let images = image_batch(&template.samples)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.constant(images);
    let maps = vars.forward(&mut g, x)?;
    Ok(LandmarkMaps {
        features: g.value(maps.features).clone(),
        local: g.value(maps.local).clone(),
        global: g.value(maps.global).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{derive_rng, generate_identity, render_sample, RenderOptions};

    fn sample(seed: u64) -> RenderedSample {
        let spec = generate_identity(seed, 0);
        render_sample(&spec, 0.1, 0.9, &RenderOptions::default(), &mut derive_rng(seed, &[1]))
    }

    #[test]
    fn stride_eight_shapes() {
        let params = DetectParams::<f32>::new(&DetectConfig::default(), &mut derive_rng(0, &[]));
        let t = Template {
            identity: 0,
            samples: vec![sample(1), sample(2)],
        };
        let maps = detect_forward(&t, &params).unwrap();
        assert_eq!(maps.features.shape(), &[2, 6, 6, 64]);
        assert_eq!(maps.local.shape(), &[2, 6, 6, 12]);
        assert_eq!(maps.global.shape(), &[2, 6, 6, 1]);
    }

    #[test]
    fn global_map_is_channel_max() {
        let params = DetectParams::<f64>::new(&DetectConfig::default(), &mut derive_rng(3, &[]));
        let t = Template {
            identity: 0,
            samples: vec![sample(4)],
        };
        let maps = detect_forward(&t, &params).unwrap();
        for (cell, g) in maps.global.data().iter().enumerate() {
            let row = &maps.local.data()[cell * 12..(cell + 1) * 12];
            assert!(row.iter().all(|v| v <= g));
            assert!(row.iter().any(|v| v == g));
        }
    }

    #[test]
    fn weight_sharing_across_copies() {
        let params = DetectParams::<f32>::new(&DetectConfig::default(), &mut derive_rng(5, &[]));
        let x = sample(6);
        let one = detect_forward(&Template { identity: 0, samples: vec![x.clone()] }, &params).unwrap();
        let three = detect_forward(
            &Template {
                identity: 0,
                samples: vec![x.clone(), x.clone(), x],
            },
            &params,
        )
        .unwrap();
        for n in 0..3 {
            assert_eq!(three.features.slice_axis0(n, 1).unwrap(), one.features);
            assert_eq!(three.local.slice_axis0(n, 1).unwrap(), one.local);
        }
    }

    #[test]
    fn mixed_sizes_rejected() {
        let params = DetectParams::<f32>::new(&DetectConfig::default(), &mut derive_rng(5, &[]));
        let big = render_sample(
            &generate_identity(1, 1),
            0.0,
            1.0,
            &RenderOptions {
                size: 64,
                nuisance: false,
            },
            &mut derive_rng(0, &[]),
        );
        let t = Template {
            identity: 0,
            samples: vec![sample(1), big],
        };
        assert!(matches!(detect_forward(&t, &params), Err(Error::Shape(_))));
    }
}
