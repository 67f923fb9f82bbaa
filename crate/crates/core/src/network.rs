//! The full comparator network: shared Detect tower, per-template Attend,
//! Compare experts, and the template identity classifier used for training.

use rand::Rng;

use crate::attend::{attend_pool_var, recalibrate_var, self_normalize_var, DescriptorSet};
use crate::compare::{compare_templates, CompareMode, ExpertParams, ExpertVars, SimilarityOutput};
use crate::detect::{image_batch, DetectConfig, DetectParams, DetectVars, OUTPUT_STRIDE};
use crate::error::{Error, Result};
use crate::objectives::{
    diversity_loss_var, keypoint_loss_var, template_cls_loss_var, total_loss, total_loss_var, KeypointTarget,
    LossBreakdown, LossWeights, Regularizer,
};
use crate::params::{prefixed, prefixed_mut, Linear, LinearVars, Parameters};
use crate::synth::{RenderedSample, Template};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DcnConfig {
    pub detect: DetectConfig,
    /// Hidden width E of the local experts.
    pub expert_width: usize,
    /// Number of training identities seen by the template classifier.
    pub identities: usize,
}

impl Default for DcnConfig {
    fn default() -> Self {
        DcnConfig {
            detect: DetectConfig::default(),
            expert_width: 256,
            identities: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcnParams<T> {
    pub detect: DetectParams<T>,
    pub compare: ExpertParams<T>,
    /// C → identities, on the pooled global descriptor.
    pub identity: Linear<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct DcnVars {
    pub detect: DetectVars,
    pub compare: ExpertVars,
    pub identity: LinearVars,
}

impl DcnVars {
    /// Every parameter leaf, in [`Parameters::named`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.detect.all();
        v.extend(self.compare.all());
        v.push(self.identity.weight);
        v.push(self.identity.bias);
        v
    }
}

impl<T: Real> DcnParams<T> {
    pub fn new<R: Rng>(cfg: &DcnConfig, rng: &mut R) -> Self {
        let detect = DetectParams::new(&cfg.detect, rng);
        let c = detect.features();
        let k = detect.landmarks();
        DcnParams {
            compare: ExpertParams::new(c, k, cfg.expert_width, rng),
            identity: Linear::new(c, cfg.identities, rng),
            detect,
        }
    }

    pub fn config(&self) -> DcnConfig {
        DcnConfig {
            detect: DetectConfig {
                backbone: self.detect.backbone.config(),
                landmarks: self.landmarks(),
            },
            expert_width: self.compare.width(),
            identities: self.identity.fan_out(),
        }
    }

    pub fn landmarks(&self) -> usize {
        self.detect.landmarks()
    }

    pub fn features(&self) -> usize {
        self.detect.features()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> DcnVars {
        DcnVars {
            detect: self.detect.bind(g),
            compare: self.compare.bind(g),
            identity: self.identity.bind(g),
        }
    }

    pub fn cast<U: Real>(&self) -> DcnParams<U> {
        let mut out = DcnParams::<U>::shaped_like(self);
        for ((_, dst), (_, src)) in out.named_mut().into_iter().zip(self.named()) {
            *dst = src.cast();
        }
        out
    }

    fn shaped_like<S: Real>(other: &DcnParams<S>) -> Self {
        let mut rng = crate::synth::derive_rng(0, &[]);
        let mut p = DcnParams::new(&other.config(), &mut rng);
        for ((_, dst), (_, src)) in p.named_mut().into_iter().zip(other.named()) {
            *dst = Tensor::zeros(src.shape());
        }
        p
    }

    /// L2-normalized descriptor set of one template (eval path).
    pub fn describe(&self, template: &Template) -> Result<DescriptorSet<T>> {
        self.describe_samples(&template.samples)
    }

    pub fn describe_samples(&self, samples: &[RenderedSample]) -> Result<DescriptorSet<T>> {
        let images = image_batch(samples)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(images);
        let maps = vars.detect.forward(&mut g, x)?;
        let weights = recalibrate_var(&mut g, maps.combined)?;
        let pooled = attend_pool_var(&mut g, maps.features, weights)?;
        let normalized = g.l2_normalize(pooled);
        DescriptorSet::new(g.value(normalized).clone())
    }

    /// Self-normalized attention maps (N×h×w×(K+1)) of a template, for display.
    pub fn attention_maps(&self, samples: &[RenderedSample]) -> Result<Tensor<T>> {
        let images = image_batch(samples)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(images);
        let maps = vars.detect.forward(&mut g, x)?;
        let p = self_normalize_var(&mut g, maps.combined)?;
        Ok(g.value(p).clone())
    }

    /// Symmetrized eval-mode comparison of two templates.
    pub fn similarity(&self, a: &Template, b: &Template) -> Result<SimilarityOutput> {
        let da = self.describe(a)?;
        let db = self.describe(b)?;
        compare_templates(&da, &db, &self.compare, CompareMode::Eval)
    }
}

impl<T: Real> Parameters<T> for DcnParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.detect.named();
        v.extend(self.compare.named());
        v.extend(prefixed("identity", self.identity.items()));
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.detect.named_mut();
        v.extend(self.compare.named_mut());
        v.extend(prefixed_mut("identity", self.identity.items_mut()));
        v
    }
}

/// A training mini-batch: the images of every template involved, stacked,
/// and the pairs between them.
#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    /// All images, N_total×H×W×3.
    pub images: Tensor<T>,
    /// (first image, image count) of each template.
    pub spans: Vec<(usize, usize)>,
    /// Classifier label of each template.
    pub identities: Vec<usize>,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    /// Pair labels, [`crate::compare::SAME`] or [`crate::compare::DIFFERENT`].
    pub labels: Vec<usize>,
    pub keypoints: Option<KeypointTarget<T>>,
}

impl<T: Real> PairBatch<T> {
    /// `pairs` holds (left, right, label) indices into `templates`;
    /// `class_of` maps an identity id to its classifier label.
    pub fn assemble(
        templates: &[&Template],
        pairs: &[(usize, usize, usize)],
        class_of: impl Fn(usize) -> Option<usize>,
        regularizer: Regularizer,
        landmarks: usize,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("empty pair batch"));
        }
        let mut spans = Vec::with_capacity(templates.len());
        let mut identities = Vec::with_capacity(templates.len());
        let mut offset = 0;
        for t in templates {
            if t.samples.is_empty() {
                return Err(Error::invalid(format!("template of identity {} is empty", t.identity)));
            }
            spans.push((offset, t.samples.len()));
            offset += t.samples.len();
            identities.push(
                class_of(t.identity)
                    .ok_or_else(|| Error::invalid(format!("identity {} has no class label", t.identity)))?,
            );
        }
        let samples = templates.iter().flat_map(|t| t.samples.iter());
        let images: Tensor<T> = image_batch(samples.clone())?;
        let keypoints = match regularizer {
            Regularizer::Diversity => None,
            Regularizer::Keypoints => {
                let (h, w) = (images.shape()[1] / OUTPUT_STRIDE, images.shape()[2] / OUTPUT_STRIDE);
                Some(KeypointTarget::from_samples(samples, h, w, landmarks, OUTPUT_STRIDE)?)
            }
        };
        let mut left = Vec::with_capacity(pairs.len());
        let mut right = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for &(a, b, label) in pairs {
            if a >= templates.len() || b >= templates.len() || label > 1 {
                return Err(Error::invalid(format!("bad pair ({a}, {b}, {label})")));
            }
            left.push(a);
            right.push(b);
            labels.push(label);
        }
        Ok(PairBatch {
            images,
            spans,
            identities,
            left,
            right,
            labels,
            keypoints,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.left.len()
    }

    pub fn image_count(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Scalar loss nodes produced by [`pair_loss`].
#[derive(Clone, Copy, Debug)]
pub struct PairLossVars {
    pub cls1: Var,
    pub cls2: Var,
    pub sim: Var,
    pub reg: Var,
    pub total: Var,
}

impl PairLossVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, step: usize, weights: &LossWeights) -> LossBreakdown {
        let v = |x: Var| g.scalar(x).as_f64();
        let mut b = total_loss(v(self.cls1), v(self.cls2), v(self.sim), v(self.reg), step, weights);
        b.total = v(self.total);
        b
    }
}

/// Builds the composite training loss for `batch` on `g`. The diversity
/// term is averaged over every map of the batch, the keypoint term over
/// templates.
pub fn pair_loss<T: Real>(
    g: &mut Graph<T>,
    vars: &DcnVars,
    batch: &PairBatch<T>,
    regularizer: Regularizer,
    step: usize,
    weights: &LossWeights,
) -> Result<PairLossVars> {
    let rows = vars.compare.landmarks + 1;
    let c = vars.compare.features;
    let images = g.constant(batch.images.clone());
    let maps = vars.detect.forward(g, images)?;

    let mut pooled = Vec::with_capacity(batch.spans.len());
    for &(start, len) in &batch.spans {
        let combined = g.slice_axis0(maps.combined, start, len)?;
        let features = g.slice_axis0(maps.features, start, len)?;
        let w = recalibrate_var(g, combined)?;
        pooled.push(attend_pool_var(g, features, w)?);
    }
    let raw = g.concat(&pooled, 0)?;
    let t = batch.spans.len();
    let normalized = g.l2_normalize(raw);
    let descriptors = g.reshape(normalized, &[t, rows, c])?;

    let global_rows: Vec<usize> = (0..t).map(|i| i * rows + rows - 1).collect();
    let global = g.gather_axis0(raw, &global_rows)?;
    let side = |g: &mut Graph<T>, idx: &[usize]| -> Result<Var> {
        let x = g.gather_axis0(global, idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| batch.identities[i]).collect();
        template_cls_loss_var(g, x, &labels, &vars.identity)
    };
    let cls1 = side(g, &batch.left)?;
    let cls2 = side(g, &batch.right)?;

    let logits = vars.compare.pair_logits(g, descriptors, &batch.left, &batch.right)?;
    let sim = g.cross_entropy(logits, &batch.labels)?;

    let p = self_normalize_var(g, maps.local)?;
    let reg = match regularizer {
        Regularizer::Diversity => {
            let d = diversity_loss_var(g, p)?;
            let maps_total = batch.image_count() * vars.compare.landmarks;
            g.scale(d, T::lit(1.0 / maps_total as f64))
        }
        Regularizer::Keypoints => {
            let target = batch
                .keypoints
                .as_ref()
                .ok_or_else(|| Error::invalid("keypoint regularizer needs keypoint targets"))?;
            let k = keypoint_loss_var(g, p, target)?;
            g.scale(k, T::lit(1.0 / t as f64))
        }
    };
    let total = total_loss_var(g, cls1, cls2, sim, reg, step, weights)?;
    Ok(PairLossVars {
        cls1,
        cls2,
        sim,
        reg,
        total,
    })
}

/// Classification network used as the baseline embedder and mining base:
/// backbone, global average pooling, identity classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineParams<T> {
    pub backbone: crate::detect::Backbone<T>,
    pub classifier: Linear<T>,
}

impl<T: Real> BaselineParams<T> {
    pub fn new<R: Rng>(cfg: &crate::detect::BackboneConfig, identities: usize, rng: &mut R) -> Self {
        let backbone = crate::detect::Backbone::new(cfg, rng);
        let c = backbone.features();
        BaselineParams {
            backbone,
            classifier: Linear::new(c, identities, rng),
        }
    }

    pub fn cast<U: Real>(&self) -> BaselineParams<U> {
        let mut rng = crate::synth::derive_rng(0, &[]);
        let classes = self.classifier.weight.shape()[1];
        let mut out = BaselineParams::<U>::new(&self.backbone.config(), classes, &mut rng);
        for ((_, dst), (_, src)) in out.named_mut().into_iter().zip(self.named()) {
            *dst = src.cast();
        }
        out
    }

    /// Global-average-pooled features, one row per image.
    pub fn embed_var(
        &self,
        g: &mut Graph<T>,
        backbone: &crate::detect::BackboneVars,
        images: Var,
    ) -> Result<Var> {
        let f = backbone.forward(g, images)?;
        let s = g.shape(f).to_vec();
        let cells = s[1] * s[2];
        let f = g.reshape(f, &[s[0], cells, s[3]])?;
        let w = Tensor::from_fn(&[s[0], cells, s[0]], |i| {
            if i % s[0] == i / (cells * s[0]) {
                T::lit(1.0 / cells as f64)
            } else {
                T::zero()
            }
        });
        // weighted_sum_pool contracts every leading axis, so a per-image
        // one-hot weight selects that image's average.
        let w = g.constant(w);
        g.weighted_sum_pool(f, w)
    }

    /// Per-image embeddings (N×C).
    pub fn embed(&self, samples: &[RenderedSample]) -> Result<Tensor<T>> {
        let images = image_batch(samples)?;
        let mut g = Graph::new();
        let b = self.backbone.bind(&mut g);
        let x = g.constant(images);
        let e = self.embed_var(&mut g, &b, x)?;
        Ok(g.value(e).clone())
    }

    pub fn bind(&self, g: &mut Graph<T>) -> (crate::detect::BackboneVars, LinearVars) {
        (self.backbone.bind(g), self.classifier.bind(g))
    }

    /// Mean identity cross-entropy over a stack of labelled images.
    pub fn loss_var(
        &self,
        g: &mut Graph<T>,
        vars: &(crate::detect::BackboneVars, LinearVars),
        images: &Tensor<T>,
        labels: &[usize],
    ) -> Result<Var> {
        let x = g.constant(images.clone());
        let e = self.embed_var(g, &vars.0, x)?;
        let logits = vars.1.forward(g, e)?;
        g.cross_entropy(logits, labels)
    }
}

impl<T: Real> Parameters<T> for BaselineParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.backbone.named();
        v.extend(prefixed("baseline.classifier", self.classifier.items()));
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.backbone.named_mut();
        v.extend(prefixed_mut("baseline.classifier", self.classifier.items_mut()));
        v
    }
}
