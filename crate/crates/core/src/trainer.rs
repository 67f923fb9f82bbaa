//! Training loops for the baseline classifier and the comparator network.

use std::io::Write;

use log::info;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::detect::{image_batch, BackboneConfig, DetectConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::mining::{build_mining_round, sample_pairs, EmbeddingStore, MiningRound, RoundConfig, SamplerConfig};
use crate::network::{pair_loss, BaselineParams, DcnConfig, DcnParams, PairBatch};
use crate::objectives::{LossBreakdown, LossWeights, Regularizer};
use crate::optim::{Adam, AdamConfig, Plateau};
use crate::params::Parameters;
use crate::synth::{augment, derive_rng, Dataset, RenderedSample, Split, Template};
use crate::tensor::{Graph, Real};

const TAG_INIT: u64 = 0x1417;
const TAG_STEPS: u64 = 0x5739;
const TAG_BASELINE: u64 = 0xba5e;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Template pairs per step.
    pub batch_pairs: usize,
    pub images_per_template: usize,
    pub landmarks: usize,
    pub regularizer: Regularizer,
    pub weights: LossWeights,
    pub train_seed: u64,
    pub max_steps: usize,
    /// Steps between mining rounds.
    pub mining_refresh: usize,
    pub round: RoundConfig,
    pub sampler: SamplerConfig,
    pub augment: bool,
    pub backbone: BackboneConfig,
    pub expert_width: usize,
    pub plateau_window: usize,
    pub plateau_threshold: f64,
    pub lr_drop_factor: f64,
    pub max_lr_drops: usize,
    pub baseline_steps: usize,
    pub baseline_batch: usize,
    pub baseline_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_pairs: 16,
            images_per_template: 3,
            landmarks: 12,
            regularizer: Regularizer::Keypoints,
            weights: LossWeights::default(),
            train_seed: 1,
            max_steps: 3000,
            mining_refresh: 5,
            round: RoundConfig::default(),
            sampler: SamplerConfig::default(),
            augment: true,
            backbone: BackboneConfig::default(),
            expert_width: 256,
            plateau_window: 200,
            plateau_threshold: 0.01,
            lr_drop_factor: 10.0,
            max_lr_drops: 2,
            baseline_steps: 1500,
            baseline_batch: 64,
            baseline_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_pairs", self.batch_pairs),
            ("images_per_template", self.images_per_template),
            ("k", self.landmarks),
            ("mining_refresh", self.mining_refresh),
            ("expert_width", self.expert_width),
            ("plateau_window", self.plateau_window),
            ("baseline_batch", self.baseline_batch),
            ("decay_period", self.weights.decay_period),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.batch_pairs % 2 != 0 {
            return Err(Error::Config("batch_pairs must be even".into()));
        }
        if !(self.lr > 0.0 && self.baseline_lr > 0.0 && self.lr_drop_factor > 1.0) {
            return Err(Error::Config("learning rates must be positive and the drop factor above 1".into()));
        }
        if self.regularizer == Regularizer::Keypoints && self.landmarks < crate::objectives::KEYPOINT_CHANNELS {
            return Err(Error::Config(format!(
                "keypoint regularizer needs k >= {}",
                crate::objectives::KEYPOINT_CHANNELS
            )));
        }
        Ok(())
    }

    pub fn dcn_config(&self, identities: usize) -> DcnConfig {
        DcnConfig {
            detect: DetectConfig {
                backbone: self.backbone,
                landmarks: self.landmarks,
            },
            expert_width: self.expert_width,
            identities,
        }
    }
}

/// Classifier label of each training identity, indexed by identity id.
fn class_table(dataset: &Dataset) -> Vec<Option<usize>> {
    let mut table = vec![None; dataset.by_identity.len()];
    for (class, id) in dataset.identities(Split::Train).into_iter().enumerate() {
        table[id] = Some(class);
    }
    table
}

fn maybe_augment<R: Rng>(s: &RenderedSample, on: bool, rng: &mut R) -> RenderedSample {
    if on {
        augment(s, rng).0
    } else {
        s.clone()
    }
}

/// Trains the average-pooling classification network on training images.
pub fn train_baseline<T: Real>(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut log: Option<&mut dyn Write>,
) -> Result<BaselineParams<T>> {
    cfg.validate()?;
    let classes = class_table(dataset);
    let train: Vec<usize> = (0..dataset.samples.len())
        .filter(|&i| classes[dataset.sample_identity[i]].is_some())
        .collect();
    let n_classes = classes.iter().flatten().count();
    let mut init = derive_rng(cfg.train_seed, &[TAG_BASELINE, TAG_INIT]);
    let mut params = BaselineParams::<T>::new(&cfg.backbone, n_classes, &mut init);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.baseline_lr,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut rng = derive_rng(cfg.train_seed, &[TAG_BASELINE, TAG_STEPS]);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "step,loss").map_err(|e| Error::io("baseline log", e))?;
    }
    let batch = cfg.baseline_batch.min(train.len());
    for step in 0..cfg.baseline_steps {
        if step == cfg.baseline_steps * 2 / 3 {
            adam.config.lr /= cfg.lr_drop_factor;
        }
        let picks = index::sample(&mut rng, train.len(), batch).into_vec();
        let samples: Vec<RenderedSample> = picks
            .iter()
            .map(|&p| maybe_augment(&dataset.samples[train[p]], cfg.augment, &mut rng))
            .collect();
        let labels: Vec<usize> = picks
            .iter()
            .map(|&p| classes[dataset.sample_identity[train[p]]].unwrap())
            .collect();
        let images = image_batch::<T>(&samples)?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let loss = params.loss_var(&mut g, &vars, &images, &labels)?;
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                component: "baseline".into(),
            });
        }
        g.backward(loss)?;
        let mut all = vars.0.all();
        all.extend([vars.1.weight, vars.1.bias]);
        params.accumulate_grads(&g, &all);
        adam.step(&mut params)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{step},{value:.9e}").map_err(|e| Error::io("baseline log", e))?;
        }
        if step % 250 == 0 {
            info!("baseline step {step}: loss {value:.4}");
        }
    }
    Ok(params)
}

/// Baseline embeddings of every dataset image, centred on the mean embedding
/// of the training images.
pub fn embedding_store<T: Real>(baseline: &BaselineParams<T>, dataset: &Dataset) -> Result<EmbeddingStore> {
    let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(dataset.samples.len());
    for chunk in dataset.samples.chunks(128) {
        let e = baseline.embed(chunk)?;
        let c = e.shape()[1];
        embeddings.extend(e.data().chunks(c).map(|row| row.iter().map(|v| v.as_f64()).collect()));
    }
    let train: Vec<usize> = (0..embeddings.len())
        .filter(|&i| dataset.split_of(dataset.sample_identity[i]) == Split::Train)
        .collect();
    if !train.is_empty() {
        let dim = embeddings[0].len();
        let mut mean = vec![0.0; dim];
        for &i in &train {
            mean.iter_mut().zip(&embeddings[i]).for_each(|(m, v)| *m += v / train.len() as f64);
        }
        for e in &mut embeddings {
            e.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
    }
    EmbeddingStore::new(embeddings, dataset.sample_identity.clone())
}

/// Online state of a comparator-network training run.
pub struct DcnTrainer<T> {
    pub config: TrainConfig,
    pub params: DcnParams<T>,
    pub adam: Adam<T>,
    pub plateau: Plateau,
    pub step: usize,
    pub round: Option<MiningRound>,
    classes: Vec<Option<usize>>,
    train_identities: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<T: Real> DcnTrainer<T> {
    pub fn new(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let classes = class_table(dataset);
        let train_identities = dataset.identities(Split::Train);
        let needed = config.round.identities.max(config.batch_pairs / 2);
        if train_identities.len() < needed {
            return Err(Error::invalid(format!(
                "{} training identities, at least {needed} needed",
                train_identities.len()
            )));
        }
        let mut init = derive_rng(config.train_seed, &[TAG_INIT]);
        let params = DcnParams::new(&config.dcn_config(train_identities.len()), &mut init);
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &params,
        );
        Ok(DcnTrainer {
            plateau: Plateau::new(
                config.plateau_window,
                config.plateau_threshold,
                2,
                config.lr_drop_factor,
                config.max_lr_drops,
            ),
            config: config.clone(),
            params,
            adam,
            step: 0,
            round: None,
            classes,
            train_identities,
            rng: derive_rng(config.train_seed, &[TAG_STEPS]),
        })
    }

    /// Templates and pairs for the next step, refreshing the mining round
    /// when due.
    pub fn next_batch(&mut self, dataset: &Dataset, store: &EmbeddingStore) -> Result<PairBatch<T>> {
        if self.round.is_none() || self.step % self.config.mining_refresh == 0 {
            let round_cfg = RoundConfig {
                images_per_template: self.config.images_per_template,
                ..self.config.round
            };
            self.round = Some(build_mining_round(
                &self.train_identities,
                &round_cfg,
                store,
                &mut self.rng,
            )?);
        }
        let round = self.round.as_ref().unwrap();
        let pairs = sample_pairs(&round.difficulty, self.config.batch_pairs, &self.config.sampler, &mut self.rng)?;

        let mut slots: Vec<usize> = Vec::new();
        let local = |t: usize, slots: &mut Vec<usize>| match slots.iter().position(|&s| s == t) {
            Some(p) => p,
            None => {
                slots.push(t);
                slots.len() - 1
            }
        };
        let mut batch_pairs = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let (a, b) = if self.rng.random_bool(0.5) { (p.j, p.i) } else { (p.i, p.j) };
            let (a, b) = (local(a, &mut slots), local(b, &mut slots));
            batch_pairs.push((a, b, p.label));
        }
        let templates: Vec<Template> = slots
            .iter()
            .map(|&t| {
                let mined = &round.templates[t];
                let mut cache: Vec<(usize, RenderedSample)> = Vec::new();
                let samples = mined
                    .images
                    .iter()
                    .map(|&img| {
                        if let Some((_, s)) = cache.iter().find(|(i, _)| *i == img) {
                            return s.clone();
                        }
                        let s = maybe_augment(&dataset.samples[img], self.config.augment, &mut self.rng);
                        cache.push((img, s.clone()));
                        s
                    })
                    .collect();
                Template {
                    identity: mined.identity,
                    samples,
                }
            })
            .collect();
        let refs: Vec<&Template> = templates.iter().collect();
        PairBatch::assemble(
            &refs,
            &batch_pairs,
            |id| self.classes.get(id).copied().flatten(),
            self.config.regularizer,
            self.config.landmarks,
        )
    }

    /// Forward, backward and update on one batch.
    pub fn step_on(&mut self, batch: &PairBatch<T>) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let loss = pair_loss(
            &mut g,
            &vars,
            batch,
            self.config.regularizer,
            self.step,
            &self.config.weights,
        )?;
        let breakdown = loss.breakdown(&g, self.step, &self.config.weights);
        if let Some(component) = breakdown.non_finite_component() {
            return Err(Error::NonFinite {
                step: self.step,
                component: component.into(),
            });
        }
        g.backward(loss.total)?;
        self.params.accumulate_grads(&g, &vars.all());
        self.adam.step(&mut self.params)?;
        if !self.params.all_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                component: "parameters".into(),
            });
        }
        if let Some(f) = self.plateau.observe(breakdown.total) {
            self.adam.config.lr /= f;
            info!("step {}: loss plateau, lr now {:e}", self.step, self.adam.config.lr);
        }
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs to `max_steps`, writing one CSV row per step to `log`.
    pub fn run(&mut self, dataset: &Dataset, store: &EmbeddingStore, log: &mut dyn Write) -> Result<()> {
        if self.step == 0 {
            writeln!(log, "{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io("loss log", e))?;
        }
        while self.step < self.config.max_steps {
            let batch = self.next_batch(dataset, store)?;
            let b = self.step_on(&batch)?;
            writeln!(log, "{}", b.csv_row()).map_err(|e| Error::io("loss log", e))?;
            if b.step % 100 == 0 {
                info!(
                    "step {}: total {:.4} cls {:.3}/{:.3} sim {:.4} reg {:.4}",
                    b.step, b.total, b.cls1, b.cls2, b.sim, b.reg
                );
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut c = dcn_checkpoint(&self.params);
        c.set("step", self.step);
        c.set("lr", self.adam.config.lr);
        c.set("adam.beta1", self.adam.config.beta1);
        c.set("adam.beta2", self.adam.config.beta2);
        c.set("adam.eps", self.adam.config.eps);
        c.set("adam.t", self.adam.t);
        for ((name, _), (m, v)) in self.params.named().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            c.push(format!("adam.m.{name}"), m);
            c.push(format!("adam.v.{name}"), v);
        }
        c
    }
}

/// Checkpoint holding the model tensors and the shape keys needed to rebuild it.
pub fn dcn_checkpoint<T: Real>(params: &DcnParams<T>) -> Checkpoint<T> {
    let cfg = params.config();
    let mut c = Checkpoint::default();
    c.set("model", "dcn");
    c.set("model.conv1", cfg.detect.backbone.conv1);
    c.set("model.conv2", cfg.detect.backbone.conv2);
    c.set("model.features", cfg.detect.backbone.features);
    c.set("model.landmarks", cfg.detect.landmarks);
    c.set("model.expert_width", cfg.expert_width);
    c.set("model.identities", cfg.identities);
    for (name, t) in params.named() {
        c.push(name, t);
    }
    c
}

pub fn dcn_from_checkpoint<T: Real>(c: &Checkpoint<T>) -> Result<DcnParams<T>> {
    if c.get("model") != Some("dcn") {
        return Err(CheckpointError::CorruptHeader("not a comparator-network checkpoint".into()).into());
    }
    let cfg = DcnConfig {
        detect: DetectConfig {
            backbone: BackboneConfig {
                conv1: c.parse("model.conv1")?,
                conv2: c.parse("model.conv2")?,
                features: c.parse("model.features")?,
            },
            landmarks: c.parse("model.landmarks")?,
        },
        expert_width: c.parse("model.expert_width")?,
        identities: c.parse("model.identities")?,
    };
    let mut params = DcnParams::new(&cfg, &mut derive_rng(0, &[]));
    load_named(&mut params, c)?;
    Ok(params)
}

pub fn baseline_checkpoint<T: Real>(params: &BaselineParams<T>) -> Checkpoint<T> {
    let cfg = params.backbone.config();
    let mut c = Checkpoint::default();
    c.set("model", "baseline");
    c.set("model.conv1", cfg.conv1);
    c.set("model.conv2", cfg.conv2);
    c.set("model.features", cfg.features);
    c.set("model.identities", params.classifier.fan_out());
    for (name, t) in params.named() {
        c.push(name, t);
    }
    c
}

pub fn baseline_from_checkpoint<T: Real>(c: &Checkpoint<T>) -> Result<BaselineParams<T>> {
    if c.get("model") != Some("baseline") {
        return Err(CheckpointError::CorruptHeader("not a baseline checkpoint".into()).into());
    }
    let cfg = BackboneConfig {
        conv1: c.parse("model.conv1")?,
        conv2: c.parse("model.conv2")?,
        features: c.parse("model.features")?,
    };
    let mut params = BaselineParams::new(&cfg, c.parse("model.identities")?, &mut derive_rng(0, &[]));
    load_named(&mut params, c)?;
    Ok(params)
}

/// Copies every tensor of `params` from the checkpoint by name.
pub fn load_named<T: Real, P: Parameters<T>>(params: &mut P, c: &Checkpoint<T>) -> Result<()> {
    for (name, t) in params.named_mut() {
        let src = c.tensor(&name)?;
        if src.shape() != t.shape() {
            return Err(CheckpointError::CorruptHeader(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                src.shape(),
                t.shape()
            ))
            .into());
        }
        *t = src.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DatasetConfig;

    pub(crate) fn tiny() -> (TrainConfig, Dataset) {
        let ds = Dataset::generate(&DatasetConfig {
            seed: 3,
            identities: 12,
            test_identities: 4,
            images_per_identity: 6,
            image_size: 16,
        })
        .unwrap();
        let cfg = TrainConfig {
            batch_pairs: 4,
            max_steps: 3,
            mining_refresh: 2,
            round: RoundConfig {
                identities: 6,
                ..RoundConfig::default()
            },
            sampler: SamplerConfig {
                ceiling: 2.0,
                ..SamplerConfig::default()
            },
            backbone: BackboneConfig {
                conv1: 4,
                conv2: 4,
                features: 8,
            },
            expert_width: 8,
            baseline_steps: 3,
            baseline_batch: 8,
            ..TrainConfig::default()
        };
        (cfg, ds)
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let (cfg, ds) = tiny();
        let run = || {
            let base = train_baseline::<f32>(&cfg, &ds, None).unwrap();
            let store = embedding_store(&base, &ds).unwrap();
            let mut t = DcnTrainer::<f32>::new(&cfg, &ds).unwrap();
            let mut log = Vec::new();
            t.run(&ds, &store, &mut log).unwrap();
            (String::from_utf8(log).unwrap(), t.to_checkpoint().to_bytes())
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(a.lines().count(), 4);
        assert!(a.starts_with(LossBreakdown::CSV_HEADER));
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_model() {
        let (cfg, ds) = tiny();
        let t = DcnTrainer::<f64>::new(&cfg, &ds).unwrap();
        let bytes = t.to_checkpoint().to_bytes();
        let back = dcn_from_checkpoint(&Checkpoint::<f64>::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, t.params);
        let base = BaselineParams::<f32>::new(&cfg.backbone, 8, &mut derive_rng(1, &[]));
        let c = Checkpoint::from_bytes(&baseline_checkpoint(&base).to_bytes()).unwrap();
        assert_eq!(baseline_from_checkpoint(&c).unwrap(), base);
        assert!(dcn_from_checkpoint(&c).is_err());
    }

    #[test]
    fn validation() {
        let (cfg, _) = tiny();
        assert!(TrainConfig { batch_pairs: 3, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig {
            landmarks: 4,
            regularizer: Regularizer::Keypoints,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(cfg.validate().is_ok());
    }
}
