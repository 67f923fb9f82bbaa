//! Hard-pair mining: approximate templates with base-network embeddings,
//! score every template pair by difficulty, and draw training pairs from
//! difficulty buckets.

use rand::seq::index;
use rand::Rng;

use crate::compare::{DIFFERENT, SAME};
use crate::error::{Error, Result};
use crate::synth::IDENTICAL_TEMPLATE_PROB;

/// Per-image embeddings from the base classifier, with identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub embeddings: Vec<Vec<f64>>,
    pub identities: Vec<usize>,
    /// Image indices of each identity, indexed by identity id.
    pub by_identity: Vec<Vec<usize>>,
}

impl EmbeddingStore {
    pub fn new(embeddings: Vec<Vec<f64>>, identities: Vec<usize>) -> Result<Self> {
        if embeddings.len() != identities.len() {
            return Err(Error::invalid(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                identities.len()
            )));
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        if embeddings.iter().any(|e| e.len() != dim || e.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("embeddings must share one dimension and be finite"));
        }
        let mut by_identity = vec![Vec::new(); identities.iter().max().map_or(0, |m| m + 1)];
        for (i, &id) in identities.iter().enumerate() {
            by_identity[id].push(i);
        }
        Ok(EmbeddingStore {
            embeddings,
            identities,
            by_identity,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn images_of(&self, identity: usize) -> &[usize] {
        self.by_identity.get(identity).map_or(&[], Vec::as_slice)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Mean of the image embeddings, L2-normalized.
pub fn template_descriptor<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<Vec<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::invalid("template descriptor of an empty template"))?;
    let mut mean = vec![0.0; first.as_ref().len()];
    for e in embeddings {
        let e = e.as_ref();
        if e.len() != mean.len() {
            return Err(Error::shape(format!("embedding widths {} and {} differ", e.len(), mean.len())));
        }
        mean.iter_mut().zip(e).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= embeddings.len() as f64);
    normalize(&mut mean);
    Ok(mean)
}

/// Dense row-major n×n matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Pairwise cosine similarities of unit-norm descriptors.
pub fn similarity_matrix<V: AsRef<[f64]>>(descriptors: &[V]) -> SquareMatrix {
    let n = descriptors.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = descriptors[i]
                .as_ref()
                .iter()
                .zip(descriptors[j].as_ref())
                .map(|(a, b)| a * b)
                .sum();
            let s = s.clamp(-1.0, 1.0);
            data[i * n + j] = s;
            data[j * n + i] = s;
        }
    }
    SquareMatrix { n, data }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyMatrix {
    pub similarity: SquareMatrix,
    /// Row-major 0/1 ground truth.
    pub labels: Vec<u8>,
    /// `|label − similarity|`, row-major.
    pub d: Vec<f64>,
}

impl DifficultyMatrix {
    pub fn n(&self) -> usize {
        self.similarity.n
    }

    pub fn difficulty(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n() + j]
    }

    pub fn label(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.n() + j]
    }

    /// Difficulties of all pairs i < j.
    pub fn upper_triangle(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n();
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j, self.difficulty(i, j))))
    }
}

pub fn difficulty_matrix(similarity: SquareMatrix, labels: Vec<u8>) -> Result<DifficultyMatrix> {
    if labels.len() != similarity.data.len() {
        return Err(Error::shape(format!(
            "{} labels for a {}×{} similarity matrix",
            labels.len(),
            similarity.n,
            similarity.n
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("pair label {bad} is not 0 or 1")));
    }
    let d = similarity
        .data
        .iter()
        .zip(&labels)
        .map(|(s, &l)| (l as f64 - s).abs())
        .collect();
    Ok(DifficultyMatrix {
        similarity,
        labels,
        d,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bucket {
    pub center: f64,
    pub half_width: f64,
    pub weight: f64,
}

impl Bucket {
    /// Half-open interval `[center − half_width, center + half_width)`.
    pub fn contains(&self, d: f64) -> bool {
        d >= self.center - self.half_width && d < self.center + self.half_width
    }

    pub fn name(&self) -> String {
        format!("[{:.3},{:.3})", self.center - self.half_width, self.center + self.half_width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub buckets: Vec<Bucket>,
    /// Pairs harder than this are never sampled.
    pub ceiling: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            buckets: vec![
                Bucket {
                    center: 0.3,
                    half_width: 0.1,
                    weight: 1.0,
                },
                Bucket {
                    center: 0.5,
                    half_width: 0.1,
                    weight: 1.0,
                },
            ],
            ceiling: 0.6,
        }
    }
}

/// A sampled template pair, `i < j`; `label` is [`SAME`] or [`DIFFERENT`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MinedPair {
    pub i: usize,
    pub j: usize,
    pub label: usize,
}

/// Draws `batch / 2` positive and `batch / 2` negative pairs, each from a
/// weight-chosen bucket, falling back to the eligible pair nearest the bucket
/// centre when the bucket has run dry. No pair is returned twice.
pub fn sample_pairs<R: Rng>(
    d: &DifficultyMatrix,
    batch: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<MinedPair>> {
    if batch == 0 || batch % 2 != 0 {
        return Err(Error::invalid(format!("pair batch {batch} must be positive and even")));
    }
    let total_weight: f64 = cfg.buckets.iter().map(|b| b.weight).sum();
    if cfg.buckets.is_empty() || cfg.buckets.iter().any(|b| b.weight < 0.0) || total_weight <= 0.0 {
        return Err(Error::invalid("buckets need non-negative weights with a positive total"));
    }
    let mut out = Vec::with_capacity(batch);
    for label in [SAME, DIFFERENT] {
        let mut eligible: Vec<(usize, usize, f64)> = d
            .upper_triangle()
            .filter(|&(i, j, v)| d.label(i, j) as usize == label && v <= cfg.ceiling)
            .collect();
        for _ in 0..batch / 2 {
            let mut x = rng.random::<f64>() * total_weight;
            let bucket = cfg
                .buckets
                .iter()
                .find(|b| {
                    x -= b.weight;
                    x < 0.0
                })
                .unwrap_or(cfg.buckets.last().unwrap());
            if eligible.is_empty() {
                return Err(Error::Shortage {
                    bucket: bucket.name(),
                    label: if label == SAME { "positive" } else { "negative" },
                });
            }
            let inside: Vec<usize> = (0..eligible.len()).filter(|&k| bucket.contains(eligible[k].2)).collect();
            let pick = if inside.is_empty() {
                let dist = |k: usize| (eligible[k].2 - bucket.center).abs();
                (0..eligible.len())
                    .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                    .unwrap()
            } else {
                inside[rng.random_range(0..inside.len())]
            };
            let (i, j, _) = eligible.swap_remove(pick);
            out.push(MinedPair { i, j, label });
        }
    }
    Ok(out)
}

/// A template of the mining pool: its identity and the store images it uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedTemplate {
    pub identity: usize,
    pub images: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningRound {
    pub templates: Vec<MinedTemplate>,
    pub descriptors: Vec<Vec<f64>>,
    pub difficulty: DifficultyMatrix,
}

impl MiningRound {
    pub fn positive_pairs(&self) -> usize {
        self.difficulty.upper_triangle().filter(|&(i, j, _)| self.difficulty.label(i, j) == 1).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundConfig {
    pub identities: usize,
    pub templates_per_identity: usize,
    pub images_per_template: usize,
    /// Chance that a template repeats a single image.
    pub identical_prob: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            identities: 64,
            templates_per_identity: 2,
            images_per_template: 3,
            identical_prob: IDENTICAL_TEMPLATE_PROB,
        }
    }
}

impl RoundConfig {
    /// Side of the difficulty matrix a round produces.
    pub fn matrix_size(&self) -> usize {
        self.identities * self.templates_per_identity
    }

    /// Same-identity template pairs in the upper triangle.
    pub fn positive_pairs(&self) -> usize {
        let t = self.templates_per_identity;
        self.identities * t * t.saturating_sub(1) / 2
    }
}

/// Samples `cfg.identities` identities from `pool`, builds their templates,
/// and scores every template pair.
pub fn build_mining_round<R: Rng>(
    pool: &[usize],
    cfg: &RoundConfig,
    store: &EmbeddingStore,
    rng: &mut R,
) -> Result<MiningRound> {
    if cfg.identities > pool.len() || cfg.identities == 0 {
        return Err(Error::invalid(format!(
            "cannot sample {} identities from a pool of {}",
            cfg.identities,
            pool.len()
        )));
    }
    let chosen = index::sample(rng, pool.len(), cfg.identities).into_vec();
    let mut templates = Vec::with_capacity(cfg.identities * cfg.templates_per_identity);
    for &c in &chosen {
        let identity = pool[c];
        let imgs = store.images_of(identity);
        if imgs.len() < cfg.images_per_template {
            return Err(Error::invalid(format!(
                "identity {identity} has {} images, {} needed per template",
                imgs.len(),
                cfg.images_per_template
            )));
        }
        for _ in 0..cfg.templates_per_identity {
            let images = if rng.random_bool(cfg.identical_prob) {
                vec![imgs[rng.random_range(0..imgs.len())]; cfg.images_per_template]
            } else {
                index::sample(rng, imgs.len(), cfg.images_per_template)
                    .into_iter()
                    .map(|k| imgs[k])
                    .collect()
            };
            templates.push(MinedTemplate { identity, images });
        }
    }
    let descriptors = templates
        .iter()
        .map(|t| {
            let e: Vec<&[f64]> = t.images.iter().map(|&i| store.embeddings[i].as_slice()).collect();
            template_descriptor(&e)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = templates.len();
    let labels = (0..n * n)
        .map(|k| (templates[k / n].identity == templates[k % n].identity) as u8)
        .collect();
    let difficulty = difficulty_matrix(similarity_matrix(&descriptors), labels)?;
    Ok(MiningRound {
        templates,
        descriptors,
        difficulty,
    })
}

/// Counts of upper-triangle difficulties in `bins` equal bins over [0, 2].
pub fn difficulty_histogram(d: &DifficultyMatrix, bins: usize) -> Vec<(f64, f64, usize)> {
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for (_, _, v) in d.upper_triangle() {
        counts[((v / width) as usize).min(bins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (b as f64 * width, (b + 1) as f64 * width, c))
        .collect()
}

pub const HISTOGRAM_HEADER: &str = "bucket_left,bucket_right,count";
