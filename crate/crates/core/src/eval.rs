//! Verification protocol, ROC metrics, the average-pooling baseline score
//! and score fusion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::index;
use rand::Rng;

use crate::compare::{compare_templates, CompareMode};
use crate::error::{Error, Result};
use crate::mining::template_descriptor;
use crate::network::{BaselineParams, DcnParams};
use crate::synth::{Dataset, Split, Template};
use crate::tensor::Real;

/// Operating points reported in metrics files.
pub const REPORT_FARS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// Mean-pooled, L2-normalized baseline vector of a template.
pub fn baseline_template_vector<T: Real>(template: &Template, baseline: &BaselineParams<T>) -> Result<Vec<f64>> {
    if template.is_empty() {
        return Err(Error::invalid("baseline vector of an empty template"));
    }
    let e = baseline.embed(&template.samples)?;
    let c = e.shape()[1];
    let rows: Vec<Vec<f64>> = e.data().chunks(c).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
    template_descriptor(&rows)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

pub fn baseline_similarity<T: Real>(t1: &Template, t2: &Template, baseline: &BaselineParams<T>) -> Result<f64> {
    Ok(cosine(
        &baseline_template_vector(t1, baseline)?,
        &baseline_template_vector(t2, baseline)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub far: f64,
    pub tar: f64,
    /// Scores ≥ threshold are accepted; +∞ for the origin.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub genuine: usize,
    pub impostor: usize,
}

/// Exact sweep over the distinct scores, from accept-nothing to accept-all.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let genuine = labels.iter().filter(|&&l| l).count();
    let impostor = labels.len() - genuine;
    if genuine == 0 || impostor == 0 {
        return Err(Error::invalid("ROC needs both genuine and impostor pairs"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        far: 0.0,
        tar: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let threshold = scores[order[k]];
        while k < order.len() && scores[order[k]] == threshold {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            far: fp as f64 / impostor as f64,
            tar: tp as f64 / genuine as f64,
            threshold,
        });
    }
    Ok(RocCurve {
        points,
        genuine,
        impostor,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TarAtFar {
    pub tar: f64,
    /// FAR of the operating point used.
    pub far: f64,
    /// Set when the requested FAR is finer than the curve resolves.
    pub below_resolution: bool,
}

impl RocCurve {
    /// TAR at the largest achieved FAR not above `far` (no interpolation).
    pub fn tar_at_far(&self, far: f64) -> Result<TarAtFar> {
        if !(far > 0.0 && far <= 1.0) {
            return Err(Error::invalid(format!("FAR {far} outside (0, 1]")));
        }
        let smallest = self
            .points
            .iter()
            .map(|p| p.far)
            .filter(|&f| f > 0.0)
            .fold(f64::INFINITY, f64::min);
        let best = self
            .points
            .iter()
            .filter(|p| p.far <= far)
            .max_by(|a, b| a.far.total_cmp(&b.far).then(a.tar.total_cmp(&b.tar)))
            .expect("origin is always present");
        Ok(TarAtFar {
            tar: best.tar,
            far: best.far,
            below_resolution: far < smallest,
        })
    }

    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].far - w[0].far) * (w[1].tar + w[0].tar) / 2.0)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("far,tar,threshold\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.far, p.tar, p.threshold);
        }
        s
    }
}

pub fn tar_at_far(curve: &RocCurve, far: f64) -> Result<TarAtFar> {
    curve.tar_at_far(far)
}

/// Metrics CSV with one `far,tar` row per requested operating point.
pub fn metrics_csv(curve: &RocCurve, fars: &[f64]) -> Result<String> {
    let mut s = String::from("far,tar\n");
    for &f in fars {
        let t = curve.tar_at_far(f)?;
        let _ = writeln!(s, "{f:e},{}", t.tar);
    }
    Ok(s)
}

/// Impostor-score statistics of one score stream; `None` when degenerate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamStats {
    pub mean: f64,
    pub std: f64,
}

impl StreamStats {
    pub fn from_impostors(scores: &[f64]) -> Option<Self> {
        if scores.len() < 2 {
            return None;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        (std > 1e-12 && std.is_finite()).then_some(StreamStats { mean, std })
    }

    pub fn z(&self, s: f64) -> f64 {
        (s - self.mean) / self.std
    }
}

/// Z-score fusion of the baseline and comparator score streams.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fusion {
    pub baseline: Option<StreamStats>,
    pub dcn: Option<StreamStats>,
    /// Weight of the baseline stream.
    pub weight: f64,
}

impl Fusion {
    /// Calibrates on impostor scores from a held-out split.
    pub fn calibrate(baseline_impostors: &[f64], dcn_impostors: &[f64], weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::invalid(format!("fusion weight {weight} outside [0, 1]")));
        }
        let baseline = StreamStats::from_impostors(baseline_impostors);
        let dcn = StreamStats::from_impostors(dcn_impostors);
        for (name, s) in [("baseline", baseline), ("dcn", dcn)] {
            if s.is_none() {
                warn!("{name} impostor scores have zero variance; fusing raw scores");
            }
        }
        Ok(Fusion { baseline, dcn, weight })
    }

    pub fn fuse(&self, baseline: f64, dcn: f64) -> f64 {
        let zb = self.baseline.map_or(baseline, |s| s.z(baseline));
        let zd = self.dcn.map_or(dcn, |s| s.z(dcn));
        self.weight * zb + (1.0 - self.weight) * zd
    }
}

pub fn fuse_scores(baseline: f64, dcn: f64, weight: f64, fusion: &Fusion) -> f64 {
    Fusion { weight, ..*fusion }.fuse(baseline, dcn)
}

/// A protocol template: an id, its identity, and dataset sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolTemplate {
    pub id: usize,
    pub identity: usize,
    pub samples: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub templates: Vec<ProtocolTemplate>,
    pub pairs: Vec<ProtocolPair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolConfig {
    pub pairs: usize,
    pub templates_per_identity: usize,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            pairs: 2000,
            templates_per_identity: 10,
            min_size: 1,
            max_size: 8,
        }
    }
}

impl Protocol {
    /// Balanced protocol over test identities with template sizes drawn
    /// uniformly from `min_size..=max_size`.
    pub fn build<R: Rng>(dataset: &Dataset, cfg: &ProtocolConfig, rng: &mut R) -> Result<Self> {
        let ids = dataset.identities(Split::Test);
        if ids.len() < 2 || cfg.templates_per_identity < 2 || cfg.pairs < 2 || cfg.min_size == 0 {
            return Err(Error::invalid(
                "protocol needs two test identities, two templates each, and non-empty templates",
            ));
        }
        if cfg.min_size > cfg.max_size {
            return Err(Error::invalid("protocol min_size exceeds max_size"));
        }
        let mut templates = Vec::new();
        for &identity in &ids {
            let pool = &dataset.by_identity[identity];
            for _ in 0..cfg.templates_per_identity {
                let n = rng.random_range(cfg.min_size..=cfg.max_size).min(pool.len());
                let samples = index::sample(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect();
                templates.push(ProtocolTemplate {
                    id: templates.len(),
                    identity,
                    samples,
                });
            }
        }
        let per = cfg.templates_per_identity;
        let genuine_total = ids.len() * per * (per - 1) / 2;
        let n_genuine = cfg.pairs / 2;
        if n_genuine > genuine_total {
            return Err(Error::invalid(format!(
                "{n_genuine} genuine pairs requested, only {genuine_total} exist"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut pairs = Vec::with_capacity(cfg.pairs);
        while pairs.len() < n_genuine {
            let id = rng.random_range(0..ids.len());
            let i = rng.random_range(0..per);
            let j = rng.random_range(0..per);
            let (a, b) = (id * per + i.min(j), id * per + i.max(j));
            if i != j && seen.insert((a, b)) {
                pairs.push(ProtocolPair { a, b, same: true });
            }
        }
        while pairs.len() < cfg.pairs {
            let a = rng.random_range(0..templates.len());
            let b = rng.random_range(0..templates.len());
            let (a, b) = (a.min(b), a.max(b));
            if templates[a].identity != templates[b].identity && seen.insert((a, b)) {
                pairs.push(ProtocolPair { a, b, same: false });
            }
        }
        Ok(Protocol { templates, pairs })
    }

    pub fn template(&self, dataset: &Dataset, id: usize) -> Template {
        let t = &self.templates[id];
        Template {
            identity: t.identity,
            samples: t.samples.iter().map(|&s| dataset.samples[s].clone()).collect(),
        }
    }

    pub fn labels(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.same).collect()
    }

    /// `template_a_id,template_b_id,label` lines.
    pub fn pairs_text(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            let _ = writeln!(s, "{},{},{}", p.a, p.b, p.same as u8);
        }
        s
    }

    /// `template_id,identity_id,sample sample ...` lines.
    pub fn templates_text(&self) -> String {
        let mut s = String::new();
        for t in &self.templates {
            let samples: Vec<String> = t.samples.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{},{},{}", t.id, t.identity, samples.join(" "));
        }
        s
    }

    pub fn save(&self, pairs_path: &Path, templates_path: &Path) -> Result<()> {
        fs::write(pairs_path, self.pairs_text()).map_err(|e| Error::io(pairs_path, e))?;
        fs::write(templates_path, self.templates_text()).map_err(|e| Error::io(templates_path, e))
    }

    pub fn parse(pairs: &str, templates: &str) -> Result<Self> {
        let fields = |line: &str, n: usize| -> Result<Vec<String>> {
            let f: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if f.len() != n {
                return Err(Error::invalid(format!("protocol line {line:?} needs {n} fields")));
            }
            Ok(f)
        };
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::invalid(format!("protocol value {s:?} is not an index")))
        };
        let mut ts = Vec::new();
        for line in templates.lines().filter(|l| !l.trim().is_empty()) {
            let f = fields(line, 3)?;
            let samples = f[2].split_whitespace().map(num).collect::<Result<Vec<_>>>()?;
            if samples.is_empty() {
                return Err(Error::invalid(format!("template {} has no samples", f[0])));
            }
            let id = num(&f[0])?;
            if id != ts.len() {
                return Err(Error::invalid(format!("template ids must be 0.., found {id}")));
            }
            ts.push(ProtocolTemplate {
                id,
                identity: num(&f[1])?,
                samples,
            });
        }
        let mut ps = Vec::new();
        for line in pairs.lines().filter(|l| !l.trim().is_empty()) {
            let f = fields(line, 3)?;
            let (a, b) = (num(&f[0])?, num(&f[1])?);
            if a >= ts.len() || b >= ts.len() {
                return Err(Error::invalid(format!("pair {line:?} names an unknown template")));
            }
            let same = match f[2].as_str() {
                "1" => true,
                "0" => false,
                other => return Err(Error::invalid(format!("pair label {other:?} is not 0 or 1"))),
            };
            ps.push(ProtocolPair { a, b, same });
        }
        Ok(Protocol {
            templates: ts,
            pairs: ps,
        })
    }

    pub fn load(pairs_path: &Path, templates_path: &Path) -> Result<Self> {
        let p = fs::read_to_string(pairs_path).map_err(|e| Error::io(pairs_path, e))?;
        let t = fs::read_to_string(templates_path).map_err(|e| Error::io(templates_path, e))?;
        Self::parse(&p, &t)
    }
}

pub fn baseline_scores<T: Real>(protocol: &Protocol, dataset: &Dataset, baseline: &BaselineParams<T>) -> Result<Vec<f64>> {
    let vectors = (0..protocol.templates.len())
        .map(|id| baseline_template_vector(&protocol.template(dataset, id), baseline))
        .collect::<Result<Vec<_>>>()?;
    Ok(protocol.pairs.iter().map(|p| cosine(&vectors[p.a], &vectors[p.b])).collect())
}

/// Eval-mode comparator scores (log-odds of "same") for every protocol pair.
pub fn dcn_scores<T: Real>(protocol: &Protocol, dataset: &Dataset, params: &DcnParams<T>) -> Result<Vec<f64>> {
    let descriptors = (0..protocol.templates.len())
        .map(|id| params.describe(&protocol.template(dataset, id)))
        .collect::<Result<Vec<_>>>()?;
    protocol
        .pairs
        .iter()
        .map(|p| {
            compare_templates(&descriptors[p.a], &descriptors[p.b], &params.compare, CompareMode::Eval)
                .map(|s| s.margin())
        })
        .collect()
}

pub fn impostor_scores(scores: &[f64], protocol: &Protocol) -> Vec<f64> {
    scores
        .iter()
        .zip(&protocol.pairs)
        .filter(|(_, p)| !p.same)
        .map(|(s, _)| *s)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{derive_rng, DatasetConfig};

    /// Brute force: every candidate threshold, including +∞.
    fn brute(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
        let g = labels.iter().filter(|&&l| l).count() as f64;
        let i = labels.len() as f64 - g;
        let mut ts: Vec<f64> = scores.to_vec();
        ts.push(f64::INFINITY);
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        ts.iter()
            .map(|&t| {
                let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as f64;
                let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
                (fp / i, tp / g)
            })
            .collect()
    }

    #[test]
    fn four_score_example() {
        let c = roc_curve(&[0.9, 0.8, 0.4, 0.1], &[true, false, true, false]).unwrap();
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.far, p.tar)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(pts, brute(&[0.9, 0.8, 0.4, 0.1], &[true, false, true, false]));
        let t = c.tar_at_far(0.5).unwrap();
        assert_eq!((t.tar, t.below_resolution), (1.0, false));
        let t = c.tar_at_far(0.1).unwrap();
        assert_eq!((t.tar, t.far, t.below_resolution), (0.5, 0.0, true));
        assert!((c.auc() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_degenerate() {
        let c = roc_curve(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false]).unwrap();
        assert_eq!(c.tar_at_far(0.01).unwrap().tar, 1.0);
        assert_eq!(c.auc(), 1.0);
        assert!(roc_curve(&[1.0, 2.0], &[true, true]).is_err());
        assert!(roc_curve(&[1.0], &[true, false]).is_err());
        assert!(c.tar_at_far(0.0).is_err());
        let tied = roc_curve(&[1.0, 1.0, 1.0], &[true, false, true]).unwrap();
        assert_eq!(tied.points.len(), 2);
    }

    #[test]
    fn baseline_vector_and_similarity() {
        let ds = Dataset::generate(&DatasetConfig {
            seed: 2,
            identities: 3,
            test_identities: 1,
            images_per_identity: 4,
            image_size: 16,
        })
        .unwrap();
        let base = BaselineParams::<f64>::new(
            &crate::detect::BackboneConfig {
                conv1: 4,
                conv2: 4,
                features: 6,
            },
            2,
            &mut derive_rng(1, &[]),
        );
        let t = ds.assemble_template(0, 3, &mut derive_rng(2, &[])).unwrap();
        assert!((baseline_similarity(&t, &t, &base).unwrap() - 1.0).abs() < 1e-12);
        let u = ds.assemble_template(1, 2, &mut derive_rng(3, &[])).unwrap();
        let e1 = base.embed(&t.samples).unwrap();
        let e2 = base.embed(&u.samples).unwrap();
        let mean = |e: &crate::tensor::Tensor<f64>| {
            let (n, c) = (e.shape()[0], e.shape()[1]);
            let mut m = vec![0.0; c];
            for r in 0..n {
                for k in 0..c {
                    m[k] += e.data()[r * c + k] / n as f64;
                }
            }
            m
        };
        let (a, b) = (mean(&e1), mean(&e2));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((baseline_similarity(&t, &u, &base).unwrap() - dot / (na * nb)).abs() < 1e-7);
        let empty = Template {
            identity: 0,
            samples: vec![],
        };
        assert!(baseline_similarity(&t, &empty, &base).is_err());
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn fusion_reductions() {
        let b = [0.1, 0.4, 0.35, 0.8, 0.2];
        let d = [2.0, -1.0, 0.5, 0.0, 3.0];
        let f = Fusion::calibrate(&b, &d, 0.5).unwrap();
        let rank = |s: &[f64]| {
            let mut o: Vec<usize> = (0..s.len()).collect();
            o.sort_by(|&x, &y| s[x].total_cmp(&s[y]));
            o
        };
        let only_b: Vec<f64> = b.iter().zip(&d).map(|(x, y)| fuse_scores(*x, *y, 1.0, &f)).collect();
        let only_d: Vec<f64> = b.iter().zip(&d).map(|(x, y)| fuse_scores(*x, *y, 0.0, &f)).collect();
        assert_eq!(rank(&only_b), rank(&b));
        assert_eq!(rank(&only_d), rank(&d));
        let flat = Fusion::calibrate(&[1.0, 1.0], &d, 0.5).unwrap();
        assert!(flat.baseline.is_none());
        assert_eq!(flat.fuse(0.7, 0.0), 0.5 * 0.7 + 0.5 * flat.dcn.unwrap().z(0.0));
        assert!(Fusion::calibrate(&b, &d, 1.5).is_err());
    }

    #[test]
    fn protocol_build_and_round_trip() {
        let ds = Dataset::generate(&DatasetConfig {
            seed: 4,
            identities: 8,
            test_identities: 4,
            images_per_identity: 10,
            image_size: 16,
        })
        .unwrap();
        let cfg = ProtocolConfig {
            pairs: 40,
            templates_per_identity: 5,
            ..ProtocolConfig::default()
        };
        let p = Protocol::build(&ds, &cfg, &mut derive_rng(1, &[])).unwrap();
        assert_eq!(p.pairs.len(), 40);
        assert_eq!(p.pairs.iter().filter(|x| x.same).count(), 20);
        for t in &p.templates {
            assert!(ds.split_of(t.identity) == Split::Test);
            assert!((1..=8).contains(&t.samples.len()));
        }
        for pair in &p.pairs {
            assert_eq!(pair.same, p.templates[pair.a].identity == p.templates[pair.b].identity);
            assert_ne!(pair.a, pair.b);
        }
        let back = Protocol::parse(&p.pairs_text(), &p.templates_text()).unwrap();
        assert_eq!(back, p);
        assert!(Protocol::parse("0,1,2\n", &p.templates_text()).is_err());
        assert!(Protocol::parse("0,999,1\n", &p.templates_text()).is_err());
    }
}
