//! Procedural face-like identities with exact keypoint annotations.
//!
//! An identity is a parameter vector describing a glyph arrangement: an oval
//! face, two eye blobs, a nose wedge and a mouth arc. Rendering applies a
//! horizontal yaw, quality degradation (blur plus down/up resampling) and
//! per-render nuisance (background noise, placement jitter, brightness).
//! Everything is a pure function of the seeds passed in.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ratio below which a face counts as a left-facing profile.
pub const LEFT_PROFILE_RATIO: f64 = 0.3;
/// Ratio above which a face counts as a right-facing profile.
pub const RIGHT_PROFILE_RATIO: f64 = 3.0;
/// Probability that every image of a template is the same render.
pub const IDENTICAL_TEMPLATE_PROB: f64 = 0.2;
/// Probability that `augment` applies a transform.
pub const AUGMENT_PROB: f64 = 0.2;

/// How far the nose travels toward an eye at full yaw, in eye half-gaps.
const NOSE_SHIFT: f64 = 0.9;
const SUPERSAMPLE: usize = 4;

/// Keypoint slots, in annotation order.
pub const KEYPOINT_NAMES: [&str; 4] = ["left_eye", "right_eye", "nose", "mouth"];

/// Documented sampling range of each identity parameter.
pub const PARAM_RANGES: [(&str, f64, f64); 10] = [
    ("face_aspect", 0.72, 0.95),
    ("eye_spacing", 0.30, 0.46),
    ("eye_size", 0.040, 0.070),
    ("eye_height", -0.34, -0.14),
    ("nose_offset", 0.02, 0.16),
    ("nose_width", 0.05, 0.10),
    ("mouth_width", 0.10, 0.20),
    ("mouth_curvature", -1.0, 1.0),
    ("base_intensity", 0.40, 0.75),
    ("tint", -0.12, 0.12),
];

const TAG_IDENTITY: u64 = 1;
const TAG_SAMPLE: u64 = 2;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for a seed and a path of tags.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &t in tags {
        h = splitmix(h ^ splitmix(t));
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: usize,
    /// One value per entry of [`PARAM_RANGES`].
    pub params: [f64; 10],
}

impl IdentitySpec {
    fn p(&self, name: &str) -> f64 {
        let i = PARAM_RANGES.iter().position(|r| r.0 == name).unwrap();
        self.params[i]
    }

    /// Same spec with perfectly centred nose and mouth and no tint, for
    /// symmetry-dependent checks.
    pub fn symmetric(id: usize) -> Self {
        let params = PARAM_RANGES.map(|(_, lo, hi)| 0.5 * (lo + hi));
        IdentitySpec { id, params }
    }
}

pub fn generate_identity(dataset_seed: u64, id: usize) -> IdentitySpec {
    let mut rng = derive_rng(dataset_seed, &[TAG_IDENTITY, id as u64]);
    let params = PARAM_RANGES.map(|(_, lo, hi)| rng.random_range(lo..hi));
    IdentitySpec { id, params }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pose {
    LeftProfile,
    Frontal,
    RightProfile,
}

impl Pose {
    /// Position in the landmark channel layout (4 channels per pose).
    pub fn index(self) -> usize {
        match self {
            Pose::LeftProfile => 0,
            Pose::Frontal => 1,
            Pose::RightProfile => 2,
        }
    }

    /// Pose from the ratio of horizontal nose-to-left-eye and
    /// nose-to-right-eye distances.
    pub fn from_ratio(ratio: f64) -> Pose {
        if ratio < LEFT_PROFILE_RATIO {
            Pose::LeftProfile
        } else if ratio > RIGHT_PROFILE_RATIO {
            Pose::RightProfile
        } else {
            Pose::Frontal
        }
    }

    pub fn mirrored(self) -> Pose {
        match self {
            Pose::LeftProfile => Pose::RightProfile,
            Pose::Frontal => Pose::Frontal,
            Pose::RightProfile => Pose::LeftProfile,
        }
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pose::LeftProfile => "left-profile",
            Pose::Frontal => "frontal",
            Pose::RightProfile => "right-profile",
        })
    }
}

impl FromStr for Pose {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left-profile" => Ok(Pose::LeftProfile),
            "frontal" => Ok(Pose::Frontal),
            "right-profile" => Ok(Pose::RightProfile),
            other => Err(Error::invalid(format!("unknown pose {other:?}"))),
        }
    }
}

/// α/θ for a given yaw under the rendering model.
pub fn yaw_to_ratio(yaw: f64) -> f64 {
    (1.0 + NOSE_SHIFT * yaw) / (1.0 - NOSE_SHIFT * yaw)
}

/// Inverse of [`yaw_to_ratio`].
pub fn ratio_to_yaw(ratio: f64) -> f64 {
    (ratio - 1.0) / (NOSE_SHIFT * (ratio + 1.0))
}

pub type Keypoint = Option<[f32; 2]>;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    /// H×W×3, values in [0, 1] quantized to 8 bits.
    pub image: Tensor<f32>,
    /// Left eye, right eye, nose, mouth as (x, y) pixels; `None` if occluded.
    pub keypoints: [Keypoint; 4],
    pub pose: Pose,
    pub quality: f64,
}

impl RenderedSample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub size: usize,
    /// Background noise, jitter, brightness and sensor noise.
    pub nuisance: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            size: 48,
            nuisance: true,
        }
    }
}

/// Blur σ in pixels for a quality level.
pub fn blur_sigma(quality: f64) -> f64 {
    2.5 * (1.0 - quality.clamp(0.0, 1.0))
}

/// Down/up resampling factor for a quality level.
pub fn downsample_factor(quality: f64) -> usize {
    if quality >= 2.0 / 3.0 {
        1
    } else if quality >= 1.0 / 3.0 {
        2
    } else {
        4
    }
}

struct Layout {
    face: [f64; 2],
    face_radii: [f64; 2],
    eyes: [[f64; 2]; 2],
    eye_radii: [[f64; 2]; 2],
    eye_visible: [bool; 2],
    nose: [[f64; 2]; 3],
    mouth_center: [f64; 2],
    mouth_half_width: f64,
    mouth_bend: f64,
    mouth_thickness: f64,
}

impl Layout {
    fn new(spec: &IdentitySpec, yaw: f64, size: f64, offset: [f64; 2]) -> Self {
        let cx = 0.5 * size + offset[0];
        let cy = 0.5 * size + offset[1];
        let ry = 0.40 * size;
        let rx = ry * spec.p("face_aspect");
        let gap = spec.p("eye_spacing") * rx;
        let eye_r = spec.p("eye_size") * size;
        let eye_y = cy + spec.p("eye_height") * ry;

        let ratio = yaw_to_ratio(yaw);
        let pose = Pose::from_ratio(ratio);
        let squeeze = 1.0 - 0.45 * yaw.abs();
        let eyes = [[cx - gap, eye_y], [cx + gap, eye_y]];
        // Eye nearer the nose foreshortens more.
        let near = |side: f64| 1.0 - 0.5 * (yaw * side).max(0.0);
        let eye_radii = [
            [eye_r * near(-1.0) * squeeze.max(0.6), eye_r * 0.7],
            [eye_r * near(1.0) * squeeze.max(0.6), eye_r * 0.7],
        ];
        let eye_visible = [pose != Pose::LeftProfile, pose != Pose::RightProfile];

        let nose_x = cx + NOSE_SHIFT * yaw * gap;
        let nose_tip_y = cy + spec.p("nose_offset") * ry;
        let nose_top_y = eye_y + 0.6 * eye_r;
        let nose_half = spec.p("nose_width") * size * 0.5;
        // The wedge leans toward the turn direction; its centroid sits at nose_x.
        let lean = 0.8 * yaw * nose_half;
        let nose = [
            [nose_x + lean, nose_top_y],
            [nose_x - nose_half - 0.5 * lean, nose_tip_y],
            [nose_x + nose_half - 0.5 * lean, nose_tip_y],
        ];

        let mouth_y = cy + (spec.p("nose_offset") + 0.22) * ry;
        let mouth_half_width = spec.p("mouth_width") * size * squeeze.max(0.55);
        let mouth_center = [cx + 0.6 * NOSE_SHIFT * yaw * gap, mouth_y];

        Layout {
            face: [cx + 0.3 * yaw * gap, cy],
            face_radii: [rx * (1.0 - 0.2 * yaw.abs()), ry],
            eyes,
            eye_radii,
            eye_visible,
            nose,
            mouth_center,
            mouth_half_width,
            mouth_bend: spec.p("mouth_curvature") * 0.08 * size,
            mouth_thickness: 0.028 * size,
        }
    }

    fn nose_centroid(&self) -> [f64; 2] {
        let n = &self.nose;
        [
            (n[0][0] + n[1][0] + n[2][0]) / 3.0,
            (n[0][1] + n[1][1] + n[2][1]) / 3.0,
        ]
    }

    /// Centroid of the mouth band: the arc y = y0 + bend·t², t ∈ [-1, 1],
    /// averages to y0 + bend/3.
    fn mouth_centroid(&self) -> [f64; 2] {
        [
            self.mouth_center[0],
            self.mouth_center[1] + self.mouth_bend / 3.0,
        ]
    }

    fn in_eye(&self, i: usize, x: f64, y: f64) -> bool {
        if !self.eye_visible[i] {
            return false;
        }
        let [ex, ey] = self.eyes[i];
        let [ax, ay] = self.eye_radii[i];
        let (dx, dy) = ((x - ex) / ax, (y - ey) / ay);
        dx * dx + dy * dy <= 1.0
    }

    fn in_nose(&self, x: f64, y: f64) -> bool {
        let [a, b, c] = self.nose;
        let sign = |p: [f64; 2], q: [f64; 2]| (x - q[0]) * (p[1] - q[1]) - (p[0] - q[0]) * (y - q[1]);
        let d1 = sign(a, b);
        let d2 = sign(b, c);
        let d3 = sign(c, a);
        let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
        let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
        !(neg && pos)
    }

    fn in_mouth(&self, x: f64, y: f64) -> bool {
        let t = (x - self.mouth_center[0]) / self.mouth_half_width;
        if t.abs() > 1.0 {
            return false;
        }
        let arc_y = self.mouth_center[1] + self.mouth_bend * t * t;
        (y - arc_y).abs() <= 0.5 * self.mouth_thickness
    }

    fn in_face(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (
            (x - self.face[0]) / self.face_radii[0],
            (y - self.face[1]) / self.face_radii[1],
        );
        dx * dx + dy * dy <= 1.0
    }
}

fn skin_color(spec: &IdentitySpec) -> [f64; 3] {
    let base = spec.p("base_intensity");
    let tint = spec.p("tint");
    [base + tint, base, base - tint]
}

/// Renders one image of `spec`.
///
/// `yaw` in [-1, 1] moves the nose (and, less, the mouth and face oval)
/// toward one eye; the resulting α/θ ratio decides the pose and profile
/// poses hide the eye nearest the nose. Keypoints are the glyph centroids,
/// reported after placement jitter.
pub fn render_sample<R: Rng>(
    spec: &IdentitySpec,
    yaw: f64,
    quality: f64,
    opts: &RenderOptions,
    rng: &mut R,
) -> RenderedSample {
    let yaw = yaw.clamp(-1.0, 1.0);
    let quality = quality.clamp(0.0, 1.0);
    let size = opts.size;
    let s = size as f64;
    let (offset, brightness) = if opts.nuisance {
        (
            [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
            rng.random_range(0.85..1.15),
        )
    } else {
        ([0.0, 0.0], 1.0)
    };
    let layout = Layout::new(spec, yaw, s, offset);
    let skin = skin_color(spec);
    let nose_color = skin.map(|c| c * 0.55);
    let eye_color = [0.08, 0.07, 0.10];
    let mouth_color = [0.55, 0.12, 0.15];

    let mut img = vec![0.0f64; size * size * 3];
    let bg_level: [f64; 3] = if opts.nuisance {
        [
            rng.random_range(0.15..0.85),
            rng.random_range(0.15..0.85),
            rng.random_range(0.15..0.85),
        ]
    } else {
        [0.5; 3]
    };
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let color = if layout.in_eye(0, px, py) || layout.in_eye(1, px, py) {
                        eye_color
                    } else if layout.in_mouth(px, py) {
                        mouth_color
                    } else if layout.in_nose(px, py) {
                        nose_color
                    } else if layout.in_face(px, py) {
                        skin
                    } else {
                        bg_level
                    };
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..3 {
                img[(y * size + x) * 3 + c] = acc[c] / n;
            }
        }
    }
    if opts.nuisance {
        // Textured background: noise only outside the face oval.
        for y in 0..size {
            for x in 0..size {
                if !layout.in_face(x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        img[(y * size + x) * 3 + c] += rng.random_range(-0.15..0.15);
                    }
                }
            }
        }
    }

    let sigma = blur_sigma(quality);
    if sigma > 0.05 {
        gaussian_blur(&mut img, size, size, sigma);
    }
    let factor = downsample_factor(quality);
    if factor > 1 {
        down_up(&mut img, size, size, factor);
    }
    if opts.nuisance {
        let noise = Normal::new(0.0, 0.02).unwrap();
        for v in img.iter_mut() {
            *v = *v * brightness + noise.sample(rng);
        }
    }
    let data = img
        .iter()
        .map(|&v| quantize(v))
        .collect::<Vec<f32>>();

    let ratio = yaw_to_ratio(yaw);
    let pose = Pose::from_ratio(ratio);
    let to_kp = |p: [f64; 2]| Some([p[0] as f32, p[1] as f32]);
    let keypoints = [
        layout.eye_visible[0].then(|| [layout.eyes[0][0] as f32, layout.eyes[0][1] as f32]),
        layout.eye_visible[1].then(|| [layout.eyes[1][0] as f32, layout.eyes[1][1] as f32]),
        to_kp(layout.nose_centroid()),
        to_kp(layout.mouth_centroid()),
    ];
    RenderedSample {
        image: Tensor::new(&[size, size, 3], data).expect("sized buffer"),
        keypoints: keypoints.map(|k| k.filter(|p| in_bounds(p, size))),
        pose,
        quality,
    }
}

fn in_bounds(p: &[f32; 2], size: usize) -> bool {
    let s = size as f32;
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] < s && p[1] < s
}

/// Clamps to [0, 1] and rounds to the nearest 8-bit level.
pub fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable convolution with clamp-to-edge borders.
fn separable(img: &mut [f64], h: usize, w: usize, kx: &[f64], ky: &[f64]) {
    let mut tmp = vec![0.0; img.len()];
    let rx = (kx.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, &kv) in kx.iter().enumerate() {
                    let sx = (x as isize + i as isize - rx).clamp(0, w as isize - 1) as usize;
                    acc += kv * img[(y * w + sx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let ry = (ky.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, &kv) in ky.iter().enumerate() {
                    let sy = (y as isize + i as isize - ry).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(sy * w + x) * 3 + c];
                }
                img[(y * w + x) * 3 + c] = acc;
            }
        }
    }
}

fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    separable(img, h, w, &k, &k);
}

/// Box-average downsampling by `factor` followed by nearest-neighbour upsampling.
fn down_up(img: &mut [f64], h: usize, w: usize, factor: usize) {
    for by in (0..h).step_by(factor) {
        for bx in (0..w).step_by(factor) {
            let ys = by..(by + factor).min(h);
            let xs = bx..(bx + factor).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for c in 0..3 {
                let mut acc = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += img[(y * w + x) * 3 + c];
                    }
                }
                let mean = acc / n;
                for y in ys.clone() {
                    for x in xs.clone() {
                        img[(y * w + x) * 3 + c] = mean;
                    }
                }
            }
        }
    }
}

fn tensor_to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn f64_to_tensor(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::new(shape, v.iter().map(|&x| quantize(x)).collect()).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    Flip,
    GaussianBlur,
    MotionBlur,
    Monochrome,
}

impl Augmentation {
    pub const ALL: [Augmentation; 4] = [
        Augmentation::Flip,
        Augmentation::GaussianBlur,
        Augmentation::MotionBlur,
        Augmentation::Monochrome,
    ];

    pub fn apply(self, sample: &RenderedSample) -> RenderedSample {
        let (h, w) = sample.size();
        let shape = sample.image.shape().to_vec();
        match self {
            Augmentation::Flip => {
                let src = sample.image.data();
                let mut data = vec![0.0f32; src.len()];
                for y in 0..h {
                    for x in 0..w {
                        let d = (y * w + x) * 3;
                        let s = (y * w + (w - 1 - x)) * 3;
                        data[d..d + 3].copy_from_slice(&src[s..s + 3]);
                    }
                }
                let mirror = |k: Keypoint| k.map(|[x, y]| [w as f32 - x, y]);
                let kp = sample.keypoints;
                RenderedSample {
                    image: Tensor::new(&shape, data).unwrap(),
                    keypoints: [mirror(kp[1]), mirror(kp[0]), mirror(kp[2]), mirror(kp[3])],
                    pose: sample.pose.mirrored(),
                    quality: sample.quality,
                }
            }
            Augmentation::GaussianBlur => {
                let mut img = tensor_to_f64(&sample.image);
                gaussian_blur(&mut img, h, w, 1.0);
                RenderedSample {
                    image: f64_to_tensor(&shape, &img),
                    ..sample.clone()
                }
            }
            Augmentation::MotionBlur => {
                let mut img = tensor_to_f64(&sample.image);
                separable(&mut img, h, w, &[0.2; 5], &[1.0]);
                RenderedSample {
                    image: f64_to_tensor(&shape, &img),
                    ..sample.clone()
                }
            }
            Augmentation::Monochrome => {
                let mut data = sample.image.data().to_vec();
                for px in data.chunks_mut(3) {
                    let gray = quantize((px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0);
                    px.fill(gray);
                }
                RenderedSample {
                    image: Tensor::new(&shape, data).unwrap(),
                    ..sample.clone()
                }
            }
        }
    }
}

/// With probability 0.2 applies one uniformly chosen augmentation.
pub fn augment<R: Rng>(sample: &RenderedSample, rng: &mut R) -> (RenderedSample, Option<Augmentation>) {
    if rng.random_bool(AUGMENT_PROB) {
        let a = Augmentation::ALL[rng.random_range(0..Augmentation::ALL.len())];
        (a.apply(sample), Some(a))
    } else {
        (sample.clone(), None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub identity: usize,
    pub samples: Vec<RenderedSample>,
}

impl Template {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// True if every sample carries the same image.
    pub fn all_identical(&self) -> bool {
        self.samples.windows(2).all(|w| w[0].image == w[1].image)
    }
}

/// Nuisance distribution for a fresh render: uniform yaw, quality skewed
/// toward the high end.
pub fn random_conditions<R: Rng>(rng: &mut R) -> (f64, f64) {
    let yaw = rng.random_range(-1.0..=1.0);
    let quality = rng.random::<f64>().sqrt();
    (yaw, quality)
}

/// Builds a template of `n` samples, duplicating a single draw with
/// probability 0.2. `draw(rng, slot)` produces the sample for slot `slot`
/// of the non-duplicated branch.
pub fn assemble_with<R, F>(identity: usize, n: usize, rng: &mut R, mut draw: F) -> Result<Template>
where
    R: Rng,
    F: FnMut(&mut R, usize) -> RenderedSample,
{
    if n < 1 {
        return Err(Error::invalid("template needs at least one image"));
    }
    let identical = rng.random_bool(IDENTICAL_TEMPLATE_PROB);
    let samples = if identical {
        let s = draw(rng, 0);
        vec![s; n]
    } else {
        (0..n).map(|slot| draw(rng, slot)).collect()
    };
    Ok(Template { identity, samples })
}

pub fn assemble_template<R: Rng>(
    spec: &IdentitySpec,
    n: usize,
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<Template> {
    assemble_with(spec.id, n, rng, |r, _| {
        let (yaw, q) = random_conditions(r);
        render_sample(spec, yaw, q, opts, r)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub identities: usize,
    /// Highest-numbered identities reserved for evaluation.
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 7,
            identities: 140,
            test_identities: 40,
            images_per_identity: 24,
            image_size: 48,
        }
    }
}

/// A fixed pool of rendered samples per identity.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<RenderedSample>,
    pub sample_identity: Vec<usize>,
    /// Sample indices of each identity, indexed by identity id.
    pub by_identity: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        if config.test_identities >= config.identities {
            return Err(Error::invalid(format!(
                "{} test identities leave no training identities out of {}",
                config.test_identities, config.identities
            )));
        }
        if config.images_per_identity == 0 || config.image_size < 8 || config.image_size % 8 != 0 {
            return Err(Error::invalid(
                "need at least one image per identity and an image size that is a positive multiple of 8",
            ));
        }
        let opts = RenderOptions {
            size: config.image_size,
            nuisance: true,
        };
        let mut samples = Vec::with_capacity(config.identities * config.images_per_identity);
        let mut sample_identity = Vec::with_capacity(samples.capacity());
        let mut by_identity = Vec::with_capacity(config.identities);
        for id in 0..config.identities {
            let spec = generate_identity(config.seed, id);
            let mut idx = Vec::with_capacity(config.images_per_identity);
            for j in 0..config.images_per_identity {
                let mut rng = derive_rng(config.seed, &[TAG_SAMPLE, id as u64, j as u64]);
                let (yaw, q) = random_conditions(&mut rng);
                idx.push(samples.len());
                samples.push(render_sample(&spec, yaw, q, &opts, &mut rng));
                sample_identity.push(id);
            }
            by_identity.push(idx);
        }
        Ok(Dataset {
            config: config.clone(),
            samples,
            sample_identity,
            by_identity,
        })
    }

    pub fn split_of(&self, identity: usize) -> Split {
        if identity + self.config.test_identities >= self.config.identities {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn identities(&self, split: Split) -> Vec<usize> {
        (0..self.by_identity.len())
            .filter(|&id| self.split_of(id) == split && !self.by_identity[id].is_empty())
            .collect()
    }

    /// Template drawn from the identity's pool: distinct images when the
    /// pool allows, one image repeated with probability 0.2.
    pub fn assemble_template<R: Rng>(&self, identity: usize, n: usize, rng: &mut R) -> Result<Template> {
        let pool = self
            .by_identity
            .get(identity)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::invalid(format!("identity {identity} has no samples")))?;
        let picks: Vec<usize> = if pool.len() >= n {
            index::sample(rng, pool.len(), n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..pool.len())).collect()
        };
        assemble_with(identity, n, rng, |_, slot| self.samples[pool[picks[slot]]].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> RenderOptions {
        RenderOptions::default()
    }

    #[test]
    fn identity_is_deterministic_and_distinct() {
        assert_eq!(generate_identity(7, 0), generate_identity(7, 0));
        assert_ne!(generate_identity(7, 0).params, generate_identity(7, 1).params);
        let all: Vec<_> = (0..100).map(|i| generate_identity(7, i).params).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "identities {i} and {j} collide");
            }
        }
        for spec in (0..20).map(|i| generate_identity(3, i)) {
            for (v, (_, lo, hi)) in spec.params.iter().zip(PARAM_RANGES) {
                assert!(*v >= lo && *v < hi);
            }
        }
    }

    #[test]
    fn pose_thresholds() {
        assert_eq!(Pose::from_ratio(1.0), Pose::Frontal);
        assert_eq!(Pose::from_ratio(0.2), Pose::LeftProfile);
        assert_eq!(Pose::from_ratio(4.0), Pose::RightProfile);
        assert_eq!(Pose::from_ratio(0.3), Pose::Frontal);
        assert_eq!(Pose::from_ratio(3.0), Pose::Frontal);
        for r in [0.2, 1.0, 4.0] {
            assert!((yaw_to_ratio(ratio_to_yaw(r)) - r).abs() < 1e-12);
        }
    }

    fn measured_ratio(s: &RenderedSample, spec: &IdentitySpec, yaw: f64) -> f64 {
        // Eyes may be occluded, so rebuild their positions from the layout.
        let layout = Layout::new(spec, yaw, s.size().0 as f64, [0.0, 0.0]);
        let nose = s.keypoints[2].unwrap();
        let alpha = (nose[0] as f64 - layout.eyes[0][0]).abs();
        let theta = (layout.eyes[1][0] - nose[0] as f64).abs();
        alpha / theta
    }

    #[test]
    fn render_pose_follows_ratio() {
        let spec = IdentitySpec::symmetric(0);
        let clean = RenderOptions {
            nuisance: false,
            ..opts()
        };
        let mut rng = derive_rng(1, &[]);
        let frontal = render_sample(&spec, 0.0, 1.0, &clean, &mut rng);
        assert_eq!(frontal.pose, Pose::Frontal);
        assert!((measured_ratio(&frontal, &spec, 0.0) - 1.0).abs() < 1e-5);

        let yaw = ratio_to_yaw(0.2);
        let left = render_sample(&spec, yaw, 1.0, &clean, &mut rng);
        assert!((measured_ratio(&left, &spec, yaw) - 0.2).abs() < 1e-4);
        assert_eq!(left.pose, Pose::LeftProfile);
        assert!(left.keypoints[0].is_none() && left.keypoints[1].is_some());

        let yaw = ratio_to_yaw(4.0);
        let right = render_sample(&spec, yaw, 1.0, &clean, &mut rng);
        assert!((measured_ratio(&right, &spec, yaw) - 4.0).abs() < 1e-4);
        assert_eq!(right.pose, Pose::RightProfile);
        assert!(right.keypoints[1].is_none() && right.keypoints[0].is_some());
    }

    /// Darkness-weighted centroid in a window around `center`.
    fn centroid(s: &RenderedSample, center: [f32; 2], radius: f64, reference: [f64; 3]) -> [f64; 2] {
        let (h, w) = s.size();
        let d = s.image.data();
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if (px - center[0] as f64).abs() > radius || (py - center[1] as f64).abs() > radius {
                    continue;
                }
                let i = (y * w + x) * 3;
                let diff: f64 = (0..3).map(|c| (reference[c] - d[i + c] as f64).abs()).sum();
                sx += diff * px;
                sy += diff * py;
                sw += diff;
            }
        }
        [sx / sw, sy / sw]
    }

    #[test]
    fn keypoints_match_glyph_centroids() {
        let clean = RenderOptions {
            nuisance: false,
            ..opts()
        };
        for id in 0..10 {
            let spec = generate_identity(11, id);
            let mut rng = derive_rng(0, &[]);
            let s = render_sample(&spec, 0.0, 1.0, &clean, &mut rng);
            let skin = skin_color(&spec);
            let eye_r = spec.p("eye_size") * 48.0;
            for k in 0..2 {
                let kp = s.keypoints[k].unwrap();
                let c = centroid(&s, kp, eye_r + 1.0, skin);
                assert!((c[0] - kp[0] as f64).abs() < 0.5 && (c[1] - kp[1] as f64).abs() < 0.5,
                    "identity {id} eye {k}: {c:?} vs {kp:?}");
            }
            // Nose: isolate the wedge by comparing against a render without it.
            let kp = s.keypoints[2].unwrap();
            let layout = Layout::new(&spec, 0.0, 48.0, [0.0, 0.0]);
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            let d = s.image.data();
            for y in 0..48 {
                for x in 0..48 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let cover = (0..16)
                        .filter(|i| {
                            let ux = x as f64 + ((i % 4) as f64 + 0.5) / 4.0;
                            let uy = y as f64 + ((i / 4) as f64 + 0.5) / 4.0;
                            layout.in_nose(ux, uy)
                                && !layout.in_eye(0, ux, uy)
                                && !layout.in_eye(1, ux, uy)
                                && !layout.in_mouth(ux, uy)
                        })
                        .count();
                    if cover > 0 {
                        let i = (y * 48 + x) * 3;
                        let wgt = (skin[1] - d[i + 1] as f64).abs();
                        sx += wgt * px;
                        sy += wgt * py;
                        sw += wgt;
                    }
                }
            }
            let c = [sx / sw, sy / sw];
            assert!((c[0] - kp[0] as f64).abs() < 0.5 && (c[1] - kp[1] as f64).abs() < 0.5,
                "identity {id} nose: {c:?} vs {kp:?}");
            let kp = s.keypoints[3].unwrap();
            let half = layout.mouth_half_width + 1.0;
            let reach = half.max(layout.mouth_bend.abs() + layout.mouth_thickness) + 0.5;
            let c = centroid(&s, kp, reach.min(half), skin);
            assert!((c[0] - kp[0] as f64).abs() < 0.5, "identity {id} mouth x: {c:?} vs {kp:?}");
        }
    }

    #[test]
    fn rendering_is_pure() {
        let ds = DatasetConfig {
            identities: 3,
            test_identities: 1,
            images_per_identity: 2,
            ..DatasetConfig::default()
        };
        let a = Dataset::generate(&ds).unwrap();
        let b = Dataset::generate(&ds).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.identities(Split::Train), vec![0, 1]);
        assert_eq!(a.identities(Split::Test), vec![2]);
    }

    #[test]
    fn quality_schedule_is_monotone() {
        let qs: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        for w in qs.windows(2) {
            assert!(blur_sigma(w[1]) <= blur_sigma(w[0]));
            assert!(downsample_factor(w[1]) <= downsample_factor(w[0]));
        }
        assert_eq!(blur_sigma(0.0), 2.5);
        assert_eq!(downsample_factor(0.0), 4);
        assert_eq!(downsample_factor(1.0), 1);
    }

    #[test]
    fn template_rules() {
        let spec = generate_identity(7, 3);
        let mut rng = derive_rng(5, &[]);
        assert!(assemble_template(&spec, 0, &opts(), &mut rng).is_err());
        let t = assemble_template(&spec, 1, &opts(), &mut rng).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.identity, 3);
    }

    #[test]
    fn identical_fraction_is_twenty_percent() {
        let mut rng = derive_rng(9, &[]);
        let trials = 10_000;
        let mut identical = 0;
        let mut both_distinct = 0;
        for _ in 0..trials {
            // Cheap stand-in draws: distinct images per slot.
            let mut counter = 0.0f32;
            let mut draw = |_: &mut ChaCha8Rng, _: usize| {
                counter += 1.0;
                RenderedSample {
                    image: Tensor::full(&[1, 1, 3], counter),
                    keypoints: [None; 4],
                    pose: Pose::Frontal,
                    quality: 1.0,
                }
            };
            let a = assemble_with(0, 3, &mut rng, &mut draw).unwrap();
            let b = assemble_with(0, 3, &mut rng, &mut draw).unwrap();
            identical += a.all_identical() as usize;
            both_distinct += (!a.all_identical() && !b.all_identical()) as usize;
        }
        let frac = identical as f64 / trials as f64;
        assert!((frac - 0.20).abs() <= 0.02, "identical fraction {frac}");
        let frac = both_distinct as f64 / trials as f64;
        assert!((frac - 0.64).abs() <= 0.02, "both-distinct fraction {frac}");
    }

    #[test]
    fn augmentation_rules() {
        let spec = generate_identity(7, 1);
        let mut rng = derive_rng(2, &[]);
        let s = render_sample(&spec, 0.3, 0.9, &opts(), &mut rng);

        let mut applied = 0;
        for _ in 0..10_000 {
            applied += augment(&s, &mut rng).1.is_some() as usize;
        }
        let frac = applied as f64 / 10_000.0;
        assert!((frac - 0.2).abs() <= 0.02, "augmentation fraction {frac}");

        let twice = Augmentation::Flip.apply(&Augmentation::Flip.apply(&s));
        assert_eq!(twice, s);

        let f = Augmentation::Flip.apply(&s);
        let (l, r) = (s.keypoints[0].unwrap(), f.keypoints[1].unwrap());
        assert_eq!(r[0], 48.0 - l[0]);

        let m = Augmentation::Monochrome.apply(&s);
        assert!(m.image.data().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }
}
