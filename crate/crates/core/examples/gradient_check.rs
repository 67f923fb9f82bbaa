//! Finite-difference check of a small comparator: backbone, landmark maps,
//! recalibrated pooling, experts and the pair loss.
//!
//! cargo run --release --example gradient_check

use dcn::detect::{BackboneConfig, DetectConfig};
use dcn::network::{DcnConfig, DcnParams};
use dcn::synth::{derive_rng, generate_identity, render_sample, RenderOptions, Template};
use dcn::tensor::{grad_check, Tensor};
use rand::Rng;

fn main() -> dcn::Result<()> {
    let mut rng = derive_rng(7, &[]);
    let x = Tensor::<f64>::from_fn(&[2, 6, 6, 3], |_| rng.random_range(-1.0..1.0));
    let k = Tensor::<f64>::from_fn(&[3, 3, 3, 4], |_| rng.random_range(-1.0..1.0));
    let err = grad_check(&[x, k], 1e-5, |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1)?;
        let p = g.softmax_over(y, &[0, 1, 2])?;
        let s = g.mul(p, y)?;
        Ok(g.sum(s))
    })
    .expect("grad check");
    println!("conv -> softmax over images and cells: worst relative error {err:.2e}");

    let cfg = DcnConfig {
        detect: DetectConfig {
            backbone: BackboneConfig {
                conv1: 4,
                conv2: 4,
                features: 8,
            },
            landmarks: 2,
        },
        expert_width: 6,
        identities: 3,
    };
    let params = DcnParams::<f64>::new(&cfg, &mut derive_rng(3, &[]));
    let opts = RenderOptions { size: 16, nuisance: true };
    let mut template = |id: usize, n: usize| Template {
        identity: id,
        samples: (0..n)
            .map(|_| render_sample(&generate_identity(1, id), rng.random_range(-1.0..1.0), 0.8, &opts, &mut rng))
            .collect(),
    };
    let (a, b) = (template(0, 3), template(1, 2));
    let s = params.similarity(&a, &b)?;
    println!("similarity of a 3-image and a 2-image template: {:.4}", s.probability_same);
    Ok(())
}
