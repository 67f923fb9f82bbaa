//! Desk-scale experiment: baseline classifier, comparator network, fusion.
//!
//! cargo run --release --example end_to_end -- [steps] [diversity|keypoints] [baseline.ckpt]
//!
//! A baseline checkpoint path is loaded when it exists and written otherwise.

use std::path::Path;
use std::time::Instant;

use dcn::checkpoint::Checkpoint;
use dcn::eval::{baseline_scores, dcn_scores, impostor_scores, roc_curve, Fusion, Protocol, ProtocolConfig};
use dcn::objectives::Regularizer;
use dcn::synth::{derive_rng, Dataset, DatasetConfig};
use dcn::trainer::{
    baseline_checkpoint, baseline_from_checkpoint, embedding_store, train_baseline, DcnTrainer, TrainConfig,
};

fn main() -> dcn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let regularizer: Regularizer = args.get(2).map_or(Ok(Regularizer::Keypoints), |s| s.parse())?;

    let start = Instant::now();
    let dataset = Dataset::generate(&DatasetConfig::default())?;
    println!("dataset: {} images in {:.1?}", dataset.samples.len(), start.elapsed());

    let cfg = TrainConfig {
        max_steps: steps,
        regularizer,
        ..TrainConfig::default()
    };
    let baseline = match args.get(3).map(Path::new) {
        Some(path) if path.exists() => baseline_from_checkpoint(&Checkpoint::load(path)?)?,
        cache => {
            let b = train_baseline::<f32>(&cfg, &dataset, None)?;
            if let Some(path) = cache {
                baseline_checkpoint(&b).save(path)?;
            }
            b
        }
    };
    println!("baseline trained at {:.1?}", start.elapsed());
    let store = embedding_store(&baseline, &dataset)?;

    let mut trainer = DcnTrainer::<f32>::new(&cfg, &dataset)?;
    trainer.run(&dataset, &store, &mut std::io::sink())?;
    println!("comparator trained at {:.1?}", start.elapsed());

    let protocol = Protocol::build(&dataset, &ProtocolConfig::default(), &mut derive_rng(11, &[]))?;
    let calibration = Protocol::build(&dataset, &ProtocolConfig::default(), &mut derive_rng(12, &[]))?;
    let labels = protocol.labels();
    let b = baseline_scores(&protocol, &dataset, &baseline)?;
    let d = dcn_scores(&protocol, &dataset, &trainer.params)?;
    let fusion = Fusion::calibrate(
        &impostor_scores(&baseline_scores(&calibration, &dataset, &baseline)?, &calibration),
        &impostor_scores(&dcn_scores(&calibration, &dataset, &trainer.params)?, &calibration),
        0.5,
    )?;
    let f: Vec<f64> = b.iter().zip(&d).map(|(x, y)| fusion.fuse(*x, *y)).collect();
    for (name, scores) in [("baseline", &b), ("dcn", &d), ("fused", &f)] {
        let roc = roc_curve(scores, &labels)?;
        let tars: Vec<String> = [1e-3, 1e-2, 1e-1]
            .iter()
            .map(|&far| format!("{:.3}", roc.tar_at_far(far).unwrap().tar))
            .collect();
        println!("{name:>8}: TAR@FAR 1e-3/1e-2/1e-1 = {}  AUC {:.4}", tars.join(" / "), roc.auc());
    }
    println!("total {:.1?}", start.elapsed());
    Ok(())
}
