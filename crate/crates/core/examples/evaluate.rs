//! Score the verification protocol with saved checkpoints and print ROC summaries.
//!
//! cargo run --release --example evaluate -- out/baseline.ckpt out/dcn.ckpt

use dcn::checkpoint::Checkpoint;
use dcn::eval::{baseline_scores, dcn_scores, impostor_scores, metrics_csv, roc_curve, Fusion, Protocol, ProtocolConfig};
use dcn::synth::{derive_rng, Dataset, DatasetConfig};
use dcn::trainer::{baseline_from_checkpoint, dcn_from_checkpoint};

fn main() -> dcn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let (Some(b_path), Some(d_path)) = (args.get(1), args.get(2)) else {
        eprintln!("usage: evaluate <baseline.ckpt> <dcn.ckpt>");
        std::process::exit(2);
    };
    let baseline = baseline_from_checkpoint::<f32>(&Checkpoint::load(b_path.as_ref())?)?;
    let dcn = dcn_from_checkpoint::<f32>(&Checkpoint::load(d_path.as_ref())?)?;
    let dataset = Dataset::generate(&DatasetConfig::default())?;
    let protocol = Protocol::build(&dataset, &ProtocolConfig::default(), &mut derive_rng(11, &[]))?;
    let calibration = Protocol::build(&dataset, &ProtocolConfig::default(), &mut derive_rng(12, &[]))?;

    let b = baseline_scores(&protocol, &dataset, &baseline)?;
    let d = dcn_scores(&protocol, &dataset, &dcn)?;
    let fusion = Fusion::calibrate(
        &impostor_scores(&baseline_scores(&calibration, &dataset, &baseline)?, &calibration),
        &impostor_scores(&dcn_scores(&calibration, &dataset, &dcn)?, &calibration),
        0.5,
    )?;
    let f: Vec<f64> = b.iter().zip(&d).map(|(x, y)| fusion.fuse(*x, *y)).collect();
    let labels = protocol.labels();
    for (name, scores) in [("baseline", &b), ("dcn", &d), ("fused", &f)] {
        let roc = roc_curve(scores, &labels)?;
        println!("== {name} (AUC {:.4})", roc.auc());
        print!("{}", metrics_csv(&roc, &[1e-3, 1e-2, 1e-1])?);
    }
    Ok(())
}
