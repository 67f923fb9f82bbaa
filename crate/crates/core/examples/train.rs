//! Train the baseline and the comparator, writing loss logs and checkpoints.
//!
//! cargo run --release --example train -- [steps] [out dir]

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use dcn::synth::{Dataset, DatasetConfig};
use dcn::trainer::{baseline_checkpoint, embedding_store, train_baseline, DcnTrainer, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let cfg = TrainConfig {
        max_steps: args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500),
        ..TrainConfig::default()
    };
    let dir = PathBuf::from(args.get(2).map_or("out", String::as_str));
    std::fs::create_dir_all(&dir)?;
    let dataset = Dataset::generate(&DatasetConfig::default())?;

    let log = |name: &str| File::create(dir.join(name)).map(BufWriter::new);
    let baseline = train_baseline::<f32>(&cfg, &dataset, Some(&mut log("baseline_loss.csv")?))?;
    baseline_checkpoint(&baseline).save(&dir.join("baseline.ckpt"))?;

    let store = embedding_store(&baseline, &dataset)?;
    let mut trainer = DcnTrainer::<f32>::new(&cfg, &dataset)?;
    trainer.run(&dataset, &store, &mut log("loss.csv")?)?;
    trainer.to_checkpoint().save(&dir.join("dcn.ckpt"))?;
    println!("{} steps; checkpoints and loss logs in {}", trainer.step, dir.display());
    Ok(())
}
