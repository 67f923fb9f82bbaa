//! Difficulty histogram of one mining round, split by pair label.
//!
//! cargo run --release --example mine_stats -- [baseline checkpoint]

use dcn::checkpoint::Checkpoint;
use dcn::mining::{build_mining_round, RoundConfig};
use dcn::synth::{derive_rng, Dataset, DatasetConfig, Split};
use dcn::trainer::{baseline_from_checkpoint, embedding_store, train_baseline, TrainConfig};

fn main() -> dcn::Result<()> {
    let dataset = Dataset::generate(&DatasetConfig::default())?;
    let baseline = match std::env::args().nth(1) {
        Some(path) => baseline_from_checkpoint::<f32>(&Checkpoint::load(path.as_ref())?)?,
        None => train_baseline(
            &TrainConfig {
                baseline_steps: 300,
                ..TrainConfig::default()
            },
            &dataset,
            None,
        )?,
    };
    let store = embedding_store(&baseline, &dataset)?;
    let round = build_mining_round(
        &dataset.identities(Split::Train),
        &RoundConfig::default(),
        &store,
        &mut derive_rng(1, &[]),
    )?;
    let d = &round.difficulty;
    println!("{}×{} matrix, {} positive pairs", d.n(), d.n(), round.positive_pairs());
    let bins = 20;
    let mut counts = vec![[0usize; 2]; bins];
    for (i, j, v) in d.upper_triangle() {
        counts[((v / 2.0 * bins as f64) as usize).min(bins - 1)][d.label(i, j) as usize] += 1;
    }
    println!("bucket_left,bucket_right,negatives,positives");
    for (b, [neg, pos]) in counts.iter().enumerate() {
        let w = 2.0 / bins as f64;
        println!("{:.2},{:.2},{neg},{pos}", b as f64 * w, (b + 1) as f64 * w);
    }
    Ok(())
}
