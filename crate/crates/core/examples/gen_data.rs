//! Render the synthetic dataset to PNGs plus a manifest.
//!
//! cargo run --release --example gen_data -- [out dir] [identities]

use std::path::PathBuf;

use dcn::export::{export_dataset, read_manifest};
use dcn::synth::{Dataset, DatasetConfig, Split};

fn main() -> dcn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).map_or("out/data", String::as_str));
    let mut cfg = DatasetConfig::default();
    if let Some(n) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.identities = n;
        cfg.test_identities = cfg.test_identities.min(n / 4);
    }
    let dataset = Dataset::generate(&cfg)?;
    let manifest = export_dataset(&dataset, &dir)?;
    let records = read_manifest(&manifest)?;
    println!(
        "{} images, {} train / {} test identities -> {}",
        records.len(),
        dataset.identities(Split::Train).len(),
        dataset.identities(Split::Test).len(),
        manifest.display()
    );
    for r in records.iter().take(3) {
        println!("{}", r.line());
    }
    Ok(())
}
