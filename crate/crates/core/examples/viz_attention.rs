//! Overlay every landmark map of a comparator on the images of one template.
//!
//! cargo run --release --example viz_attention -- [dcn checkpoint] [out dir]
//!
//! Without a checkpoint the maps come from a freshly initialised network.

use std::path::PathBuf;

use dcn::checkpoint::Checkpoint;
use dcn::export::write_overlays;
use dcn::network::{DcnConfig, DcnParams};
use dcn::synth::{derive_rng, Dataset, DatasetConfig, Split};
use dcn::trainer::dcn_from_checkpoint;

fn main() -> dcn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let params = match args.get(1) {
        Some(path) => dcn_from_checkpoint::<f32>(&Checkpoint::load(path.as_ref())?)?,
        None => DcnParams::new(&DcnConfig::default(), &mut derive_rng(1, &[])),
    };
    let dir = PathBuf::from(args.get(2).map_or("out/attention", String::as_str));
    let dataset = Dataset::generate(&DatasetConfig::default())?;
    let id = dataset.identities(Split::Test)[0];
    let template = dataset.assemble_template(id, 3, &mut derive_rng(2, &[]))?;
    let maps = params.attention_maps(&template.samples)?;
    let written = write_overlays(&template.samples, &maps, &dir)?;
    println!("identity {id}: {} overlays in {}", written.len(), dir.display());
    Ok(())
}
