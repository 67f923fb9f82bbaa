//! `dcn` command line: gen-data, train, eval, mine-stats, viz-attention.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::{peek_precision, Checkpoint};
use crate::config::{Precision, RunConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::eval::{
    baseline_scores, dcn_scores, impostor_scores, metrics_csv, roc_curve, Fusion, Protocol, REPORT_FARS,
};
use crate::export::{export_dataset, load_png, write_overlays};
use crate::mining::{build_mining_round, difficulty_histogram, HISTOGRAM_HEADER};
use crate::network::{BaselineParams, DcnParams};
use crate::synth::{derive_rng, Dataset, RenderedSample, Split};
use crate::tensor::Real;
use crate::trainer::{
    baseline_checkpoint, baseline_from_checkpoint, dcn_from_checkpoint, embedding_store, train_baseline, DcnTrainer,
};

#[derive(Debug, Parser)]
#[command(name = "dcn", version, about = "Deep comparator network for template verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset_seed: Option<u64>,
    #[arg(long, global = true)]
    pub train_seed: Option<u64>,
    /// diversity or keypoints.
    #[arg(long, global = true)]
    pub regularizer: Option<String>,
    /// Number of local landmark maps.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub images_per_template: Option<usize>,
    #[arg(long, global = true)]
    pub identities: Option<usize>,
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// 32 or 64.
    #[arg(long, global = true)]
    pub precision: Option<String>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset to PNGs plus a manifest.
    GenData,
    /// Train the baseline classifier, then the comparator network.
    Train {
        /// Reuse a trained baseline instead of training one.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Score a verification protocol and write ROC and metrics CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// Pairs file; `<stem>.templates` beside it holds the templates.
        #[arg(long)]
        protocol: Option<PathBuf>,
    },
    /// Difficulty histogram of one hard-mining round.
    MineStats {
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Attention overlays for the images of one template.
    VizAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PNG, or a text file listing PNG paths one per line.
        #[arg(long)]
        template: PathBuf,
    },
}

impl Common {
    /// Defaults, then the config file, then `--set` pairs, then named flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            c.set(k.trim(), v.trim())?;
        }
        let named = [
            ("dataset_seed", self.dataset_seed.map(|v| v.to_string())),
            ("train_seed", self.train_seed.map(|v| v.to_string())),
            ("regularizer", self.regularizer.clone()),
            ("k", self.k.map(|v| v.to_string())),
            ("images_per_template", self.images_per_template.map(|v| v.to_string())),
            ("identities", self.identities.map(|v| v.to_string())),
            ("precision", self.precision.clone()),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        if self.deterministic {
            c.deterministic = true;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Process exit status and the one-line error category for a failure.
pub fn classify(e: &Error) -> (i32, &'static str) {
    let missing = |kind: std::io::ErrorKind| kind == std::io::ErrorKind::NotFound;
    match e {
        Error::Io { source, .. } if missing(source.kind()) => (3, "missing-file"),
        Error::Image {
            source: image::ImageError::IoError(io),
            ..
        } if missing(io.kind()) => (3, "missing-file"),
        Error::NonFinite { .. } => (5, "numeric"),
        _ => (4, "validation"),
    }
}

/// Parses `argv`, runs the subcommand and returns the exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: bad-flag: {first}");
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let (code, category) = classify(&e);
            eprintln!("error: {category}: {}", e.to_string().replace('\n', " "));
            code
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, out: &Path, inputs: &[(&str, &Path)]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut text = cfg.to_text();
    for (name, p) in inputs {
        text.push_str(&format!("# {name} = {}\n", p.display()));
    }
    print!("{text}");
    write_file(&out.join("config.txt"), &text)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.common.resolve()?;
    let out = cli.common.out_dir.as_path();
    match &cli.command {
        Command::GenData => {
            echo_config(&cfg, out, &[])?;
            let dataset = Dataset::generate(&cfg.dataset)?;
            let manifest = export_dataset(&dataset, out)?;
            println!("wrote {} samples to {}", dataset.samples.len(), manifest.display());
            Ok(())
        }
        Command::Train { baseline } => {
            let inputs: Vec<(&str, &Path)> = baseline.iter().map(|p| ("baseline", p.as_path())).collect();
            echo_config(&cfg, out, &inputs)?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, out, baseline.as_deref()),
                Precision::F64 => train::<f64>(&cfg, out, baseline.as_deref()),
            }
        }
        Command::Eval {
            checkpoint,
            baseline,
            protocol,
        } => {
            let mut inputs = vec![("checkpoint", checkpoint.as_path()), ("baseline", baseline.as_path())];
            if let Some(p) = protocol {
                inputs.push(("protocol", p.as_path()));
            }
            echo_config(&cfg, out, &inputs)?;
            evaluate(&cfg, out, checkpoint, baseline, protocol.as_deref())
        }
        Command::MineStats { baseline } => {
            let inputs: Vec<(&str, &Path)> = baseline.iter().map(|p| ("baseline", p.as_path())).collect();
            echo_config(&cfg, out, &inputs)?;
            mine_stats(&cfg, out, baseline.as_deref())
        }
        Command::VizAttention { checkpoint, template } => {
            echo_config(&cfg, out, &[("checkpoint", checkpoint), ("template", template)])?;
            viz_attention(out, checkpoint, template)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn load_baseline<T: Real>(path: &Path) -> Result<BaselineParams<T>> {
    match peek_precision(path)? {
        32 => Ok(baseline_from_checkpoint::<f32>(&Checkpoint::load(path)?)?.cast()),
        64 => Ok(baseline_from_checkpoint::<f64>(&Checkpoint::load(path)?)?.cast()),
        p => Err(CheckpointError::CorruptHeader(format!("precision {p}")).into()),
    }
}

fn load_dcn<T: Real>(path: &Path) -> Result<DcnParams<T>> {
    match peek_precision(path)? {
        32 => Ok(dcn_from_checkpoint::<f32>(&Checkpoint::load(path)?)?.cast()),
        64 => Ok(dcn_from_checkpoint::<f64>(&Checkpoint::load(path)?)?.cast()),
        p => Err(CheckpointError::CorruptHeader(format!("precision {p}")).into()),
    }
}

fn baseline_for<T: Real>(cfg: &RunConfig, dataset: &Dataset, out: &Path, path: Option<&Path>) -> Result<BaselineParams<T>> {
    if let Some(p) = path {
        return load_baseline(p);
    }
    let mut log = create(&out.join("baseline_loss.csv"))?;
    let b = train_baseline::<T>(&cfg.train, dataset, Some(&mut log))?;
    log.flush().map_err(|e| Error::io("baseline_loss.csv", e))?;
    baseline_checkpoint(&b).save(&out.join("baseline.ckpt"))?;
    Ok(b)
}

fn train<T: Real>(cfg: &RunConfig, out: &Path, baseline: Option<&Path>) -> Result<()> {
    let dataset = Dataset::generate(&cfg.dataset)?;
    let b = baseline_for::<T>(cfg, &dataset, out, baseline)?;
    info!("baseline ready");
    let store = embedding_store(&b, &dataset)?;
    let mut trainer = DcnTrainer::<T>::new(&cfg.train, &dataset)?;
    let mut log = create(&out.join("loss.csv"))?;
    trainer.run(&dataset, &store, &mut log)?;
    log.flush().map_err(|e| Error::io("loss.csv", e))?;
    let path = out.join("dcn.ckpt");
    trainer.to_checkpoint().save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn protocol_paths(pairs: &Path) -> (PathBuf, PathBuf) {
    (pairs.to_path_buf(), pairs.with_extension("templates"))
}

fn evaluate(cfg: &RunConfig, out: &Path, checkpoint: &Path, baseline: &Path, protocol: Option<&Path>) -> Result<()> {
    let dataset = Dataset::generate(&cfg.dataset)?;
    let baseline = load_baseline::<f32>(baseline)?;
    let dcn = load_dcn::<f32>(checkpoint)?;
    let protocol = match protocol {
        Some(p) => {
            let (pairs, templates) = protocol_paths(p);
            Protocol::load(&pairs, &templates)?
        }
        None => {
            let p = Protocol::build(&dataset, &cfg.protocol, &mut derive_rng(cfg.protocol_seed, &[]))?;
            let (pairs, templates) = protocol_paths(&out.join("protocol.pairs"));
            p.save(&pairs, &templates)?;
            p
        }
    };
    let calibration = Protocol::build(&dataset, &cfg.protocol, &mut derive_rng(cfg.calibration_seed, &[]))?;
    let fusion = Fusion::calibrate(
        &impostor_scores(&baseline_scores(&calibration, &dataset, &baseline)?, &calibration),
        &impostor_scores(&dcn_scores(&calibration, &dataset, &dcn)?, &calibration),
        cfg.fusion_weight,
    )?;
    let labels = protocol.labels();
    let b = baseline_scores(&protocol, &dataset, &baseline)?;
    let d = dcn_scores(&protocol, &dataset, &dcn)?;
    let f: Vec<f64> = b.iter().zip(&d).map(|(x, y)| fusion.fuse(*x, *y)).collect();
    let mut scores = String::from("a,b,label,baseline,dcn,fused\n");
    for (i, p) in protocol.pairs.iter().enumerate() {
        scores.push_str(&format!("{},{},{},{:.9},{:.9},{:.9}\n", p.a, p.b, p.same as u8, b[i], d[i], f[i]));
    }
    write_file(&out.join("scores.csv"), &scores)?;
    for (name, s) in [("baseline", &b), ("dcn", &d), ("fused", &f)] {
        let roc = roc_curve(s, &labels)?;
        write_file(&out.join(format!("roc_{name}.csv")), &roc.to_csv())?;
        write_file(&out.join(format!("metrics_{name}.csv")), &metrics_csv(&roc, &REPORT_FARS)?)?;
        let mut line = format!("{name}:");
        for &far in &REPORT_FARS {
            let t = roc.tar_at_far(far)?;
            let flag = if t.below_resolution { "*" } else { "" };
            line.push_str(&format!(" TAR@{far:e}={:.4}{flag}", t.tar));
        }
        println!("{line} AUC={:.4}", roc.auc());
    }
    Ok(())
}

fn mine_stats(cfg: &RunConfig, out: &Path, baseline: Option<&Path>) -> Result<()> {
    let dataset = Dataset::generate(&cfg.dataset)?;
    let b = baseline_for::<f32>(cfg, &dataset, out, baseline)?;
    let store = embedding_store(&b, &dataset)?;
    let round = build_mining_round(
        &dataset.identities(Split::Train),
        &cfg.train.round,
        &store,
        &mut derive_rng(cfg.train.train_seed, &[]),
    )?;
    let d = &round.difficulty;
    let mut text = format!("{HISTOGRAM_HEADER}\n");
    for (lo, hi, n) in difficulty_histogram(d, 20) {
        text.push_str(&format!("{lo:.2},{hi:.2},{n}\n"));
    }
    write_file(&out.join("difficulty_histogram.csv"), &text)?;
    print!("{text}");
    println!(
        "matrix {}x{}, {} positive pairs, {} templates",
        d.n(),
        d.n(),
        round.positive_pairs(),
        round.templates.len()
    );
    Ok(())
}

fn template_images(path: &Path) -> Result<Vec<RenderedSample>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        return Ok(vec![load_png(path)?]);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let images: Vec<RenderedSample> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| load_png(&base.join(l)))
        .collect::<Result<_>>()?;
    if images.is_empty() {
        return Err(Error::invalid(format!("{} lists no images", path.display())));
    }
    Ok(images)
}

fn viz_attention(out: &Path, checkpoint: &Path, template: &Path) -> Result<()> {
    let params = load_dcn::<f32>(checkpoint)?;
    let images = template_images(template)?;
    let maps = params.attention_maps(&images)?;
    let written = write_overlays(&images, &maps, &out.join("attention"))?;
    println!(
        "wrote {} overlays ({} images x {} maps)",
        written.len(),
        images.len(),
        params.landmarks() + 1
    );
    Ok(())
}
