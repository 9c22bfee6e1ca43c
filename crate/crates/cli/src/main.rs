use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use cas_core::checkpoint::Checkpoint;
use cas_core::data::{
    self, generate_synthetic, load_attributes, load_dataset, save_attributes, save_dataset, split, AttributeSpec,
    Dataset, SyntheticSpec, ATTRIBUTES_FILE, IMAGES_DIR, LABELS_FILE,
};
use cas_core::export::export_attention_maps;
use cas_core::metrics::REPORT_HEADER;
use cas_core::par::Execution;
use cas_core::suite::{run_suite, synthetic_seed_data, SeedData, SuiteKind};
use cas_core::train::{train, Model, Splits, TrainConfig};

#[derive(Parser)]
#[command(name = "cas", version, about = "Co-attentive sharing experiments")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic attribute dataset to a directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.4)]
        correlation: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train one model and write its record, checkpoint and results row.
    Train {
        /// TOML training config; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named sweep over several seeds.
    Suite {
        #[arg(value_parser = parse_suite)]
        suite: SuiteKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the spatial attention maps of a trained model as PGM images.
    ExportMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory as written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Number of samples, taken from the start of the labels file.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = data::DEFAULT_HEIGHT)]
        height: usize,
        #[arg(long, default_value_t = data::DEFAULT_WIDTH)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default training config as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (`labels.csv`, `images/`, optional
    /// `attributes.json`). Without it a synthetic dataset is generated in
    /// memory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Size of the in-memory synthetic dataset.
    #[arg(long, default_value_t = 2500)]
    samples: usize,
    #[arg(long, default_value_t = data::DEFAULT_HEIGHT)]
    height: usize,
    #[arg(long, default_value_t = data::DEFAULT_WIDTH)]
    width: usize,
}

fn parse_suite(s: &str) -> Result<SuiteKind, String> {
    s.parse().map_err(|e: cas_core::Error| e.to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Generate {
            out,
            samples,
            seed,
            correlation,
            noise,
        } => {
            let spec = SyntheticSpec {
                correlation,
                noise,
                ..SyntheticSpec::default()
            };
            let ds = generate_synthetic(samples, &spec, seed, exec)?;
            save_dataset(&ds, &out)?;
            save_attributes(&out.join(ATTRIBUTES_FILE), &spec.attributes)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train {
            config,
            seed,
            data,
            out,
        } => {
            let mut cfg = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let d = seed_data(&data, cfg.seed, exec)?;
            let grouping = d.grouping(cfg.grouping, cfg.seed).with_context(|| format!("add {ATTRIBUTES_FILE} to the data directory or use random grouping"))?;
            let result = train(&cfg, &d.splits, &grouping, exec)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write(&out.join("record.json"), serde_json::to_string_pretty(&result.record)?)?;
            Checkpoint::from_model(&cfg, &grouping, &result.model).save(&out.join("checkpoint.json"))?;
            let row = result.record.test.to_row(&format!("{}/seed{}", cfg.sharing_kind.label(), cfg.seed));
            write(&out.join("results.csv"), format!("{REPORT_HEADER}\n{row}\n"))?;
            let t = &result.record.test;
            println!(
                "test: mA {:.4}  accuracy {:.4}  precision {:.4}  recall {:.4}  F1 {:.4}",
                t.ma, t.instance_accuracy, t.instance_precision, t.instance_recall, t.instance_f1
            );
        }
        Command::Suite {
            suite,
            config,
            seeds,
            data,
            out,
        } => {
            let base = read_config(config.as_deref())?;
            base.validate()?;
            let result = run_suite(suite, &base, &seeds, |seed| seed_data(&data, seed, exec).map_err(core_err), exec)?;
            result.write(&out)?;
            print!("{}", result.render());
        }
        Command::ExportMaps {
            checkpoint,
            data,
            count,
            height,
            width,
            out,
        } => {
            let (_, _, model) = Checkpoint::load(&checkpoint)?.into_model()?;
            let Model::Soft(net) = model else {
                bail!("hard-sharing models have no sharing units and no attention maps");
            };
            let ds = load_dir(&data, height, width)?.0;
            let n = count.min(ds.len());
            let written = export_attention_maps(&net, &ds.samples[..n], &out)?;
            println!("wrote {} maps to {}", written.len(), out.display());
        }
        Command::DefaultConfig => print!("{}", toml::to_string(&TrainConfig::default())?),
    }
    Ok(())
}

fn core_err(e: anyhow::Error) -> cas_core::Error {
    match e.downcast::<cas_core::Error>() {
        Ok(e) => e,
        Err(e) => cas_core::Error::Config(format!("{e:#}")),
    }
}

fn write(path: &Path, body: String) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: TrainConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(cfg)
}

fn load_dir(dir: &Path, height: usize, width: usize) -> Result<(Dataset, Option<Vec<AttributeSpec>>)> {
    let ds = load_dataset(&dir.join(IMAGES_DIR), &dir.join(LABELS_FILE), height, width)?;
    let attr_path = dir.join(ATTRIBUTES_FILE);
    let attributes = if attr_path.exists() {
        let a = load_attributes(&attr_path)?;
        if a.len() != ds.num_attributes() {
            bail!(
                "{} describes {} attributes but the labels file has {}",
                attr_path.display(),
                a.len(),
                ds.num_attributes()
            );
        }
        Some(a)
    } else {
        None
    };
    info!("loaded {} samples from {}", ds.len(), dir.display());
    Ok((ds, attributes))
}

/// Splits for `seed`, from disk when a directory is given and generated
/// otherwise.
fn seed_data(args: &DataArgs, seed: u64, exec: Execution) -> Result<SeedData> {
    match &args.data {
        None => {
            let spec = SyntheticSpec {
                height: args.height,
                width: args.width,
                ..SyntheticSpec::default()
            };
            Ok(synthetic_seed_data(&spec, args.samples, seed, exec)?)
        }
        Some(dir) => {
            let (ds, attributes) = load_dir(dir, args.height, args.width)?;
            let (train, val, test) = split(&ds, (0.8, 0.1, 0.1), seed)?;
            Ok(SeedData {
                splits: Splits { train, val, test },
                attributes: attributes.unwrap_or_default(),
            })
        }
    }
}
