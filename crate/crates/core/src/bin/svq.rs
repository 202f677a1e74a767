use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use svq::config::{RunConfig, Variant};
use svq::data::{generate_dataset, CLASS_NAMES, read_dataset, write_dataset, PairedSample};
use svq::pipeline::{
    compare, encode_sequences, load_run, evaluate_reconstruction, split_holdout, synthesize, train_stage1, train_stage2,
    SynthParams, CONFIG_FILE, STAGE2_FILE,
};
use svq::{gradcheck, Error, Result};

/// Semantically coupled VQ autoencoders with a conditional transformer.
#[derive(Parser)]
#[command(name = "svq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the model variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Dataset directory; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic paired dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(short = 'n', long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stage 1: train the autoencoder(s).
    TrainAe {
        #[command(flatten)]
        common: Common,
        /// Run directory (default: <out_dir>/<variant>_seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: train the transformer on a frozen stage-1 run.
    TrainAr {
        /// Run directory written by train-ae.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Config for stage 2 (defaults to the run's config).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Synthesize images for held-out semantic maps and score them.
    Sample {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Stage-1 reconstruction quality and held-out NLL.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Gradient verification suites.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// All four variants over several seeds on one dataset.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<PairedSample>> {
    let data = match dir {
        Some(d) => read_dataset(d)?,
        None => generate_dataset(cfg.n_samples, cfg.data_seed, cfg.image_size)?,
    };
    if let Some(s) = data.iter().find(|s| s.size() != cfg.image_size) {
        return Err(Error::Config(format!(
            "dataset images are {}px but the config expects {}px",
            s.size(),
            cfg.image_size
        )));
    }
    Ok(data)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::InitConfig { out } => RunConfig::default().save(&out),
        Command::GenData { out, n, seed, config } => {
            let cfg = load_config(config.as_deref())?;
            let data = generate_dataset(n.unwrap_or(cfg.n_samples), seed.unwrap_or(cfg.data_seed), cfg.image_size)?;
            write_dataset(&out, &data)?;
            println!("wrote {} samples to {}", data.len(), out.display());
            Ok(())
        }
        Command::TrainAe { common, out } => {
            let cfg = resolve(&common)?;
            let data = dataset(&cfg, common.data.as_deref())?;
            let (train, held) = split_holdout(&data, cfg.n_eval)?;
            let dir = out.unwrap_or_else(|| Path::new(&cfg.out_dir).join(format!("{}_seed{}", cfg.variant.name(), cfg.seed)));
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            cfg.save(&dir.join(CONFIG_FILE))?;
            let (s1, _) = train_stage1(&cfg, train, Some(&dir))?;
            for p in s1.save(&dir)? {
                println!("wrote {}", p.display());
            }
            let r = evaluate_reconstruction(&s1, held)?;
            println!(
                "held-out reconstruction: mse={:.5} SSIM={:.4} mIOU={:.2}%",
                r.image_mse, r.ssim_mean, r.miou_percent
            );
            Ok(())
        }
        Command::TrainAr { run, data, config } => {
            let (run_cfg, s1, _) = load_run(&run)?;
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => run_cfg,
            };
            let data = dataset(&cfg, data.as_deref())?;
            let (train, held) = split_holdout(&data, cfg.n_eval)?;
            let (s2, hist) = train_stage2(&cfg, &s1, train)?;
            let path = run.join(STAGE2_FILE);
            s2.save(&path)?;
            let nll = s2.model.mean_nll(&encode_sequences(&s1, held)?.iter().collect::<Vec<_>>())?;
            println!(
                "wrote {}; final train NLL {:.4}, held-out NLL {nll:.4}",
                path.display(),
                hist.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Sample {
            run,
            data,
            out,
            seed,
            temperature,
            top_k,
        } => {
            let (cfg, s1, s2) = load_run(&run)?;
            let s2 = s2.ok_or_else(|| Error::Config(format!("{} has no {STAGE2_FILE}; run train-ar first", run.display())))?;
            let data = dataset(&cfg, data.as_deref())?;
            let (_, held) = split_holdout(&data, cfg.n_eval)?;
            let mut params = SynthParams::from_config(&cfg);
            params.seed = seed.unwrap_or(params.seed);
            params.temperature = temperature.unwrap_or(params.temperature);
            params.top_k = top_k.unwrap_or(params.top_k);
            let dir = out.unwrap_or(run);
            let syn = synthesize(&s1, &s2, held, params, Some(&dir))?;
            print!("{}", syn.report.to_tsv());
            Ok(())
        }
        Command::Eval { run, data } => {
            let (cfg, s1, s2) = load_run(&run)?;
            let data = dataset(&cfg, data.as_deref())?;
            let (_, held) = split_holdout(&data, cfg.n_eval)?;
            let r = evaluate_reconstruction(&s1, held)?;
            println!("samples\t{}", r.n_samples);
            println!("image_mse\t{:.6}", r.image_mse);
            println!("SSIM\t{:.6}", r.ssim_mean);
            println!("mIOU\t{:.4}", r.miou_percent);
            for (name, iou) in CLASS_NAMES.iter().zip(&r.per_class_iou) {
                match iou {
                    Some(v) => println!("IoU.{name}\t{:.4}", v * 100.0),
                    None => println!("IoU.{name}\t-"),
                }
            }
            let pairs = s1.encode_pairs(&held.iter().collect::<Vec<_>>())?;
            let distinct = |f: &dyn Fn(&(svq::quantizer::LatentGrid, svq::quantizer::LatentGrid)) -> &[usize]| {
                pairs.iter().flat_map(|p| f(p).iter().copied()).collect::<std::collections::BTreeSet<_>>().len()
            };
            println!("codes_used.semantic\t{}/{}", distinct(&|p| p.0.indices()), cfg.k_semantic);
            println!("codes_used.image\t{}/{}", distinct(&|p| p.1.indices()), cfg.k_image);
            if let Some(s2) = s2 {
                let nll = s2.model.mean_nll(&encode_sequences(&s1, held)?.iter().collect::<Vec<_>>())?;
                println!("NLL\t{nll:.6}");
            }
            Ok(())
        }
        Command::GradCheck { seed } => {
            let reports = gradcheck::run_all(seed)?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient check(s) failed")));
            }
            Ok(())
        }
        Command::Compare { common, seeds, out } => {
            let cfg = resolve(&common)?;
            let data = dataset(&cfg, common.data.as_deref())?;
            let dir = out.unwrap_or_else(|| Path::new(&cfg.out_dir).join("compare"));
            let cmp = compare(&cfg, &data, &seeds, Some(&dir))?;
            print!("{}", cmp.to_table());
            for line in &cmp.directional {
                println!("{line}");
            }
            if !cmp.rows.iter().all(|r| r.all_finite()) {
                return Err(Error::Numeric("comparison produced non-finite cells".into()));
            }
            info!("coupled NLL within one baseline std: {}", cmp.nll_within_baseline);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
