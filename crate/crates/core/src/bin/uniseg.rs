use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uniseg::domain::{register_domain, save_domain, DomainSource};
use uniseg::harness::{
    build_prototypes, evaluate, export_embeddings, generate_synthetic_domains, load_domains, pretrain, train_universal,
    Mode, Prepared, Split, SynthSpec, TrainConfig,
};
use uniseg::model::{load_checkpoint, save_checkpoint};
use uniseg::prototypes::{read_projection, read_prototypes, write_projection, write_prototypes};
use uniseg::Result;

#[derive(Parser)]
#[command(name = "uniseg", version, about = "Joint segmentation across label spaces")]
struct Cli {
    /// Root directory for every output.
    #[arg(long, env = "UNISEG_OUTPUT", default_value = "runs", global = true)]
    output_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic two-domain benchmark to folders.
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory name under the output root.
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        n_labeled: usize,
        #[arg(long, default_value_t = 500)]
        n_unlabeled: usize,
        #[arg(long, default_value_t = 30)]
        n_val: usize,
    },
    /// Supervised training on the labeled splits.
    Pretrain {
        #[command(flatten)]
        setup: Setup,
        /// Train only this domain (default: all).
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, default_value = "pretrain")]
        run: PathBuf,
    },
    /// Build prototypes from a pretrained checkpoint.
    ComputePrototypes {
        #[command(flatten)]
        setup: Setup,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "prototypes")]
        run: PathBuf,
    },
    /// Joint training in the configured mode.
    Train {
        #[command(flatten)]
        setup: Setup,
        /// Reuse a pretrained checkpoint...
        #[arg(long, requires = "prototypes")]
        pretrained: Option<PathBuf>,
        /// ...and the prototype directory built from it.
        #[arg(long, requires = "pretrained")]
        prototypes: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        run: PathBuf,
    },
    /// Validation mIoU of a checkpoint on one domain.
    Evaluate {
        #[command(flatten)]
        setup: Setup,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Dump embedding-head outputs of labeled pixels.
    ExportEmbeddings {
        #[command(flatten)]
        setup: Setup,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        cap: usize,
        #[arg(long, default_value = "embeddings.txt")]
        out: PathBuf,
    },
}

/// Config file plus command-line overrides.
#[derive(Args)]
struct Setup {
    /// TOML training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the domain folders.
    #[arg(long, default_value = ".")]
    data_root: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    pretrain_iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
}

impl Setup {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::new(Mode::UnivFull),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(mode, alpha, beta, lr, max_iters, pretrain_iters, batch_size, seed, d, k, theta);
        c.validate()?;
        Ok(c)
    }
}

fn data_and_config(setup: &Setup) -> Result<(TrainConfig, Vec<uniseg::domain::DomainDataset>)> {
    let cfg = setup.config()?;
    let domains = load_domains(&cfg, &setup.data_root)?;
    Ok((cfg, domains))
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.cmd {
        Cmd::SynthData {
            seed,
            out,
            size,
            n_labeled,
            n_unlabeled,
            n_val,
        } => {
            let spec = SynthSpec::scaled(size, size, n_labeled, n_unlabeled, n_val);
            for ds in generate_synthetic_domains(seed, &spec)? {
                let dir = root.join(&out).join(ds.id());
                save_domain(&ds, &dir)?;
                // re-read to confirm the folder layout round-trips
                let back = register_domain(DomainSource::Folder {
                    id: ds.id().to_string(),
                    root: dir.clone(),
                })?;
                println!("{} -> {} ({} train files)", ds.id(), dir.display(), back.discovered_train_files);
            }
        }
        Cmd::Pretrain { setup, domain, run } => {
            let (cfg, domains) = data_and_config(&setup)?;
            let refs: Vec<_> = domains.iter().collect();
            let active: Vec<usize> = match &domain {
                Some(id) => vec![refs
                    .iter()
                    .position(|d| d.id() == id)
                    .ok_or_else(|| uniseg::Error::UnknownDomain(id.clone()))?],
                None => (0..refs.len()).collect(),
            };
            let (params, hist) = pretrain(&cfg, &refs, &active, cfg.pretrain_iters)?;
            let path = root.join(run).join("pretrained.ckpt");
            mkdirs(&path)?;
            let meta = BTreeMap::from([("stage".to_string(), "pretrain".to_string())]);
            save_checkpoint(&path, &params, &meta)?;
            if let (Some(a), Some(b)) = (hist.first(), hist.last()) {
                println!("loss {a:.4} -> {b:.4}");
            }
            println!("{}", path.display());
        }
        Cmd::ComputePrototypes { setup, checkpoint, run } => {
            let (cfg, domains) = data_and_config(&setup)?;
            let refs: Vec<_> = domains.iter().collect();
            let ck = load_checkpoint(&checkpoint, None)?;
            let (tables, projection) = build_prototypes(&cfg, &ck.params, &refs)?;
            let dir = root.join(run);
            std::fs::create_dir_all(&dir).map_err(|e| uniseg::Error::Config(format!("{}: {e}", dir.display())))?;
            for t in &tables {
                write_prototypes(&dir.join(format!("{}.txt", t.domain())), t)?;
            }
            write_projection(&dir.join("projection.txt"), &projection)?;
            println!("{}", dir.display());
        }
        Cmd::Train {
            setup,
            pretrained,
            prototypes,
            run,
        } => {
            let (cfg, domains) = data_and_config(&setup)?;
            let refs: Vec<_> = domains.iter().collect();
            let prepared = match (pretrained, prototypes) {
                (Some(ck), Some(dir)) => Some(load_prepared(&ck, &dir, &refs, &cfg)?),
                _ => None,
            };
            let out = root.join(run);
            let o = train_universal(&cfg, &refs, prepared.as_ref(), Some(&out))?;
            println!(
                "{}: best average mIoU {:.4} at step {}; entropy {:.4} -> {:.4}",
                cfg.mode.name(),
                o.summary.best_average_miou,
                o.summary.best_step,
                o.summary.entropy_start,
                o.summary.entropy_end
            );
        }
        Cmd::Evaluate {
            setup,
            checkpoint,
            domain,
            split,
        } => {
            let (cfg, domains) = data_and_config(&setup)?;
            let ds = domains
                .iter()
                .find(|d| d.id() == domain)
                .ok_or_else(|| uniseg::Error::UnknownDomain(domain.clone()))?;
            let ck = load_checkpoint(&checkpoint, None)?;
            let rec = evaluate(&ck.params, ds, split, &cfg.norm, 0)?;
            print!("{}", rec.to_json_line());
        }
        Cmd::ExportEmbeddings {
            setup,
            checkpoint,
            cap,
            out,
        } => {
            let (cfg, domains) = data_and_config(&setup)?;
            let refs: Vec<_> = domains.iter().collect();
            let ck = load_checkpoint(&checkpoint, None)?;
            let path = root.join(out);
            let n = export_embeddings(&ck.params, &refs, cap, cfg.seed, &cfg.norm, &path)?;
            println!("{n} rows -> {}", path.display());
        }
    }
    Ok(())
}

fn mkdirs(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| uniseg::Error::Config(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn load_prepared(
    ckpt: &Path,
    dir: &Path,
    domains: &[&uniseg::domain::DomainDataset],
    cfg: &TrainConfig,
) -> Result<Prepared> {
    let ck = load_checkpoint(ckpt, None)?;
    let projection = read_projection(&dir.join("projection.txt"))?;
    let tables = domains
        .iter()
        .map(|d| {
            read_prototypes(&dir.join(format!("{}.txt", d.id())))?
                .with_projection(projection.clone())?
                .with_theta(cfg.theta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        pretrained: ck.params,
        pretrain_history: Vec::new(),
        tables,
        projection,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
