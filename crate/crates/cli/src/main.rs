use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lsmfm::config::Config;
use lsmfm::harness::{build_corpus, emit_report, read_report, run_matrix, ExperimentTask, InitKind, InitSpec, ResultTable};
use lsmfm::metrics;
use lsmfm::pretrain::pretrain_loop;
use lsmfm::synth::{generate_phantom, make_blur_pair, BlurSpec, Kind, PhantomSpec, PROFILES};
use lsmfm::volume_io::{read_dir, write_container, Mask, PatchRecord};

#[derive(Parser)]
#[command(name = "lsmfm", version, about = "Volumetric microscopy pretraining and finetuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic phantoms as container files.
    Synth {
        #[arg(long)]
        kind: Kind,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 96)]
        edge: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed profile; cycles through all profiles when omitted.
        #[arg(long)]
        profile: Option<u8>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write blurred copies of every container in a directory.
    SynthBlur {
        #[arg(long = "in")]
        input: PathBuf,
        /// Gaussian sigma along z,y,x in voxels.
        #[arg(long, value_delimiter = ',', default_values_t = [3.0f32, 1.5, 1.5])]
        sigma: Vec<f32>,
        #[arg(long, default_value_t = 0.0)]
        renoise: f32,
        /// Defaults to `<in>_blur`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain a backbone and write checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image_only: bool,
        #[arg(long)]
        overtrain_epochs: Option<usize>,
    },
    /// Finetune for segmentation across the configured folds.
    FinetuneSeg(FinetuneArgs),
    /// Finetune for classification across the configured folds.
    FinetuneCls(FinetuneArgs),
    /// Finetune for deblurring across the configured folds.
    FinetuneDeblur(FinetuneArgs),
    /// Score predictions against ground truth containers matched by file name.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        task: EvalTask,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Run the configured experiment matrix and write a report.
    Matrix {
        #[command(flatten)]
        common: Common,
    },
    /// Re-render a report from a results.json file.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Container directory; the configured synthetic corpus is used when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to a hashed directory under run_root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Pretraining checkpoint, or `scratch`.
    #[arg(long, default_value = "scratch")]
    ckpt: String,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    datatypes: Option<Vec<String>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    Seg,
    Cls,
    Deblur,
}

fn load_records(cfg: &Config, data: Option<&Path>) -> Result<Vec<PatchRecord>> {
    Ok(match data {
        Some(d) => read_dir(d)?.into_iter().map(|(_, r)| r).collect(),
        None => build_corpus(&cfg.corpus)?,
    })
}

fn hashed_dir(cfg: &Config, tag: &str) -> Result<PathBuf> {
    let h = lsmfm::checkpoint::config_hash(&(tag, cfg));
    Ok(cfg.run_root.join(format!("{tag}_{}", &h[..16])))
}

fn write_report(table: &ResultTable, out: &Path) -> Result<()> {
    for f in emit_report(table, out)? {
        println!("{}", f.display());
    }
    let failed = table.rows.iter().filter(|r| r.status != lsmfm::harness::CellStatus::Ok).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed", table.rows.len());
    }
    Ok(())
}

fn matrix(cfg: Config, data: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let records = load_records(&cfg, data)?;
    let out = match out {
        Some(o) => o,
        None => hashed_dir(&cfg, "matrix")?,
    };
    let table = run_matrix(&cfg.experiment(), &records, Some(&cfg.run_root))?;
    write_report(&table, &out)
}

fn finetune(task: ExperimentTask, a: FinetuneArgs) -> Result<()> {
    let mut cfg = Config::load(a.common.config.as_deref())?;
    let same_sizes = (cfg.matrix.task == ExperimentTask::Classify) == (task == ExperimentTask::Classify);
    cfg.matrix.task = task;
    cfg.matrix.include_pca = false;
    cfg.matrix.inits = vec![if a.ckpt == "scratch" {
        InitSpec::scratch()
    } else {
        InitSpec::from_checkpoint(InitKind::ImageTextCkpt, &a.ckpt)
    }];
    if let Some(n) = a.train_size {
        cfg.matrix.train_sizes = vec![n];
    } else if !same_sizes {
        cfg.matrix.train_sizes = lsmfm::harness::MatrixSpec::default_train_sizes(task);
    }
    if let Some(d) = a.datatypes {
        cfg.matrix.datatypes = d;
    }
    matrix(cfg, a.common.data.as_deref(), a.common.out)
}

fn evaluate(pred: &Path, gt: &Path, task: EvalTask, out: &Path) -> Result<()> {
    let gts: BTreeMap<String, PatchRecord> = read_dir(gt)?.into_iter().collect();
    let preds = read_dir(pred)?;
    if preds.is_empty() {
        bail!("no containers in {}", pred.display());
    }
    let mut per_file = BTreeMap::new();
    let mut labels: Vec<String> = Vec::new();
    let (mut p_idx, mut g_idx) = (Vec::new(), Vec::new());
    for (name, p) in &preds {
        let g = gts.get(name).with_context(|| format!("no ground truth for `{name}`"))?;
        let m = match task {
            EvalTask::Seg => {
                let pm = match &p.mask {
                    Some(m) => m.clone(),
                    None => Mask::from_threshold(p.image.spatial(), p.image.channel(0), 0.5)?,
                };
                let gm = g.mask.as_ref().with_context(|| format!("`{name}` ground truth has no mask"))?;
                serde_json::json!({"total_dice": metrics::dice(&pm, gm)?, "instance_dice": metrics::instance_dice(&pm, gm)?})
            }
            EvalTask::Cls => {
                let (pl, gl) = (p.label.clone().unwrap_or_default(), g.label.clone().unwrap_or_default());
                for l in [&pl, &gl] {
                    if !labels.contains(l) {
                        labels.push(l.clone());
                    }
                }
                p_idx.push(labels.iter().position(|l| *l == pl).unwrap_or(0));
                g_idx.push(labels.iter().position(|l| *l == gl).unwrap_or(0));
                serde_json::json!({"predicted": pl, "label": gl})
            }
            EvalTask::Deblur => {
                if p.image.shape() != g.image.shape() {
                    bail!("`{name}`: shape {:?} vs {:?}", p.image.shape(), g.image.shape());
                }
                let s = metrics::restore_score(p.image.data(), g.image.data(), g.image.channels(), g.image.spatial())?;
                serde_json::json!({"ssim": s.ssim, "psnr": if s.psnr_db.is_finite() { Some(s.psnr_db) } else { None }})
            }
        };
        per_file.insert(name.clone(), m);
    }
    let summary = match task {
        EvalTask::Cls => serde_json::to_value(metrics::cls_score(&p_idx, &g_idx, labels.len())?)?,
        _ => {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for v in per_file.values() {
                for (k, x) in v.as_object().into_iter().flatten() {
                    if let Some(x) = x.as_f64() {
                        let e = sums.entry(k.clone()).or_default();
                        e.0 += x;
                        e.1 += 1;
                    }
                }
            }
            serde_json::to_value(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect::<BTreeMap<_, _>>())?
        }
    };
    let report = serde_json::json!({"mean": summary, "files": per_file});
    fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| out.display().to_string())?;
    println!("{}", serde_json::to_string_pretty(&report["mean"])?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            kind,
            n,
            edge,
            seed,
            profile,
            out,
        } => {
            fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            for i in 0..n {
                let p = profile.unwrap_or((i % PROFILES as usize) as u8);
                let rec = generate_phantom(&PhantomSpec::new(kind, p, seed.wrapping_add(i as u64)), edge)?;
                let path = out.join(format!("{kind}_{i:04}.lsmraw"));
                write_container(&rec, &path)?;
                println!("{}", path.display());
            }
        }
        Cmd::SynthBlur {
            input,
            sigma,
            renoise,
            out,
        } => {
            if sigma.len() != 3 {
                bail!("--sigma takes three comma-separated values, got {}", sigma.len());
            }
            let spec = BlurSpec {
                sigma: [sigma[0], sigma[1], sigma[2]],
                renoise_sigma: renoise,
            };
            let out = out.unwrap_or_else(|| {
                let mut s = input.clone().into_os_string();
                s.push("_blur");
                PathBuf::from(s)
            });
            fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            for (name, rec) in read_dir(&input)? {
                let (blurred, _) = make_blur_pair(&rec, &spec)?;
                let path = out.join(format!("{name}.lsmraw"));
                write_container(&blurred, &path)?;
                println!("{}", path.display());
            }
        }
        Cmd::Pretrain {
            common,
            image_only,
            overtrain_epochs,
        } => {
            let mut cfg = Config::load(common.config.as_deref())?;
            cfg.pretrain.image_only |= image_only;
            if let Some(n) = overtrain_epochs {
                cfg.pretrain.overtrain_epochs = n;
            }
            let records = load_records(&cfg, common.data.as_deref())?;
            let out = match common.out {
                Some(o) => o,
                None => hashed_dir(&cfg, "pretrain")?,
            };
            fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let res = pretrain_loop(&records, &cfg.pretrain, Some(&out))?;
            fs::write(out.join("history.json"), serde_json::to_string_pretty(&res.history)?)?;
            println!("best epoch {}", res.best_epoch);
            for p in [res.best_path, res.last_path].into_iter().flatten() {
                println!("{}", p.display());
            }
        }
        Cmd::FinetuneSeg(a) => finetune(ExperimentTask::Segment, a)?,
        Cmd::FinetuneCls(a) => finetune(ExperimentTask::Classify, a)?,
        Cmd::FinetuneDeblur(a) => finetune(ExperimentTask::Deblur, a)?,
        Cmd::Evaluate { pred, gt, task, out } => evaluate(&pred, &gt, task, &out)?,
        Cmd::Matrix { common } => {
            let cfg = Config::load(common.config.as_deref())?;
            matrix(cfg, common.data.as_deref(), common.out)?;
        }
        Cmd::Report { results, out } => write_report(&read_report(&results)?, &out)?,
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
