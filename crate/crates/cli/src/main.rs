use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spannorm::dynamics::{
    fit_decay, identity_deviation, jacobian_spectral_norm, random_batch, theorem1_check, trace_at_init, BlockMap,
};
use spannorm::gradcheck::check_model;
use spannorm::harness::csv;
use spannorm::harness::experiments::{depth_stress, lr_sweep_gradprofile};
use spannorm::harness::train::{block_outputs, eval_batch};
use spannorm::harness::{train, ActivationDump, Checkpoint, TrainConfig};
use spannorm::model::{model_forward, ModelConfig, NormTopology};
use spannorm::spectral::{layer_similarity, spectral_report, DEFAULT_RANK_THRESHOLD};

#[derive(Parser)]
#[command(name = "spannorm", version, about = "Train and probe small transformers with different layer-norm placements")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`[model]` and `[train]` sections of `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes runlog.csv, checkpoint.bin, activations.bin
    /// and, with `trace_every`, traces.csv.
    Train,
    /// Finite-difference check of the backward pass for every topology.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Per-layer variance and gradient trace at initialization (trace.csv).
    Trace {
        #[arg(long, default_value_t = 4)]
        sequences: usize,
    },
    /// Log-linear gradient-decay fits at initialization (decay.csv).
    Decay {
        /// Topologies to compare; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        topologies: Vec<String>,
        #[arg(long, default_value_t = 8)]
        seeds: u64,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
    },
    /// Block Jacobian spectral norms ‖J‖ and ‖J − I‖ at initialization (jspec.csv).
    Jspec {
        #[arg(long, default_value_t = 16)]
        tokens: usize,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
    },
    /// FFN branch variance against depth under scaled and global init (thm1.csv).
    Thm1 {
        #[arg(long, value_delimiter = ',', default_values_t = [4, 16, 64, 256])]
        depths: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        seeds: u64,
        #[arg(long, default_value_t = 256)]
        tokens: usize,
    },
    /// Spectral metrics of every weight matrix in a checkpoint (spectral.csv).
    Spectral {
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RANK_THRESHOLD)]
        threshold: f64,
    },
    /// Cross-layer cosine similarity of an activation dump (simcos.csv).
    Simcos {
        /// Defaults to `<out>/activations.bin`.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train the configured model at several depths (stress_depth.csv).
    StressDepth {
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 64])]
        depths: Vec<usize>,
    },
    /// Per-layer W_2 gradient norms after training at several lrs (lr_sweep.csv).
    LrSweep {
        #[arg(long, value_delimiter = ',', default_values_t = [8e-5, 4e-4, 2e-3])]
        lrs: Vec<f64>,
    },
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    let config = match common.seed {
        Some(seed) => config.with_seed(seed),
        None => config,
    };
    config.validate()?;
    Ok(config)
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = &cli.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let config = load_config(&cli.common)?;
    let model = &config.model;

    match cli.command {
        Command::Train => {
            let (log, ckpt) = train(&config)?;
            write(out, "runlog.csv", csv::runlog_csv(&log, config.log_every))?;
            if !log.traces.is_empty() {
                write(out, "traces.csv", csv::trace_snapshots_csv(&log.traces))?;
            }
            write(out, "checkpoint.bin", ckpt.encode())?;
            let batch = eval_batch(&ckpt.config)?;
            let acts = block_outputs(&ckpt.config.model, &ckpt.params, &batch)?;
            write(out, "activations.bin", ActivationDump::new(acts)?.encode())?;
            match log.diverged_at {
                Some(step) => println!("diverged at step {step}"),
                None => println!(
                    "loss {:.4} -> smoothed {:.4} after {} steps",
                    log.initial_loss().unwrap_or(f64::NAN),
                    log.final_ema().unwrap_or(f64::NAN),
                    log.records.len()
                ),
            }
        }
        Command::Gradcheck { tolerance } => {
            let mut report = String::from("topology,max_rel,max_abs,worst_group,pass\n");
            let mut failed = Vec::new();
            for topo in NormTopology::ALL_DEFAULT {
                let mut cfg = ModelConfig::tiny(topo);
                cfg.seed = config.seed;
                let r = check_model(&cfg, tolerance)?;
                let worst = r.worst().map(|g| g.name.clone()).unwrap_or_default();
                println!(
                    "{:<12} max rel {:.3e}  {}",
                    topo.to_string(),
                    r.max_rel,
                    if r.pass { "ok" } else { "FAIL" }
                );
                report.push_str(&format!("{topo},{},{},{worst},{}\n", r.max_rel, r.max_abs, r.pass as u8));
                if !r.pass {
                    failed.push(topo.to_string());
                }
            }
            write(out, "gradcheck.csv", report)?;
            if !failed.is_empty() {
                bail!("backward pass disagrees with finite differences for {}", failed.join(", "));
            }
        }
        Command::Trace { sequences } => {
            let trace = trace_at_init(model, config.seed, sequences)?;
            write(out, "trace.csv", csv::trace_csv(&trace))?;
            if let Some(l) = trace.truncated_at {
                println!("non-finite values from layer boundary {l}");
            }
        }
        Command::Decay {
            topologies,
            seeds,
            sequences,
        } => {
            let topos = if topologies.is_empty() {
                vec![model.topology]
            } else {
                topologies
                    .iter()
                    .map(|t| NormTopology::parse(t))
                    .collect::<spannorm::Result<Vec<_>>>()?
            };
            let mut report = String::from("topology,seed,slope,intercept,r2,mean_sigma_z\n");
            for topo in topos {
                let cfg = ModelConfig { topology: topo, ..model.clone() };
                let mut slopes = Vec::new();
                for seed in config.seed..config.seed + seeds {
                    let trace = trace_at_init(&cfg, seed, sequences)?;
                    let fit = fit_decay(&trace)?;
                    report.push_str(&format!(
                        "{topo},{seed},{},{},{},{}\n",
                        fit.slope,
                        fit.intercept,
                        fit.r2,
                        trace.mean_sigma_z()
                    ));
                    slopes.push(fit.slope);
                }
                let mean = slopes.iter().sum::<f64>() / slopes.len().max(1) as f64;
                println!("{topo}: mean log-decay slope {mean:.4} per layer");
            }
            write(out, "decay.csv", report)?;
        }
        Command::Jspec { tokens, iterations } => {
            let params = spannorm::model::ModelParams::init(model)?;
            let tokens = tokens.min(model.seq_len);
            let batch = random_batch(&ModelConfig { seq_len: tokens, ..model.clone() }, 1, config.seed)?;
            let layers: Vec<usize> = (1..=model.depth).collect();
            let deviations = identity_deviation(model, &params, &batch.tokens, &layers, iterations, config.seed)?;
            let pass = model_forward(model, &params, &batch.tokens, tokens)?;
            let mut report = String::from("layer,jacobian_norm,identity_deviation,converged\n");
            for (&l, dev) in layers.iter().zip(&deviations) {
                let map = BlockMap {
                    config: model,
                    params: &params.blocks[l - 1],
                    wiring: model.topology.wiring(l, model.depth),
                    seq_len: tokens,
                };
                let j = jacobian_spectral_norm(&map, &pass.activations[l - 1], iterations, config.seed)?;
                report.push_str(&format!(
                    "{l},{},{},{}\n",
                    j.value,
                    dev.value,
                    (j.converged && dev.converged) as u8
                ));
            }
            write(out, "jspec.csv", report)?;
        }
        Command::Thm1 { depths, seeds, tokens } => {
            let seeds: Vec<u64> = (config.seed..config.seed + seeds).collect();
            let mut report = String::new();
            for (name, scaled) in [("scaled", true), ("global", false)] {
                let r = theorem1_check(model, &depths, &seeds, tokens, scaled)?;
                println!("{name}: log-log slope {:.4} (r2 {:.4})", r.fit.slope, r.fit.r2);
                for line in csv::theorem1_csv(&r).lines().skip(1) {
                    report.push_str(&format!("{name},{line}\n"));
                }
            }
            write(out, "thm1.csv", format!("init,depth,ffn_branch_variance\n{report}"))?;
        }
        Command::Spectral { checkpoint, threshold } => {
            let path = checkpoint.unwrap_or_else(|| out.join("checkpoint.bin"));
            let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let mut report = String::from(
                "layer,role,rows,cols,hard_rank,soft_rank,edr,condition,sigma_max,sigma_min\n",
            );
            for (i, b) in ckpt.params.blocks.iter().enumerate() {
                for (role, m) in [
                    ("w_q", &b.w_q),
                    ("w_k", &b.w_k),
                    ("w_v", &b.w_v),
                    ("w_o", &b.w_o),
                    ("w_1", &b.w_1),
                    ("w_2", &b.w_2),
                ] {
                    let r = spectral_report(m, threshold)?;
                    let s = &r.singular_values;
                    report.push_str(&format!(
                        "{},{role},{},{},{},{},{},{},{},{}\n",
                        i + 1,
                        m.shape()[0],
                        m.shape()[1],
                        r.rank.hard,
                        r.rank.soft,
                        r.rank.edr,
                        r.condition,
                        s.first().copied().unwrap_or(0.0),
                        s.last().copied().unwrap_or(0.0)
                    ));
                }
            }
            write(out, "spectral.csv", report)?;
        }
        Command::Simcos { dump } => {
            let path = dump.unwrap_or_else(|| out.join("activations.bin"));
            let dump = ActivationDump::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let sim = layer_similarity(&dump.layers)?;
            if sim.excluded_tokens > 0 {
                println!("{} zero-norm tokens excluded", sim.excluded_tokens);
            }
            write(out, "simcos.csv", csv::simcos_csv(&sim))?;
        }
        Command::StressDepth { depths } => {
            let rows = depth_stress(&config, &depths)?;
            for r in &rows {
                match r.diverged_at {
                    Some(s) => println!("depth {:>4}: diverged at step {s}", r.depth),
                    None => println!("depth {:>4}: smoothed loss {:.4}", r.depth, r.final_ema),
                }
            }
            write(out, "stress_depth.csv", csv::depth_csv(&rows))?;
        }
        Command::LrSweep { lrs } => {
            let profiles = lr_sweep_gradprofile(&config, &lrs)?;
            for p in &profiles {
                println!("lr {:e}: W_2 grad-norm max/min {:.3e}", p.lr, p.balance_ratio());
            }
            write(out, "lr_sweep.csv", csv::gradprofile_csv(&profiles))?;
        }
    }
    Ok(())
}
