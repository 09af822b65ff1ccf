use std::path::PathBuf;
use std::process::ExitCode;

use accnn_core::config::{parse_scale_sets, RunConfig};
use accnn_core::runner;
use accnn_core::Error;
use clap::{Args, Parser, Subcommand};

/// Context-aware region detector on a synthetic shapes corpus.
///
/// Any configuration key can also be given as `--section.key=value`
/// (for example `--train.momentum=0.8`); these apply after `--config`
/// and before the named flags below.
#[derive(Parser, Debug)]
#[command(name = "accnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train/test corpus under --out.
    GenData(Common),
    /// Train a model and write checkpoint.bin and train_log.jsonl.
    Train(Common),
    /// Evaluate a checkpoint: mAP report, detections and false-positive categories.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate on the training split instead of the held-out split.
        #[arg(long)]
        train_split: bool,
    },
    /// Export per-step attention maps of held-out images.
    Attend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate variants and scale sets over several seeds.
    Ablate(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// full, minus_G, minus_L or avg_global.
    #[arg(long)]
    variant: Option<String>,
    /// Context scales, e.g. 0.8,1.2,1.8. For ablate, ';'-separated scale sets.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k_grid: Option<usize>,
    #[arg(long)]
    t_steps: Option<usize>,
    /// all_points or 11_point.
    #[arg(long)]
    ap_mode: Option<String>,
}

/// Splits `--section.key=value` / `--section.key value` overrides out of argv.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = value.or_else(|| it.next()).unwrap_or_default();
        overrides.push((key, value));
    }
    (rest, overrides)
}

fn resolve(common: &Common, overrides: &[(String, String)], ablate: bool) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(v) = &common.variant {
        cfg.set("variant", v)?;
    }
    if let Some(s) = &common.scales {
        if ablate {
            cfg.ablate.scale_sets = parse_scale_sets("scales", s)?;
        } else {
            cfg.set("local.scales", s)?;
        }
    }
    if let Some(n) = common.iters {
        cfg.train.iterations = n;
    }
    if let Some(lr) = common.lr {
        cfg.train.lr = lr;
    }
    if let Some(k) = common.k_grid {
        cfg.model.global.grid = k;
    }
    if let Some(t) = common.t_steps {
        cfg.model.global.steps = t;
    }
    if let Some(m) = &common.ap_mode {
        cfg.set("eval.ap_mode", m)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), Error> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = resolve(&c, overrides, false)?;
            let corpus = runner::run_gen_data(&cfg)?;
            println!(
                "wrote {} train and {} test images to {}",
                corpus.train.len(),
                corpus.test.len(),
                cfg.out.display()
            );
        }
        Command::Train(c) => {
            let cfg = resolve(&c, overrides, false)?;
            let trained = runner::run_train(&cfg)?;
            if let Some(last) = trained.log.last() {
                println!(
                    "iteration {}: loss {:.4} (cls {:.4}, reg {:.4})",
                    last.iteration, last.loss, last.loss_cls, last.loss_reg
                );
            }
            println!("checkpoint: {}", cfg.out.join(runner::CHECKPOINT_FILE).display());
        }
        Command::Eval {
            common,
            checkpoint,
            train_split,
        } => {
            let cfg = resolve(&common, overrides, false)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join(runner::CHECKPOINT_FILE));
            let ev = runner::run_eval(&cfg, &ckpt, train_split)?;
            for (name, ap) in &ev.report.per_class_ap {
                match ap {
                    Some(ap) => println!("{name:>10}  AP {ap:.4}"),
                    None => println!("{name:>10}  AP n/a"),
                }
            }
            println!("{:>10}  mAP {:.4}", "all", ev.report.map);
        }
        Command::Attend { common, checkpoint } => {
            let cfg = resolve(&common, overrides, false)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join(runner::CHECKPOINT_FILE));
            let files = runner::run_attend(&cfg, &ckpt)?;
            println!("wrote {} attention files", files.len());
        }
        Command::Ablate(c) => {
            let cfg = resolve(&c, overrides, true)?;
            let rows = runner::run_ablate(&cfg)?;
            println!("variant,scales,seeds,mean_mAP");
            for (variant, scales, n, mean) in runner::summarize(&rows) {
                println!("{variant},{scales},{n},{mean:.4}");
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Infeasible(_) | Error::CheckpointMismatch(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let (rest, ov) = split_overrides(argv("accnn train --train.momentum=0.8 --lr 0.01 --global.grid 4 --out x"));
        assert_eq!(rest, argv("accnn train --lr 0.01 --out x"));
        assert_eq!(
            ov,
            vec![
                ("train.momentum".to_string(), "0.8".to_string()),
                ("global.grid".to_string(), "4".to_string())
            ]
        );
    }

    #[test]
    fn named_flags_override_generic_ones() {
        let (rest, ov) = split_overrides(argv("accnn train --iters 7 --train.iterations=9 --k-grid 4"));
        let Command::Train(c) = Cli::try_parse_from(rest).unwrap().command else {
            panic!("expected train");
        };
        let cfg = resolve(&c, &ov, false).unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.model.global.grid, 4);
    }

    #[test]
    fn config_errors_map_to_exit_code_two() {
        let (rest, ov) = split_overrides(argv("accnn train --train.bogus=1"));
        let Command::Train(c) = Cli::try_parse_from(rest).unwrap().command else {
            panic!("expected train");
        };
        let err = resolve(&c, &ov, false).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        let nan = Error::NonFinite {
            iteration: 0,
            detail: String::new(),
        };
        assert_eq!(exit_code(&nan), 3);
    }
}
