//! Command-line surface.

use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands;
use crate::config::{Config, KEYS};
use crate::error::{CliError, CliResult};

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(Arg::new("config").long("config").value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help("key=value config file"));
    KEYS.iter().fold(cmd, |cmd, (key, help)| cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*help).help_heading("Config keys")))
}

pub fn command() -> Command {
    Command::new("xfer")
        .about("Adversarial and semantic transfer experiments on digit images")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(Command::new("pretrain").about("Train the source network and write its checkpoint")))
        .subcommand(config_args(Command::new("transfer").about("Run every method over the configured shots and seeds")))
        .subcommand(config_args(Command::new("uda").about("Unsupervised adaptation against the source-only baseline")))
        .subcommand(config_args(
            Command::new("eval")
                .about("Evaluate a checkpoint on the target test set")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true).value_parser(clap::value_parser!(PathBuf))),
        ))
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every differentiable op and loss")
                .arg(Arg::new("include-faulty-fixture").long("include-faulty-fixture").action(ArgAction::SetTrue).help("also check an op with a broken backward rule"))
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(clap::value_parser!(u64))),
        )
}

/// File values first, then flags in the order clap saw them.
pub fn resolve_config(m: &ArgMatches) -> CliResult<Config> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) if !p.is_file() => return Err(CliError::MissingPath(p.clone())),
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.resolve()
}

pub fn run(m: &ArgMatches) -> CliResult<()> {
    match m.subcommand() {
        Some(("pretrain", sub)) => {
            let cfg = resolve_config(sub)?;
            let s = commands::pretrain(&cfg)?;
            println!("source checkpoint: {}", s.checkpoint.display());
            println!("source train accuracy: {:.4}", s.train_accuracy);
        }
        Some(("transfer", sub)) => {
            let cfg = resolve_config(sub)?;
            let s = commands::transfer(&cfg)?;
            println!("{:<14} {:>3} {:>8} {:>8} {:>3}", "method", "k", "mean", "stderr", "n");
            for r in &s.aggregate {
                println!("{:<14} {:>3} {:>8.4} {:>8.4} {:>3}", r.method.name(), r.k, r.stats.mean, r.stats.stderr, r.stats.n);
            }
            println!("results in {}", cfg.out_dir.display());
        }
        Some(("uda", sub)) => {
            let cfg = resolve_config(sub)?;
            let s = commands::uda(&cfg)?;
            println!("{:>6} {:>11} {:>8}", "seed", "source_only", "adapted");
            for r in &s.runs {
                println!("{:>6} {:>11.4} {:>8.4}", r.seed, r.source_only, r.adapted);
            }
            if let (Some(so), Some(ad)) = (s.source_only, s.adapted) {
                println!("mean   {:>11.4} {:>8.4}  (adapted stderr {:.4})", so.mean, ad.mean, ad.stderr);
            }
        }
        Some(("eval", sub)) => {
            let cfg = resolve_config(sub)?;
            let ck = sub.get_one::<PathBuf>("checkpoint").expect("required");
            let r = commands::eval(&cfg, ck)?;
            println!("accuracy {:.4} ({}/{})", r.accuracy, r.correct, r.n);
        }
        Some(("gradcheck", sub)) => {
            let seed = *sub.get_one::<u64>("seed").expect("defaulted");
            let (reports, failed) = commands::gradcheck(sub.get_flag("include-faulty-fixture"), seed)?;
            print!("{}", commands::format_gradcheck(&reports));
            println!("{} cases, {failed} failed", reports.len());
            if failed > 0 {
                return Err(CliError::GradCheck { failed });
            }
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "alpha=0.5\nbeta=0.2\n").unwrap();
        let m = command().try_get_matches_from(["xfer", "transfer", "--config", file.to_str().unwrap(), "--alpha", "0.3"]).unwrap();
        let cfg = resolve_config(m.subcommand().unwrap().1).unwrap();
        assert_eq!((cfg.train.alpha, cfg.train.beta), (0.3, 0.2));
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let e = command().try_get_matches_from(["xfer", "transfer", "--alhpa", "1"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        command().debug_assert();
    }
}
