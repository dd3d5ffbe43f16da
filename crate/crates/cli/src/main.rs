use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use profnet::config::{parse_config, KEYS};

mod pipeline;

/// Keys that may be repeated on the command line; repeats are joined with commas.
const LIST_KEYS: &[&str] = &["alpha", "delta", "K_list"];

fn cli() -> Command {
    let mut common = vec![
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("key = value configuration file"),
        Arg::new("set")
            .long("set")
            .value_name("KEY=VALUE")
            .action(ArgAction::Append)
            .help("override any configuration key"),
    ];
    for (key, default, help) in KEYS {
        let mut arg = Arg::new(*key)
            .long(*key)
            .value_name("VALUE")
            .help(format!("{help} [default: {default}]"));
        if LIST_KEYS.contains(key) {
            arg = arg.action(ArgAction::Append);
        }
        common.push(arg);
    }
    let sub = |name: &'static str, about: &'static str| {
        Command::new(name).about(about).args(common.clone())
    };
    Command::new("profnet")
        .about("Probabilistic functional network experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("simulate", "simulate a functional time series panel"))
        .subcommand(sub("train", "train a model on a curve file"))
        .subcommand(sub(
            "forecast",
            "write ensembles and bands for the test period",
        ))
        .subcommand(sub("evaluate", "MSFE, coverage and association metrics"))
        .subcommand(sub(
            "bench",
            "training time against the number of latent processes",
        ))
}

fn overrides(m: &ArgMatches) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(sets) = m.get_many::<String>("set") {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{s}'"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    for (key, _, _) in KEYS {
        if let Some(values) = m.get_many::<String>(key) {
            let joined = values.map(String::as_str).collect::<Vec<_>>().join(",");
            out.push((key.to_string(), joined));
        }
    }
    Ok(out)
}

fn run() -> Result<()> {
    let matches = cli().get_matches();
    let (name, m) = matches.subcommand().expect("subcommand is required");
    let path = m.get_one::<String>("config").map(PathBuf::from);
    let cfg = parse_config(path.as_deref(), &overrides(m)?).context("configuration")?;
    match name {
        "simulate" => pipeline::simulate(&cfg),
        "train" => pipeline::train(&cfg),
        "forecast" => pipeline::forecast(&cfg),
        "evaluate" => pipeline::evaluate(&cfg),
        "bench" => pipeline::bench(&cfg),
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
