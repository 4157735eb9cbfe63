use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use log::warn;

use propmlp::io::commands::{self, InspectOptions, PreprocessStatus};
use propmlp::io::config::{RunConfig, KEYS};
use propmlp::io::dataset::save_dataset;
use propmlp::io::report::{parse_buckets, DEFAULT_BUCKETS};
use propmlp::io::synth::{generate_sbm, SbmConfig};
use propmlp::{Error, Result};

const OUTPUT_DIR_ENV: &str = "PROPMLP_OUTPUT_DIR";

/// `--config`, `--set` and one flag per config key.
fn config_args(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value config file"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("override any config key"),
        );
    for &(key, help) in KEYS {
        let mut arg = Arg::new(key).long(key.replace('_', "-")).value_name("VALUE").help(help);
        if key == "output_dir" {
            arg = arg.env(OUTPUT_DIR_ENV);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn stage_arg() -> Arg {
    Arg::new("stage")
        .long("stage")
        .value_name("M")
        .value_parser(clap::value_parser!(usize))
        .help("stage to use (default: the last trained stage)")
}

fn cli() -> Command {
    Command::new("propmlp")
        .about("Node classification with precomputed propagation, hop attention and reliable-label self-training")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("preprocess")
                .about("Propagate features and write the stack and stationary features")
                .arg(
                    Arg::new("force")
                        .long("force")
                        .action(ArgAction::SetTrue)
                        .help("recompute even if artifacts are up-to-date"),
                ),
        ))
        .subcommand(config_args(Command::new("train").about("Run every training stage")))
        .subcommand(config_args(
            Command::new("evaluate")
                .about("Report accuracy of a trained stage")
                .arg(stage_arg()),
        ))
        .subcommand(config_args(
            Command::new("inspect-attention")
                .about("Write mean attention weights per degree bucket as CSV")
                .arg(stage_arg())
                .arg(
                    Arg::new("buckets")
                        .long("buckets")
                        .value_name("LO-HI,...")
                        .help("degree buckets (default 1-4,5-8,9-12)"),
                )
                .arg(
                    Arg::new("max_nodes_per_bucket")
                        .long("max-nodes-per-bucket")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("0")
                        .help("sample at most N nodes per bucket; 0 uses all"),
                )
                .arg(
                    Arg::new("report")
                        .long("report")
                        .value_name("FILE")
                        .help("output CSV (default <output_dir>/attention_report.csv)"),
                ),
        ))
        .subcommand(config_args(
            Command::new("show-config").about("Print the resolved configuration"),
        ))
        .subcommand(
            Command::new("synth-sbm")
                .about("Generate a stochastic block model dataset")
                .arg(Arg::new("out").long("out").value_name("DIR").required(true))
                .arg(num_arg("nodes", "number of nodes"))
                .arg(num_arg("classes", "number of classes"))
                .arg(num_arg("features", "feature width"))
                .arg(num_arg("avg_degree", "average degree"))
                .arg(num_arg("homophily", "probability an edge stays within a class"))
                .arg(num_arg("noise", "feature noise standard deviation"))
                .arg(num_arg("train_per_class", "training nodes per class"))
                .arg(num_arg("seed", "random seed")),
        )
}

fn num_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id).long(id.replace('_', "-")).value_name("N").help(help)
}

fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for &(key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            overrides.push((key.to_string(), v.clone()));
        }
    }
    if let Some(sets) = m.get_many::<String>("set") {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {s:?}: expected KEY=VALUE")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(&PathBuf::from(path), &overrides),
        None => RunConfig::resolve(&[], &overrides),
    }
}

fn parse_num<T: std::str::FromStr>(m: &ArgMatches, id: &str, into: &mut T) -> Result<()> {
    if let Some(v) = m.get_one::<String>(id) {
        *into = v
            .parse()
            .map_err(|_| Error::Config(format!("--{} {v:?}: not a number", id.replace('_', "-"))))?;
    }
    Ok(())
}

fn run(matches: ArgMatches) -> Result<()> {
    match matches.subcommand() {
        Some(("preprocess", m)) => {
            let config = resolve_config(m)?;
            match commands::preprocess(&config, m.get_flag("force"))? {
                PreprocessStatus::UpToDate => println!("up-to-date: {}", config.output_dir.display()),
                PreprocessStatus::Written => println!("preprocessed into {}", config.output_dir.display()),
            }
        }
        Some(("train", m)) => {
            let config = resolve_config(m)?;
            let summaries = commands::train(&config)?;
            print!("{}", commands::summary_csv(&summaries));
        }
        Some(("evaluate", m)) => {
            let config = resolve_config(m)?;
            let (stage, accuracies) = commands::evaluate_stage(&config, m.get_one::<usize>("stage").copied())?;
            for a in accuracies {
                println!("stage {stage} {} accuracy {:.6} ({} nodes)", a.split.as_str(), a.accuracy, a.nodes);
            }
        }
        Some(("inspect-attention", m)) => {
            let config = resolve_config(m)?;
            let buckets = match m.get_one::<String>("buckets") {
                Some(s) => parse_buckets(s)?,
                None => DEFAULT_BUCKETS.to_vec(),
            };
            let options = InspectOptions {
                stage: m.get_one::<usize>("stage").copied(),
                buckets,
                max_nodes_per_bucket: *m.get_one::<usize>("max_nodes_per_bucket").unwrap_or(&0),
                report_path: m.get_one::<String>("report").map(PathBuf::from),
            };
            let (path, report) = commands::inspect_attention(&config, &options)?;
            print!("{}", report.to_csv());
            println!("wrote {}", path.display());
        }
        Some(("show-config", m)) => {
            print!("{}", resolve_config(m)?.to_text());
        }
        Some(("synth-sbm", m)) => {
            let mut cfg = SbmConfig::default();
            parse_num(m, "nodes", &mut cfg.nodes)?;
            parse_num(m, "classes", &mut cfg.classes)?;
            parse_num(m, "features", &mut cfg.feature_width)?;
            parse_num(m, "avg_degree", &mut cfg.avg_degree)?;
            parse_num(m, "homophily", &mut cfg.homophily)?;
            parse_num(m, "noise", &mut cfg.noise)?;
            parse_num(m, "train_per_class", &mut cfg.train_per_class)?;
            parse_num(m, "seed", &mut cfg.seed)?;
            let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
            let dataset = generate_sbm(&cfg)?;
            save_dataset(&out, &dataset)?;
            println!("{}: {}", out.display(), dataset.summary());
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    match run(matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = e.to_string().replace('\n', "; ");
            if let Error::Validation(lines) = &e {
                for line in lines {
                    warn!("{line}");
                }
            }
            eprintln!("error[{}]: {detail}", e.code());
            ExitCode::FAILURE
        }
    }
}
