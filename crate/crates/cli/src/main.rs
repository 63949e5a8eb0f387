//! `dupless`: stage-wise command-line driver.
//!
//! Every subcommand accepts `--config FILE` plus one flag per config key
//! (`--learning-rate 0.001` sets `learning_rate`). Flags win over the file,
//! the file wins over `DUPLESS_SEED`, which wins over built-in defaults.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use dupless::embeddings::Combination;
use dupless::pipeline::{self, PipelineError, RunConfig, SvmLevel, KEYS};

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .required(true)
        .help(help)
}

fn command() -> Command {
    let mut global = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .global(true)
        .value_parser(clap::value_parser!(PathBuf))
        .help("key=value config file")];
    for &(key, default, help) in KEYS {
        let help = if default.is_empty() {
            help.to_string()
        } else {
            format!("{help} [default: {default}]")
        };
        global.push(
            Arg::new(key)
                .long(flag_name(key))
                .value_name("VALUE")
                .global(true)
                .help(help)
                .help_heading("Config keys"),
        );
    }
    let out = || path_arg("out", "output directory");
    let tiles = || path_arg("tiles", "tile directory written by `tile`");

    Command::new("dupless")
        .version(pipeline::VERSION)
        .about("Self-supervised duplication pretext features and slice-level tissue classification")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args(global)
        .subcommand(Command::new("synth").about("Generate the synthetic 4-class dataset").arg(out()))
        .subcommand(
            Command::new("tile")
                .about("Cut every slice into square patches")
                .arg(path_arg("data", "dataset directory containing manifest.csv"))
                .arg(out()),
        )
        .subcommand(
            Command::new("pretext-gen")
                .about("Sample slices and write the seven duplication variants of their patches")
                .arg(tiles())
                .arg(
                    Arg::new("fraction")
                        .long("fraction")
                        .value_parser(clap::value_parser!(f64))
                        .help("slice fraction [default: first of `fractions`]"),
                )
                .arg(out()),
        )
        .subcommand(
            Command::new("train-pretext")
                .about("Train the CNN on a pretext dataset")
                .arg(path_arg("pretext", "directory written by `pretext-gen`"))
                .arg(out()),
        )
        .subcommand(
            Command::new("embed")
                .about("Extract patch embeddings with a trained network")
                .arg(path_arg("params", "params.nnp from `train-pretext`"))
                .arg(tiles())
                .arg(out()),
        )
        .subcommand(
            Command::new("import-embeddings")
                .about("Validate and store externally computed patch embeddings (EMB1 or CSV)")
                .arg(path_arg("input", "embedding file"))
                .arg(tiles().required(false))
                .arg(out()),
        )
        .subcommand(
            Command::new("aggregate")
                .about("Combine patch embeddings into slice vectors")
                .arg(path_arg("embeddings", "patch embedding file"))
                .arg(tiles())
                .arg(
                    Arg::new("method")
                        .long("method")
                        .required(true)
                        .value_parser(["concat", "sum"]),
                )
                .arg(out()),
        )
        .subcommand(
            Command::new("train-svm")
                .about("Train a one-vs-rest SVM on every row of a feature file")
                .arg(path_arg("features", "patch or slice embedding file"))
                .arg(tiles())
                .arg(
                    Arg::new("level")
                        .long("level")
                        .required(true)
                        .value_parser(["patch", "slice"]),
                )
                .arg(out()),
        )
        .subcommand(
            Command::new("eval")
                .about("Run the patch/vote/concat/sum evaluation for one extractor")
                .arg(path_arg("embeddings", "patch embedding file"))
                .arg(tiles())
                .arg(Arg::new("extractor").long("extractor").default_value("extractor"))
                .arg(out()),
        )
        .subcommand(
            Command::new("tsne")
                .about("2-D t-SNE map of a feature file")
                .arg(path_arg("features", "patch or slice embedding file"))
                .arg(tiles())
                .arg(Arg::new("title").long("title").default_value("t-SNE"))
                .arg(out()),
        )
        .subcommand(Command::new("run-all").about("Run every stage and write the comparison report"))
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .short('q')
                .global(true)
                .action(ArgAction::SetTrue)
                .help("suppress progress messages"),
        )
}

fn config_from(m: &ArgMatches) -> Result<RunConfig, PipelineError> {
    let mut flags = BTreeMap::new();
    for &(key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            flags.insert(key.to_string(), v.clone());
        }
    }
    RunConfig::load(&flags, m.get_one::<PathBuf>("config").map(PathBuf::as_path))
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a PathBuf {
    m.get_one::<PathBuf>(name).expect("required by clap")
}

fn run(m: &ArgMatches) -> Result<(), PipelineError> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = config_from(sub)?;
    let quiet = sub.get_flag("quiet");
    let mut log = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    let written = match name {
        "synth" => pipeline::cmd_synth(&cfg, path(sub, "out"))?,
        "tile" => pipeline::cmd_tile(&cfg, path(sub, "data"), path(sub, "out"))?,
        "pretext-gen" => {
            let fraction = sub.get_one::<f64>("fraction").copied().unwrap_or(cfg.fractions[0]);
            pipeline::cmd_pretext_gen(&cfg, path(sub, "tiles"), fraction, path(sub, "out"))?
        }
        "train-pretext" => {
            let mut progress = |e: &dupless::nnet::EpochLog| {
                log(&format!("epoch {} loss {:.4} accuracy {:.3}", e.epoch, e.loss, e.accuracy))
            };
            pipeline::cmd_train_pretext(&cfg, path(sub, "pretext"), path(sub, "out"), &mut progress)?
        }
        "embed" => pipeline::cmd_embed(&cfg, path(sub, "params"), path(sub, "tiles"), path(sub, "out"))?,
        "import-embeddings" => pipeline::cmd_import_embeddings(
            &cfg,
            path(sub, "input"),
            sub.get_one::<PathBuf>("tiles").map(PathBuf::as_path),
            path(sub, "out"),
        )?,
        "aggregate" => {
            let method: Combination = sub
                .get_one::<String>("method")
                .unwrap()
                .parse()
                .map_err(PipelineError::Usage)?;
            pipeline::cmd_aggregate(&cfg, path(sub, "embeddings"), path(sub, "tiles"), method, path(sub, "out"))?
        }
        "train-svm" => {
            let level: SvmLevel = sub.get_one::<String>("level").unwrap().parse()?;
            pipeline::cmd_train_svm(&cfg, path(sub, "features"), path(sub, "tiles"), level, path(sub, "out"))?
        }
        "eval" => pipeline::cmd_eval(
            &cfg,
            path(sub, "embeddings"),
            path(sub, "tiles"),
            sub.get_one::<String>("extractor").unwrap(),
            path(sub, "out"),
        )?,
        "tsne" => pipeline::cmd_tsne(
            &cfg,
            path(sub, "features"),
            path(sub, "tiles"),
            sub.get_one::<String>("title").unwrap(),
            path(sub, "out"),
        )?,
        "run-all" => {
            let summary = pipeline::run_all(&cfg, &mut log)?;
            let report = summary.out_dir.join("report");
            print!(
                "{}",
                std::fs::read_to_string(report.join("table.md")).unwrap_or_default()
            );
            for e in &summary.extractors {
                let get = |m: &str| summary.slice_overall(&e.tag, m).map_or("-".into(), |v| format!("{v:.3}"));
                println!(
                    "{}: slice overall vote {} concat {} sum {}",
                    e.tag,
                    get("vote"),
                    get("concat"),
                    get("sum")
                );
            }
            for t in &summary.not_provided {
                println!("{t}: not provided");
            }
            report
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    println!("{}", written.display());
    Ok(())
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_well_formed() {
        command().debug_assert();
    }

    #[test]
    fn every_key_has_a_flag() {
        let m = command()
            .try_get_matches_from(["dupless", "run-all", "--learning-rate", "0.01", "--out-dir", "x"])
            .unwrap();
        let cfg = config_from(m.subcommand().unwrap().1).unwrap();
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.out_dir, PathBuf::from("x"));
    }
}
