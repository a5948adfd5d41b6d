//! Command-line entry point.
//!
//! Every config field `section.key` has a flag `--section-key`. A bare
//! `--key` sets the key in every section that has it (`--seed` sets the data,
//! train and eval seeds); the qualified flag wins over the bare one.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgGroup, ArgMatches, Command};
use rc3_core::gradcheck::{loss_suite, GradcheckOptions};
use rc3_core::model::Model;

use crate::checkpoint;
use crate::config::{self, bare_keys, kebab, Config, Override};
use crate::error::{Error, Result};
use crate::pipeline;

const CONFIG_SUBCOMMANDS: [&str; 5] = ["gen-data", "train", "eval", "gradcheck", "probe"];

fn path_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id)
        .long(id)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![path_arg("config", "TOML config file with [model] [world] [data] [train] [eval] tables")];
    let value = |arg: Arg, default: &toml::Value| {
        if default.is_bool() {
            arg.num_args(0..=1).default_missing_value("true").value_name("BOOL")
        } else if default.is_array() {
            arg.num_args(1).value_name("LIST")
        } else {
            arg.num_args(1).value_name("VALUE")
        }
    };
    for (section, key, default) in Config::fields() {
        let arg = Arg::new(format!("{section}.{key}"))
            .long(format!("{section}-{}", kebab(&key)))
            .help(format!("{section}.{key} (default {default})"))
            .help_heading("Config fields");
        args.push(value(arg, &default));
    }
    for (key, sections) in bare_keys() {
        let default = Config::fields()
            .into_iter()
            .find(|(_, k, _)| *k == key)
            .map(|(_, _, v)| v)
            .expect("key exists");
        let arg = Arg::new(format!("*.{key}"))
            .long(kebab(&key))
            .help(format!("{key} in [{}]", sections.join("], [")))
            .help_heading("Shorthands");
        args.push(value(arg, &default));
    }
    args
}

pub fn command() -> Command {
    let with_config = |c: Command| c.args(config_args());
    Command::new("rc3")
        .about("Contrastive cross-lingual cross-modal pre-training on synthetic corpora")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config(
            Command::new("gen-data")
                .about("Generate training and held-out corpora into a directory")
                .arg(path_arg("out", "Corpus directory").required(true)),
        ))
        .subcommand(with_config(
            Command::new("train")
                .about("Train and write config.toml, metrics.jsonl and checkpoints")
                .arg(path_arg("out", "Run directory").required(true))
                .arg(path_arg("data", "Corpus directory from gen-data (generated in memory when absent)"))
                .arg(path_arg("init", "Checkpoint to start from instead of a fresh model"))
                .arg(
                    Arg::new("print-metrics")
                        .long("print-metrics")
                        .action(ArgAction::SetTrue)
                        .help("Echo metrics records to standard output"),
                ),
        ))
        .subcommand(with_config(
            Command::new("eval")
                .about("Retrieval Recall@1, matching and cloze accuracy on held-out triplets")
                .arg(path_arg("ckpt", "Checkpoint directory"))
                .arg(
                    Arg::new("untrained")
                        .long("untrained")
                        .action(ArgAction::SetTrue)
                        .help("Evaluate a fresh model seeded by train.seed"),
                )
                .group(ArgGroup::new("model").args(["ckpt", "untrained"]).required(true))
                .arg(path_arg("out", "Directory for retrieval.csv and eval.jsonl").required(true))
                .arg(path_arg("data", "Corpus directory from gen-data")),
        ))
        .subcommand(with_config(
            Command::new("gradcheck")
                .about("Finite-difference check of every loss on a small model, seeded by train.seed")
                .arg(float_arg("fd-step", "Central-difference step", "1e-5"))
                .arg(float_arg("floor", "Lower bound on the relative-error denominator", "1e-5"))
                .arg(float_arg("tolerance", "Largest accepted relative error", "1e-4")),
        ))
        .subcommand(with_config(
            Command::new("probe")
                .about("Compare VtR and TR distances of held-out weak triplets under two checkpoints")
                .arg(path_arg("reg", "Checkpoint trained with the KL term").required(true))
                .arg(path_arg("noreg", "Checkpoint trained with train.no_kl").required(true))
                .arg(path_arg("out", "Directory for probe.csv and probe_summary.json").required(true))
                .arg(path_arg("data", "Corpus directory from gen-data")),
        ))
        .subcommand(
            Command::new("inspect-ckpt").about("Print a checkpoint manifest").arg(
                Arg::new("ckpt")
                    .required(true)
                    .value_name("CKPT")
                    .value_parser(clap::value_parser!(PathBuf)),
            ),
        )
}

fn float_arg(id: &'static str, help: &'static str, default: &'static str) -> Arg {
    Arg::new(id)
        .long(id)
        .value_name("FLOAT")
        .value_parser(clap::value_parser!(f64))
        .default_value(default)
        .help(help)
}

/// Overrides in application order: shorthands first, then qualified flags.
fn overrides(m: &ArgMatches) -> Vec<Override> {
    let mut out = Vec::new();
    for (key, sections) in bare_keys() {
        if let Some(raw) = m.get_one::<String>(&format!("*.{key}")) {
            out.extend(sections.iter().map(|s| Override {
                section: s.to_string(),
                key: key.clone(),
                raw: raw.clone(),
            }));
        }
    }
    for (section, key, _) in Config::fields() {
        if let Some(raw) = m.get_one::<String>(&format!("{section}.{key}")) {
            out.push(Override {
                section: section.into(),
                key,
                raw: raw.clone(),
            });
        }
    }
    out
}

fn resolve(m: &ArgMatches, env_seed: Option<&str>) -> Result<Config> {
    let file = m.get_one::<PathBuf>("config").map(|p| config::read_file(p)).transpose()?;
    config::resolve(file.as_deref(), env_seed, &overrides(m))
}

fn path<'a>(m: &'a ArgMatches, id: &str) -> Option<&'a Path> {
    m.get_one::<PathBuf>(id).map(PathBuf::as_path)
}

fn required<'a>(m: &'a ArgMatches, id: &str) -> &'a Path {
    path(m, id).expect("clap enforces required paths")
}

fn out_err(e: std::io::Error) -> Error {
    Error::io(Path::new("<stdout>"), e)
}

fn dispatch(name: &str, m: &ArgMatches, env_seed: Option<&str>, stdout: &mut dyn Write) -> Result<()> {
    if name == "inspect-ckpt" {
        let text = checkpoint::inspect(required(m, "ckpt"))?;
        return write!(stdout, "{text}").map_err(out_err);
    }
    debug_assert!(CONFIG_SUBCOMMANDS.contains(&name));
    let cfg = resolve(m, env_seed)?;
    if name == "gradcheck" {
        return gradcheck(&cfg, m, stdout);
    }
    let world = cfg.validate()?;
    match name {
        "gen-data" => {
            let out = required(m, "out");
            let set = pipeline::gen_data(&cfg, &world, out)?;
            writeln!(
                stdout,
                "wrote {} strict, {} weak, {} parallel, {} + {} held-out records to {}",
                set.train.strict.len(),
                set.train.weak.len(),
                set.train.parallel.len(),
                set.heldout_strict.len(),
                set.heldout_weak.len(),
                out.display()
            )
            .map_err(out_err)
        }
        "train" => {
            let corpus = pipeline::corpus(&cfg, &world, path(m, "data"))?;
            let init = path(m, "init").map(|p| checkpoint::load(p, Some(&cfg.model))).transpose()?;
            let out = required(m, "out");
            let echo = m.get_flag("print-metrics");
            let r = pipeline::train(&cfg, &corpus, init, out, echo, stdout)?;
            writeln!(stdout, "trained {} steps; final checkpoint {}", r.steps, r.final_checkpoint.display())
                .map_err(out_err)
        }
        "eval" => {
            let model = match path(m, "ckpt") {
                Some(p) => checkpoint::load(p, Some(&cfg.model))?,
                None => Model::new(cfg.model.clone(), cfg.train.seed)?,
            };
            let corpus = pipeline::corpus(&cfg, &world, path(m, "data"))?;
            let report = pipeline::evaluate(&cfg, &world, &model, &corpus)?;
            pipeline::write_eval(&report, required(m, "out"))?;
            let r = &report.retrieval;
            writeln!(
                stdout,
                "recall@1 image_to_text {:.4} text_to_image {:.4} average {:.4} ({} queries, {} candidates)\n\
                 itm accuracy {:.4} ({} pairs)\ncloze accuracy {:.4} ({} positions)",
                r.image_to_text.recall_at_1,
                r.text_to_image.recall_at_1,
                r.average,
                r.image_to_text.n_queries,
                r.image_to_text.candidate_set_size,
                report.itm.accuracy,
                report.itm.n_pairs,
                report.cloze.accuracy,
                report.cloze.n_positions
            )
            .map_err(out_err)
        }
        "probe" => {
            let reg = checkpoint::load(required(m, "reg"), Some(&cfg.model))?;
            let noreg = checkpoint::load(required(m, "noreg"), Some(&cfg.model))?;
            let corpus = pipeline::corpus(&cfg, &world, path(m, "data"))?;
            let (records, s) = pipeline::probe(&cfg, &reg, &noreg, &corpus)?;
            pipeline::write_probe(&records, &s, required(m, "out"))?;
            let f = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            writeln!(
                stdout,
                "spearman(d_vtr, d_tr) reg {} noreg {}; spearman(ratio, 1 - overlap) {} over {} weak triplets",
                f(s.spearman_reg),
                f(s.spearman_noreg),
                f(s.spearman_ratio_irrelevance),
                s.n_weak
            )
            .map_err(out_err)?;
            for w in &s.warnings {
                writeln!(stdout, "warning: {w}").map_err(out_err)?;
            }
            Ok(())
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn gradcheck(cfg: &Config, m: &ArgMatches, stdout: &mut dyn Write) -> Result<()> {
    let opts = GradcheckOptions {
        step: *m.get_one::<f64>("fd-step").expect("defaulted"),
        floor: *m.get_one::<f64>("floor").expect("defaulted"),
        stride: 1,
    };
    let tol = *m.get_one::<f64>("tolerance").expect("defaulted");
    let suite = loss_suite(cfg.train.seed, opts)?;
    let mut failed = Vec::new();
    for (task, r) in &suite {
        writeln!(
            stdout,
            "{:<7} max_rel_err {:.3e} over {} parameters (worst {}[{}])",
            task.name(),
            r.max_rel_err,
            r.checked,
            r.worst_param,
            r.worst_index
        )
        .map_err(out_err)?;
        if !(r.max_rel_err < tol) {
            failed.push(task.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Gradcheck(format!("{} above tolerance {tol:e}", failed.join(", "))))
    }
}

/// Runs one command and returns the process exit code: 0 on success, 1 on
/// usage, configuration or file errors, 2 on numeric failures.
pub fn run<I, S>(argv: I, env_seed: Option<&str>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return 0;
            }
            let text = e.render().to_string();
            let mut lines = text.lines();
            let head = lines.next().unwrap_or_default();
            let _ = writeln!(stderr, "rc3: usage error: {}", head.trim_start_matches("error: "));
            for l in lines.filter(|l| !l.is_empty()) {
                let _ = writeln!(stderr, "  {l}");
            }
            return 1;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub, env_seed, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "rc3: {e}");
            e.exit_code()
        }
    }
}
