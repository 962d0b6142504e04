pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{Key, Settings};

fn subcommand(name: &'static str, about: &'static str, keys: &[Key], schema: &str) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("flat `key = value` file; keys are the flags below without dashes"),
    );
    for k in keys {
        let help = if k.default.is_empty() {
            k.help.to_string()
        } else {
            format!("{} [default: {}]", k.help, k.default)
        };
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .allow_hyphen_values(true)
                .help(help),
        );
    }
    cmd.after_help(format!("Outputs:\n{schema}"))
}

pub fn cli() -> Command {
    let mut root = Command::new("celab")
        .about("Channel equilibrium layers: oracles, diagnostics and desk-scale experiments")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in commands::SPECS {
        let mut cmd = subcommand(spec.name, spec.about, &(spec.keys)(), spec.schema);
        if spec.name == "sweep" {
            cmd = cmd.arg(
                Arg::new("experiment")
                    .required(true)
                    .value_parser(["weight-decay", "ablation", "corrupted-labels"])
                    .help("experiment to run"),
            );
        }
        root = root.subcommand(cmd);
    }
    root
}

fn settings(m: &ArgMatches, keys: &[Key]) -> ce_core::Result<Settings> {
    let flags: Vec<(&'static str, String)> = keys
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name, v.clone())))
        .collect();
    let config = m.get_one::<String>("config").map(PathBuf::from);
    Settings::resolve(keys, config.as_deref(), &flags)
}

fn dispatch(matches: &ArgMatches) -> ce_core::Result<()> {
    let (name, m) = matches.subcommand().expect("subcommand is required");
    let spec = commands::SPECS
        .iter()
        .find(|s| s.name == name)
        .expect("registered subcommand");
    let s = settings(m, &(spec.keys)())?;
    let experiment = m
        .try_get_one::<String>("experiment")
        .ok()
        .flatten()
        .cloned();
    (spec.run)(&s, experiment.as_deref())
}

/// Parses `args` (program name first) and runs the subcommand; returns the
/// process exit code: 0 on success, 2 on numerical failure, 1 otherwise.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}
