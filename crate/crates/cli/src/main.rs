//! Command-line entry point.
//!
//! Commands: train, eval, gradcheck, energy, inspect. Flags: `--config PATH`,
//! `--set key=value` (repeatable), `--out DIR`, `--seed N`,
//! `--noise kind:epsilon`, `--ckpt PATH`, `--what TARGET`, `--sops N`.
//!
//! Exit codes are stable: 0 ok, 1 check failure, 2 configuration error,
//! 3 numeric failure, 4 I/O failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cfsnn_core::error::Error;

use commands::RunContext;
use config::RunConfig;

const USAGE: &str = "usage: cfsnn <train|eval|gradcheck|energy|inspect> \
[--config PATH] [--set key=value]... [--out DIR] [--seed N] \
[--noise kind:epsilon] [--ckpt PATH] [--what membranes|alphas|spikes] [--sops N]";

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Check(_) => 1,
        Error::Config(_) | Error::Shape(_) | Error::Contract(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
    }
}

fn parse_context(args: &[String]) -> Result<(String, RunContext), Error> {
    let command = args
        .first()
        .ok_or_else(|| Error::Config(format!("missing command\n{USAGE}")))?
        .clone();
    if !["train", "eval", "gradcheck", "energy", "inspect"].contains(&command.as_str()) {
        return Err(Error::Config(format!("unknown command '{command}'\n{USAGE}")));
    }
    let mut cfg = RunConfig::default();
    let mut out_dir = PathBuf::from("out");
    let mut ckpt = None;
    let mut what = None;
    let mut sops = None;
    // collect file + overrides first so --set wins over the file regardless
    // of flag order
    let mut config_path: Option<PathBuf> = None;
    let mut sets: Vec<(String, String)> = Vec::new();
    let mut seed: Option<u64> = None;
    let mut noise: Option<(String, f64)> = None;

    let mut it = args[1..].iter();
    while let Some(flag) = it.next() {
        let mut value = |name: &str| -> Result<String, Error> {
            it.next()
                .cloned()
                .ok_or_else(|| Error::Config(format!("flag {name} needs a value\n{USAGE}")))
        };
        match flag.as_str() {
            "--config" => config_path = Some(PathBuf::from(value("--config")?)),
            "--set" => {
                let kv = value("--set")?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set wants key=value, got '{kv}'")))?;
                sets.push((k.trim().to_string(), v.trim().to_string()));
            }
            "--out" => out_dir = PathBuf::from(value("--out")?),
            "--seed" => {
                let v = value("--seed")?;
                seed = Some(v.parse().map_err(|_| {
                    Error::Config(format!("--seed wants an integer, got '{v}'"))
                })?);
            }
            "--noise" => {
                let v = value("--noise")?;
                let (kind, eps) = v
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("--noise wants kind:epsilon, got '{v}'")))?;
                let eps: f64 = eps.parse().map_err(|_| {
                    Error::Config(format!("--noise intensity '{eps}' is not a number"))
                })?;
                noise = Some((kind.to_string(), eps));
            }
            "--ckpt" => ckpt = Some(PathBuf::from(value("--ckpt")?)),
            "--what" => what = Some(value("--what")?),
            "--sops" => {
                let v = value("--sops")?;
                sops = Some(v.parse().map_err(|_| {
                    Error::Config(format!("--sops wants a number, got '{v}'"))
                })?);
            }
            other => {
                return Err(Error::Config(format!("unknown flag '{other}'\n{USAGE}")));
            }
        }
    }
    if let Some(path) = config_path {
        cfg.load_file(&path)?;
    }
    for (k, v) in sets {
        cfg.set(&k, &v)?;
    }
    if let Some(s) = seed {
        cfg.apply_master_seed(s);
    }
    if let Some((kind, eps)) = noise {
        cfg.set("noise.kind", &kind)?;
        cfg.set("noise.epsilon", &eps.to_string())?;
    }
    Ok((command, RunContext { cfg, out_dir, ckpt, what, sops }))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (command, ctx) = match parse_context(&args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };
    let result = match command.as_str() {
        "train" => commands::cmd_train(&ctx),
        "eval" => commands::cmd_eval(&ctx),
        "gradcheck" => commands::cmd_gradcheck(&ctx),
        "energy" => commands::cmd_energy(&ctx),
        "inspect" => commands::cmd_inspect(&ctx),
        _ => unreachable!("validated above"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
