mod args;
mod commands;
mod output;

use std::ffi::OsString;
use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use rvekit_core::{CoreError, Result};
use serde_json::{json, Value};

use args::{Cli, Command};
use output::Staged;

/// Appends `--key value` for every config-file entry whose flag is not already
/// on the command line.
fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let path = strs.iter().enumerate().find_map(|(i, a)| {
        a.strip_prefix("--config=")
            .map(String::from)
            .or_else(|| (a == "--config").then(|| strs.get(i + 1).cloned()).flatten())
    });
    let Some(path) = path else { return Ok(argv) };
    let text = std::fs::read_to_string(&path).map_err(|e| CoreError::Config(format!("config file {path}: {e}")))?;
    let cfg: Value = serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("config file {path}: {e}")))?;
    let obj = cfg
        .as_object()
        .ok_or_else(|| CoreError::Config("config file must hold a JSON object".into()))?;
    let mut out = argv;
    for (key, val) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        if strs.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}="))) {
            continue;
        }
        let scalar = |v: &Value| match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(CoreError::Config(format!("config key '{key}' has an unsupported value"))),
        };
        match val {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<Result<Vec<_>>>()?.join(",");
                out.push(flag.into());
                out.push(joined.into());
            }
            v => {
                out.push(flag.into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<Value> {
    let name = cli.command.name();
    let seed = match cli.command.seed() {
        Some(None) => return Err(CoreError::Config(format!("{name} needs --seed"))),
        Some(Some(s)) => s,
        None => 0,
    };
    let jobs = match cli.jobs {
        Some(0) => return Err(CoreError::Config("--jobs must be positive".into())),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| CoreError::Config(format!("thread pool: {e}")))?;

    let target = cli.command.out().cloned().unwrap_or_else(|| cli.out_root.join(name));
    let staged = Staged::new(target, cli.force)?;
    let mut ctx = commands::Ctx {
        out: staged.path(),
        seed,
        data_hash: None,
    };
    let res = match &cli.command {
        Command::Generate(a) => commands::generate(a, &mut ctx),
        Command::Solve(a) => commands::solve(a, &mut ctx),
        Command::Features(a) => commands::features(a, &mut ctx),
        Command::FitPca(a) => commands::fit_pca(a, &mut ctx),
        Command::Train(a) => commands::train(a, &mut ctx),
        Command::Mine(a) => commands::mine(a, &mut ctx),
        Command::Select(a) => commands::select(a, &mut ctx),
        Command::Eval(a) => commands::eval(a, &mut ctx),
        Command::PhysicsCheck(a) => commands::physics_check(a, &mut ctx),
        Command::Report(a) => commands::report(a, &mut ctx),
    };
    let results = match res {
        Ok(r) => r,
        Err(e) => {
            staged.abandon();
            return Err(e);
        }
    };
    let data_hash = ctx.data_hash.take();
    if let Command::Generate(_) = cli.command {
        commands::preview(staged.path(), 32)?;
    }
    let summary = json!({
        "command": name,
        "status": "ok",
        "seed": seed,
        "jobs": jobs,
        "config": cli,
        "data_hash": data_hash,
        "outputs": staged.hashes()?,
        "output_dir": staged.target(),
        "results": results,
    });
    std::fs::write(staged.path().join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    staged.commit()?;
    Ok(summary)
}

fn main() -> ExitCode {
    let argv = match merge_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let cli = Cli::parse_from(argv);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &CoreError) -> ExitCode {
    let cat = e.category();
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", cat.as_str());
    ExitCode::from(cat.exit_code() as u8)
}
