//! `--config FILE` expansion. The file is a JSON object whose keys are long flag names
//! (snake_case accepted) plus an optional "command"; explicit flags win over it.

use std::fs;

use serde_json::Value;

pub const COMMANDS: [&str; 5] = ["gen", "eval", "verify", "bench", "grover"];
const GLOBALS: [&str; 2] = ["seed", "workers"];

fn take_config(args: &mut Vec<String>) -> Result<Option<String>, String> {
    for i in 0..args.len() {
        if args[i] == "--config" {
            if i + 1 >= args.len() {
                return Err("--config needs a file".into());
            }
            let path = args.remove(i + 1);
            args.remove(i);
            return Ok(Some(path));
        }
        if let Some(path) = args[i].strip_prefix("--config=") {
            let path = path.to_string();
            args.remove(i);
            return Ok(Some(path));
        }
    }
    Ok(None)
}

fn flag_tokens(key: &str, v: &Value) -> Result<Vec<String>, String> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &Value| -> Result<String, String> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(format!("config key {key}: unsupported value {v}")),
        }
    };
    Ok(match v {
        Value::Bool(true) => vec![flag],
        Value::Bool(false) | Value::Null => vec![],
        Value::Array(items) => vec![flag, items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?.join(",")],
        other => vec![flag, scalar(other)?],
    })
}

fn present(args: &[String], key: &str) -> bool {
    let flag = format!("--{}", key.replace('_', "-"));
    args.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
}

/// Returns argv with the config file's settings spliced in.
pub fn expand(mut args: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = take_config(&mut args)? else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let Value::Object(map) = serde_json::from_str::<Value>(&text).map_err(|e| format!("config {path}: {e}"))? else {
        return Err(format!("config {path} must be a JSON object"));
    };
    let mut globals = Vec::new();
    let mut locals = Vec::new();
    let mut command = None;
    for (k, v) in &map {
        if k == "command" {
            command = v.as_str().map(str::to_string);
            continue;
        }
        if present(&args, k) {
            continue;
        }
        let toks = flag_tokens(k, v)?;
        if GLOBALS.contains(&k.as_str()) {
            globals.extend(toks);
        } else {
            locals.extend(toks);
        }
    }
    let program = args.remove(0);
    let cmd_pos = args.iter().position(|a| COMMANDS.contains(&a.as_str()));
    let mut out = vec![program];
    out.extend(globals);
    match cmd_pos {
        Some(p) => {
            let rest = args.split_off(p);
            out.extend(args);
            out.push(rest[0].clone());
            out.extend(locals);
            out.extend(rest.into_iter().skip(1));
        }
        None => {
            let command = command.ok_or("no subcommand given and the config has no \"command\"")?;
            out.extend(args);
            out.push(command);
            out.extend(locals);
        }
    }
    Ok(out)
}
