//! Command-line harness over the pose regression library: dataset
//! synthesis, training, evaluation, gradient checking, and comparison
//! sweeps. Commands compose through files only.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use campose::error::{Error, ErrorClass};

use config::RunConfig;

pub const USAGE: &str = "\
usage: campose <command> [options]

commands:
  synth       generate a synthetic dataset        (needs --out)
  train       train a model on a dataset          (needs dataset, out)
  eval        evaluate a checkpoint on a dataset  (needs checkpoint, dataset, out)
  gradcheck   verify gradients of every primitive and loss
  sweep       run a named comparison grid         (needs --name, dataset, out)

common options:
  --config FILE      key = value configuration file
  --preset NAME[,..] apply named presets (m1..m4, st, st-vo, mt, mt-gloc,
                     mt-vo, mt-dual, 7scenes, cambridge, full-schedule)
  --seed N           override the seed
  --out DIR          output directory
  --set key=value    override any config key (repeatable)

command options:
  synth:      --force                 overwrite an existing dataset
  train:      --dataset DIR
  eval:       --dataset DIR --checkpoint FILE
  gradcheck:  --points N (default 20) --with-corrupted-control
  sweep:      --name {fusion-stage|sharing-depth|strategy|init} --dataset DIR

exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
";

struct ParsedArgs {
    command: String,
    config_file: Option<PathBuf>,
    preset: Option<String>,
    overrides: Vec<(String, String)>,
    force: bool,
    with_corrupted_control: bool,
    name: Option<String>,
    points: usize,
}

fn parse_args(args: &[String]) -> Result<ParsedArgs, Error> {
    if args.is_empty() {
        return Err(Error::Config("missing command".into()));
    }
    let mut parsed = ParsedArgs {
        command: args[0].clone(),
        config_file: None,
        preset: None,
        overrides: Vec::new(),
        force: false,
        with_corrupted_control: false,
        name: None,
        points: 20,
    };
    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        let mut take = |what: &str| -> Result<String, Error> {
            it.next()
                .cloned()
                .ok_or_else(|| Error::Config(format!("{what} needs a value")))
        };
        match arg.as_str() {
            "--config" => parsed.config_file = Some(PathBuf::from(take("--config")?)),
            "--preset" => parsed.preset = Some(take("--preset")?),
            "--seed" => parsed.overrides.push(("seed".into(), take("--seed")?)),
            "--out" => parsed.overrides.push(("out".into(), take("--out")?)),
            "--dataset" => parsed
                .overrides
                .push(("dataset".into(), take("--dataset")?)),
            "--checkpoint" => parsed
                .overrides
                .push(("checkpoint".into(), take("--checkpoint")?)),
            "--set" => {
                let kv = take("--set")?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
                parsed
                    .overrides
                    .push((k.trim().to_string(), v.trim().to_string()));
            }
            "--force" => parsed.force = true,
            "--with-corrupted-control" => parsed.with_corrupted_control = true,
            "--name" => parsed.name = Some(take("--name")?),
            "--points" => {
                parsed.points = take("--points")?
                    .parse()
                    .map_err(|e| Error::Config(format!("--points: {e}")))?
            }
            other => return Err(Error::Config(format!("unknown option {other}"))),
        }
    }
    Ok(parsed)
}

fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn dispatch(parsed: &ParsedArgs) -> Result<String, Error> {
    let cfg = RunConfig::resolve(
        parsed.config_file.as_deref(),
        parsed.preset.as_deref(),
        &parsed.overrides,
    )?;
    match parsed.command.as_str() {
        "synth" => {
            let hash = commands::cmd_synth(&cfg, parsed.force)?;
            Ok(format!(
                "dataset written to {} (content hash {hash})\n",
                cfg.get("out").unwrap_or("?")
            ))
        }
        "train" => {
            let outcome = commands::cmd_train(&cfg)?;
            Ok(format!(
                "trained: final loss {:.6}\ncheckpoint: {}\nloss curve: {}\n",
                outcome.final_loss,
                outcome.checkpoint.display(),
                outcome.curve.display()
            ))
        }
        "eval" => {
            let outcome = commands::cmd_eval(&cfg)?;
            let scene = &outcome.report.scenes[0];
            let mut text = format!(
                "{}: median translation {:.6} m, median orientation {:.4} deg ({} frames)\n",
                scene.scene, scene.median_translation_m, scene.median_orientation_deg, scene.frames
            );
            if let Some(vo) = &scene.vo {
                text.push_str(&format!(
                    "odometry: {:.4} %, {:.4} deg/m over {} windows\n",
                    vo.translation_percent, vo.rotation_deg_per_m, vo.windows
                ));
            }
            for f in &outcome.files {
                text.push_str(&format!("wrote {}\n", f.display()));
            }
            Ok(text)
        }
        "gradcheck" => {
            let seed = cfg.get_u64("seed")?;
            let outcome =
                commands::cmd_gradcheck(seed, parsed.points, parsed.with_corrupted_control)?;
            if outcome.all_pass {
                Ok(outcome.table)
            } else {
                Err(Error::NonFinite { op: "gradcheck" }).map_err(|_| {
                    Error::Autodiff(format!("gradient check failed:\n{}", outcome.table))
                })
            }
        }
        "sweep" => {
            let name = parsed
                .name
                .as_deref()
                .ok_or_else(|| Error::Config("sweep needs --name".into()))?;
            let outcome = commands::cmd_sweep(&cfg, name)?;
            let mut text = format!("sweep written to {}\n", outcome.csv_path.display());
            for r in &outcome.rows {
                text.push_str(&format!(
                    "  {}: median {:.6} m / {:.4} deg\n",
                    r.point, r.median_translation_m, r.median_orientation_deg
                ));
            }
            Ok(text)
        }
        other => Err(Error::Config(format!("unknown command {other:?}"))),
    }
}

/// Run the CLI; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let parsed = match parse_args(args) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            eprint!("{USAGE}");
            return exit_code(&e);
        }
    };
    match dispatch(&parsed) {
        Ok(output) => {
            print!("{output}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
