use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::{json, Value};

use cmd_core::checkpoint::{save_checkpoint, CheckpointFile};
use cmd_core::eval::{
    ensemble_scores, extract_features, knn_eval, linear_probe, save_features, accuracy, FeatureSet, ProbeConfig,
};
use cmd_core::skeleton::{load_dataset, save_dataset, split_per_class, synth_generate, SynthConfig};
use cmd_core::trainer::{fit, TrainState};
use cmd_core::{Error, Modality, Precision, Real, SkeletonSequence, TrainConfig};

/// Failure of one invocation, split by exit code.
enum Failure {
    /// Exit 2; the usage text of the subcommand is printed.
    Usage(String),
    /// Exit 1.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) | Error::Parameter(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn opt(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("VALUE").help(help)
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    opt(name, help).value_name("PATH").value_parser(clap::value_parser!(PathBuf))
}

fn checkpoint_eval(name: &'static str, about: &'static str) -> Command {
    Command::new(name)
        .about(about)
        .arg(path_arg("checkpoint", "Checkpoint directory").required(true))
        .arg(path_arg("train", "Labelled training dataset").required(true))
        .arg(path_arg("test", "Labelled test dataset").required(true))
        .arg(opt("modality", "Comma-separated modalities to evaluate").default_value("joint"))
        .arg(path_arg("out", "Directory for the result JSON and run manifest").required(true))
}

fn cli() -> Command {
    let mut pretrain = Command::new("pretrain")
        .about("Self-supervised pre-training; writes checkpoint/, metrics.csv and run-manifest.json")
        .arg(path_arg("data", "Training dataset file").required(true))
        .arg(path_arg("out", "Output directory").required(true))
        .arg(path_arg("config", "Config file of 'key = value' lines"))
        .arg(
            Arg::new("resume")
                .long("resume")
                .action(ArgAction::SetTrue)
                .help("Continue from OUT/checkpoint; only 'epochs' may differ from the stored config"),
        );
    for key in TrainConfig::keys() {
        pretrain = pretrain.arg(opt(key, "Config override").help_heading("Config overrides"));
    }
    Command::new("cmd")
        .about("Cross-modal mutual distillation for skeleton action representations")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-synth")
                .about("Writes a synthetic labelled skeleton dataset")
                .arg(path_arg("out", "Dataset file (training part when splitting)").required(true))
                .arg(opt("classes", "Number of classes").default_value("5"))
                .arg(opt("per_class", "Clips per class").default_value("100"))
                .arg(opt("frames", "Frames per clip").default_value("64"))
                .arg(opt("joints", "Joints per actor").default_value("25"))
                .arg(opt("noise", "Coordinate noise std-dev").default_value("0.05"))
                .arg(opt("seed", "Generator seed").default_value("0"))
                .arg(path_arg("test_out", "Also write a held-out split here"))
                .arg(opt("test_per_class", "Held-out clips per class").default_value("0")),
        )
        .subcommand(pretrain)
        .subcommand(checkpoint_eval("eval-knn", "1-nearest-neighbor accuracy of frozen features"))
        .subcommand(
            checkpoint_eval(
                "eval-linear",
                "Linear-probe accuracy of frozen features; several modalities are also ensembled",
            )
            .arg(opt("probe_epochs", "Probe epochs").default_value("80"))
            .arg(opt("probe_lr", "Initial probe learning rate").default_value("0.1"))
            .arg(opt("probe_batch_size", "Probe batch size").default_value("64"))
            .arg(opt("probe_seed", "Probe shuffling seed").default_value("0")),
        )
        .subcommand(
            Command::new("export-features")
                .about("Writes frozen features of a dataset as JSON lines")
                .arg(path_arg("checkpoint", "Checkpoint directory").required(true))
                .arg(path_arg("data", "Dataset file").required(true))
                .arg(opt("modality", "Modality to embed").default_value("joint"))
                .arg(path_arg("out", "Feature file").required(true)),
        )
        .subcommand(
            Command::new("verify")
                .about("Runs the built-in oracle checks and prints a pass/fail report")
                .arg(opt("seed", "Seed for the randomized instances").default_value("0"))
                .arg(path_arg("out", "Directory for scratch files and the run manifest")),
        )
}

fn parsed<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    let raw = m
        .get_one::<String>(name)
        .ok_or_else(|| Failure::Usage(format!("--{name} is required")))?;
    raw.parse()
        .map_err(|e| Failure::Usage(format!("--{name} '{raw}': {e}")))
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required by clap")
}

fn modalities(m: &ArgMatches) -> Result<Vec<Modality>, Failure> {
    let raw = m.get_one::<String>("modality").expect("has a default");
    let list = raw
        .split(',')
        .map(|s| s.parse::<Modality>().map_err(Failure::from))
        .collect::<Result<Vec<_>, _>>()?;
    if list.is_empty() {
        return Err(Failure::Usage("--modality needs at least one modality".into()));
    }
    Ok(list)
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize") + "\n";
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_manifest(dir: &Path, verb: &str, argv: &[String], body: Value) -> Outcome {
    let mut manifest = json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "verb": verb,
        "argv": argv,
    });
    if let (Value::Object(m), Value::Object(b)) = (&mut manifest, body) {
        m.extend(b);
    }
    write_json(&dir.join("run-manifest.json"), &manifest)
}

fn config_json(cfg: &TrainConfig) -> Value {
    Value::Object(
        cfg.to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::String(v)))
            .collect(),
    )
}

fn gen_synth(m: &ArgMatches, argv: &[String]) -> Outcome {
    let cfg = SynthConfig {
        classes: parsed(m, "classes")?,
        per_class: parsed(m, "per_class")?,
        frames: parsed(m, "frames")?,
        joints: parsed(m, "joints")?,
        noise: parsed(m, "noise")?,
        seed: parsed(m, "seed")?,
    };
    let test_per_class: usize = parsed(m, "test_per_class")?;
    let out = path(m, "out");
    let test_out = m.get_one::<PathBuf>("test_out");
    if test_out.is_some() != (test_per_class > 0) {
        return Err(Failure::Usage("--test_out and --test_per_class go together".into()));
    }
    let data = synth_generate(&cfg)?;
    let total = data.len();
    let (train, test) = if test_per_class > 0 {
        split_per_class(data, test_per_class)?
    } else {
        (data, Vec::new())
    };
    save_dataset(out, &train)?;
    if let Some(t) = test_out {
        save_dataset(t, &test)?;
    }
    eprintln!("wrote {} of {total} clips to {}", train.len(), out.display());
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_manifest(
        dir,
        "gen-synth",
        argv,
        json!({
            "synth": {
                "classes": cfg.classes, "per_class": cfg.per_class, "frames": cfg.frames,
                "joints": cfg.joints, "noise": cfg.noise, "seed": cfg.seed,
                "test_per_class": test_per_class,
            },
            "train_file": out, "test_file": test_out,
        }),
    )
}

fn resolve_config(m: &ArgMatches) -> Result<TrainConfig, Failure> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) if !p.is_file() => {
            return Err(Failure::Usage(format!("config file {} does not exist", p.display())));
        }
        Some(p) => TrainConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => TrainConfig::desk(),
    };
    for key in TrainConfig::keys() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain_with<F: Real>(
    cfg: &TrainConfig,
    data: &[SkeletonSequence],
    out: &Path,
    resume: bool,
) -> Result<String, Failure> {
    let joints = data
        .first()
        .map(SkeletonSequence::joints)
        .ok_or_else(|| Failure::Usage("the training dataset is empty".into()))?;
    let ckpt_dir = out.join("checkpoint");
    let mut state = if resume {
        let ckpt = CheckpointFile::open(&ckpt_dir)?;
        let mut stored = ckpt.config.clone();
        stored.epochs = cfg.epochs;
        if stored != *cfg {
            return Err(Failure::Usage(
                "--resume only allows changing 'epochs'; other settings differ from the checkpoint".into(),
            ));
        }
        let mut state = ckpt.state::<F>()?;
        state.config.epochs = cfg.epochs;
        state
    } else {
        TrainState::<F>::init(cfg, joints)?
    };
    let metrics = fit(&mut state, data, Some(out), &mut |_, _| {})?;
    for e in &metrics {
        eprintln!("epoch {} step {} lr {} loss {:.6}", e.epoch, e.step, e.lr, e.total);
    }
    if cfg.epochs == 0 || metrics.is_empty() {
        // fit saves only after training at least one epoch
        return Ok(save_checkpoint(&state, &ckpt_dir)?);
    }
    Ok(CheckpointFile::open(&ckpt_dir)?.hash)
}

fn pretrain(m: &ArgMatches, argv: &[String]) -> Outcome {
    let cfg = resolve_config(m)?;
    let out = path(m, "out");
    let data_path = path(m, "data");
    let data = load_dataset(data_path)?;
    create_dir(out)?;
    write_manifest(
        out,
        "pretrain",
        argv,
        json!({ "data": data_path, "config": config_json(&cfg), "config_hash": cfg.hash() }),
    )?;
    let resume = m.get_flag("resume");
    let hash = match cfg.precision {
        Precision::F32 => pretrain_with::<f32>(&cfg, &data, out, resume)?,
        Precision::F64 => pretrain_with::<f64>(&cfg, &data, out, resume)?,
    };
    println!("checkpoint {} {hash}", out.join("checkpoint").display());
    Ok(())
}

struct EvalInputs {
    ckpt: CheckpointFile,
    modalities: Vec<Modality>,
    train: Vec<SkeletonSequence>,
    test: Vec<SkeletonSequence>,
}

fn eval_inputs(m: &ArgMatches) -> Result<EvalInputs, Failure> {
    let ckpt = CheckpointFile::open(path(m, "checkpoint"))?;
    let modalities = modalities(m)?;
    let train = load_dataset(path(m, "train"))?;
    let test = load_dataset(path(m, "test"))?;
    Ok(EvalInputs {
        ckpt,
        modalities,
        train,
        test,
    })
}

fn features(inp: &EvalInputs, modality: Modality) -> Result<(FeatureSet, FeatureSet), Failure> {
    Ok((
        extract_features(&inp.ckpt, &inp.train, modality)?,
        extract_features(&inp.ckpt, &inp.test, modality)?,
    ))
}

fn result_json(protocol: &str, modality: &str, top1: f64, n_test: usize, ckpt: &str) -> Value {
    json!({
        "protocol": protocol,
        "modality": modality,
        "top1": top1,
        "n_test": n_test,
        "checkpoint": ckpt,
    })
}

fn report(out: &Path, file: &str, result: &Value) -> Outcome {
    write_json(&out.join(file), result)?;
    println!("{result}");
    Ok(())
}

fn eval_manifest(m: &ArgMatches, inp: &EvalInputs, verb: &str, argv: &[String], extra: Value) -> Outcome {
    let out = path(m, "out");
    create_dir(out)?;
    let mut body = json!({
        "checkpoint": path(m, "checkpoint"),
        "checkpoint_hash": inp.ckpt.hash,
        "train": path(m, "train"),
        "test": path(m, "test"),
        "modalities": inp.modalities.iter().map(|x| x.to_string()).collect::<Vec<_>>(),
        "config": config_json(&inp.ckpt.config),
    });
    if let (Value::Object(b), Value::Object(e)) = (&mut body, extra) {
        b.extend(e);
    }
    write_manifest(out, verb, argv, body)
}

fn eval_knn(m: &ArgMatches, argv: &[String]) -> Outcome {
    let inp = eval_inputs(m)?;
    eval_manifest(m, &inp, "eval-knn", argv, json!({}))?;
    for &modality in &inp.modalities {
        let (train, test) = features(&inp, modality)?;
        let top1 = knn_eval(&train, &test)?;
        let r = result_json("knn", modality.name(), top1, test.len(), &inp.ckpt.hash);
        report(path(m, "out"), &format!("knn-{modality}.json"), &r)?;
    }
    Ok(())
}

fn eval_linear(m: &ArgMatches, argv: &[String]) -> Outcome {
    let probe = ProbeConfig {
        epochs: parsed(m, "probe_epochs")?,
        lr: parsed(m, "probe_lr")?,
        batch_size: parsed(m, "probe_batch_size")?,
        seed: parsed(m, "probe_seed")?,
        ..ProbeConfig::default()
    };
    let inp = eval_inputs(m)?;
    eval_manifest(
        m,
        &inp,
        "eval-linear",
        argv,
        json!({ "probe": {
            "epochs": probe.epochs, "lr": probe.lr, "milestones": probe.milestones,
            "gamma": probe.gamma, "momentum": probe.momentum, "weight_decay": probe.weight_decay,
            "batch_size": probe.batch_size, "seed": probe.seed,
        }}),
    )?;
    let out = path(m, "out");
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for &modality in &inp.modalities {
        let (train, test) = features(&inp, modality)?;
        let r = linear_probe(&train, &test, &probe)?;
        truth = test.labels.iter().map(|l| l.unwrap_or(usize::MAX)).collect();
        let j = result_json("linear", modality.name(), r.top1, test.len(), &inp.ckpt.hash);
        report(out, &format!("linear-{modality}.json"), &j)?;
        scores.push(r.scores);
    }
    if scores.len() > 1 {
        let pred = ensemble_scores(&scores)?;
        let name = inp.modalities.iter().map(|x| x.name()).collect::<Vec<_>>().join("+");
        let j = result_json("linear", &name, accuracy(&pred, &truth), truth.len(), &inp.ckpt.hash);
        report(out, "linear-ensemble.json", &j)?;
    }
    Ok(())
}

fn export_features(m: &ArgMatches, argv: &[String]) -> Outcome {
    let ckpt = CheckpointFile::open(path(m, "checkpoint"))?;
    let modality: Modality = parsed(m, "modality")?;
    let data = load_dataset(path(m, "data"))?;
    let fs = extract_features(&ckpt, &data, modality)?;
    let out = path(m, "out");
    save_features(out, &fs)?;
    eprintln!("wrote {} {}-dimensional features to {}", fs.len(), fs.dim(), out.display());
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_manifest(
        dir,
        "export-features",
        argv,
        json!({
            "checkpoint": path(m, "checkpoint"),
            "checkpoint_hash": ckpt.hash,
            "data": path(m, "data"),
            "modality": modality.name(),
            "features": out,
        }),
    )
}

fn verify(m: &ArgMatches, argv: &[String]) -> Outcome {
    let seed: u64 = parsed(m, "seed")?;
    let scratch = match m.get_one::<PathBuf>("out") {
        Some(dir) => {
            create_dir(dir)?;
            write_manifest(dir, "verify", argv, json!({ "seed": seed }))?;
            dir.clone()
        }
        None => std::env::temp_dir().join(format!("cmd-verify-{}", std::process::id())),
    };
    create_dir(&scratch)?;
    let checks = cmd_core::verify::run_all(seed, &scratch);
    if m.get_one::<PathBuf>("out").is_none() {
        let _ = std::fs::remove_dir_all(&scratch);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{}", c.line());
    }
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{failed} check(s) failed")))
    }
}

fn run(argv: Vec<String>) -> u8 {
    let mut command = cli();
    let matches = match command.try_get_matches_from_mut(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (verb, sub) = matches.subcommand().expect("a subcommand is required");
    let outcome = match verb {
        "gen-synth" => gen_synth(sub, &argv),
        "pretrain" => pretrain(sub, &argv),
        "eval-knn" => eval_knn(sub, &argv),
        "eval-linear" => eval_linear(sub, &argv),
        "export-features" => export_features(sub, &argv),
        "verify" => verify(sub, &argv),
        other => unreachable!("unknown subcommand {other}"),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            if let Some(sc) = command.find_subcommand_mut(verb) {
                eprintln!("{}", sc.render_usage());
            }
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args().collect()))
}
