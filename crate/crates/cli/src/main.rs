use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use tubefsl::checkpoint::ModelBundle;
use tubefsl::config::{RunConfig, KEYS};
use tubefsl::data::ModalityKind;
use tubefsl::fewshot::CostReport;
use tubefsl::pipeline::{Run, Stage};
use tubefsl::Result;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut cmd = Command::new("tubefsl")
        .about(
            "Masked-video teachers, multimodal distillation and ensemble masked few-shot inference",
        )
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("PATH")
                .value_parser(clap::value_parser!(PathBuf))
                .global(true)
                .help("`key = value` config file; flags override it"),
        )
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .short('q')
                .action(ArgAction::SetTrue)
                .global(true)
                .help("only log warnings and errors"),
        );
    for k in KEYS {
        cmd = cmd.arg(
            Arg::new(k.key)
                .long(flag_name(k.key))
                .value_name("VALUE")
                .global(true)
                .help_heading("Configuration")
                .help(format!("{} [default: {}]", k.doc, k.default)),
        );
    }
    let path_arg = |name: &'static str, help: &'static str| {
        Arg::new(name)
            .long(name)
            .value_name("PATH")
            .value_parser(clap::value_parser!(PathBuf))
            .help(help)
    };
    let student = || {
        path_arg(
            "student",
            "student checkpoint [default: <out-dir>/checkpoints/student.bundle]",
        )
    };
    cmd.subcommand(Command::new("gen-data").about("Generate the synthetic benchmark into <out-dir>/data"))
        .subcommand(
            Command::new("pretrain")
                .about("Pretrain one masked-autoencoder teacher per modality")
                .arg(
                    Arg::new("modality")
                        .long("modality")
                        .value_name("MODALITY")
                        .value_parser(["rgb", "flow", "pose"])
                        .action(ArgAction::Append)
                        .help("train only these teachers and merge them into an existing checkpoint"),
                )
                .arg(path_arg("out", "teacher checkpoint [default: <out-dir>/checkpoints/teachers.bundle]")),
        )
        .subcommand(
            Command::new("distill")
                .about("Distil the teachers into the RGB student")
                .arg(
                    path_arg("teachers", "teacher checkpoints, merged in order [default: <out-dir>/checkpoints/teachers.bundle]")
                        .num_args(1..),
                )
                .arg(path_arg("out", "student checkpoint [default: <out-dir>/checkpoints/student.bundle]")),
        )
        .subcommand(Command::new("fewshot-eval").about("Episodic few-shot evaluation of the student").arg(student()))
        .subcommand(
            Command::new("tradeoff")
                .about("Accuracy, wall-clock and FLOPs over mask ratios and ensemble sizes")
                .arg(student()),
        )
        .subcommand(Command::new("cost").about("Analytic FLOPs at ViT-S and toy shape, plus toy wall-clock"))
        .subcommand(Command::new("ablate").about("Full method against ablation variants on shared episodes"))
        .subcommand(
            Command::new("export-embeddings")
                .about("Write unmasked pooled features as CSV")
                .arg(path_arg("checkpoint", "bundle holding the chosen encoder [default: student or teacher checkpoint]")),
        )
        .subcommand(
            Command::new("pipeline")
                .about("gen-data, pretrain, distill and fewshot-eval in order")
                .arg(
                    Arg::new("resume-from")
                        .long("resume-from")
                        .value_name("STAGE")
                        .value_parser(["gen-data", "pretrain", "distill", "fewshot-eval"])
                        .help("load the outputs of earlier stages instead of recomputing them"),
                ),
        )
}

fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|k| {
            m.get_one::<String>(k.key)
                .map(|v| (k.key.to_string(), v.clone()))
        })
        .collect();
    RunConfig::load(
        m.get_one::<PathBuf>("config").map(PathBuf::as_path),
        &overrides,
    )
}

fn path_or(sub: &ArgMatches, name: &str, default: PathBuf) -> PathBuf {
    sub.get_one::<PathBuf>(name).cloned().unwrap_or(default)
}

fn load_student(run: &Run, sub: &ArgMatches) -> Result<ModelBundle> {
    let bundle = match sub.get_one::<PathBuf>("student") {
        Some(p) => run.load(p, Stage::Distill)?,
        None => run.load_student()?,
    };
    bundle.student()?;
    Ok(bundle)
}

fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand is required");
    let run = Run::new(resolve_config(m)?)?;
    log::info!("config hash {} -> {}", run.hash, run.layout.root.display());
    match name {
        "gen-data" => {
            run.gen_data()?;
        }
        "pretrain" => {
            let data = run.load_data()?;
            let out = path_or(sub, "out", run.layout.teachers());
            let kinds: Vec<ModalityKind> = match sub.get_many::<String>("modality") {
                Some(v) => v.map(|s| s.parse()).collect::<Result<_>>()?,
                None => ModalityKind::ALL.to_vec(),
            };
            let mut bundle = run.train_teachers(&data, &kinds)?;
            if kinds.len() < ModalityKind::ALL.len() && out.exists() {
                bundle = run.load(&out, Stage::Pretrain)?.merge_teachers(bundle)?;
            }
            run.save(&bundle, &out)?;
            println!("{}", out.display());
        }
        "distill" => {
            let data = run.load_data()?;
            let paths: Vec<PathBuf> = match sub.get_many::<PathBuf>("teachers") {
                Some(v) => v.cloned().collect(),
                None => vec![run.layout.teachers()],
            };
            let mut teachers = run.load(&paths[0], Stage::Pretrain)?;
            for p in &paths[1..] {
                teachers = teachers.merge_teachers(run.load(p, Stage::Pretrain)?)?;
            }
            let out = path_or(sub, "out", run.layout.student());
            let bundle = run.train_student(&data, &teachers)?;
            run.save(&bundle, &out)?;
            println!("{}", out.display());
        }
        "fewshot-eval" => {
            let data = run.load_data()?;
            let bundle = load_student(&run, sub)?;
            let r = run.fewshot_eval(&data, &bundle)?;
            println!("accuracy {:.4} +- {:.4}", r.mean_acc, r.ci95);
        }
        "tradeoff" => {
            let data = run.load_data()?;
            let bundle = load_student(&run, sub)?;
            for r in run.tradeoff(&data, &bundle)? {
                println!(
                    "rho={} P={}: acc {:.4} +- {:.4}, {:.3} ms, {} FLOPs",
                    r.mask_ratio, r.ensemble, r.mean_acc, r.ci95, r.wallclock_ms, r.flops
                );
            }
        }
        "cost" => {
            println!("shape,{}", CostReport::CSV_HEADER);
            for (shape, c) in run.cost()? {
                println!("{shape},{}", c.csv_row());
            }
        }
        "ablate" => {
            let report = run.ablate()?;
            for s in &report.summaries {
                println!(
                    "{}: {:.4} +- {:.4} over {} episodes",
                    s.variant, s.mean_acc, s.ci95, s.episodes
                );
            }
            for d in &report.deltas {
                println!(
                    "full - {}: {:+.4} +- {:.4}",
                    d.variant, d.mean_delta, d.ci95
                );
            }
        }
        "export-embeddings" => {
            let data = run.load_data()?;
            let bundle = match sub.get_one::<PathBuf>("checkpoint") {
                Some(p) => run.load(p, Stage::Distill)?,
                None if run.config.get("embed_encoder") == "student" => run.load_student()?,
                None => run.load_teachers()?,
            };
            let n = run.export_embeddings(&data, &bundle)?;
            println!("{n} rows -> {}", run.layout.report("embeddings").display());
        }
        "pipeline" => {
            let resume = sub
                .get_one::<String>("resume-from")
                .map(|s| s.parse::<Stage>())
                .transpose()?;
            let r = run.pipeline(resume)?;
            println!("accuracy {:.4} +- {:.4}", r.mean_acc, r.ci95);
        }
        other => unreachable!("unhandled subcommand {other}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let level = if matches.get_flag("quiet") {
        "warn"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
