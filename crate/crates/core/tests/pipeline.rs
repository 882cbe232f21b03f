mod common;

use std::path::Path;

use common::tiny_run_text;
use tubefsl::checkpoint::load_bundle;
use tubefsl::config::{Provenance, RunConfig};
use tubefsl::pipeline::{Run, Stage};
use tubefsl::report::read_csv;
use tubefsl::Error;

fn run_in(dir: &Path) -> Run {
    Run::new(RunConfig::from_text(&tiny_run_text(dir)).unwrap()).unwrap()
}

fn csv_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in walk(root) {
        if entry.extension().is_some_and(|e| e == "csv") {
            out.push(entry);
        }
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn end_to_end_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_in(dir.path());
    let result = run.pipeline(None).unwrap();
    assert_eq!(result.per_episode_acc.len(), 5);
    assert!((0.0..=1.0).contains(&result.mean_acc));

    let l = &run.layout;
    for p in [
        l.teachers(),
        l.student(),
        l.resolved_config(),
        l.report("summary"),
        l.report("episodes"),
    ] {
        assert!(p.exists(), "{}", p.display());
    }
    for name in ["pretrain_rgb", "pretrain_flow", "pretrain_pose", "distill"] {
        assert!(l.log(name).exists(), "{name}");
    }
    // 12 source samples at batch 4: three logged steps per teacher
    assert_eq!(read_csv(&l.log("pretrain_rgb")).unwrap().rows.len(), 3);
    let distill = read_csv(&l.log("distill")).unwrap();
    assert_eq!(
        distill.header,
        ["step", "fd_rgb", "fd_flow", "fd_pose", "total"]
    );

    // every emitted file records the config hash
    for f in csv_files(dir.path()) {
        assert_eq!(
            read_csv(&f).unwrap().config_hash.as_deref(),
            Some(run.hash.as_str()),
            "{}",
            f.display()
        );
    }
    assert_eq!(load_bundle(&l.student()).unwrap().config_hash, run.hash);
    let manifest =
        std::fs::read_to_string(l.data_dir().join(tubefsl::dataset_io::MANIFEST)).unwrap();
    assert!(manifest.starts_with(&format!("# config_hash={}", run.hash)));
    let resolved = std::fs::read_to_string(l.resolved_config()).unwrap();
    assert!(resolved.starts_with(&format!("# config_hash={}", run.hash)));

    // the resolved config reproduces the same hash
    let reread = RunConfig::from_text(&resolved).unwrap();
    assert_eq!(reread.hash(), run.hash);

    let rows = run
        .tradeoff(&run.load_data().unwrap(), &run.load_student().unwrap())
        .unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        run.export_embeddings(&run.load_data().unwrap(), &run.load_student().unwrap())
            .unwrap(),
        12
    );
    let cost = run.cost().unwrap();
    assert_eq!(cost.len(), 4);
    assert!(cost
        .iter()
        .filter(|c| c.0 == "toy")
        .all(|c| c.1.wallclock.is_some()));
}

#[test]
fn identical_configs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_in(a.path()).pipeline(None).unwrap();
    run_in(b.path()).pipeline(None).unwrap();
    for rel in [
        "summary.csv",
        "episodes.csv",
        "checkpoints/teachers.bundle",
        "checkpoints/student.bundle",
        "logs/distill.csv",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn resuming_reuses_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_in(dir.path());
    let full = run.pipeline(None).unwrap();
    let teachers = std::fs::read(run.layout.teachers()).unwrap();
    let student = std::fs::read(run.layout.student()).unwrap();

    let resumed = run.pipeline(Some(Stage::Distill)).unwrap();
    assert_eq!(std::fs::read(run.layout.teachers()).unwrap(), teachers);
    assert_eq!(std::fs::read(run.layout.student()).unwrap(), student);
    assert_eq!(resumed, full);
    assert_eq!(run.pipeline(Some(Stage::FewshotEval)).unwrap(), full);
    assert_eq!("distill".parse::<Stage>().unwrap(), Stage::Distill);
    assert!("later".parse::<Stage>().is_err());
}

#[test]
fn missing_upstream_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_in(dir.path());
    let err = run.pipeline(Some(Stage::Pretrain)).err().unwrap();
    assert!(matches!(err, Error::Missing(_)), "{err}");
    assert!(err.to_string().contains("gen-data"));
    assert_eq!(err.exit_code(), 4);

    run.gen_data().unwrap();
    let err = run.pipeline(Some(Stage::Distill)).err().unwrap();
    assert!(
        matches!(err, Error::Missing(_)) && err.to_string().contains("pretrain"),
        "{err}"
    );
    let err = run.load_student().err().unwrap();
    assert!(err.to_string().contains("distill"), "{err}");

    // a teacher bundle without a student is not a student checkpoint
    let ds = run.load_data().unwrap();
    let teachers = run.pretrain(&ds).unwrap();
    run.save(&teachers, &run.layout.student()).unwrap();
    assert!(matches!(run.load_student(), Err(Error::Missing(_))));
}

#[test]
fn config_layering_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(&path, "# comment\nseed = 4\nepisodes = 50 # trailing\n").unwrap();
    let c = RunConfig::load(Some(&path), &[("episodes".into(), "70".into())]).unwrap();
    assert_eq!(c.get("seed"), "4");
    assert_eq!(c.get("episodes"), "70");
    assert_eq!(c.provenance("seed"), Provenance::File);
    assert_eq!(c.provenance("episodes"), Provenance::Flag);
    assert_eq!(c.provenance("nway"), Provenance::Default);

    // output location does not change the hash, results-shaping keys do
    let base = RunConfig::default();
    let mut moved = base.clone();
    moved
        .set("out_dir", "/elsewhere", Provenance::Flag)
        .unwrap();
    assert_eq!(moved.hash(), base.hash());
    let mut reseeded = base.clone();
    reseeded.set("seed", "1", Provenance::Flag).unwrap();
    assert_ne!(reseeded.hash(), base.hash());
    // numeric spelling is canonicalised
    let mut spelled = base.clone();
    spelled.set("rho_infer", "0.750", Provenance::Flag).unwrap();
    assert_eq!(spelled.hash(), base.hash());

    let err = RunConfig::from_text("nonsense = 1").err().unwrap();
    assert!(matches!(&err, Error::Config { key, .. } if key == "nonsense"));
    let err = RunConfig::from_text("rho_infer = 1.0").err().unwrap();
    assert!(matches!(&err, Error::Config { key, .. } if key == "rho_infer"));
    assert_eq!(err.exit_code(), 2);
    assert!(RunConfig::from_text("modalities = flow,pose")
        .unwrap()
        .pipeline()
        .is_err());
    assert!(matches!(
        RunConfig::load(Some(&dir.path().join("absent.conf")), &[]),
        Err(Error::Missing(_))
    ));
}
