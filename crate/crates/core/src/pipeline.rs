//! Stage runner: gen-data, pretrain, distill and fewshot-eval over one output
//! directory, with checkpoints between stages.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::ablation::{run_ablations, AblationReport, PipelineConfig, Variant};
use crate::checkpoint::{load_bundle, save_bundle, ModelBundle};
use crate::config::RunConfig;
use crate::data::{generate_dataset, Dataset, ModalityKind, MultimodalSample, Split};
use crate::dataset_io::{load_dataset, save_dataset};
use crate::distill::run_distill;
use crate::error::{Error, Result};
use crate::eval::{
    embeddings, run_evaluation, tradeoff_sweep, EvalResult, RuntimeOptions, TradeoffRow,
};
use crate::fewshot::{
    count_flops, measure_runtime, CostReport, FewShotHead, FlopsShape, InferenceConfig,
};
use crate::masking::TokenGrid;
use crate::nn::{Encoder, Linear};
use crate::pretrain::{init_model, train};
use crate::report::{self, CsvOut};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    Pretrain,
    Distill,
    FewshotEval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::GenData,
        Stage::Pretrain,
        Stage::Distill,
        Stage::FewshotEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Pretrain => "pretrain",
            Stage::Distill => "distill",
            Stage::FewshotEval => "fewshot-eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("resume_from", format!("unknown stage `{s}`; expected one of gen-data, pretrain, distill, fewshot-eval")))
    }
}

/// File locations inside an output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn teachers(&self) -> PathBuf {
        self.root.join("checkpoints").join("teachers.bundle")
    }

    pub fn student(&self) -> PathBuf {
        self.root.join("checkpoints").join("student.bundle")
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.csv"))
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved.txt")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.csv"))
    }
}

/// One configured run over one output directory.
pub struct Run {
    pub config: RunConfig,
    pub pipeline: PipelineConfig,
    pub hash: String,
    pub layout: Layout,
}

fn missing_hint(what: &Path, stage: Stage) -> impl FnOnce(Error) -> Error + '_ {
    move |e| {
        match e {
        Error::Missing(_) => Error::Missing(format!(
            "{} not found; run `tubefsl {stage}` (or `tubefsl pipeline`) with the same --out-dir first",
            what.display()
        )),
        other => other,
    }
    }
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self> {
        let pipeline = config.pipeline()?;
        Ok(Run {
            hash: config.hash(),
            layout: Layout::new(config.out_dir()),
            pipeline,
            config,
        })
    }

    fn write_resolved_config(&self) -> Result<()> {
        std::fs::create_dir_all(&self.layout.root)?;
        let text = format!("# config_hash={}\n{}", self.hash, self.config.to_text());
        std::fs::write(self.layout.resolved_config(), text)?;
        Ok(())
    }

    fn check_hash(&self, what: &Path, recorded: Option<&str>) {
        if let Some(h) = recorded.filter(|h| *h != self.hash) {
            log::warn!(
                "{} was produced under config hash {h}, current is {}",
                what.display(),
                self.hash
            );
        }
    }

    pub fn gen_data(&self) -> Result<Dataset> {
        self.write_resolved_config()?;
        let dataset = generate_dataset(&self.pipeline.dataset)?;
        save_dataset(&dataset, &self.layout.data_dir(), &self.hash)?;
        log::info!(
            "wrote {} source, {} unlabeled target and {} labeled target samples to {}",
            dataset.source.len(),
            dataset.target_unlabeled.len(),
            dataset.target_labeled.len(),
            self.layout.data_dir().display()
        );
        Ok(dataset)
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let dir = self.layout.data_dir();
        let loaded = load_dataset(&dir).map_err(missing_hint(&dir, Stage::GenData))?;
        self.check_hash(&dir, loaded.config_hash.as_deref());
        Ok(loaded.dataset)
    }

    /// Trains teachers for `kinds` and logs their per-step losses.
    pub fn train_teachers(&self, dataset: &Dataset, kinds: &[ModalityKind]) -> Result<ModelBundle> {
        self.write_resolved_config()?;
        let mut bundle = ModelBundle {
            encoder_config: self.pipeline.encoder,
            frames: dataset.spec.frames,
            n_source_classes: dataset.spec.n_source_classes as usize,
            teachers: Default::default(),
            student: None,
        };
        for &kind in kinds {
            let cfg = self.pipeline.pretrain_config(kind)?;
            let mut log = CsvOut::create(
                &self.layout.log(&format!("pretrain_{kind}")),
                &self.hash,
                &["step", "recon_source", "recon_target", "ce_source", "total"],
            )?;
            let mut log_err = Ok(());
            let start = Instant::now();
            let model = init_model(dataset, &self.pipeline.encoder, cfg)?;
            let model = train(
                model,
                &dataset.source,
                &dataset.target_unlabeled,
                cfg,
                |step, b| {
                    if log_err.is_ok() {
                        log_err = log.row([
                            step.to_string(),
                            b.recon_source.to_string(),
                            b.recon_target.to_string(),
                            b.ce_source.to_string(),
                            b.total.to_string(),
                        ]);
                    }
                    if step % 50 == 0 {
                        log::info!("pretrain {kind} step {step}: total {:.5}", b.total);
                    }
                },
            )?;
            log_err?;
            log.finish()?;
            log::info!("pretrained {kind} teacher in {:.1?}", start.elapsed());
            bundle.teachers.insert(kind, model);
        }
        Ok(bundle)
    }

    /// Trains every teacher and saves them to the layout's teacher checkpoint.
    pub fn pretrain(&self, dataset: &Dataset) -> Result<ModelBundle> {
        let bundle = self.train_teachers(dataset, &ModalityKind::ALL)?;
        self.save(&bundle, &self.layout.teachers())?;
        Ok(bundle)
    }

    pub fn save(&self, bundle: &ModelBundle, path: &Path) -> Result<()> {
        save_bundle(bundle, path, &self.hash)
    }

    /// Loads a bundle; a missing file names the stage that produces it.
    pub fn load(&self, path: &Path, producer: Stage) -> Result<ModelBundle> {
        let loaded = load_bundle(path).map_err(missing_hint(path, producer))?;
        self.check_hash(path, Some(&loaded.config_hash));
        Ok(loaded.bundle)
    }

    pub fn load_teachers(&self) -> Result<ModelBundle> {
        self.load(&self.layout.teachers(), Stage::Pretrain)
    }

    /// Distils the configured teachers into the student and saves the result.
    pub fn distill(&self, dataset: &Dataset, teachers: &ModelBundle) -> Result<ModelBundle> {
        let bundle = self.train_student(dataset, teachers)?;
        self.save(&bundle, &self.layout.student())?;
        Ok(bundle)
    }

    /// Distils the configured teachers of `teachers` into a fresh student.
    pub fn train_student(&self, dataset: &Dataset, teachers: &ModelBundle) -> Result<ModelBundle> {
        self.write_resolved_config()?;
        let cfg = &self.pipeline.distill;
        let encoders = teachers.teacher_encoders();
        for m in &cfg.modalities {
            if !encoders.contains_key(m) {
                return Err(Error::Missing(format!(
                    "{m} teacher is not in {}; rerun `tubefsl pretrain`",
                    self.layout.teachers().display()
                )));
            }
        }
        let used: std::collections::BTreeMap<ModalityKind, Encoder> = encoders
            .into_iter()
            .filter(|(k, _)| cfg.modalities.contains(k))
            .collect();
        let mut header = vec!["step".to_string()];
        header.extend(cfg.modalities.iter().map(|m| format!("fd_{m}")));
        header.push("total".into());
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut log = CsvOut::create(&self.layout.log("distill"), &self.hash, &header_refs)?;
        let mut log_err = Ok(());
        let start = Instant::now();
        let student = run_distill(&used, &dataset.target_unlabeled, cfg, |step, b| {
            if log_err.is_ok() {
                let mut row = vec![step.to_string()];
                row.extend(b.per_modality.values().map(f64::to_string));
                row.push(b.total.to_string());
                log_err = log.row(row);
            }
            if step % 50 == 0 {
                log::info!("distill step {step}: total {:.5}", b.total);
            }
        })?;
        log_err?;
        log.finish()?;
        log::info!("distilled student in {:.1?}", start.elapsed());
        Ok(ModelBundle {
            student: Some(student),
            ..teachers.clone()
        })
    }

    pub fn load_student(&self) -> Result<ModelBundle> {
        let bundle = self.load(&self.layout.student(), Stage::Distill)?;
        bundle.student()?;
        Ok(bundle)
    }

    /// Episodic evaluation of the student; writes episodes.csv and summary.csv.
    pub fn fewshot_eval(&self, dataset: &Dataset, bundle: &ModelBundle) -> Result<EvalResult> {
        self.write_resolved_config()?;
        let student = bundle.student()?;
        let start = Instant::now();
        let result = run_evaluation(
            &student.encoder,
            &dataset.target_labeled,
            &self.pipeline.eval,
        )?;
        log::info!(
            "{}-way {}-shot over {} episodes: {:.4} +- {:.4} ({:.1?})",
            self.pipeline.eval.n_way,
            self.pipeline.eval.k_shot,
            self.pipeline.eval.episodes,
            result.mean_acc,
            result.ci95,
            start.elapsed()
        );
        report::write_episodes(&self.layout.report("episodes"), &self.hash, &result)?;
        report::write_summary(
            &self.layout.report("summary"),
            &self.hash,
            &[("student", &result)],
        )?;
        Ok(result)
    }

    /// Runs every stage from `resume_from` on; earlier stages are loaded from disk.
    pub fn pipeline(&self, resume_from: Option<Stage>) -> Result<EvalResult> {
        let from = resume_from.unwrap_or(Stage::GenData);
        let dataset = if from <= Stage::GenData {
            self.gen_data()?
        } else {
            self.load_data()?
        };
        let bundle = match from {
            Stage::GenData | Stage::Pretrain => {
                let teachers = self.pretrain(&dataset)?;
                self.distill(&dataset, &teachers)?
            }
            Stage::Distill => self.distill(&dataset, &self.load_teachers()?)?,
            Stage::FewshotEval => self.load_student()?,
        };
        self.fewshot_eval(&dataset, &bundle)
    }

    /// Accuracy, wall-clock and FLOPs over the configured ratio and ensemble grid.
    pub fn tradeoff(&self, dataset: &Dataset, bundle: &ModelBundle) -> Result<Vec<TradeoffRow>> {
        self.write_resolved_config()?;
        let student = bundle.student()?;
        let rows = tradeoff_sweep(
            &student.encoder,
            &dataset.target_labeled,
            &self.config.list::<f64>("tradeoff_rhos"),
            &self.config.list::<usize>("tradeoff_ensembles"),
            &self.pipeline.eval,
            self.runtime_options(),
        )?;
        report::write_tradeoff(&self.layout.report("tradeoff"), &self.hash, &rows)?;
        Ok(rows)
    }

    fn runtime_options(&self) -> RuntimeOptions {
        RuntimeOptions {
            iters: self.config.usize("runtime_iters"),
            warmup: self.config.usize("runtime_warmup"),
        }
    }

    /// Analytic cost at ViT-S shape and at the configured toy shape, the latter
    /// with measured wall-clock on a freshly initialised encoder.
    pub fn cost(&self) -> Result<Vec<(&'static str, CostReport)>> {
        self.write_resolved_config()?;
        let ds = &self.pipeline.dataset;
        let infer = self.pipeline.eval.inference;
        let n_way = self.pipeline.eval.n_way;
        let settings = [(0.0, 1), (infer.mask_ratio, infer.ensemble)];
        let mut reports = Vec::new();

        let vit_s_grid = TokenGrid::new(16, 2, 14, 14)?;
        for &(rho, p) in &settings {
            reports.push((
                "vit_s",
                count_flops(&FlopsShape::vit_s(), vit_s_grid, rho, p)?,
            ));
        }

        let spec = ds.modality(ModalityKind::Rgb)?;
        let mut rng = seed::rng_for(self.config.seed(), &[seed::tag("cost-probe")]);
        let encoder = Encoder::new(&self.pipeline.encoder, spec, ds.frames, &mut rng)?;
        let head = FewShotHead {
            linear: Linear::new(&mut rng, encoder.embed_dim(), n_way),
        };
        let probe_ds = crate::data::DatasetSpec {
            n_source_classes: 1,
            n_target_classes: 1,
            target_class_offset: 1,
            samples_per_class: 1,
            ..ds.clone()
        };
        let probe = generate_dataset(&probe_ds)?;
        let clip = probe.source[0].clip(ModalityKind::Rgb)?;
        let shape = FlopsShape::of_encoder(&encoder, n_way);
        let opts = self.runtime_options();
        for &(rho, p) in &settings {
            let mut c = count_flops(&shape, encoder.grid, rho, p)?;
            let cfg = InferenceConfig {
                mask_ratio: rho,
                ensemble: p,
                seed: self.config.seed(),
            };
            c.wallclock = Some(measure_runtime(
                &encoder,
                &head,
                clip,
                &cfg,
                opts.iters,
                opts.warmup,
            )?);
            reports.push(("toy", c));
        }
        report::write_cost(&self.layout.report("cost"), &self.hash, &reports)?;
        Ok(reports)
    }

    /// The ablation study over the configured seeds and variants.
    pub fn ablate(&self) -> Result<AblationReport> {
        self.write_resolved_config()?;
        let mut cfg = self.pipeline.clone();
        cfg.eval.episodes = self.config.usize("ablation_episodes");
        let seeds: Vec<u64> = self.config.list("ablation_seeds");
        let variants: Vec<Variant> = self.config.list("ablation_variants");
        let report = run_ablations(&cfg, &seeds, &variants, |r| {
            log::info!(
                "{} seed {}: {:.4} +- {:.4}",
                r.variant,
                r.seed,
                r.result.mean_acc,
                r.result.ci95
            )
        })?;
        write_ablation(&self.layout.report("ablation"), &self.hash, &report)?;
        Ok(report)
    }

    /// Unmasked pooled features of the configured split.
    pub fn export_embeddings(&self, dataset: &Dataset, bundle: &ModelBundle) -> Result<usize> {
        self.write_resolved_config()?;
        let split = Split::parse(self.config.get("embed_split")).expect("validated split");
        let samples: &[MultimodalSample] = match split {
            Split::Source => &dataset.source,
            Split::TargetUnlabeled => &dataset.target_unlabeled,
            Split::TargetLabeled => &dataset.target_labeled,
        };
        let which = self.config.get("embed_encoder");
        let encoder = if which == "student" {
            &bundle.student()?.encoder
        } else {
            let kind: ModalityKind = which.parse()?;
            &bundle
                .teachers
                .get(&kind)
                .ok_or_else(|| Error::Missing(format!("the bundle has no {kind} teacher")))?
                .encoder
        };
        let rows = embeddings(encoder, samples)?;
        report::write_embeddings(
            &self.layout.report("embeddings"),
            &self.hash,
            encoder.embed_dim(),
            &rows,
        )?;
        Ok(rows.len())
    }
}

pub fn write_ablation(path: &Path, config_hash: &str, report: &AblationReport) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        config_hash,
        &["kind", "variant", "seed", "mean_acc", "ci95", "episodes"],
    )?;
    for r in &report.runs {
        out.row([
            "run".to_string(),
            r.variant.to_string(),
            r.seed.to_string(),
            r.result.mean_acc.to_string(),
            r.result.ci95.to_string(),
            r.result.per_episode_acc.len().to_string(),
        ])?;
    }
    for s in &report.summaries {
        out.row([
            "pooled".to_string(),
            s.variant.to_string(),
            String::new(),
            s.mean_acc.to_string(),
            s.ci95.to_string(),
            s.episodes.to_string(),
        ])?;
    }
    for d in &report.deltas {
        out.row([
            "delta_full_minus".to_string(),
            d.variant.to_string(),
            String::new(),
            d.mean_delta.to_string(),
            d.ci95.to_string(),
            d.pairs.to_string(),
        ])?;
    }
    out.finish()
}
