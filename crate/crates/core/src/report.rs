//! CSV artifacts. Every file starts with a `# config_hash=<hex>` comment line.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{EvalResult, TradeoffRow};
use crate::fewshot::CostReport;

use ndarray::Array1;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(path.display().to_string(), format!("{other:?}")),
    }
}

/// A CSV writer whose first line is the config-hash comment.
pub struct CsvOut {
    path: std::path::PathBuf,
    inner: csv::Writer<File>,
}

impl CsvOut {
    pub fn create(path: &Path, config_hash: &str, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = File::create(path)?;
        writeln!(file, "# config_hash={config_hash}")?;
        let mut out = CsvOut {
            path: path.to_path_buf(),
            inner: csv::Writer::from_writer(file),
        };
        out.row(header.iter().copied())?;
        Ok(out)
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner
            .write_record(fields)
            .map_err(|e| csv_err(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Parsed CSV artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub config_hash: Option<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path)?;
    let config_hash = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .map(str::to_string);
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| csv_err(path, e))
        })
        .collect::<Result<_>>()?;
    Ok(CsvTable {
        config_hash,
        header,
        rows,
    })
}

pub fn write_episodes(path: &Path, config_hash: &str, result: &EvalResult) -> Result<()> {
    let mut out = CsvOut::create(path, config_hash, &["episode_id", "acc"])?;
    for (i, acc) in result.per_episode_acc.iter().enumerate() {
        out.row([i.to_string(), acc.to_string()])?;
    }
    out.finish()
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "name",
    "mean_acc",
    "ci95",
    "std_acc",
    "episodes",
    "n_way",
    "k_shot",
    "queries",
    "rho_infer",
    "ensemble",
    "eval_seed",
    "inference_seed",
];

pub fn summary_fields(name: &str, r: &EvalResult) -> Vec<String> {
    let c = &r.config;
    vec![
        name.to_string(),
        r.mean_acc.to_string(),
        r.ci95.to_string(),
        r.std_acc.to_string(),
        c.episodes.to_string(),
        c.n_way.to_string(),
        c.k_shot.to_string(),
        c.queries.to_string(),
        c.inference.mask_ratio.to_string(),
        c.inference.ensemble.to_string(),
        c.seed.to_string(),
        c.inference.seed.to_string(),
    ]
}

pub fn write_summary(
    path: &Path,
    config_hash: &str,
    results: &[(&str, &EvalResult)],
) -> Result<()> {
    let mut out = CsvOut::create(path, config_hash, &SUMMARY_HEADER)?;
    for (name, r) in results {
        out.row(summary_fields(name, r))?;
    }
    out.finish()
}

pub fn write_tradeoff(path: &Path, config_hash: &str, rows: &[TradeoffRow]) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        config_hash,
        &[
            "rho_infer",
            "P",
            "mean_acc",
            "ci95",
            "wallclock_ms",
            "wallclock_std_ms",
            "flops",
        ],
    )?;
    for r in rows {
        out.row([
            r.mask_ratio.to_string(),
            r.ensemble.to_string(),
            r.mean_acc.to_string(),
            r.ci95.to_string(),
            r.wallclock_ms.to_string(),
            r.wallclock_std_ms.to_string(),
            r.flops.to_string(),
        ])?;
    }
    out.finish()
}

pub fn write_cost(path: &Path, config_hash: &str, reports: &[(&str, CostReport)]) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        config_hash,
        &[
            "shape",
            "rho_infer",
            "P",
            "tokens_full",
            "tokens_visible",
            "flops_linear",
            "flops_quadratic",
            "flops_head",
            "flops_total",
            "ms_mean",
            "ms_std",
        ],
    )?;
    for (shape, c) in reports {
        let (mean, std) = c.wallclock.map_or((String::new(), String::new()), |w| {
            (w.mean_ms.to_string(), w.std_ms.to_string())
        });
        out.row([
            shape.to_string(),
            c.mask_ratio.to_string(),
            c.ensemble.to_string(),
            c.tokens_full.to_string(),
            c.tokens_visible.to_string(),
            c.flops_linear().to_string(),
            c.flops_quadratic().to_string(),
            c.flops_head.to_string(),
            c.flops_total.to_string(),
            mean,
            std,
        ])?;
    }
    out.finish()
}

/// `sample_id,label,f0..f{d-1}`; unlabeled samples get an empty label.
pub fn write_embeddings(
    path: &Path,
    config_hash: &str,
    dim: usize,
    rows: &[(u32, Option<u32>, Array1<f64>)],
) -> Result<()> {
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut out = CsvOut::create(path, config_hash, &header_refs)?;
    for (id, label, f) in rows {
        if f.len() != dim {
            return Err(Error::contract(format!(
                "embedding of sample {id} has {} components, expected {dim}",
                f.len()
            )));
        }
        let mut fields = vec![
            id.to_string(),
            label.map_or(String::new(), |l| l.to_string()),
        ];
        fields.extend(f.iter().map(|v| v.to_string()));
        out.row(fields)?;
    }
    out.finish()
}
