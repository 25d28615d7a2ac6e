//! CSV export/import: training metrics, demo datasets, the α(t) sweep and
//! the verification report. Floats are rendered with the shortest exact
//! representation, so identical runs produce byte-identical files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::finetune::MetricsRow;

pub const METRICS_HEADER: [&str; 10] = [
    "iter",
    "return_mean",
    "return_std",
    "approx_kl",
    "clip_frac",
    "entropy",
    "sigma_mean",
    "alpha_mean_at_t0",
    "actor_lr",
    "critic_lr",
];

fn open_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("cannot write '{}': {e}", path.display())))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::Config(format!("flushing '{}': {e}", path.display())))
}

fn write_record<I, S>(w: &mut csv::Writer<std::fs::File>, path: &Path, record: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(record)
        .map_err(|e| Error::Config(format!("writing '{}': {e}", path.display())))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = open_writer(path)?;
    write_record(&mut w, path, METRICS_HEADER)?;
    for r in rows {
        write_record(
            &mut w,
            path,
            [
                r.iter.to_string(),
                r.return_mean.to_string(),
                r.return_std.to_string(),
                r.approx_kl.to_string(),
                r.clip_frac.to_string(),
                r.entropy.to_string(),
                r.sigma_mean.to_string(),
                r.alpha_mean_at_t0.to_string(),
                r.actor_lr.to_string(),
                r.critic_lr.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

pub fn write_pretrain_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = open_writer(path)?;
    write_record(&mut w, path, ["step", "fm_loss"])?;
    for (step, loss) in losses.iter().enumerate() {
        write_record(&mut w, path, [step.to_string(), loss.to_string()])?;
    }
    finish(w, path)
}

/// Header `obs_0..obs_{m−1}, act_0..act_{d−1}`, one row per pair.
pub fn write_demo_csv(path: &Path, observations: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<()> {
    if observations.len() != actions.len() {
        return Err(Error::Shape("demo export: observation/action count mismatch".into()));
    }
    if observations.is_empty() {
        return Err(Error::Shape("demo export: empty dataset".into()));
    }
    let obs_dim = observations[0].len();
    let act_dim = actions[0].len();
    let mut w = open_writer(path)?;
    let header: Vec<String> = (0..obs_dim)
        .map(|i| format!("obs_{i}"))
        .chain((0..act_dim).map(|i| format!("act_{i}")))
        .collect();
    write_record(&mut w, path, &header)?;
    for (obs, act) in observations.iter().zip(actions) {
        if obs.len() != obs_dim || act.len() != act_dim {
            return Err(Error::Shape("demo export: ragged rows".into()));
        }
        let record: Vec<String> =
            obs.iter().chain(act.iter()).map(|x| x.to_string()).collect();
        write_record(&mut w, path, &record)?;
    }
    finish(w, path)
}

/// Loads a demo CSV back into (observations, actions), validating the header.
pub fn load_demo_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read '{}': {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Config(format!("reading '{}': {e}", path.display())))?
        .clone();
    let obs_dim = header.iter().take_while(|h| h.starts_with("obs_")).count();
    let act_dim = header.len() - obs_dim;
    let expected: Vec<String> = (0..obs_dim)
        .map(|i| format!("obs_{i}"))
        .chain((0..act_dim).map(|i| format!("act_{i}")))
        .collect();
    if obs_dim == 0
        || act_dim == 0
        || header.iter().zip(&expected).any(|(got, want)| got != want)
    {
        return Err(Error::Config(format!(
            "'{}': expected header obs_0..obs_{{m-1}},act_0..act_{{d-1}}",
            path.display()
        )));
    }
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::Config(format!("reading '{}': {e}", path.display())))?;
        if record.len() != obs_dim + act_dim {
            return Err(Error::Config(format!(
                "'{}' row {}: expected {} fields, got {}",
                path.display(),
                row_no + 2,
                obs_dim + act_dim,
                record.len()
            )));
        }
        let values: Result<Vec<f64>> = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "'{}' row {}: '{field}' is not a number",
                        path.display(),
                        row_no + 2
                    ))
                })
            })
            .collect();
        let values = values?;
        observations.push(values[..obs_dim].to_vec());
        actions.push(values[obs_dim..].to_vec());
    }
    if observations.is_empty() {
        return Err(Error::Config(format!("'{}': no data rows", path.display())));
    }
    Ok((observations, actions))
}

/// One row per (training stage, t) pair of the scheduler diagnostic.
pub fn write_alpha_sweep_csv(path: &Path, rows: &[(u64, f64, f64)]) -> Result<()> {
    let mut w = open_writer(path)?;
    write_record(&mut w, path, ["training_stage", "t", "alpha_scaled"])?;
    for (stage, t, alpha) in rows {
        write_record(&mut w, path, [stage.to_string(), t.to_string(), alpha.to_string()])?;
    }
    finish(w, path)
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn write_check_csv(path: &Path, checks: &[CheckResult]) -> Result<()> {
    let mut w = open_writer(path)?;
    write_record(&mut w, path, ["check", "value", "threshold", "pass"])?;
    for c in checks {
        write_record(
            &mut w,
            path,
            [c.name.clone(), c.value.to_string(), c.threshold.to_string(), c.pass.to_string()],
        )?;
    }
    finish(w, path)
}
