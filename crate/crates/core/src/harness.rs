//! Experiment drivers behind the command-line subcommands. Every driver
//! takes a validated config, a base directory for relative data paths and
//! an output directory, and writes only inside the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{
    initial_images, rog_attack_with, train_autoencoder, AttackConfig, DummyUpdate, Observation, Projection,
    ProjectionConfig,
};
use crate::autograd::Tensor;
use crate::config::{ExperimentConfig, Splits};
use crate::container::{self, CaptureFile, Checkpoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fedsim::{capture_victim, dirichlet_partition, rounds_csv, Capture, FedConfig, Federation, Partition, RoundRecord};
use crate::io::{self, OutOfRange};
use crate::metrics::{batch_report, fmt_db, jaccard_text, QualityReport, RankBy};
use crate::models::Model;
use crate::obfuscate::ObfuscationSpec;
use crate::params::ParamVector;
use crate::rng::derive_stream;

pub const SWEEP_CSV_HEADER: &str = "batch,psnr_mean,ssim_mean,grad_dist_final";

/// Model, data splits and client partition shared by every driver.
pub struct Setup {
    pub model: Model,
    pub splits: Splits,
    pub partition: Partition,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, base: &Path) -> Result<Self> {
        let model = Model::new(cfg.model.clone())?;
        let data = cfg.data.load(base)?;
        if data.image_shape() != cfg.model.input {
            return Err(Error::Config(format!(
                "dataset images {:?} do not fit model input {:?}",
                data.image_shape(),
                cfg.model.input
            )));
        }
        let splits = cfg.data.split(&data)?;
        let partition = dirichlet_partition(
            &splits.train.labels,
            cfg.federation.clients,
            cfg.federation.alpha,
            cfg.seed,
        )?;
        Ok(Self {
            model,
            splits,
            partition,
        })
    }

    pub fn federation<'a>(&'a self, cfg: &'a ExperimentConfig) -> Federation<'a> {
        self.federation_with(cfg, &cfg.federation)
    }

    fn federation_with<'a>(&'a self, cfg: &'a ExperimentConfig, fed: &'a FedConfig) -> Federation<'a> {
        Federation {
            model: &self.model,
            train: &self.splits.train,
            test: &self.splits.test,
            partition: &self.partition,
            fed,
            obfuscation: &cfg.obfuscation,
            seed: cfg.seed,
        }
    }

    /// `count` examples of a client's shard starting at `offset`, wrapping.
    pub fn victim(&self, client: usize, offset: usize, count: usize) -> Result<Dataset> {
        let shard = self
            .partition
            .assignment
            .get(client)
            .ok_or_else(|| Error::Config(format!("client {client} of {}", self.partition.clients)))?;
        if shard.len() < count {
            return Err(Error::Config(format!(
                "client {client} holds {} examples, {count} requested",
                shard.len()
            )));
        }
        let idx: Vec<usize> = (0..count).map(|i| shard[(offset + i) % shard.len()]).collect();
        self.splits.train.subset(&idx)
    }
}

pub fn checkpoint_path(out: &Path, round: usize) -> PathBuf {
    out.join("checkpoints").join(format!("round_{round}.gobf"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    io::write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn run_partition(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<Partition> {
    let setup = Setup::new(cfg, base)?;
    write_json(&out.join("partition.json"), &setup.partition)?;
    log::info!(
        "partitioned {} examples over {} clients",
        setup.splits.train.len(),
        cfg.federation.clients
    );
    Ok(setup.partition)
}

/// Train the federation, saving `checkpoints/round_{k}.gobf` and `rounds.csv`.
pub fn run_fedtrain(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<Vec<RoundRecord>> {
    let setup = Setup::new(cfg, base)?;
    io::create_dir(&out.join("checkpoints"))?;
    let init = setup.model.init_params(cfg.seed);
    let records = setup.federation(cfg).run(&init, |round, params| {
        let path = checkpoint_path(out, round);
        container::save_checkpoint(
            &path,
            &Checkpoint {
                model: cfg.model.clone(),
                round,
                params: params.clone(),
            },
        )?;
        Ok(Some(format!("checkpoints/round_{round}.gobf")))
    })?;
    io::write_text(&out.join("rounds.csv"), &rounds_csv(&records))?;
    write_json(&out.join("partition.json"), &setup.partition)?;
    Ok(records)
}

/// Record the configured client's update from a saved checkpoint. The
/// observation and the private batch go to separate files.
pub fn run_capture(cfg: &ExperimentConfig, base: &Path, out: &Path, checkpoint: Option<&Path>) -> Result<Capture> {
    let c = &cfg.capture;
    let path = checkpoint.map_or_else(|| checkpoint_path(out, c.round), Path::to_path_buf);
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} not found; run fedtrain with round {} among the checkpoints",
            path.display(),
            c.round
        )));
    }
    let ck = container::load_checkpoint(&path)?;
    if ck.model != cfg.model {
        return Err(Error::Config("checkpoint model differs from the configured model".into()));
    }
    let setup = Setup::new(cfg, base)?;
    let victim = setup.victim(c.client, 0, c.examples)?;
    let fed = c.federation(&cfg.federation);
    let capture = capture_victim(
        &setup.model,
        &ck.params,
        &victim,
        &fed,
        &cfg.obfuscation,
        cfg.seed,
        ck.round,
        c.client,
    )?;
    container::save_capture(&out.join("capture.gobf"), &CaptureFile::from_capture(&cfg.model, &capture))?;
    container::save_ground_truth(&out.join("ground_truth.gobf"), &capture.images, &capture.labels)?;
    Ok(capture)
}

/// Build the attack projection; autoencoders train on `aux`.
pub fn build_projection(
    proj: &ProjectionConfig,
    image: [usize; 3],
    aux: Option<&Dataset>,
    seed: u64,
) -> Result<Projection> {
    match proj {
        ProjectionConfig::Identity => Ok(Projection::identity(image)),
        ProjectionConfig::Bicubic { factor } => Projection::bicubic(image, *factor),
        ProjectionConfig::Autoencoder { d_z, epochs } => {
            let aux = aux.ok_or_else(|| {
                Error::Config("autoencoder projection needs data.aux_examples > 0".into())
            })?;
            let (ae, _) = train_autoencoder(aux, None, *d_z, *epochs, seed)?;
            Ok(Projection::Autoencoder(Box::new(ae)))
        }
    }
}

pub fn projection_label(p: &ProjectionConfig) -> String {
    match p {
        ProjectionConfig::Identity => "identity".into(),
        ProjectionConfig::Bicubic { factor } => format!("bicubic{factor}"),
        ProjectionConfig::Autoencoder { d_z, .. } => format!("autoencoder{d_z}"),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub attack: AttackConfig,
    pub obfuscation: ObfuscationSpec,
    pub round: usize,
    pub d_z: usize,
    pub update: DummyUpdate,
    pub initial_distance: Option<f64>,
    pub min_distance: Option<f64>,
    pub final_distance: Option<f64>,
    pub zero_norm_fallbacks: usize,
    /// Only present when ground truth was supplied.
    pub quality: Option<QualityReport>,
    pub init_quality: Option<QualityReport>,
}

fn write_images(dir: &Path, batch: &Tensor) -> Result<()> {
    io::create_dir(dir)?;
    let n = batch.shape()[0];
    for i in 0..n {
        let img = batch.slice_outer(i, i + 1)?.reshape(&batch.shape()[1..])?;
        let fmt = io::format_for(&img);
        let ext = if fmt == io::ImageFormat::Ppm { "ppm" } else { "pgm" };
        io::write_image(&img, &dir.join(format!("img_{i:03}.{ext}")), fmt, OutOfRange::Clamp)?;
    }
    Ok(())
}

/// Attack one observation and write `init/`, `recon/`, `loss_curve.csv`
/// and `report.json` into `out`.
pub fn attack_observation(
    model: &Model,
    projection: &Projection,
    obs: &Observation<'_>,
    attack: &AttackConfig,
    round: usize,
    truth: Option<&Tensor>,
    out: &Path,
) -> Result<AttackReport> {
    let n = obs.labels.len();
    let init = projection
        .decode(&projection.encode(&initial_images(attack, n, projection.image()))?)?
        .map(|v| v.clamp(0.0, 1.0));
    let outcome = rog_attack_with(model, projection, obs, attack, |it, d| {
        if it % 50 == 0 {
            log::debug!("iteration {it}: gradient distance {d:.6e}");
        }
    })?;
    write_images(&out.join("init"), &init)?;
    write_images(&out.join("recon"), &outcome.images)?;
    io::write_text(&out.join("loss_curve.csv"), &outcome.loss_curve_csv())?;
    let (quality, init_quality) = match truth {
        Some(t) => (
            Some(batch_report(t, &outcome.images, RankBy::Psnr)?),
            Some(batch_report(t, &init, RankBy::Psnr)?),
        ),
        None => (None, None),
    };
    if let Some(q) = &quality {
        io::write_text(&out.join("metrics.csv"), &q.csv())?;
    }
    let report = AttackReport {
        attack: attack.clone(),
        obfuscation: obs.obfuscation.clone(),
        round,
        d_z: outcome.d_z,
        update: outcome.update,
        initial_distance: outcome.initial_distance(),
        min_distance: outcome.min_distance(),
        final_distance: outcome.final_distance(),
        zero_norm_fallbacks: outcome.zero_norm_fallbacks,
        quality,
        init_quality,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Run the attack on a saved capture. A checkpoint, when given, must hold
/// the same global model the capture was taken from.
pub fn run_attack(
    cfg: &ExperimentConfig,
    base: &Path,
    out: &Path,
    capture: &Path,
    checkpoint: Option<&Path>,
    ground_truth: Option<&Path>,
) -> Result<AttackReport> {
    let cap = container::load_capture(capture)?;
    let mut params = cap.params.clone();
    if let Some(path) = checkpoint {
        let ck = container::load_checkpoint(path)?;
        if ck.model != cap.model || ck.round != cap.round {
            return Err(Error::Config(format!(
                "checkpoint is round {} but the capture was taken at round {}",
                ck.round, cap.round
            )));
        }
        params = ck.params;
    }
    let model = Model::new(cap.model.clone())?;
    let truth = ground_truth.map(container::load_ground_truth).transpose()?;
    if let Some((t, labels)) = &truth {
        if *labels != cap.labels {
            return Err(Error::Config("ground truth labels differ from the capture".into()));
        }
        if t.shape()[0] != cap.labels.len() {
            return Err(Error::Config("ground truth batch differs from the capture".into()));
        }
    }
    let aux = match cfg.attack.projection {
        ProjectionConfig::Autoencoder { .. } => Setup::new(cfg, base)?.splits.aux,
        _ => None,
    };
    let projection = build_projection(&cfg.attack.projection, cap.model.input, aux.as_ref(), cfg.attack.seed)?;
    let obs = Observation {
        params: &params,
        gradient: &cap.gradient,
        labels: &cap.labels,
        eta: cap.eta,
        tau: cap.tau,
        batch: cap.batch,
        obfuscation: &cap.obfuscation,
    };
    attack_observation(&model, &projection, &obs, &cfg.attack, cap.round, truth.as_ref().map(|t| &t.0), out)
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if matches!(path.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                files.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(files)
}

/// Compare two directories of same-named images.
pub fn eval_image_dirs(originals: &Path, recon: &Path, rank_by: RankBy) -> Result<QualityReport> {
    let a = image_files(originals)?;
    let b = image_files(recon)?;
    if a.is_empty() {
        return Err(Error::Empty("image directory"));
    }
    if a.keys().ne(b.keys()) {
        return Err(Error::Config(format!(
            "{} and {} hold different file names",
            originals.display(),
            recon.display()
        )));
    }
    let load = |m: &BTreeMap<String, PathBuf>| {
        let imgs = m.values().map(|p| io::read_pnm(p)).collect::<Result<Vec<_>>>()?;
        Tensor::stack(&imgs)
    };
    batch_report(&load(&a)?, &load(&b)?, rank_by)
}

pub fn eval_tag_files(a: &Path, b: &Path) -> Result<f64> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    Ok(jaccard_text(&read(a)?, &read(b)?))
}

/// One grid point of a sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepCell {
    pub batch: usize,
    pub round: usize,
    pub projection: ProjectionConfig,
    pub obfuscation: ObfuscationSpec,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub grad_dist_final: f64,
}

/// Cells in CSV order: rounds, then obfuscations, projections, batch sizes.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("config has no sweep section".into()))?;
    let projections = if sweep.projections.is_empty() {
        vec![cfg.attack.projection.clone()]
    } else {
        sweep.projections.clone()
    };
    let obfuscations = if sweep.obfuscations.is_empty() {
        vec![cfg.obfuscation.clone()]
    } else {
        sweep.obfuscations.clone()
    };
    let mut cells = Vec::new();
    for &round in &sweep.rounds {
        for obfuscation in &obfuscations {
            for projection in &projections {
                for &batch in &sweep.batch_sizes {
                    cells.push(SweepCell {
                        batch,
                        round,
                        projection: projection.clone(),
                        obfuscation: obfuscation.clone(),
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Sweep CSV. Columns beyond the fixed four appear only for axes that vary.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let varies = |f: &dyn Fn(&SweepRow) -> String| rows.iter().any(|r| f(r) != f(&rows[0]));
    let round = |r: &SweepRow| r.cell.round.to_string();
    let proj = |r: &SweepRow| projection_label(&r.cell.projection);
    let obf = |r: &SweepRow| r.cell.obfuscation.label();
    let extra: Vec<(&str, &dyn Fn(&SweepRow) -> String)> = [
        ("round", &round as &dyn Fn(&SweepRow) -> String),
        ("projection", &proj),
        ("obfuscation", &obf),
    ]
    .into_iter()
    .filter(|(_, f)| !rows.is_empty() && varies(*f))
    .collect();

    let mut out = String::from(SWEEP_CSV_HEADER);
    for (name, _) in &extra {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}",
            r.cell.batch,
            fmt_db(r.psnr_mean),
            r.ssim_mean,
            r.grad_dist_final
        ));
        for (_, f) in &extra {
            out.push(',');
            out.push_str(&f(r));
        }
        out.push('\n');
    }
    out
}

/// Global parameters at every requested round, training once up to the last.
fn round_params(setup: &Setup, cfg: &ExperimentConfig, rounds: &[usize]) -> Result<BTreeMap<usize, ParamVector>> {
    let init = setup.model.init_params(cfg.seed);
    let last = rounds.iter().copied().max().unwrap_or(0);
    let fed = FedConfig {
        rounds: last,
        checkpoints: rounds.to_vec(),
        ..cfg.federation.clone()
    };
    let mut saved = BTreeMap::new();
    if last == 0 {
        saved.insert(0, init);
        return Ok(saved);
    }
    setup.federation_with(cfg, &fed).run(&init, |round, params| {
        saved.insert(round, params.clone());
        Ok(None)
    })?;
    Ok(saved)
}

fn run_cell(
    setup: &Setup,
    cfg: &ExperimentConfig,
    cell: &SweepCell,
    params: &ParamVector,
    projection: &Projection,
    dir: &Path,
) -> Result<SweepRow> {
    let sweep = cfg.sweep.as_ref().expect("validated sweep");
    let c = &cfg.capture;
    let fed = FedConfig {
        tau: c.tau.unwrap_or(cfg.federation.tau),
        batch: c.batch.unwrap_or(cell.batch),
        ..cfg.federation.clone()
    };
    let (mut psnr, mut ssim, mut dist) = (0.0, 0.0, 0.0);
    for r in 0..sweep.repeats {
        let seed = derive_stream(cfg.seed, "sweep-repeat", r as u64).next_raw();
        let victim = setup.victim(c.client, r * cell.batch, cell.batch)?;
        let cap = capture_victim(
            &setup.model,
            params,
            &victim,
            &fed,
            &cell.obfuscation,
            seed,
            cell.round,
            c.client,
        )?;
        let attack = AttackConfig {
            projection: cell.projection.clone(),
            seed,
            ..cfg.attack.clone()
        };
        let obs = Observation {
            params: &cap.params,
            gradient: &cap.gradient,
            labels: &cap.labels,
            eta: cap.eta,
            tau: cap.tau,
            batch: cap.batch,
            obfuscation: &cap.obfuscation,
        };
        let report = attack_observation(
            &setup.model,
            projection,
            &obs,
            &attack,
            cell.round,
            Some(&cap.images),
            &dir.join(format!("repeat_{r}")),
        )?;
        let q = report.quality.expect("ground truth supplied");
        psnr += q.psnr_db.mean;
        ssim += q.ssim.mean;
        dist += report.final_distance.unwrap_or(f64::NAN);
    }
    let n = sweep.repeats as f64;
    write_json(&dir.join("cell.json"), cell)?;
    Ok(SweepRow {
        cell: cell.clone(),
        psnr_mean: psnr / n,
        ssim_mean: ssim / n,
        grad_dist_final: dist / n,
    })
}

/// Run every sweep cell on a pool of `threads` workers (0 means all cores)
/// and write `sweep.csv` plus one `cell_{i}` directory per cell. Output
/// bytes do not depend on the thread count.
pub fn run_sweep(cfg: &ExperimentConfig, base: &Path, out: &Path, threads: usize) -> Result<Vec<SweepRow>> {
    let cells = sweep_cells(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let setup = Setup::new(cfg, base)?;
        let sweep = cfg.sweep.as_ref().expect("sweep_cells checked");
        let params = round_params(&setup, cfg, &sweep.rounds)?;

        let mut projections: Vec<(ProjectionConfig, Projection)> = Vec::new();
        for cell in &cells {
            if !projections.iter().any(|(p, _)| *p == cell.projection) {
                let built = build_projection(
                    &cell.projection,
                    cfg.model.input,
                    setup.splits.aux.as_ref(),
                    cfg.attack.seed,
                )?;
                projections.push((cell.projection.clone(), built));
            }
        }

        let rows = cells
            .par_iter()
            .enumerate()
            .map(|(i, cell)| {
                let projection = &projections.iter().find(|(p, _)| *p == cell.projection).expect("built").1;
                let dir = out.join(format!("cell_{i:03}"));
                log::info!(
                    "cell {i}: batch {} round {} {} {}",
                    cell.batch,
                    cell.round,
                    projection_label(&cell.projection),
                    cell.obfuscation.label()
                );
                run_cell(&setup, cfg, cell, &params[&cell.round], projection, &dir)
            })
            .collect::<Result<Vec<_>>>()?;
        io::write_text(&out.join("sweep.csv"), &sweep_csv(&rows))?;
        Ok(rows)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(batch: usize, round: usize) -> SweepRow {
        SweepRow {
            cell: SweepCell {
                batch,
                round,
                projection: ProjectionConfig::default(),
                obfuscation: ObfuscationSpec::identity(),
            },
            psnr_mean: 12.5,
            ssim_mean: 0.25,
            grad_dist_final: 0.125,
        }
    }

    #[test]
    fn sweep_csv_adds_columns_only_for_varying_axes() {
        let fixed: Vec<_> = [1, 2, 4, 8].iter().map(|&b| row(b, 0)).collect();
        let csv = sweep_csv(&fixed);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "1,12.5,0.25,0.125");

        let varied = vec![row(1, 0), row(1, 10)];
        let csv = sweep_csv(&varied);
        assert!(csv.starts_with("batch,psnr_mean,ssim_mean,grad_dist_final,round\n"));
        assert!(csv.ends_with("1,12.5,0.25,0.125,10\n"));
    }

    #[test]
    fn labels_are_compact() {
        assert_eq!(projection_label(&ProjectionConfig::Bicubic { factor: 4 }), "bicubic4");
        assert_eq!(projection_label(&ProjectionConfig::Autoencoder { d_z: 49, epochs: 1 }), "autoencoder49");
    }
}
