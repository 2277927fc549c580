//! The subcommands, returning their reports so that tests can inspect them.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctfwp::fwp::{LayerSpec, NcdeMlp};
use ctfwp::data::{gen_synth_task, write_csv_sequences, DatasetManifest, SequenceRecord, Split, SynthKind, SynthOptions};
use ctfwp::numcore::{read_checkpoint, write_checkpoint, Checkpoint};
use ctfwp::par;
use ctfwp::train::{evaluate, gradcheck_example, train, EpochLog, Example, Mode, Model, ModelSpec, TrainOptions};

use crate::config::RunConfig;
use crate::dataset::Dataset;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,train_loss,valid_metric,seconds";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOCK_FILE: &str = ".lock";

fn model_spec(cfg: &RunConfig, ds: &Dataset, max_steps: usize) -> ModelSpec {
    ModelSpec {
        mode: cfg.mode,
        rule: cfg.rule_kind(max_steps),
        d_model: cfg.d_model,
        heads: cfg.heads,
        d_ff: cfg.d_ff,
        layers: cfg.layers,
        channels: ds.channels(),
        n_classes: ds.n_classes(),
        d_static: ds.d_static(),
        interpolation: cfg.interpolation,
        oi: cfg.oi,
        logsig_depth: cfg.logsig_depth,
        logsig_step: cfg.logsig_step,
    }
}

fn prepare_all(model: &Model, recs: &[&SequenceRecord]) -> Result<Vec<Example>> {
    Ok(par::map_range(recs.len(), |i| model.prepare(recs[i])).into_iter().collect::<ctfwp::Result<Vec<_>>>()?)
}

/// Builds the model and prepares the train and valid splits. The delta
/// variant `auto` is resolved from the longest prepared training input.
pub fn build(cfg: &RunConfig, ds: &Dataset) -> Result<(Model, Vec<Example>, Vec<Example>)> {
    let probe = Model::new(model_spec(cfg, ds, 0))?;
    let train_set = prepare_all(&probe, &ds.split(Split::Train)?)?;
    let valid_set = prepare_all(&probe, &ds.split(Split::Valid)?)?;
    if train_set.is_empty() || valid_set.is_empty() {
        bail!("train and valid splits must both be non-empty ({} / {})", train_set.len(), valid_set.len());
    }
    let longest = train_set.iter().chain(&valid_set).map(|e| e.effective_steps).max().unwrap_or(0);
    let model = Model::new(model_spec(cfg, ds, longest))?;
    Ok((model, train_set, valid_set))
}

/// Removes the lock file when the run ends, however it ends.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()))?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn format_epoch(log: &EpochLog, wall_clock: bool) -> String {
    let secs = if wall_clock { log.seconds } else { 0.0 };
    format!("{},{:.12e},{:.6},{:.3}", log.epoch, log.train_loss, log.valid_metric, secs)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_metric: f64,
    pub logs: Vec<EpochLog>,
}

fn save_checkpoint(path: &Path, model: &Model, params: &ctfwp::numcore::ParamStore) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let ckpt = Checkpoint { arch: model.spec.to_arch(), params: params.clone() };
    write_checkpoint(BufWriter::new(File::create(&tmp)?), &ckpt)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains per the config. Everything is validated and prepared before the
/// output directory is touched.
pub fn cmd_train(cfg: &RunConfig, out: &Path, threads: usize, log: &mut (dyn Write + Send)) -> Result<TrainSummary> {
    let ds = Dataset::load(cfg)?;
    if cfg.metric == ctfwp::train::ValidMetric::Auc && ds.n_classes() != 2 {
        bail!("[train] metric = auc needs a binary task, this one has {} classes", ds.n_classes());
    }
    let (model, train_set, valid_set) = build(cfg, &ds)?;
    let init = model.init_params(cfg.seed)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let _lock = RunLock::acquire(out)?;
    let mut metrics = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    writeln!(
        log,
        "{}: {} parameters, {} train / {} valid sequences",
        model.spec.mode,
        init.numel(),
        train_set.len(),
        valid_set.len()
    )?;

    let opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: cfg.seed,
        metric: cfg.metric,
        parallel: threads > 1,
    };
    let outcome = par::with_threads(threads, || {
        train(&model, init, &train_set, &valid_set, &cfg.solver, &opts, |l, improved, params| {
            let line = format_epoch(l, cfg.wall_clock);
            writeln!(metrics, "{line}")?;
            metrics.flush()?;
            if improved {
                save_checkpoint(&ckpt_path, &model, params).map_err(|e| ctfwp::Error::Checkpoint(e.to_string()))?;
            }
            let _ = writeln!(log, "epoch {line}{}", if improved { " *" } else { "" });
            Ok(())
        })
    })??;
    writeln!(log, "best epoch {} valid {} {:.6}", outcome.best_epoch, cfg.metric, outcome.best_metric)?;
    Ok(TrainSummary { best_epoch: outcome.best_epoch, best_metric: outcome.best_metric, logs: outcome.logs })
}

/// Evaluates a checkpoint on one split of the configured data.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split, threads: usize) -> Result<String> {
    let file = File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?;
    let ckpt = read_checkpoint(BufReader::new(file))?;
    let spec = ModelSpec::from_arch(&ckpt.arch)?;
    let ds = Dataset::load(cfg)?;
    if ds.channels() != spec.channels {
        bail!("dataset has {} channels but the checkpoint was trained on {}", ds.channels(), spec.channels);
    }
    if ds.n_classes() != spec.n_classes {
        bail!("dataset has {} classes but the checkpoint predicts {}", ds.n_classes(), spec.n_classes);
    }
    let model = Model::new(spec)?;
    model.init_params(0)?.ensure_aligned(&ckpt.params)?;
    let recs = ds.split(split)?;
    if recs.is_empty() {
        bail!("the {split} split is empty");
    }
    let examples = prepare_all(&model, &recs)?;
    let report = par::with_threads(threads, || evaluate(&model, &ckpt.params, &examples, &cfg.solver))??;
    Ok(format!("split {split}\n{}", report.render()))
}

/// Shrinks the config to gradient-check size: d_model ≤ 8 and at most 6
/// observations of the first usable training sequence.
pub fn cmd_gradcheck(cfg: &RunConfig, tolerance: f64, corrupt: Option<&str>) -> Result<(bool, String)> {
    let mut cfg = cfg.clone();
    let mut notes = String::new();
    if cfg.d_model > 8 {
        notes += &format!("d_model {} -> 8\n", cfg.d_model);
        cfg.d_model = 8;
    }
    if cfg.mode != Mode::VanillaNcde {
        let heads = (1..=cfg.heads.min(cfg.d_model)).rev().find(|h| cfg.d_model % h == 0).unwrap_or(1);
        if heads != cfg.heads {
            notes += &format!("heads {} -> {heads}\n", cfg.heads);
            cfg.heads = heads;
        }
    }
    if cfg.d_ff > 8 {
        notes += &format!("d_ff {} -> 8\n", cfg.d_ff);
        cfg.d_ff = 8;
    }
    let ds = Dataset::load(&cfg)?;
    let model = Model::new(model_spec(&cfg, &ds, 0))?;
    let params = model.init_params(cfg.seed)?;
    let mut example = None;
    for rec in ds.split(Split::Train)? {
        let short = truncate(rec, 6)?;
        if let Ok(ex) = model.prepare(&short) {
            example = Some(ex);
            break;
        }
    }
    let Some(ex) = example else { bail!("no training sequence is usable after truncation to 6 observations") };
    let report = gradcheck_example(&model, &params, &ex, &cfg.solver, 1e-5, corrupt)?;
    let ok = report.passes(tolerance);
    let mut out = format!("{notes}sequence {}\n{}", ex.id, report.table());
    out += &format!("max relative error {:.3e} (tolerance {tolerance:e}): {}\n", report.max_rel, if ok { "PASS" } else { "FAIL" });
    for name in report.failing(tolerance) {
        out += &format!("failing {name}\n");
    }
    Ok((ok, out))
}

fn truncate(rec: &SequenceRecord, n: usize) -> Result<SequenceRecord> {
    let n = n.min(rec.len());
    let c = rec.channels();
    let rows = (0..n).map(|i| (0..c).map(|ch| rec.value(i, ch).unwrap_or(f64::NAN)).collect()).collect();
    let mut out = SequenceRecord::from_rows(&rec.id, rec.times[..n].to_vec(), rows, rec.channel_names.clone(), rec.label)?;
    out.statics = rec.statics.clone();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub d: usize,
    /// The `d·d_in × d_mlp` output layer of the vanilla NCDE MLP (d_mlp = d).
    pub vanilla_final: usize,
    pub vanilla_total: usize,
    /// `W_slow` and `W_q` of a single-head NCDE fast weight layer.
    pub fwp_slow: usize,
}

pub fn param_counts(ds: &[usize], d_in: usize) -> Result<Vec<ParamCount>> {
    if ds.is_empty() || ds.contains(&0) || d_in == 0 {
        bail!("paramcount needs a non-empty grid of positive d and a positive d_in");
    }
    Ok(ds
        .iter()
        .map(|&d| {
            let sizes = NcdeMlp { d, d_in, d_mlp: d }.sizes();
            ParamCount {
                d,
                vanilla_final: sizes[2],
                vanilla_total: sizes.iter().sum(),
                fwp_slow: LayerSpec::slow_weight_count(d_in, d, 1),
            }
        })
        .collect())
}

pub fn cmd_paramcount(ds: &[usize], d_in: usize) -> Result<String> {
    let rows = param_counts(ds, d_in)?;
    let mut s = format!("d_in {d_in}\n{:>6} {:>14} {:>14} {:>12} {:>10}\n", "d", "vanilla_final", "vanilla_field", "fwp_slow", "ratio");
    for r in &rows {
        s += &format!(
            "{:>6} {:>14} {:>14} {:>12} {:>10.2}\n",
            r.d,
            r.vanilla_final,
            r.vanilla_total,
            r.fwp_slow,
            r.vanilla_final as f64 / r.fwp_slow as f64
        );
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy)]
pub struct SynthRequest {
    pub kind: SynthKind,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
    pub options: SynthOptions,
}

/// Writes csv sequences plus `manifest.txt` into `out`.
pub fn cmd_synth(req: &SynthRequest, out: &Path) -> Result<PathBuf> {
    let n = req.n_train + req.n_valid + req.n_test;
    if req.n_train == 0 || req.n_valid == 0 {
        bail!("synthetic data needs non-empty train and valid splits");
    }
    let recs = gen_synth_task(req.kind, n, req.seed, &req.options)?;
    fs::create_dir_all(out)?;
    if fs::read_dir(out)?.next().is_some() {
        bail!("{} is not empty", out.display());
    }
    write_csv_sequences(out, &recs)?;
    let ids: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
    let (a, b) = (req.n_train, req.n_train + req.n_valid);
    let mut m = DatasetManifest {
        train: ids[..a].to_vec(),
        valid: ids[a..b].to_vec(),
        test: ids[b..].to_vec(),
        n_classes: req.kind.n_classes(&req.options),
        channels: recs[0].channels(),
        metadata: Default::default(),
    };
    m.metadata.insert("task".into(), req.kind.to_string());
    m.metadata.insert("seed".into(), req.seed.to_string());
    let path = out.join("manifest.txt");
    m.write(&path)?;
    Ok(path)
}
