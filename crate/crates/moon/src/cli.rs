//! Command-line surface: cohort synthesis, prior extraction, training,
//! evaluation, and gradient checking. Exit codes: 0 success, 2
//! config/validation error, 3 numeric failure, 4 I/O error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cohort::{grade_assignment, split_assignment, synth_subject, Split};
use crate::config::{cohort_config, model_config, train_config, ConfigMap};
use crate::losses::{
    cross_entropy_loss, dcca_loss, hybrid_loss, ordinal_loss, overall_loss, TwoLayerProjection,
    DCCA_EPS,
};
use crate::model::{moon_forward, register_model, ModelConfig, PriorMode, ORGANS};
use crate::mvol::{read_mvol, write_mvol, Mvol, MvolData};
use crate::ori::{ori_interact, OriConfig, OriStrategy, OriWeights};
use crate::params::{init_rng, ParamStore};
use crate::priors::{extract_priors, prior_csv_row, PromptMode, VoxelMask, PRIOR_CSV_HEADER};
use crate::tensor::gradcheck::{fd_check_inner, finite_difference_check, primitive_checks, CheckRow};
use crate::tensor::{ops, Graph, Result, Tensor, TensorError};
use crate::trainer::{
    decode_grade, grade_score, prepare_from_parts, predict_logits, train, LossMode, TrainSample,
    TRAIN_LOG_HEADER,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Everything a run emitted, plus the inputs needed to reproduce it.
/// Timings are wall-clock and vary between runs; data artifacts are the
/// byte-identical part.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub timings_s: BTreeMap<String, f64>,
}

#[derive(Parser)]
#[command(name = "moon", version, about = "Multi-organ ordinal grading pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: MVOL volumes/masks, manifest CSV.
    Synth {
        /// Config file (section.key = value lines); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides cohort.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract volumetric prior records from a cohort into a CSV.
    Priors {
        /// Cohort directory produced by `synth`.
        #[arg(long)]
        cohort: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Prompt mode: volume_n, volume_c, volume_c_lsvr_n, volume_c_lsvr_c.
        #[arg(long, default_value = "volume_c_lsvr_c")]
        prompt: String,
    },
    /// Train a model on a cohort; writes checkpoint, log CSV, manifest.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides ori.strategy.
        #[arg(long)]
        strategy: Option<String>,
        /// Overrides train.lambda.
        #[arg(long)]
        lambda: Option<f64>,
        /// Overrides model.prior: none or onehot.
        #[arg(long)]
        prior: Option<String>,
        /// Overrides train.loss: ordinal, ce, or hybrid.
        #[arg(long)]
        loss: Option<String>,
    },
    /// Evaluate a checkpoint on one split; writes report CSV/JSON and ROC CSVs.
    Eval {
        /// Checkpoint stem (the path without .bin/.idx).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// train, val, or test.
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Bootstrap seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient verification.
    Gradcheck {
        /// primitives, losses, ori, or full.
        #[arg(long, default_value = "full")]
        scope: String,
        /// Test hook: corrupt one analytic gradient and expect a failure.
        #[arg(long, default_value_t = false)]
        corrupt: bool,
    },
}

fn exit_code(e: &TensorError) -> i32 {
    match e {
        TensorError::Invalid { op, msg } => {
            if matches!(
                *op,
                "checkpoint_save" | "checkpoint_load" | "write_mvol" | "read_mvol" | "io"
            ) {
                EXIT_IO
            } else if *op == "train" && msg.contains("non-finite") {
                EXIT_NUMERIC
            } else {
                EXIT_CONFIG
            }
        }
        _ => EXIT_CONFIG,
    }
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Invalid {
        op: "io",
        msg: e.to_string(),
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigMap> {
    match path {
        None => ConfigMap::parse(""),
        Some(p) => ConfigMap::parse(&std::fs::read_to_string(p).map_err(io_err)?),
    }
}

fn config_snapshot(map: &ConfigMap, overrides: &[(&str, String)]) -> BTreeMap<String, String> {
    let mut snap = map.snapshot();
    for (k, v) in overrides {
        snap.insert(k.to_string(), v.clone());
    }
    snap
}

fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), json).map_err(io_err)
}

fn mask_to_mvol(m: &VoxelMask) -> Mvol {
    Mvol {
        dims: m.shape,
        spacing: m.spacing,
        data: MvolData::U8(m.data.clone()),
    }
}

fn mvol_to_mask(v: &Mvol) -> Result<VoxelMask> {
    match &v.data {
        MvolData::U8(d) => VoxelMask::new(v.dims, d.clone(), v.spacing),
        MvolData::F64(_) => Err(TensorError::Invalid {
            op: "read_mvol",
            msg: "expected u8 mask volume, found f64".into(),
        }),
    }
}

const COHORT_CSV: &str = "cohort.csv";
const COHORT_HEADER: [&str; 9] = [
    "subject_id",
    "grade",
    "split",
    "eso_roi",
    "eso_mask",
    "liver_roi",
    "liver_mask",
    "spleen_roi",
    "spleen_mask",
];

fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<RunManifest> {
    let t0 = Instant::now();
    let map = load_config(config)?;
    let mut cfg = cohort_config(&map)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(out).map_err(io_err)?;

    let grades = grade_assignment(&cfg);
    let splits = split_assignment(&cfg);
    // Subjects are independent given derived seeds; generate in parallel.
    let rows: Vec<(Vec<String>, Vec<String>)> = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| -> Result<(Vec<String>, Vec<String>)> {
            let s = synth_subject(&cfg, i, grades[i], splits[i])?;
            let mut row = vec![s.id.clone(), s.grade.to_string(), s.split.as_str().to_string()];
            let mut files = Vec::new();
            for (o, organ) in ORGANS.iter().enumerate() {
                let m = &s.masks[o];
                let roi_name = format!("{}_{}_roi.mvol", s.id, organ);
                let mask_name = format!("{}_{}_mask.mvol", s.id, organ);
                write_mvol(
                    &out.join(&roi_name),
                    &Mvol {
                        dims: m.shape,
                        spacing: m.spacing,
                        data: MvolData::F64(s.rois[o].clone()),
                    },
                )?;
                write_mvol(&out.join(&mask_name), &mask_to_mvol(m))?;
                row.push(roi_name.clone());
                row.push(mask_name.clone());
                files.push(roi_name);
                files.push(mask_name);
            }
            Ok((row, files))
        })
        .collect::<Result<_>>()?;

    let mut w = csv::Writer::from_path(out.join(COHORT_CSV)).map_err(|e| TensorError::Invalid {
        op: "io",
        msg: e.to_string(),
    })?;
    w.write_record(COHORT_HEADER).map_err(|e| TensorError::Invalid {
        op: "io",
        msg: e.to_string(),
    })?;
    let mut artifacts = vec![COHORT_CSV.to_string(), "manifest.json".to_string()];
    for (row, files) in &rows {
        w.write_record(row).map_err(|e| TensorError::Invalid {
            op: "io",
            msg: e.to_string(),
        })?;
        artifacts.extend(files.iter().cloned());
    }
    w.flush().map_err(io_err)?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "synth".into(),
        seed: cfg.seed,
        config: config_snapshot(&map, &[("cohort.seed", cfg.seed.to_string())]),
        artifacts,
        timings_s: BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]),
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

/// One parsed cohort manifest row.
struct CohortRow {
    id: String,
    grade: usize,
    split: Split,
    /// (roi, mask) relative paths per organ.
    paths: [(String, String); 3],
}

fn read_cohort_csv(dir: &Path) -> Result<Vec<CohortRow>> {
    let bad = |msg: String| TensorError::Invalid {
        op: "cohort_csv",
        msg,
    };
    let mut rdr = csv::Reader::from_path(dir.join(COHORT_CSV))
        .map_err(|e| TensorError::Invalid { op: "io", msg: e.to_string() })?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != COHORT_HEADER.len() {
            return Err(bad(format!("expected {} columns, got {}", COHORT_HEADER.len(), rec.len())));
        }
        rows.push(CohortRow {
            id: rec[0].to_string(),
            grade: rec[1].parse().map_err(|_| bad(format!("bad grade {}", &rec[1])))?,
            split: Split::parse(&rec[2]).ok_or_else(|| bad(format!("bad split {}", &rec[2])))?,
            paths: [
                (rec[3].to_string(), rec[4].to_string()),
                (rec[5].to_string(), rec[6].to_string()),
                (rec[7].to_string(), rec[8].to_string()),
            ],
        });
    }
    Ok(rows)
}

fn read_masks(dir: &Path, row: &CohortRow) -> Result<[VoxelMask; 3]> {
    let load = |rel: &str| -> Result<VoxelMask> { mvol_to_mask(&read_mvol(&dir.join(rel))?) };
    Ok([
        load(&row.paths[0].1)?,
        load(&row.paths[1].1)?,
        load(&row.paths[2].1)?,
    ])
}

fn cmd_priors(cohort: &Path, out: &Path, prompt: &str) -> Result<RunManifest> {
    let t0 = Instant::now();
    let mode = PromptMode::parse(prompt).ok_or_else(|| TensorError::Invalid {
        op: "config",
        msg: format!("unknown prompt mode `{prompt}`"),
    })?;
    let rows = read_cohort_csv(cohort)?;
    let mut w = csv::Writer::from_path(out).map_err(|e| TensorError::Invalid {
        op: "io",
        msg: e.to_string(),
    })?;
    w.write_record(PRIOR_CSV_HEADER)
        .map_err(|e| TensorError::Invalid { op: "io", msg: e.to_string() })?;
    let mut skipped = 0usize;
    for row in &rows {
        let masks = match read_masks(cohort, row) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", row.id);
                skipped += 1;
                continue;
            }
        };
        let record = extract_priors(&masks[0], &masks[1], &masks[2], mode)?;
        w.write_record(prior_csv_row(&row.id, &record))
            .map_err(|e| TensorError::Invalid { op: "io", msg: e.to_string() })?;
    }
    w.flush().map_err(io_err)?;
    if skipped * 20 > rows.len() {
        return Err(TensorError::Invalid {
            op: "io",
            msg: format!("{skipped} of {} subjects skipped (> 5%)", rows.len()),
        });
    }
    Ok(RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "priors".into(),
        seed: 0,
        config: BTreeMap::from([("priors.mode".to_string(), prompt.to_string())]),
        artifacts: vec![out.display().to_string()],
        timings_s: BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]),
    })
}

/// Loads every cohort subject as a model-ready sample.
fn load_samples(dir: &Path, cfg: &ModelConfig, mode: PromptMode) -> Result<Vec<TrainSample>> {
    let rows = read_cohort_csv(dir)?;
    rows.par_iter()
        .map(|row| {
            let masks = read_masks(dir, row)?;
            let mut rois: [Vec<f64>; 3] = Default::default();
            for o in 0..3 {
                let v = read_mvol(&dir.join(&row.paths[o].0))?;
                rois[o] = match v.data {
                    MvolData::F64(d) => d,
                    MvolData::U8(_) => {
                        return Err(TensorError::Invalid {
                            op: "read_mvol",
                            msg: "expected f64 roi volume, found u8".into(),
                        })
                    }
                };
            }
            let prior = extract_priors(&masks[0], &masks[1], &masks[2], mode)?;
            prepare_from_parts(&row.id, row.grade, row.split, &rois, &masks, prior.onehot, cfg)
        })
        .collect()
}

struct TrainOverrides {
    seed: Option<u64>,
    strategy: Option<String>,
    lambda: Option<f64>,
    prior: Option<String>,
    loss: Option<String>,
}

fn apply_overrides(
    model: &mut ModelConfig,
    tc: &mut crate::trainer::TrainConfig,
    ov: &TrainOverrides,
) -> Result<()> {
    let bad = |msg: String| TensorError::Invalid { op: "config", msg };
    if let Some(s) = ov.seed {
        tc.seed = s;
    }
    if let Some(l) = ov.lambda {
        tc.lambda = l;
    }
    if let Some(s) = &ov.strategy {
        model.ori.strategy =
            OriStrategy::parse(s).ok_or_else(|| bad(format!("unknown strategy `{s}`")))?;
    }
    if let Some(p) = &ov.prior {
        model.prior_mode = match p.as_str() {
            "none" => PriorMode::None,
            "onehot" => PriorMode::Onehot,
            _ => return Err(bad(format!("unknown prior mode `{p}`"))),
        };
    }
    if let Some(l) = &ov.loss {
        tc.loss = LossMode::parse(l).ok_or_else(|| bad(format!("unknown loss `{l}`")))?;
    }
    // The head follows the loss: K raw logits for CE/hybrid, K−1 sigmoids
    // for ordinal.
    for b in model.backbones.iter_mut() {
        b.ce_head = tc.loss.ce_head();
        b.logit_dim = if b.ce_head { model.k } else { model.k - 1 };
    }
    tc.validate()?;
    model.validate()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| TensorError::Invalid {
        op: "io",
        msg: e.to_string(),
    })
}

fn csv_rec<W: std::io::Write, I, S>(w: &mut csv::Writer<W>, rec: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(rec).map_err(|e| TensorError::Invalid {
        op: "io",
        msg: e.to_string(),
    })
}

fn cmd_train(
    cohort: &Path,
    config: Option<&Path>,
    out: &Path,
    ov: &TrainOverrides,
) -> Result<RunManifest> {
    let t0 = Instant::now();
    let map = load_config(config)?;
    let mut model = model_config(&map)?;
    let mut tc = train_config(&map)?;
    let mode = prompt_mode_from(&map)?;
    apply_overrides(&mut model, &mut tc, ov)?;
    std::fs::create_dir_all(out).map_err(io_err)?;

    let samples = load_samples(cohort, &model, mode)?;
    let t_load = t0.elapsed().as_secs_f64();
    let outcome = train(&model, &tc, &samples)?;
    let t_train = t0.elapsed().as_secs_f64() - t_load;

    outcome.best.save(&out.join("checkpoint"))?;
    let mut w = csv_writer(&out.join("log.csv"))?;
    csv_rec(&mut w, TRAIN_LOG_HEADER)?;
    for l in &outcome.log {
        csv_rec(&mut w, l.csv_row())?;
    }
    w.flush().map_err(io_err)?;

    let mut overrides = vec![("train.seed", tc.seed.to_string())];
    if let Some(l) = ov.lambda {
        overrides.push(("train.lambda", l.to_string()));
    }
    if let Some(s) = &ov.strategy {
        overrides.push(("ori.strategy", s.clone()));
    }
    if let Some(p) = &ov.prior {
        overrides.push(("model.prior", p.clone()));
    }
    if let Some(l) = &ov.loss {
        overrides.push(("train.loss", l.clone()));
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "train".into(),
        seed: tc.seed,
        config: config_snapshot(&map, &overrides),
        artifacts: vec![
            "checkpoint.bin".into(),
            "checkpoint.idx".into(),
            "log.csv".into(),
            "manifest.json".into(),
        ],
        timings_s: BTreeMap::from([
            ("load".to_string(), t_load),
            ("train".to_string(), t_train),
        ]),
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

fn prompt_mode_from(map: &ConfigMap) -> Result<PromptMode> {
    match map.get("priors.mode") {
        None => Ok(PromptMode::VolumeCLsvrC),
        Some(v) => PromptMode::parse(v).ok_or_else(|| TensorError::Invalid {
            op: "config",
            msg: format!("priors.mode: unknown `{v}`"),
        }),
    }
}

fn cmd_eval(
    checkpoint: &Path,
    cohort: &Path,
    config: Option<&Path>,
    split: &str,
    out: &Path,
    seed: u64,
) -> Result<RunManifest> {
    let t0 = Instant::now();
    let map = load_config(config)?;
    let mut model = model_config(&map)?;
    let tc = train_config(&map)?;
    let mode = prompt_mode_from(&map)?;
    for b in model.backbones.iter_mut() {
        b.ce_head = tc.loss.ce_head();
        b.logit_dim = if b.ce_head { model.k } else { model.k - 1 };
    }
    model.validate()?;
    let split = Split::parse(split).ok_or_else(|| TensorError::Invalid {
        op: "config",
        msg: format!("unknown split `{split}`"),
    })?;
    let store = ParamStore::load(checkpoint)?;
    std::fs::create_dir_all(out).map_err(io_err)?;

    let samples = load_samples(cohort, &model, mode)?;
    let subset: Vec<&TrainSample> = samples.iter().filter(|s| s.split == split).collect();
    if subset.is_empty() {
        return Err(TensorError::Invalid {
            op: "config",
            msg: format!("split `{}` is empty", split.as_str()),
        });
    }
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    let mut scores = Vec::new();
    for s in &subset {
        let h = predict_logits(&store, &model, s)?;
        labels.push(s.grade);
        preds.push(decode_grade(&h, tc.loss));
        scores.push(grade_score(&h, tc.loss));
    }
    let report = crate::metrics::eval_report(&labels, &preds, &scores, model.k, 1000, seed)?;

    let mut w = csv_writer(&out.join("report.csv"))?;
    csv_rec(&mut w, ["name", "value", "ci_lo", "ci_hi"])?;
    for row in report.csv_rows() {
        csv_rec(&mut w, &row)?;
    }
    w.flush().map_err(io_err)?;

    let mut w = csv_writer(&out.join("confusion.csv"))?;
    for row in &report.confusion {
        csv_rec(&mut w, row.iter().map(|c| c.to_string()))?;
    }
    w.flush().map_err(io_err)?;

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out.join("report.json"), json).map_err(io_err)?;

    let mut artifacts = vec![
        "report.csv".to_string(),
        "report.json".to_string(),
        "confusion.csv".to_string(),
        "manifest.json".to_string(),
    ];
    for tau in 1..=3usize {
        let name = format!("roc_tau{tau}.csv");
        let mut w = csv_writer(&out.join(&name))?;
        csv_rec(&mut w, ["fpr", "tpr", "cut"])?;
        for (fpr, tpr, cut) in crate::metrics::roc_points(&labels, &scores, tau) {
            csv_rec(&mut w, [format!("{fpr:.6}"), format!("{tpr:.6}"), format!("{cut:.6}")])?;
        }
        w.flush().map_err(io_err)?;
        artifacts.push(name);
    }

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "eval".into(),
        seed,
        config: config_snapshot(&map, &[("eval.split", split.as_str().to_string())]),
        artifacts,
        timings_s: BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]),
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Projection weights that keep the ReLU strictly active for inputs in
/// (−1, 1): small first-layer weights with a positive bias margin. Dead
/// units would zero a projected feature's variance and the standardization
/// epsilon floor would wreck the finite-difference comparison.
fn proj_weight_specs(rng: &mut ChaCha8Rng, din: usize, hidden: usize, dout: usize) -> Vec<(Vec<f64>, Vec<usize>)> {
    let w1: Vec<f64> = (0..din * hidden).map(|_| rng.gen_range(-0.3..0.3) / din as f64).collect();
    let b1: Vec<f64> = (0..hidden).map(|_| rng.gen_range(1.5..2.5)).collect();
    let w2: Vec<f64> = (0..hidden * dout)
        .enumerate()
        .map(|(i, _)| {
            let diag = if i % dout == (i / dout) % dout { 1.0 } else { 0.0 };
            diag + rng.gen_range(-0.3..0.3)
        })
        .collect();
    let b2 = rand_vec(rng, dout);
    vec![
        (w1, vec![din, hidden]),
        (b1, vec![hidden]),
        (w2, vec![hidden, dout]),
        (b2, vec![dout]),
    ]
}

/// Finite-difference checks for every loss, randomized per trial.
pub fn loss_checks(trials: usize, seed: u64) -> Vec<CheckRow> {
    let step = 1e-5;
    let grades = [0usize, 2, 1, 3];
    let mut rows = Vec::new();
    let mut check = |name: &str,
                     f: &dyn Fn(&Rc<Graph>, &[Tensor]) -> Result<Tensor>,
                     make: &dyn Fn(&mut ChaCha8Rng) -> Vec<(Vec<f64>, Vec<usize>)>| {
        let mut worst: f64 = 0.0;
        for t in 0..trials {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let err =
                finite_difference_check(f, &make(&mut rng), step).expect("gradcheck eval failed");
            worst = worst.max(err);
        }
        rows.push(CheckRow {
            name: name.to_string(),
            max_rel_err: worst,
            threshold: 1e-4,
        });
    };

    check(
        "ordinal_loss",
        &|_, xs| ordinal_loss(&xs[0].sigmoid(), &grades, 4),
        &|rng| vec![(rand_vec(rng, 12), vec![4, 3])],
    );
    check(
        "cross_entropy_loss",
        &|_, xs| cross_entropy_loss(&xs[0], &grades),
        &|rng| vec![(rand_vec(rng, 16), vec![4, 4])],
    );
    check(
        "hybrid_loss",
        &|_, xs| {
            let ce = cross_entropy_loss(&xs[0], &grades)?;
            let ord = ordinal_loss(&xs[0].slice_axis(1, 0, 3)?.sigmoid(), &grades, 4)?;
            hybrid_loss(&ce, &ord, 0.5)
        },
        &|rng| vec![(rand_vec(rng, 16), vec![4, 4])],
    );
    check(
        "dcca_loss",
        &|_, xs| {
            let p1 = TwoLayerProjection {
                w1: xs[2].clone(),
                b1: xs[3].clone(),
                w2: xs[4].clone(),
                b2: xs[5].clone(),
            };
            let p2 = TwoLayerProjection {
                w1: xs[6].clone(),
                b1: xs[7].clone(),
                w2: xs[8].clone(),
                b2: xs[9].clone(),
            };
            dcca_loss(&xs[0], &xs[1], &p1, &p2, DCCA_EPS)
        },
        &|rng| {
            let mut v = vec![
                (rand_vec(rng, 12), vec![4, 3]),
                (rand_vec(rng, 12), vec![4, 3]),
            ];
            v.extend(proj_weight_specs(rng, 3, 2, 2));
            v.extend(proj_weight_specs(rng, 3, 2, 2));
            v
        },
    );
    check(
        "overall_loss",
        &|_, xs| {
            let p_el = TwoLayerProjection {
                w1: xs[4].clone(),
                b1: xs[5].clone(),
                w2: xs[6].clone(),
                b2: xs[7].clone(),
            };
            let p_es = TwoLayerProjection {
                w1: xs[8].clone(),
                b1: xs[9].clone(),
                w2: xs[10].clone(),
                b2: xs[11].clone(),
            };
            overall_loss(
                &xs[0].sigmoid(),
                &grades,
                4,
                &xs[1],
                &xs[2],
                &xs[3],
                0.9,
                (&p_el, &p_el),
                (&p_es, &p_es),
            )
        },
        &|rng| {
            let mut v = vec![
                (rand_vec(rng, 12), vec![4, 3]),
                (rand_vec(rng, 12), vec![4, 3]),
                (rand_vec(rng, 12), vec![4, 3]),
                (rand_vec(rng, 12), vec![4, 3]),
            ];
            v.extend(proj_weight_specs(rng, 3, 2, 2));
            v.extend(proj_weight_specs(rng, 3, 2, 2));
            v
        },
    );
    rows
}

/// Gradient checks through the cross-organ interaction block, one row per
/// strategy with trainable parameters.
pub fn ori_checks(seed: u64) -> Vec<CheckRow> {
    let step = 1e-5;
    let mut rows = Vec::new();
    for strategy in [
        OriStrategy::Add,
        OriStrategy::Concat,
        OriStrategy::SelfAttn,
        OriStrategy::QuerySwap,
        OriStrategy::Switching,
    ] {
        let cfg = OriConfig {
            pooled_shape: [1, 1, 2],
            iterations: 2,
            strategy,
            channels: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ strategy.as_str().len() as u64);
        let c = cfg.channels;
        let mut inputs = vec![
            (rand_vec(&mut rng, c * 2), vec![c, 1, 1, 2]),
            (rand_vec(&mut rng, c * 2), vec![c, 1, 1, 2]),
            (rand_vec(&mut rng, c * 2), vec![c, 1, 1, 2]),
        ];
        // Weight layout per strategy; mirrors OriWeights::load.
        match strategy {
            OriStrategy::Add | OriStrategy::None => {}
            OriStrategy::Concat => {
                inputs.push((rand_vec(&mut rng, c * 3 * c), vec![c, 3 * c, 1, 1, 1]));
                inputs.push((rand_vec(&mut rng, c), vec![c]));
            }
            OriStrategy::QuerySwap => {
                for _ in 0..4 {
                    inputs.push((rand_vec(&mut rng, c * c), vec![c, c]));
                }
            }
            OriStrategy::Switching => {
                for _ in 0..4 {
                    inputs.push((rand_vec(&mut rng, c * c), vec![c, c]));
                }
                inputs.push((rand_vec(&mut rng, c * c), vec![c, c]));
                inputs.push((rand_vec(&mut rng, c), vec![c]));
            }
            OriStrategy::SelfAttn => {
                for _ in 0..7 {
                    inputs.push((rand_vec(&mut rng, c * c), vec![c, c]));
                }
            }
        }
        let f = |_: &Rc<Graph>, xs: &[Tensor]| -> Result<Tensor> {
            let mut w = OriWeights::default();
            match strategy {
                OriStrategy::Add | OriStrategy::None => {}
                OriStrategy::Concat => {
                    w.fuse_w = Some(xs[3].clone());
                    w.fuse_b = Some(xs[4].clone());
                }
                OriStrategy::QuerySwap => {
                    w.wq = Some(xs[3].clone());
                    w.wk = Some(xs[4].clone());
                    w.wv = Some(xs[5].clone());
                    w.wp = Some(xs[6].clone());
                }
                OriStrategy::Switching => {
                    w.wq = Some(xs[3].clone());
                    w.wk = Some(xs[4].clone());
                    w.wv = Some(xs[5].clone());
                    w.wp = Some(xs[6].clone());
                    w.direct_w = Some(xs[7].clone());
                    w.direct_b = Some(xs[8].clone());
                }
                OriStrategy::SelfAttn => {
                    w.wq = Some(xs[3].clone());
                    w.wk = Some(xs[4].clone());
                    w.wv = Some(xs[5].clone());
                    w.wp = Some(xs[6].clone());
                    w.proj = Some([xs[7].clone(), xs[8].clone(), xs[9].clone()]);
                }
            }
            let (out, _) = ori_interact(&xs[0], &xs[1], &xs[2], &w, &cfg)?;
            ops::concat(&[out[0].clone(), out[1].clone(), out[2].clone()], 0).map(|t| t.mean())
        };
        let err = finite_difference_check(&f, &inputs, step).expect("ori gradcheck eval failed");
        rows.push(CheckRow {
            name: format!("ori_{}", strategy.as_str()),
            max_rel_err: err,
            threshold: 1e-4,
        });
    }
    rows
}

/// End-to-end check: finite differences through the whole forward pass and
/// overall loss with respect to a few sampled parameters.
pub fn full_model_check(seed: u64) -> CheckRow {
    let model = ModelConfig {
        backbones: {
            let bb = crate::backbone::BackboneConfig {
                input_shape: [4, 4, 6],
                channels: vec![2],
                attention_stages: vec![],
                logit_dim: 3,
                ce_head: false,
            };
            [bb.clone(), bb.clone(), bb]
        },
        ori: OriConfig {
            pooled_shape: [1, 1, 2],
            iterations: 2,
            strategy: OriStrategy::Switching,
            channels: 2,
        },
        adaptor_hidden: 3,
        adaptor_dim: 4,
        ..ModelConfig::default()
    };
    let mut rng = init_rng(seed);
    let mut store = ParamStore::new();
    register_model(&mut store, &model, &mut rng);
    store.drain_issued();

    let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let roi_n: usize = 4 * 4 * 6;
    let rois_data: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut data_rng, roi_n)).collect();
    let onehot = crate::priors::onehot_embed(&[
        crate::priors::Level::Low,
        crate::priors::Level::Average,
        crate::priors::Level::High,
        crate::priors::Level::VeryLow,
    ]);
    let grades = [2usize];

    // Check gradients w.r.t. one conv kernel and the fusion head: perturb
    // the stored arrays for the finite-difference side and compare against
    // the issued-leaf gradients from one backward pass.
    let names = ["eso.stem.w", "fuse.w"];
    let step = 1e-5;
    let eval = |stash: &ParamStore| -> f64 {
        let graph = Graph::new();
        let rois = [
            Tensor::constant(&graph, rois_data[0].clone(), vec![1, 4, 4, 6]),
            Tensor::constant(&graph, rois_data[1].clone(), vec![1, 4, 4, 6]),
            Tensor::constant(&graph, rois_data[2].clone(), vec![1, 4, 4, 6]),
        ];
        let out = moon_forward(&graph, stash, &model, &rois, Some(&onehot)).unwrap();
        stash.drain_issued();
        ordinal_loss(&out.h_f, &grades, model.k).unwrap().item()
    };

    // Analytic gradients via one backward pass.
    let graph = Graph::new();
    let rois = [
        Tensor::constant(&graph, rois_data[0].clone(), vec![1, 4, 4, 6]),
        Tensor::constant(&graph, rois_data[1].clone(), vec![1, 4, 4, 6]),
        Tensor::constant(&graph, rois_data[2].clone(), vec![1, 4, 4, 6]),
    ];
    let out = moon_forward(&graph, &store, &model, &rois, Some(&onehot)).unwrap();
    let loss = ordinal_loss(&out.h_f, &grades, model.k).unwrap();
    crate::tensor::backward(&loss).unwrap();
    let issued = store.drain_issued();
    let grad_of = |name: &str| -> Vec<f64> {
        let mut acc: Option<Vec<f64>> = None;
        for (n, t) in &issued {
            if n == name {
                if let Some(g) = t.grad() {
                    match &mut acc {
                        None => acc = Some(g),
                        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                    }
                }
            }
        }
        acc.unwrap_or_else(|| vec![0.0; store.get(name).unwrap().0.len()])
    };

    let mut max_err: f64 = 0.0;
    for name in names {
        let analytic = grad_of(name);
        for j in 0..analytic.len() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap()[j] += step;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap()[j] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let err = (analytic[j] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    CheckRow {
        name: "full_model".to_string(),
        max_rel_err: max_err,
        threshold: 1e-3,
    }
}

fn cmd_gradcheck(scope: &str, corrupt: bool) -> Result<Vec<CheckRow>> {
    let mut rows = match scope {
        "primitives" => primitive_checks(10, 42),
        "losses" => loss_checks(5, 42),
        "ori" => ori_checks(42),
        "full" => {
            let mut r = primitive_checks(10, 42);
            r.extend(loss_checks(5, 42));
            r.extend(ori_checks(42));
            r.push(full_model_check(42));
            r
        }
        _ => {
            return Err(TensorError::Invalid {
                op: "config",
                msg: format!("unknown scope `{scope}`"),
            })
        }
    };
    if corrupt {
        let err = fd_check_inner(
            &|_, xs| Ok(xs[0].mul(&xs[0])?.mean()),
            &[(vec![3.0], vec![1])],
            1e-5,
            1e-2,
        )?;
        rows.push(CheckRow {
            name: "corrupt_hook".to_string(),
            max_rel_err: err,
            threshold: 1e-4,
        });
    }
    Ok(rows)
}

fn configure_threads() {
    if let Ok(v) = std::env::var("MOON_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn run_cli() -> i32 {
    configure_threads();
    let cli = Cli::parse();
    let outcome: Result<i32> = match &cli.command {
        Command::Synth { config, out, seed } => {
            cmd_synth(config.as_deref(), out, *seed).map(|m| {
                println!(
                    "synth: {} artifacts in {:.2}s",
                    m.artifacts.len(),
                    m.timings_s.get("total").copied().unwrap_or(0.0)
                );
                EXIT_OK
            })
        }
        Command::Priors { cohort, out, prompt } => cmd_priors(cohort, out, prompt).map(|m| {
            println!("priors: wrote {}", m.artifacts[0]);
            EXIT_OK
        }),
        Command::Train {
            cohort,
            config,
            out,
            seed,
            strategy,
            lambda,
            prior,
            loss,
        } => {
            let ov = TrainOverrides {
                seed: *seed,
                strategy: strategy.clone(),
                lambda: *lambda,
                prior: prior.clone(),
                loss: loss.clone(),
            };
            cmd_train(cohort, config.as_deref(), out, &ov).map(|m| {
                println!(
                    "train: done in {:.2}s; artifacts in {}",
                    m.timings_s.get("train").copied().unwrap_or(0.0),
                    out.display()
                );
                EXIT_OK
            })
        }
        Command::Eval {
            checkpoint,
            cohort,
            config,
            split,
            out,
            seed,
        } => cmd_eval(checkpoint, cohort, config.as_deref(), split, out, *seed).map(|_| {
            println!("eval: report written to {}", out.display());
            EXIT_OK
        }),
        Command::Gradcheck { scope, corrupt } => cmd_gradcheck(scope, *corrupt).map(|rows| {
            let mut failed = false;
            println!("{:<24} {:>14} {:>10}  verdict", "op", "max_rel_err", "threshold");
            for r in &rows {
                let verdict = if r.pass() { "PASS" } else { "FAIL" };
                println!(
                    "{:<24} {:>14.3e} {:>10.0e}  {}",
                    r.name, r.max_rel_err, r.threshold, verdict
                );
                failed |= !r.pass();
            }
            if failed {
                EXIT_NUMERIC
            } else {
                EXIT_OK
            }
        }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
