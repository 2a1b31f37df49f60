//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line (run with `--nocapture` to see lines for passing tests).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use moon::backbone::BackboneConfig;
use moon::cli::{full_model_check, loss_checks, ori_checks};
use moon::cohort::{grade_assignment, split_assignment, synth_subject, CohortConfig, Split};
use moon::losses::{dcca_loss, ordinal_decode, ordinal_encode, ordinal_loss, overall_loss, IdentityProjection, DCCA_EPS};
use moon::metrics::{auc, bootstrap_ci, kendall_tau_b, per_class_prf};
use moon::model::{Fusion, ModelConfig, PriorMode};
use moon::ori::{OriConfig, OriStrategy};
use moon::priors::{connected_components_3d, level_bin, organ_volume, Level, Parameter, VoxelMask};
use moon::tensor::gradcheck::primitive_checks;
use moon::trainer::{evaluate, prepare_sample, train, TrainConfig, TrainSample};
use moon::{Graph, Tensor};

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

#[test]
fn criterion_gradient_suite() {
    let t0 = Instant::now();
    let mut rows = primitive_checks(100, 2024);
    rows.extend(loss_checks(100, 2024));
    rows.extend(ori_checks(2024));
    rows.push(full_model_check(2024));
    let elapsed = t0.elapsed().as_secs_f64();
    let worst = rows
        .iter()
        .max_by(|a, b| {
            (a.max_rel_err / a.threshold)
                .partial_cmp(&(b.max_rel_err / b.threshold))
                .unwrap()
        })
        .unwrap();
    let pass = rows.iter().all(|r| r.pass()) && elapsed < 60.0;
    verdict(
        "gradient-suite",
        pass,
        &format!(
            "{} checks, worst {} = {:.2e} (threshold {:.0e}), {elapsed:.1}s",
            rows.len(),
            worst.name,
            worst.max_rel_err,
            worst.threshold
        ),
    );
}

fn dcca_value(h1: &[f64], h2: &[f64], n: usize, d1: usize, d2: usize) -> f64 {
    let g = Graph::new();
    let a = Tensor::constant(&g, h1.to_vec(), vec![n, d1]);
    let b = Tensor::constant(&g, h2.to_vec(), vec![n, d2]);
    dcca_loss(&a, &b, &IdentityProjection, &IdentityProjection, DCCA_EPS)
        .unwrap()
        .item()
}

#[test]
fn criterion_dcca_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut in_range = true;
    for _ in 0..1000 {
        let n = rng.gen_range(2..10usize);
        let d = rng.gen_range(1..5usize);
        let h1: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let h2: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v = dcca_value(&h1, &h2, n, d, d);
        in_range &= (-1.0 - 1e-9..=1.0 + 1e-9).contains(&v);
    }

    let h: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let identical = dcca_value(&h, &h, 6, 4, 4);
    let ident_ok = (identical + 1.0).abs() < 1e-6;

    let h2: Vec<f64> = (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let sym_ok = {
        let g = Graph::new();
        let a = Tensor::constant(&g, h[..18].to_vec(), vec![6, 3]);
        let b = Tensor::constant(&g, h2.clone(), vec![6, 3]);
        let ab = dcca_loss(&a, &b, &IdentityProjection, &IdentityProjection, DCCA_EPS)
            .unwrap()
            .item();
        let ba = dcca_loss(&b, &a, &IdentityProjection, &IdentityProjection, DCCA_EPS)
            .unwrap()
            .item();
        (ab - ba).abs() < 1e-12
    };

    // Per-feature positive-affine transform of one view.
    let base = dcca_value(&h[..18], &h2, 6, 3, 3);
    let mut h_aff = h[..18].to_vec();
    let scales = [2.0, 0.5, 3.7];
    let shifts = [1.0, -4.0, 0.25];
    for r in 0..6 {
        for c in 0..3 {
            h_aff[r * 3 + c] = h_aff[r * 3 + c] * scales[c] + shifts[c];
        }
    }
    let affine_ok = (dcca_value(&h_aff, &h2, 6, 3, 3) - base).abs() < 1e-9;

    // Hand 4x2 example: both views standardized, cross-trace cancels.
    let e1 = vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0];
    let e2 = vec![1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0];
    let zero = dcca_value(&e1, &e2, 4, 2, 2);
    let zero_ok = zero.abs() < 1e-9;

    verdict(
        "dcca-properties",
        in_range && ident_ok && sym_ok && affine_ok && zero_ok,
        &format!(
            "range {in_range}, identical {identical:.8}, symmetry {sym_ok}, affine {affine_ok}, 4x2 example {zero:.2e}"
        ),
    );
}

#[test]
fn criterion_ordinal_suite() {
    let mut round_trip = true;
    for k in 2..=6usize {
        for g in 0..k {
            round_trip &= ordinal_decode(&ordinal_encode(g, k).unwrap()) == g;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut endpoint = true;
    for _ in 0..100 {
        let n = rng.gen_range(2..8usize);
        let k = 4;
        let graph = Graph::new();
        let sig = |rng: &mut ChaCha8Rng, m: usize| -> Vec<f64> {
            (0..m).map(|_| rng.gen_range(0.01..0.99)).collect()
        };
        let h_f = Tensor::constant(&graph, sig(&mut rng, n * (k - 1)), vec![n, k - 1]);
        let mk = |rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..n * (k - 1)).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Tensor::constant(&graph, data, vec![n, k - 1])
        };
        let (h_e, h_l, h_s) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let grades: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let id = IdentityProjection;
        let total = overall_loss(&h_f, &grades, k, &h_e, &h_l, &h_s, 1.0, (&id, &id), (&id, &id))
            .unwrap()
            .item();
        let ord = ordinal_loss(&h_f, &grades, k).unwrap().item();
        endpoint &= total.to_bits() == ord.to_bits();
    }
    verdict(
        "ordinal-suite",
        round_trip && endpoint,
        &format!("round-trip K=2..6 {round_trip}, lambda=1 bit-exact on 100 batches {endpoint}"),
    );
}

#[test]
fn criterion_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut auc_ok = true;
    let mut tau_ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=50usize);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
        if labels.iter().all(|&b| b) || labels.iter().all(|&b| !b) {
            continue;
        }
        let got = auc(&labels, &scores).unwrap();
        let (mut num, mut cnt) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    cnt += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        auc_ok &= (got - num / cnt).abs() < 1e-12;

        let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let got = kendall_tau_b(&a, &b).unwrap();
        let (mut c, mut d, mut ta, mut tb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..n {
            for j in (i + 1)..n {
                let (da, db) = (
                    (a[i] as i64 - a[j] as i64).signum(),
                    (b[i] as i64 - b[j] as i64).signum(),
                );
                match (da, db) {
                    (0, 0) => {}
                    (0, _) => ta += 1.0,
                    (_, 0) => tb += 1.0,
                    _ if da == db => c += 1.0,
                    _ => d += 1.0,
                }
            }
        }
        match got {
            None => tau_ok &= c + d + ta == 0.0 || c + d + tb == 0.0,
            Some(t) => {
                let oracle = (c - d) / ((c + d + ta) * (c + d + tb)).sqrt();
                tau_ok &= (t - oracle).abs() < 1e-12;
            }
        }
    }

    // Count-level confusion consistent with the published G0 row:
    // precision 37/41 = 0.902, recall 37/44 = 0.841, F1 = 74/85.
    let confusion = vec![vec![37usize, 7], vec![4, 52]];
    let prf = per_class_prf(&confusion);
    let f1_ok = (prf[0].f1 - 0.871).abs() < 5e-4;
    verdict(
        "metric-oracles",
        auc_ok && tau_ok && f1_ok,
        &format!("auc {auc_ok}, tau-b {tau_ok}, F1(0.902, 0.841) = {:.6}", prf[0].f1),
    );
}

fn flood_fill_components(mask: &VoxelMask, connectivity: usize) -> (Vec<u32>, Vec<usize>) {
    let [sx, sy, sz] = mask.shape;
    let idx = |x: usize, y: usize, z: usize| (x * sy + y) * sz + z;
    let mut labels = vec![0u32; mask.data.len()];
    let mut sizes = Vec::new();
    let mut next = 1u32;
    for x0 in 0..sx {
        for y0 in 0..sy {
            for z0 in 0..sz {
                if mask.data[idx(x0, y0, z0)] == 0 || labels[idx(x0, y0, z0)] != 0 {
                    continue;
                }
                let mut stack = vec![(x0, y0, z0)];
                labels[idx(x0, y0, z0)] = next;
                let mut size = 0usize;
                while let Some((x, y, z)) = stack.pop() {
                    size += 1;
                    for dx in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dz in -1i64..=1 {
                                if (dx, dy, dz) == (0, 0, 0) {
                                    continue;
                                }
                                let manhattan = dx.abs() + dy.abs() + dz.abs();
                                if connectivity == 6 && manhattan != 1 {
                                    continue;
                                }
                                let (nx, ny, nz) =
                                    (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                if nx < 0 || ny < 0 || nz < 0
                                    || nx >= sx as i64 || ny >= sy as i64 || nz >= sz as i64
                                {
                                    continue;
                                }
                                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                                if mask.data[idx(nx, ny, nz)] != 0 && labels[idx(nx, ny, nz)] == 0 {
                                    labels[idx(nx, ny, nz)] = next;
                                    stack.push((nx, ny, nz));
                                }
                            }
                        }
                    }
                }
                sizes.push(size);
                next += 1;
            }
        }
    }
    (labels, sizes)
}

#[test]
fn criterion_volumetry_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut components_ok = true;
    let mut volume_ok = true;
    for _ in 0..100 {
        let shape = [16usize, 16, 16];
        let density = rng.gen_range(0.05..0.5);
        let data: Vec<u8> = (0..shape.iter().product::<usize>())
            .map(|_| u8::from(rng.gen_bool(density)))
            .collect();
        let spacing = [
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..3.0),
        ];
        let mask = VoxelMask::new(shape, data, spacing).unwrap();
        for connectivity in [6u8, 26] {
            let (labels, sizes) = connected_components_3d(&mask, connectivity).unwrap();
            let (o_labels, o_sizes) = flood_fill_components(&mask, connectivity as usize);
            components_ok &= labels == o_labels && sizes == o_sizes;
        }
        let (mm3, cm3) = organ_volume(&mask);
        let n = mask.data.iter().filter(|&&v| v != 0).count() as f64;
        let expect = n * spacing[0] * spacing[1] * spacing[2];
        volume_ok &= (mm3 - expect).abs() < 1e-9 && (cm3 - expect / 1000.0).abs() < 1e-12;
    }

    let bins_ok = level_bin(Parameter::Liver, 1500.0).unwrap() == Level::High
        && level_bin(Parameter::Spleen, 900.0).unwrap() == Level::VeryHigh;
    verdict(
        "volumetry-oracle",
        components_ok && volume_ok && bins_ok,
        &format!("components {components_ok}, volumes {volume_ok}, boundary bins {bins_ok}"),
    );
}

fn toy_backbone() -> BackboneConfig {
    BackboneConfig {
        input_shape: [8, 8, 12],
        channels: vec![2, 3],
        attention_stages: vec![1],
        logit_dim: 3,
        ce_head: false,
    }
}

fn toy_model(multi_organ: bool, prior_mode: PriorMode) -> ModelConfig {
    let bb = toy_backbone();
    ModelConfig {
        multi_organ,
        backbones: [bb.clone(), bb.clone(), bb],
        ori: OriConfig {
            pooled_shape: [1, 1, 2],
            iterations: 4,
            strategy: OriStrategy::Switching,
            channels: 3,
        },
        prior_mode,
        adaptor_hidden: 16,
        adaptor_dim: 16,
        fusion: Fusion::Concat,
        k: 4,
    }
}

fn synth_prepared(cfg: &CohortConfig, model: &ModelConfig) -> Vec<TrainSample> {
    let grades = grade_assignment(cfg);
    let splits = split_assignment(cfg);
    (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| {
            let s = synth_subject(cfg, i, grades[i], splits[i]).unwrap();
            prepare_sample(&s, model).unwrap()
        })
        .collect()
}

#[test]
fn criterion_synthetic_end_to_end() {
    let t0 = Instant::now();
    let cohort = CohortConfig {
        n_subjects: 500,
        seed: 2024,
        ..CohortConfig::default()
    };
    let model = toy_model(true, PriorMode::Onehot);
    let samples = synth_prepared(&cohort, &model);

    let mut counts = [0usize; 4];
    for s in &samples {
        counts[s.grade] += 1;
    }
    let props_ok = (0..4).all(|g| {
        (counts[g] as f64 / 500.0 - cohort.proportions[g]).abs() <= 0.03
    });
    let n_train = samples.iter().filter(|s| s.split == Split::Train).count();
    let n_val = samples.iter().filter(|s| s.split == Split::Val).count();

    let tc = |seed: u64| TrainConfig {
        epochs: 40,
        batch_size: 8,
        lr: 1e-3,
        lambda: 0.9,
        seed,
        dcca: true,
        loss: moon::trainer::LossMode::Ordinal,
        augment: false,
        dcca_hidden: 8,
        dcca_out: 4,
    };

    let run = |model: &ModelConfig, seed: u64, samples: &[TrainSample]| -> (f64, Option<f64>) {
        let outcome = train(model, &tc(seed), samples).unwrap();
        let val: Vec<&TrainSample> = samples.iter().filter(|s| s.split == Split::Val).collect();
        evaluate(&outcome.best, model, &val, moon::trainer::LossMode::Ordinal).unwrap()
    };

    // Main run, then the remaining 3-seed comparison runs in parallel.
    let (acc1, tau1) = run(&model, 1, &samples);
    let t_main = t0.elapsed().as_secs_f64();

    let eso = toy_model(false, PriorMode::None);
    let jobs: Vec<(ModelConfig, u64)> = vec![
        (model.clone(), 2),
        (model.clone(), 3),
        (eso.clone(), 1),
        (eso.clone(), 2),
        (eso.clone(), 3),
    ];
    let results: Vec<(bool, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(m, seed)| {
                let samples = &samples;
                scope.spawn(move || (m.multi_organ, run(m, *seed, samples).0))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut full_accs = vec![acc1];
    let mut eso_accs = Vec::new();
    for (multi, acc) in results {
        if multi {
            full_accs.push(acc);
        } else {
            eso_accs.push(acc);
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let full_med = median(&mut full_accs);
    let eso_med = median(&mut eso_accs);
    let elapsed = t0.elapsed().as_secs_f64();

    let tau1 = tau1.unwrap_or(-1.0);
    let pass = props_ok
        && n_train == 400
        && n_val == 100
        && acc1 >= 0.70
        && tau1 >= 0.60
        && full_med >= eso_med
        && elapsed < 900.0;
    verdict(
        "synthetic-end-to-end",
        pass,
        &format!(
            "proportions {props_ok}, split {n_train}/{n_val}, val acc {acc1:.3}, tau {tau1:.3}, \
             3-seed median full {full_med:.3} vs eso-only {eso_med:.3}, \
             main run {t_main:.0}s, total {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_bootstrap() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let correct: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.8)).collect();
    let metric = |idx: &[usize]| -> Option<f64> {
        Some(idx.iter().filter(|&&i| correct[i]).count() as f64 / idx.len() as f64)
    };
    let ci1 = bootstrap_ci(metric, 200, 1000, 99).unwrap();
    let ci2 = bootstrap_ci(metric, 200, 1000, 99).unwrap();
    let deterministic = ci1 == ci2;
    let half_width = (ci1.1 - ci1.0) / 2.0;
    let width_ok = (0.028..=0.083).contains(&half_width);
    verdict(
        "bootstrap",
        deterministic && width_ok,
        &format!("deterministic {deterministic}, half-width {half_width:.4} in [0.028, 0.083]"),
    );
}

fn dir_digest(dir: &std::path::Path, skip: &str) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().to_string_lossy().to_string();
        if name == skip {
            continue;
        }
        out.insert(name, std::fs::read(entry.path()).unwrap());
    }
    out
}

#[test]
fn criterion_reproducibility() {
    let bin = env!("CARGO_BIN_EXE_moon");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.txt");
    std::fs::write(
        &cfg_path,
        "cohort.n_subjects = 12\ncohort.seed = 9\n\
         model.channels = 2, 3\nmodel.attention_stages = 1\nmodel.input_shape = 8, 8, 12\n\
         train.epochs = 2\ntrain.batch_size = 4\ntrain.seed = 9\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let st = std::process::Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .output()
            .unwrap();
        assert!(
            st.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&st.stderr)
        );
    };
    let mut identical = true;
    for phase in ["a", "b"] {
        run(&["synth", "--config", "cfg.txt", "--out", &format!("cohort_{phase}")]);
        run(&[
            "train",
            "--cohort",
            &format!("cohort_{phase}"),
            "--config",
            "cfg.txt",
            "--out",
            &format!("run_{phase}"),
        ]);
        run(&[
            "eval",
            "--checkpoint",
            &format!("run_{phase}/checkpoint"),
            "--cohort",
            &format!("cohort_{phase}"),
            "--config",
            "cfg.txt",
            "--split",
            "val",
            "--out",
            &format!("eval_{phase}"),
        ]);
    }
    // Data artifacts must be byte-identical; manifest.json carries
    // wall-clock timings and is excluded.
    for stage in ["cohort", "run", "eval"] {
        let a = dir_digest(&dir.path().join(format!("{stage}_a")), "manifest.json");
        let b = dir_digest(&dir.path().join(format!("{stage}_b")), "manifest.json");
        identical &= a == b;
    }
    verdict(
        "reproducibility",
        identical,
        "synth/train/eval re-runs byte-identical (manifests carry timings, excluded)",
    );
}
