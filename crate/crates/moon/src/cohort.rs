//! Deterministic synthetic cohort generator: grade-correlated organ
//! volumes and esophageal wall geometry rasterized as ellipsoids and a
//! tube, plus an exact Bayes oracle over the generative densities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::priors::{extract_priors, PriorRecord, PromptMode, VoxelMask};
use crate::seed::derive_seed;
use crate::tensor::{Result, TensorError};

pub const GRADES: usize = 4;

/// Generative parameters for one grade.
#[derive(Debug, Clone)]
pub struct GradeParams {
    /// Liver volume mean/std, cm³.
    pub liver_mean: f64,
    pub liver_std: f64,
    /// Spleen volume mean/std, cm³.
    pub spleen_mean: f64,
    pub spleen_std: f64,
    /// Esophageal wall thickness mean/std, mm.
    pub wall_mean: f64,
    pub wall_std: f64,
    /// Esophageal tube outer radius, mm (deterministic per grade).
    pub eso_radius: f64,
    /// Wall intensity heterogeneity mean/std.
    pub hetero_mean: f64,
    pub hetero_std: f64,
}

#[derive(Debug, Clone)]
pub struct CohortConfig {
    pub n_subjects: usize,
    /// Grade proportions, must sum to 1.
    pub proportions: [f64; 4],
    pub seed: u64,
    /// Additive intensity noise level.
    pub noise: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub eso_grid: [usize; 3],
    pub eso_spacing: [f64; 3],
    pub liver_grid: [usize; 3],
    pub liver_spacing: [f64; 3],
    pub spleen_grid: [usize; 3],
    pub spleen_spacing: [f64; 3],
    pub grades: [GradeParams; 4],
}

impl Default for CohortConfig {
    fn default() -> CohortConfig {
        let gp = |liver_mean, spleen_mean, wall_mean, eso_radius, hetero_mean| GradeParams {
            liver_mean,
            liver_std: 60.0,
            spleen_mean,
            spleen_std: 40.0,
            wall_mean,
            wall_std: 0.2,
            eso_radius,
            hetero_mean,
            hetero_std: 0.02,
        };
        CohortConfig {
            n_subjects: 500,
            // EV staging prevalence: G0 14.8%, G1 27.8%, G2 22.0%, G3 35.4%.
            proportions: [0.148, 0.278, 0.220, 0.354],
            seed: 0,
            noise: 0.05,
            train_frac: 0.8,
            val_frac: 0.2,
            eso_grid: [32, 32, 48],
            eso_spacing: [1.5, 1.5, 1.5],
            liver_grid: [32, 32, 48],
            liver_spacing: [4.5, 4.5, 4.5],
            spleen_grid: [32, 32, 48],
            spleen_spacing: [3.8, 3.8, 3.8],
            grades: [
                // Spleen enlarges and LSVR falls with grade; liver shrinks
                // for G2+; esophageal wall thickens and grows heterogeneous.
                gp(1400.0, 300.0, 2.5, 10.0, 0.05),
                gp(1400.0, 450.0, 3.5, 13.0, 0.15),
                gp(1100.0, 600.0, 4.5, 17.0, 0.30),
                gp(800.0, 850.0, 7.0, 21.0, 0.50),
            ],
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| TensorError::Invalid {
            op: "cohort_config",
            msg,
        };
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(err("grade proportions must sum to 1".into()));
        }
        if self.proportions.iter().any(|&p| p < 0.0) {
            return Err(err("grade proportions must be nonnegative".into()));
        }
        if self.n_subjects == 0 {
            return Err(err("cohort must have at least one subject".into()));
        }
        if self.train_frac < 0.0 || self.val_frac < 0.0 || self.train_frac + self.val_frac > 1.0 {
            return Err(err("split fractions must be nonnegative and sum to <= 1".into()));
        }
        for (g, p) in self.grades.iter().enumerate() {
            if p.liver_std <= 0.0 || p.spleen_std <= 0.0 || p.wall_std <= 0.0 || p.hetero_std <= 0.0
            {
                return Err(err(format!("grade {g}: variance parameters must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Per-grade counts by largest-remainder apportionment, then a seeded
/// shuffle fixing each subject's grade.
pub fn grade_assignment(cfg: &CohortConfig) -> Vec<usize> {
    let n = cfg.n_subjects;
    let mut counts = [0usize; 4];
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    let mut assigned = 0;
    for g in 0..GRADES {
        let exact = cfg.proportions[g] * n as f64;
        counts[g] = exact.floor() as usize;
        assigned += counts[g];
        remainders.push((g, exact - exact.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for i in 0..n - assigned {
        counts[remainders[i % GRADES].0] += 1;
    }
    let mut grades: Vec<usize> = (0..GRADES).flat_map(|g| std::iter::repeat(g).take(counts[g])).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "grades", 0));
    for i in (1..grades.len()).rev() {
        let j = rng.gen_range(0..=i);
        grades.swap(i, j);
    }
    grades
}

/// Split per subject index: the first ⌊n·train⌋ shuffled subjects train,
/// the next ⌊n·val⌋ validate, the rest test.
pub fn split_assignment(cfg: &CohortConfig) -> Vec<Split> {
    let n = cfg.n_subjects;
    let n_train = (n as f64 * cfg.train_frac).round() as usize;
    let n_val = ((n as f64 * cfg.val_frac).round() as usize).min(n - n_train);
    (0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

/// True generative features of one subject (the Bayes oracle's inputs).
#[derive(Debug, Clone, Copy)]
pub struct TrueFeatures {
    pub liver_cm3: f64,
    pub spleen_cm3: f64,
    pub wall_mm: f64,
    pub hetero: f64,
}

/// One generated subject: intensity ROIs and masks for the three organs
/// plus the derived clinical priors.
#[derive(Debug, Clone)]
pub struct OrganSample {
    pub id: String,
    pub grade: usize,
    pub split: Split,
    /// Intensity volumes (esophagus, liver, spleen), row-major over the
    /// corresponding mask grids.
    pub rois: [Vec<f64>; 3],
    pub masks: [VoxelMask; 3],
    pub prior: PriorRecord,
    pub features: TrueFeatures,
}

fn gauss(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).unwrap().sample(rng)
}

/// Semi-axes (r, r, 1.5r) of an ellipsoid with the given volume (cm³).
fn ellipsoid_semi_axes(volume_cm3: f64) -> [f64; 3] {
    let r = (volume_cm3 * 1000.0 / (2.0 * std::f64::consts::PI)).cbrt();
    [r, r, 1.5 * r]
}

fn fits(grid: [usize; 3], spacing: [f64; 3], semi: [f64; 3]) -> bool {
    (0..3).all(|d| semi[d] + spacing[d] < grid[d] as f64 * spacing[d] / 2.0)
}

/// Samples a subject's generative features, resampling (up to 100 tries)
/// anything that does not fit its grid or is non-physical.
pub fn sample_features(cfg: &CohortConfig, grade: usize, rng: &mut ChaCha8Rng) -> Result<TrueFeatures> {
    let p = &cfg.grades[grade];
    let half_xy = cfg.eso_grid[0] as f64 * cfg.eso_spacing[0] / 2.0;
    for _ in 0..100 {
        let liver = gauss(rng, p.liver_mean, p.liver_std);
        let spleen = gauss(rng, p.spleen_mean, p.spleen_std);
        let wall = gauss(rng, p.wall_mean, p.wall_std);
        let hetero = gauss(rng, p.hetero_mean, p.hetero_std).max(0.0);
        let ok = liver > 0.0
            && spleen > 0.0
            && wall > 0.0
            && wall < p.eso_radius
            && p.eso_radius + cfg.eso_spacing[0] < half_xy
            && fits(cfg.liver_grid, cfg.liver_spacing, ellipsoid_semi_axes(liver))
            && fits(cfg.spleen_grid, cfg.spleen_spacing, ellipsoid_semi_axes(spleen));
        if ok {
            return Ok(TrueFeatures {
                liver_cm3: liver,
                spleen_cm3: spleen,
                wall_mm: wall,
                hetero,
            });
        }
    }
    Err(TensorError::Invalid {
        op: "sample_features",
        msg: format!("grade {grade}: no organ fitting its grid after 100 tries"),
    })
}

/// Centered ellipsoid occupancy on a grid.
fn ellipsoid_mask(grid: [usize; 3], spacing: [f64; 3], semi: [f64; 3]) -> VoxelMask {
    let mut data = vec![0u8; grid.iter().product()];
    let mut idx = 0;
    for i in 0..grid[0] {
        let x = (i as f64 + 0.5) * spacing[0] - grid[0] as f64 * spacing[0] / 2.0;
        for j in 0..grid[1] {
            let y = (j as f64 + 0.5) * spacing[1] - grid[1] as f64 * spacing[1] / 2.0;
            for k in 0..grid[2] {
                let z = (k as f64 + 0.5) * spacing[2] - grid[2] as f64 * spacing[2] / 2.0;
                let s = (x / semi[0]).powi(2) + (y / semi[1]).powi(2) + (z / semi[2]).powi(2);
                data[idx] = u8::from(s <= 1.0);
                idx += 1;
            }
        }
    }
    VoxelMask::new(grid, data, spacing).unwrap()
}

/// Elliptical tube along z: wall between radii (r_out − w, r_out].
fn tube_mask(grid: [usize; 3], spacing: [f64; 3], r_out: f64, wall: f64) -> VoxelMask {
    let r_in = r_out - wall;
    let mut data = vec![0u8; grid.iter().product()];
    let mut idx = 0;
    for i in 0..grid[0] {
        let x = (i as f64 + 0.5) * spacing[0] - grid[0] as f64 * spacing[0] / 2.0;
        for j in 0..grid[1] {
            let y = (j as f64 + 0.5) * spacing[1] - grid[1] as f64 * spacing[1] / 2.0;
            let d = (x * x + y * y).sqrt();
            let on = u8::from(d <= r_out && d > r_in);
            for _ in 0..grid[2] {
                data[idx] = on;
                idx += 1;
            }
        }
    }
    VoxelMask::new(grid, data, spacing).unwrap()
}

/// Intensity ROI: 1 inside the mask plus heterogeneity noise inside and
/// background noise everywhere.
fn intensity_roi(mask: &VoxelMask, hetero: f64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mask.data
        .iter()
        .map(|&m| {
            let base = if m == 1 { 1.0 + gauss(rng, 0.0, hetero.max(1e-12)) } else { 0.0 };
            base + if noise > 0.0 { gauss(rng, 0.0, noise) } else { 0.0 }
        })
        .collect()
}

/// Generates one subject deterministically from (config seed, index).
pub fn synth_subject(cfg: &CohortConfig, index: usize, grade: usize, split: Split) -> Result<OrganSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "subject", index as u64));
    let f = sample_features(cfg, grade, &mut rng)?;
    let p = &cfg.grades[grade];

    let eso = tube_mask(cfg.eso_grid, cfg.eso_spacing, p.eso_radius, f.wall_mm);
    let liver = ellipsoid_mask(cfg.liver_grid, cfg.liver_spacing, ellipsoid_semi_axes(f.liver_cm3));
    let spleen = ellipsoid_mask(
        cfg.spleen_grid,
        cfg.spleen_spacing,
        ellipsoid_semi_axes(f.spleen_cm3),
    );
    for (m, organ) in [(&eso, "esophagus"), (&liver, "liver"), (&spleen, "spleen")] {
        if m.occupied_voxels() == 0 {
            return Err(TensorError::Invalid {
                op: "synth_subject",
                msg: format!("subject {index}: empty {organ} mask"),
            });
        }
    }

    let rois = [
        intensity_roi(&eso, f.hetero, cfg.noise, &mut rng),
        intensity_roi(&liver, 0.0, cfg.noise, &mut rng),
        intensity_roi(&spleen, 0.0, cfg.noise, &mut rng),
    ];
    let prior = extract_priors(&eso, &liver, &spleen, PromptMode::VolumeCLsvrC)?;
    Ok(OrganSample {
        id: format!("s{index:05}"),
        grade,
        split,
        rois,
        masks: [eso, liver, spleen],
        prior,
        features: f,
    })
}

/// Full in-memory cohort. For large cohorts prefer streaming
/// [`synth_subject`] with [`grade_assignment`]/[`split_assignment`].
pub fn synth_cohort(cfg: &CohortConfig) -> Result<Vec<OrganSample>> {
    cfg.validate()?;
    let grades = grade_assignment(cfg);
    let splits = split_assignment(cfg);
    (0..cfg.n_subjects)
        .map(|i| synth_subject(cfg, i, grades[i], splits[i]))
        .collect()
}

/// Exact grade posterior from the generative densities of
/// (liver volume, spleen volume, wall thickness).
pub fn bayes_oracle(f: &TrueFeatures, cfg: &CohortConfig) -> [f64; 4] {
    let mut logp = [0.0f64; 4];
    for g in 0..GRADES {
        let p = &cfg.grades[g];
        let term = |x: f64, mean: f64, std: f64| -0.5 * ((x - mean) / std).powi(2) - std.ln();
        logp[g] = cfg.proportions[g].max(1e-300).ln()
            + term(f.liver_cm3, p.liver_mean, p.liver_std)
            + term(f.spleen_cm3, p.spleen_mean, p.spleen_std)
            + term(f.wall_mm, p.wall_mean, p.wall_std);
    }
    let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut post = [0.0f64; 4];
    let mut z = 0.0;
    for g in 0..GRADES {
        post[g] = (logp[g] - m).exp();
        z += post[g];
    }
    for p in post.iter_mut() {
        *p /= z;
    }
    post
}

pub fn argmax4(p: &[f64; 4]) -> usize {
    let mut best = 0;
    for g in 1..4 {
        if p[g] > p[best] {
            best = g;
        }
    }
    best
}
