//! Clinical priors from voxel masks: connected components, volumetry,
//! the liver-to-spleen volume ratio, five-level binning, prompt text, and
//! the one-hot prior embedding with its dimensionality-reducing adaptor.

use crate::tensor::{Result, Tensor, TensorError};

/// Binary occupancy grid with physical voxel spacing in mm.
#[derive(Debug, Clone)]
pub struct VoxelMask {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
    pub spacing: [f64; 3],
}

impl VoxelMask {
    pub fn new(shape: [usize; 3], data: Vec<u8>, spacing: [f64; 3]) -> Result<VoxelMask> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Invalid {
                op: "voxel_mask",
                msg: format!("{} values for shape {shape:?}", data.len()),
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(TensorError::Invalid {
                op: "voxel_mask",
                msg: format!("non-positive spacing {spacing:?}"),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(TensorError::Invalid {
                op: "voxel_mask",
                msg: "occupancy must be 0 or 1".into(),
            });
        }
        Ok(VoxelMask { shape, data, spacing })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    pub fn occupied_voxels(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }
}

/// Connected-component labeling. Labels start at 1 and are ordered by each
/// component's first voxel in row-major scan order; 0 marks background.
/// Returns the label grid and per-component voxel counts (index label−1).
pub fn connected_components_3d(mask: &VoxelMask, connectivity: u8) -> Result<(Vec<u32>, Vec<usize>)> {
    if connectivity != 6 && connectivity != 26 {
        return Err(TensorError::Invalid {
            op: "connected_components_3d",
            msg: format!("connectivity must be 6 or 26, got {connectivity}"),
        });
    }
    let [sx, sy, sz] = mask.shape;
    let mut labels = vec![0u32; mask.data.len()];
    let mut sizes = Vec::new();
    let mut queue = std::collections::VecDeque::new();

    for x in 0..sx {
        for y in 0..sy {
            for z in 0..sz {
                let start = mask.index(x, y, z);
                if mask.data[start] == 0 || labels[start] != 0 {
                    continue;
                }
                let label = sizes.len() as u32 + 1;
                let mut size = 0usize;
                labels[start] = label;
                queue.push_back((x, y, z));
                while let Some((cx, cy, cz)) = queue.pop_front() {
                    size += 1;
                    for dx in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dz in -1i64..=1 {
                                if dx == 0 && dy == 0 && dz == 0 {
                                    continue;
                                }
                                if connectivity == 6 && dx.abs() + dy.abs() + dz.abs() != 1 {
                                    continue;
                                }
                                let (nx, ny, nz) =
                                    (cx as i64 + dx, cy as i64 + dy, cz as i64 + dz);
                                if nx < 0 || ny < 0 || nz < 0 {
                                    continue;
                                }
                                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                                if nx >= sx || ny >= sy || nz >= sz {
                                    continue;
                                }
                                let ni = mask.index(nx, ny, nz);
                                if mask.data[ni] == 1 && labels[ni] == 0 {
                                    labels[ni] = label;
                                    queue.push_back((nx, ny, nz));
                                }
                            }
                        }
                    }
                }
                sizes.push(size);
            }
        }
    }
    Ok((labels, sizes))
}

/// V_O = N_O × (p_x · p_y · p_z), aggregated over all components.
/// Returns (mm³, cm³).
pub fn organ_volume(mask: &VoxelMask) -> (f64, f64) {
    let mm3 = mask.occupied_voxels() as f64 * mask.voxel_volume();
    (mm3, mm3 / 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    VeryLow,
    Low,
    Average,
    High,
    VeryHigh,
}

impl Level {
    /// Lowercase word used in prompts and CSV exports.
    pub fn word(self) -> &'static str {
        match self {
            Level::VeryLow => "very low",
            Level::Low => "low",
            Level::Average => "average",
            Level::High => "high",
            Level::VeryHigh => "very high",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Level::VeryLow => 0,
            Level::Low => 1,
            Level::Average => 2,
            Level::High => 3,
            Level::VeryHigh => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameter {
    Esophagus,
    Liver,
    Spleen,
    Lsvr,
}

impl Parameter {
    /// Bin edges between the five levels; interior bins are
    /// lower-inclusive, upper-exclusive.
    pub fn thresholds(self) -> [f64; 4] {
        match self {
            Parameter::Esophagus => [15.0, 26.0, 50.0, 74.0],
            Parameter::Liver => [297.0, 782.0, 1267.0, 1753.0],
            Parameter::Spleen => [249.0, 389.0, 529.0, 809.0],
            Parameter::Lsvr => [0.7, 2.4, 6.1, 7.9],
        }
    }
}

/// Five-level categorical binning of a volume (cm³) or ratio.
pub fn level_bin(parameter: Parameter, value: f64) -> Result<Level> {
    if !(value >= 0.0) {
        return Err(TensorError::Invalid {
            op: "level_bin",
            msg: format!("value must be >= 0, got {value}"),
        });
    }
    let crossed = parameter
        .thresholds()
        .iter()
        .filter(|&&t| value >= t)
        .count();
    Ok([
        Level::VeryLow,
        Level::Low,
        Level::Average,
        Level::High,
        Level::VeryHigh,
    ][crossed])
}

/// Prior extraction result for one subject.
#[derive(Debug, Clone)]
pub struct PriorRecord {
    pub volume_e: f64,
    pub volume_l: f64,
    pub volume_s: f64,
    pub lsvr: f64,
    pub levels: [Level; 4],
    pub prompt: String,
    pub onehot: Vec<f64>,
}

/// How the prompt renders volumes and the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Numerical volumes, numerical ratio.
    VolumeN,
    /// Categorical volumes, no ratio sentence.
    VolumeC,
    /// Categorical volumes, numerical ratio.
    VolumeCLsvrN,
    /// Categorical volumes, categorical ratio.
    VolumeCLsvrC,
}

impl PromptMode {
    pub fn parse(s: &str) -> Option<PromptMode> {
        match s {
            "volume_n" => Some(PromptMode::VolumeN),
            "volume_c" => Some(PromptMode::VolumeC),
            "volume_c_lsvr_n" => Some(PromptMode::VolumeCLsvrN),
            "volume_c_lsvr_c" => Some(PromptMode::VolumeCLsvrC),
            _ => None,
        }
    }
}

/// Deterministic prompt instantiation. Categorical slots use lowercase
/// level words; numerical slots print one decimal ("cm3" for volumes,
/// unitless for the ratio).
pub fn prompt_generate(record: &PriorRecord, mode: PromptMode) -> String {
    let vol = |value: f64, level: Level, categorical: bool| {
        if categorical {
            level.word().to_string()
        } else {
            format!("{value:.1} cm3")
        }
    };
    let cat_vol = !matches!(mode, PromptMode::VolumeN);
    let mut s = format!(
        "Esophagus volume: {}. Liver volume: {}. Spleen volume: {}.",
        vol(record.volume_e, record.levels[0], cat_vol),
        vol(record.volume_l, record.levels[1], cat_vol),
        vol(record.volume_s, record.levels[2], cat_vol),
    );
    let ratio = match mode {
        PromptMode::VolumeC => None,
        PromptMode::VolumeN | PromptMode::VolumeCLsvrN => Some(format!("{:.1}", record.lsvr)),
        PromptMode::VolumeCLsvrC => Some(record.levels[3].word().to_string()),
    };
    if let Some(r) = ratio {
        s.push_str(&format!(" Liver-to-spleen volume ratio: {r}."));
    }
    s
}

/// 20-entry binary embedding: 4 parameter groups (esophagus, liver,
/// spleen, lsvr) × 5 levels (VeryLow..VeryHigh), one hot per group.
pub fn onehot_embed(levels: &[Level; 4]) -> Vec<f64> {
    let mut v = vec![0.0; 20];
    for (group, level) in levels.iter().enumerate() {
        v[group * 5 + level.index()] = 1.0;
    }
    v
}

/// Trainable two-layer map reducing the one-hot prior to `out_dim`
/// features (default 64).
pub struct PriorAdaptor {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PriorAdaptor {
    /// (n, 20) one-hot batch -> (n, out_dim) features.
    pub fn apply(&self, onehot: &Tensor) -> Result<Tensor> {
        onehot.linear(&self.w1, &self.b1)?.relu().linear(&self.w2, &self.b2)
    }
}

/// Full extraction from the three organ masks.
pub fn extract_priors(
    eso: &VoxelMask,
    liver: &VoxelMask,
    spleen: &VoxelMask,
    mode: PromptMode,
) -> Result<PriorRecord> {
    let (_, ve) = organ_volume(eso);
    let (_, vl) = organ_volume(liver);
    let (_, vs) = organ_volume(spleen);
    if vs <= 0.0 {
        return Err(TensorError::Invalid {
            op: "extract_priors",
            msg: "spleen mask is empty; LSVR undefined".into(),
        });
    }
    let lsvr = vl / vs;
    let levels = [
        level_bin(Parameter::Esophagus, ve)?,
        level_bin(Parameter::Liver, vl)?,
        level_bin(Parameter::Spleen, vs)?,
        level_bin(Parameter::Lsvr, lsvr)?,
    ];
    let mut record = PriorRecord {
        volume_e: ve,
        volume_l: vl,
        volume_s: vs,
        lsvr,
        levels,
        prompt: String::new(),
        onehot: onehot_embed(&levels),
    };
    record.prompt = prompt_generate(&record, mode);
    Ok(record)
}

/// Columns of the prior-record CSV export.
pub const PRIOR_CSV_HEADER: [&str; 10] = [
    "subject_id",
    "vol_e_cm3",
    "vol_l_cm3",
    "vol_s_cm3",
    "lsvr",
    "level_e",
    "level_l",
    "level_s",
    "level_lsvr",
    "prompt",
];

pub fn prior_csv_row(subject_id: &str, r: &PriorRecord) -> Vec<String> {
    vec![
        subject_id.to_string(),
        format!("{:.6}", r.volume_e),
        format!("{:.6}", r.volume_l),
        format!("{:.6}", r.volume_s),
        format!("{:.6}", r.lsvr),
        r.levels[0].word().to_string(),
        r.levels[1].word().to_string(),
        r.levels[2].word().to_string(),
        r.levels[3].word().to_string(),
        r.prompt.clone(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(shape: [usize; 3], on: &[(usize, usize, usize)], spacing: [f64; 3]) -> VoxelMask {
        let mut data = vec![0u8; shape.iter().product()];
        let m = VoxelMask::new(shape, data.clone(), spacing).unwrap();
        for &(x, y, z) in on {
            data[m.index(x, y, z)] = 1;
        }
        VoxelMask::new(shape, data, spacing).unwrap()
    }

    #[test]
    fn single_voxel_single_component() {
        let m = mask_from([4, 4, 4], &[(1, 2, 3)], [1.0, 1.0, 1.0]);
        let (labels, sizes) = connected_components_3d(&m, 26).unwrap();
        assert_eq!(sizes, vec![1]);
        assert_eq!(labels[m.index(1, 2, 3)], 1);
    }

    #[test]
    fn corner_contact_depends_on_connectivity() {
        let m = mask_from([4, 4, 4], &[(0, 0, 0), (1, 1, 1)], [1.0, 1.0, 1.0]);
        let (_, sizes6) = connected_components_3d(&m, 6).unwrap();
        assert_eq!(sizes6.len(), 2);
        let (_, sizes26) = connected_components_3d(&m, 26).unwrap();
        assert_eq!(sizes26, vec![2]);
        assert!(connected_components_3d(&m, 18).is_err());
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = mask_from([3, 3, 3], &[], [1.0, 1.0, 1.0]);
        let (labels, sizes) = connected_components_3d(&m, 6).unwrap();
        assert!(sizes.is_empty());
        assert!(labels.iter().all(|&l| l == 0));
    }

    /// Independent recursive flood fill producing a canonical partition.
    fn flood_fill_oracle(m: &VoxelMask, connectivity: u8) -> Vec<Vec<usize>> {
        fn fill(
            m: &VoxelMask,
            seen: &mut [bool],
            comp: &mut Vec<usize>,
            (x, y, z): (usize, usize, usize),
            conn: u8,
        ) {
            let i = m.index(x, y, z);
            if seen[i] || m.data[i] == 0 {
                return;
            }
            seen[i] = true;
            comp.push(i);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dz in -1i64..=1 {
                        let step = dx.abs() + dy.abs() + dz.abs();
                        if step == 0 || (conn == 6 && step != 1) {
                            continue;
                        }
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if nx >= 0
                            && ny >= 0
                            && nz >= 0
                            && (nx as usize) < m.shape[0]
                            && (ny as usize) < m.shape[1]
                            && (nz as usize) < m.shape[2]
                        {
                            fill(m, seen, comp, (nx as usize, ny as usize, nz as usize), conn);
                        }
                    }
                }
            }
        }
        let mut seen = vec![false; m.data.len()];
        let mut out = Vec::new();
        for x in 0..m.shape[0] {
            for y in 0..m.shape[1] {
                for z in 0..m.shape[2] {
                    let i = m.index(x, y, z);
                    if m.data[i] == 1 && !seen[i] {
                        let mut comp = Vec::new();
                        fill(m, &mut seen, &mut comp, (x, y, z), connectivity);
                        comp.sort_unstable();
                        out.push(comp);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn components_match_flood_fill_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let density = rng.gen_range(0.05..0.6);
            let data: Vec<u8> = (0..16 * 16 * 16)
                .map(|_| u8::from(rng.gen_bool(density)))
                .collect();
            let m = VoxelMask::new([16, 16, 16], data, [1.0, 1.0, 1.0]).unwrap();
            for conn in [6u8, 26] {
                let (labels, sizes) = connected_components_3d(&m, conn).unwrap();
                let mut got: Vec<Vec<usize>> = (0..sizes.len()).map(|_| Vec::new()).collect();
                for (i, &l) in labels.iter().enumerate() {
                    if l > 0 {
                        got[l as usize - 1].push(i);
                    }
                }
                // Labels are ordered by first voxel in scan order, so the
                // partitions must match the oracle's exactly, in order.
                let expect = flood_fill_oracle(&m, conn);
                assert_eq!(got, expect, "trial {trial} conn {conn}");
                assert_eq!(
                    sizes.iter().sum::<usize>(),
                    m.occupied_voxels(),
                    "sizes must account for every occupied voxel"
                );
            }
        }
    }

    #[test]
    fn volume_follows_eq1() {
        let m = mask_from(
            [10, 10, 10],
            &(0..10)
                .flat_map(|x| (0..10).flat_map(move |y| (0..10).map(move |z| (x, y, z))))
                .collect::<Vec<_>>(),
            [1.0, 1.0, 1.0],
        );
        assert_eq!(organ_volume(&m), (1000.0, 1.0));

        let on: Vec<_> = (0..100).map(|i| (i / 25, (i / 5) % 5, i % 5)).collect();
        let m = mask_from([4, 5, 5], &on, [2.0, 2.0, 2.5]);
        assert_eq!(organ_volume(&m).0, 1000.0);

        // Two separated components of 600 and 400 voxels aggregate.
        let mut on = Vec::new();
        for i in 0..600 {
            on.push((i / 100, (i / 10) % 10, i % 10));
        }
        for i in 0..400 {
            on.push((20 + i / 100, (i / 10) % 10, i % 10));
        }
        let m = mask_from([24, 10, 10], &on, [1.0, 1.0, 1.0]);
        let (_, sizes) = connected_components_3d(&m, 26).unwrap();
        assert_eq!(sizes.len(), 2);
        assert_eq!(organ_volume(&m).0, 1000.0);
    }

    #[test]
    fn level_bins_match_table() {
        assert_eq!(level_bin(Parameter::Liver, 1500.0).unwrap(), Level::High);
        assert_eq!(level_bin(Parameter::Spleen, 900.0).unwrap(), Level::VeryHigh);
        assert_eq!(level_bin(Parameter::Lsvr, 2.4).unwrap(), Level::Average);
        assert_eq!(level_bin(Parameter::Esophagus, 14.9).unwrap(), Level::VeryLow);
        assert_eq!(level_bin(Parameter::Esophagus, 15.0).unwrap(), Level::Low);
        assert_eq!(level_bin(Parameter::Esophagus, 74.0).unwrap(), Level::VeryHigh);
        assert!(level_bin(Parameter::Lsvr, -0.1).is_err());
    }

    #[test]
    fn prompt_templates() {
        let record = PriorRecord {
            volume_e: 30.0,
            volume_l: 1500.0,
            volume_s: 900.0,
            lsvr: 1.7,
            levels: [Level::Average, Level::High, Level::VeryHigh, Level::Low],
            prompt: String::new(),
            onehot: Vec::new(),
        };
        assert_eq!(
            prompt_generate(&record, PromptMode::VolumeCLsvrC),
            "Esophagus volume: average. Liver volume: high. Spleen volume: very high. \
             Liver-to-spleen volume ratio: low."
        );
        let n = prompt_generate(&record, PromptMode::VolumeN);
        assert!(n.contains("Liver volume: 1500.0 cm3."), "{n}");
        assert!(n.contains("Liver-to-spleen volume ratio: 1.7."), "{n}");
        let c = prompt_generate(&record, PromptMode::VolumeC);
        assert!(!c.contains("ratio"), "{c}");
        assert_eq!(
            prompt_generate(&record, PromptMode::VolumeCLsvrN),
            prompt_generate(&record, PromptMode::VolumeCLsvrN)
        );
    }

    #[test]
    fn onehot_layout() {
        let v = onehot_embed(&[Level::Average; 4]);
        for (i, x) in v.iter().enumerate() {
            let expect = if [2, 7, 12, 17].contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(*x, expect, "index {i}");
        }
        let v = onehot_embed(&[Level::VeryLow; 4]);
        assert!([0, 5, 10, 15].iter().all(|&i| v[i] == 1.0));
        let v = onehot_embed(&[Level::Low, Level::VeryHigh, Level::High, Level::Average]);
        assert_eq!(v.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn extraction_round_trip() {
        // 30000 liver voxels at 3.1x3.1x3.1 mm = 893.73 cm³ (Average).
        let liver_on: Vec<_> = (0..30000)
            .map(|i| (i / 900, (i / 30) % 30, i % 30))
            .collect();
        let liver = mask_from([34, 30, 30], &liver_on, [3.1, 3.1, 3.1]);
        let spleen_on: Vec<_> = (0..10000).map(|i| (i / 400, (i / 20) % 20, i % 20)).collect();
        let spleen = mask_from([25, 20, 20], &spleen_on, [3.1, 3.1, 3.1]);
        let eso_on: Vec<_> = (0..4000).map(|i| (i / 100, (i / 10) % 10, i % 10)).collect();
        let eso = mask_from([40, 10, 10], &eso_on, [2.0, 2.0, 2.0]);

        let r = extract_priors(&eso, &liver, &spleen, PromptMode::VolumeCLsvrC).unwrap();
        assert!((r.volume_l - 893.73).abs() < 1e-9);
        assert!((r.lsvr - 3.0).abs() < 1e-12);
        assert_eq!(r.levels[1], Level::Average);
        assert_eq!(r.levels[3], Level::Average);
        assert_eq!(r.onehot.iter().sum::<f64>(), 4.0);
        assert!(r.prompt.starts_with("Esophagus volume: "));

        let row = prior_csv_row("s0001", &r);
        assert_eq!(row.len(), PRIOR_CSV_HEADER.len());
        assert_eq!(row[5], r.levels[0].word());
    }

    proptest! {
        #[test]
        fn level_bin_is_monotone(
            a in 0.0f64..2000.0,
            b in 0.0f64..2000.0,
        ) {
            for p in [Parameter::Esophagus, Parameter::Liver, Parameter::Spleen, Parameter::Lsvr] {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(level_bin(p, lo).unwrap() <= level_bin(p, hi).unwrap());
            }
        }

        #[test]
        fn volume_invariant_under_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8usize * 8 * 8;
            let count = rng.gen_range(0..=n);
            let mut data = vec![0u8; n];
            for v in data.iter_mut().take(count) { *v = 1; }
            let spacing = [rng.gen_range(0.5..4.0), rng.gen_range(0.5..4.0), rng.gen_range(0.5..4.0)];
            let base = VoxelMask::new([8, 8, 8], data.clone(), spacing).unwrap();
            // Fisher–Yates shuffle of the occupancy.
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                data.swap(i, j);
            }
            let shuffled = VoxelMask::new([8, 8, 8], data, spacing).unwrap();
            prop_assert!((organ_volume(&base).0 - organ_volume(&shuffled).0).abs() < 1e-9);
        }

        #[test]
        fn component_sizes_cover_mask(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u8> = (0..10 * 10 * 10).map(|_| u8::from(rng.gen_bool(0.3))).collect();
            let m = VoxelMask::new([10, 10, 10], data, [1.0, 1.0, 1.0]).unwrap();
            let (_, sizes) = connected_components_3d(&m, 6).unwrap();
            prop_assert_eq!(sizes.iter().sum::<usize>(), m.occupied_voxels());
        }
    }
}
