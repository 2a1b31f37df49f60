//! Named trainable parameter arrays, initialization, and the checkpoint
//! format: a flat binary of 64-bit arrays plus a text index of
//! (name, offset, shape) lines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Result, Tensor, TensorError};

/// All trainable arrays of a model, keyed by name. BTreeMap keeps
/// deterministic iteration order for optimizers and checkpoints.
/// Leaves handed out by [`ParamStore::leaf`] are logged so a trainer can
/// map gradients on any graph back to parameter names.
#[derive(Default)]
pub struct ParamStore {
    entries: BTreeMap<String, (Vec<f64>, Vec<usize>)>,
    issued: std::cell::RefCell<Vec<(String, Tensor)>>,
}

impl Clone for ParamStore {
    fn clone(&self) -> ParamStore {
        ParamStore {
            entries: self.entries.clone(),
            issued: std::cell::RefCell::new(Vec::new()),
        }
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: Vec<usize>) {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {name}: {} values for shape {shape:?}",
            data.len()
        );
        assert!(
            self.entries.insert(name.to_string(), (data, shape)).is_none(),
            "param {name} registered twice"
        );
    }

    /// Xavier-uniform array: ±√(6/(fan_in+fan_out)).
    pub fn insert_xavier(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, data, shape);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        let n = shape.iter().product();
        self.insert(name, vec![0.0; n], shape);
    }

    pub fn get(&self, name: &str) -> Result<(&Vec<f64>, &Vec<usize>)> {
        self.entries
            .get(name)
            .map(|(d, s)| (d, s))
            .ok_or_else(|| TensorError::Invalid {
                op: "param_store",
                msg: format!("unknown parameter {name}"),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        self.entries
            .get_mut(name)
            .map(|(d, _)| d)
            .ok_or_else(|| TensorError::Invalid {
                op: "param_store",
                msg: format!("unknown parameter {name}"),
            })
    }

    /// Trainable leaf on `graph` holding this parameter's current values.
    pub fn leaf(&self, graph: &Rc<Graph>, name: &str) -> Result<Tensor> {
        let (data, shape) = self.get(name)?;
        let t = Tensor::leaf(graph, data.clone(), shape.clone(), true);
        self.issued.borrow_mut().push((name.to_string(), t.clone()));
        Ok(t)
    }

    /// Takes the log of leaves issued since the last drain.
    pub fn drain_issued(&self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.issued.borrow_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|(d, _)| d.len()).sum()
    }

    /// Writes `<stem>.bin` (concatenated little-endian f64 arrays) and
    /// `<stem>.idx` (one "name offset dims..." line per array).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let io = |e: std::io::Error| TensorError::Invalid {
            op: "checkpoint_save",
            msg: e.to_string(),
        };
        let mut bin = Vec::new();
        let mut idx = String::new();
        for (name, (data, shape)) in &self.entries {
            let offset = bin.len();
            for x in data {
                bin.extend_from_slice(&x.to_le_bytes());
            }
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            idx.push_str(&format!("{name} {offset} {}\n", dims.join(" ")));
        }
        let mut f = std::fs::File::create(stem.with_extension("bin")).map_err(io)?;
        f.write_all(&bin).map_err(io)?;
        std::fs::write(stem.with_extension("idx"), idx).map_err(io)
    }

    pub fn load(stem: &Path) -> Result<ParamStore> {
        let bad = |msg: String| TensorError::Invalid {
            op: "checkpoint_load",
            msg,
        };
        let bin = std::fs::read(stem.with_extension("bin")).map_err(|e| bad(e.to_string()))?;
        let idx = std::fs::read_to_string(stem.with_extension("idx"))
            .map_err(|e| bad(e.to_string()))?;
        let mut store = ParamStore::new();
        for line in idx.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let name = parts.next().ok_or_else(|| bad(format!("bad index line: {line}")))?;
            let offset: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("bad offset in: {line}")))?;
            let shape: Vec<usize> = parts
                .map(|s| s.parse().map_err(|_| bad(format!("bad dim in: {line}"))))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > bin.len() {
                return Err(bad(format!("{name} overruns binary ({end} > {})", bin.len())));
            }
            let data = bin[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(name, data, shape);
        }
        Ok(store)
    }
}

/// RNG for parameter initialization, derived from the root seed.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(seed, "init", 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = init_rng(1);
        let mut store = ParamStore::new();
        store.insert_xavier("head.w", vec![4, 3], 4, 3, &mut rng);
        store.insert_zeros("head.b", vec![3]);
        store.insert("stem.w", (0..8).map(|i| i as f64).collect(), vec![2, 4]);

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        store.save(&stem).unwrap();
        let loaded = ParamStore::load(&stem).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.scalar_count(), store.scalar_count());
        for name in store.names() {
            assert_eq!(store.get(name).unwrap(), loaded.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.insert_xavier("w", vec![30, 20], 30, 20, &mut init_rng(9));
        b.insert_xavier("w", vec![30, 20], 30, 20, &mut init_rng(9));
        assert_eq!(a.get("w").unwrap().0, b.get("w").unwrap().0);
        let bound = (6.0 / 50.0f64).sqrt();
        assert!(a.get("w").unwrap().0.iter().all(|x| x.abs() <= bound));
        // Not degenerate.
        assert!(a.get("w").unwrap().0.iter().any(|x| x.abs() > bound / 10.0));
    }

    #[test]
    fn duplicate_registration_panics() {
        let mut store = ParamStore::new();
        store.insert_zeros("w", vec![2]);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(move || {
            store.insert_zeros("w", vec![2])
        }));
        assert!(result.is_err());
    }

    #[test]
    fn leaf_reflects_current_values() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0, 2.0], vec![2]);
        store.get_mut("w").unwrap()[0] = 5.0;
        let g = Graph::new();
        let t = store.leaf(&g, "w").unwrap();
        assert_eq!(t.value(), vec![5.0, 2.0]);
        assert!(t.requires_grad());
        assert!(store.leaf(&g, "missing").is_err());
    }
}
