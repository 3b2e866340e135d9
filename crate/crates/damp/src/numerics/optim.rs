use super::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub l2: f64,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 1e-3,
            decay: 0.9,
            eps: 1e-8,
            l2: 1e-5,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    value: Tensor,
    grad: Tensor,
    accum: Tensor,
    touched: bool,
}

/// Named parameter tensors with per-tensor RMSProp accumulators.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
    pub seed: u64,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            slots: BTreeMap::new(),
            seed,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let (r, c) = value.shape();
        self.slots.insert(
            name.to_string(),
            Slot {
                value,
                grad: Tensor::zeros(r, c),
                accum: Tensor::zeros(r, c),
                touched: false,
            },
        );
    }

    /// Fresh uniform[-scale, scale] parameter drawn from a stream keyed by
    /// the store seed and the parameter name.
    pub fn insert_uniform(&mut self, name: &str, rows: usize, cols: usize, scale: f64) {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let t = Tensor::uniform(rows, cols, -scale, scale, &mut rng);
        self.insert(name, t);
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn accum(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.accum)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) {
        let slot = self.slots.get_mut(name).expect("unknown parameter");
        assert_eq!(slot.grad.shape(), g.shape(), "gradient shape mismatch");
        for (o, v) in slot.grad.data.iter_mut().zip(&g.data) {
            *o += v;
        }
        slot.touched = true;
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data.iter_mut().for_each(|v| *v = 0.0);
            slot.touched = false;
        }
    }

    /// RMSProp update over parameters whose gradients were populated this
    /// step; untouched parameters stay bitwise identical. Gradients are
    /// cleared afterwards.
    pub fn rmsprop_step(&mut self, cfg: &RmsPropConfig) {
        let scale = match cfg.clip_norm {
            Some(max) if max > 0.0 => {
                let sq: f64 = self
                    .slots
                    .values()
                    .filter(|s| s.touched)
                    .flat_map(|s| s.grad.data.iter())
                    .map(|g| g * g)
                    .sum();
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        for slot in self.slots.values_mut() {
            if !slot.touched {
                continue;
            }
            for i in 0..slot.value.data.len() {
                let g = slot.grad.data[i] * scale + cfg.l2 * slot.value.data[i];
                slot.accum.data[i] = cfg.decay * slot.accum.data[i] + (1.0 - cfg.decay) * g * g;
                slot.value.data[i] -= cfg.lr * g / (slot.accum.data[i] + cfg.eps).sqrt();
            }
            slot.grad.data.iter_mut().for_each(|v| *v = 0.0);
            slot.touched = false;
        }
    }

    /// (name, tensor) pairs for checkpointing: values then accumulators.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for (name, slot) in &self.slots {
            out.push((name.clone(), slot.value.clone()));
        }
        for (name, slot) in &self.slots {
            out.push((format!("rms/{name}"), slot.accum.clone()));
        }
        out
    }

    pub fn import(seed: u64, tensors: Vec<(String, Tensor)>) -> Self {
        let mut store = ParameterStore::new(seed);
        let mut accums = Vec::new();
        for (name, t) in tensors {
            if let Some(base) = name.strip_prefix("rms/") {
                accums.push((base.to_string(), t));
            } else {
                store.insert(&name, t);
            }
        }
        for (name, t) in accums {
            if let Some(slot) = store.slots.get_mut(&name) {
                slot.accum = t;
            }
        }
        store
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut store = ParameterStore::new(1);
        store.insert("w", Tensor::col(&[1.0, -2.0]));
        let before = store.value("w").unwrap().clone();
        store.rmsprop_step(&RmsPropConfig::default());
        assert_eq!(&before, store.value("w").unwrap());
    }

    #[test]
    fn single_step_matches_update_formula() {
        let mut store = ParameterStore::new(1);
        store.insert("w", Tensor::scalar(0.0));
        store.accumulate_grad("w", &Tensor::scalar(1.0));
        let cfg = RmsPropConfig {
            lr: 1e-3,
            decay: 0.9,
            eps: 1e-8,
            l2: 0.0,
            clip_norm: None,
        };
        store.rmsprop_step(&cfg);
        let accum = store.accum("w").unwrap().data[0];
        assert!((accum - 0.1).abs() < 1e-15);
        let theta = store.value("w").unwrap().data[0];
        assert!((theta - (-3.16228e-3)).abs() < 1e-7);
        // gradients cleared
        assert_eq!(store.grad("w").unwrap().data[0], 0.0);
    }

    #[test]
    fn export_import_round_trip() {
        let mut store = ParameterStore::new(9);
        store.insert_uniform("a", 3, 2, 0.08);
        store.insert_uniform("b", 1, 4, 0.08);
        store.accumulate_grad("a", &Tensor::zeros(3, 2));
        let restored = ParameterStore::import(9, store.export());
        for name in ["a", "b"] {
            assert_eq!(store.value(name), restored.value(name));
            assert_eq!(store.accum(name), restored.accum(name));
        }
    }
}
