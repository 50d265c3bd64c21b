use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Var> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&tensor)?;
        self.entries.push((name, var.clone()));
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Variables whose name starts with `prefix`, in insertion order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names and little-endian f32 contents of the matching parameters.
    pub fn hash_prefix(&self, prefix: &str) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            hasher.update(name.as_bytes());
            let values = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn hash(&self) -> Result<String> {
        self.hash_prefix("")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path.as_ref())?;
        Ok(())
    }

    /// Overwrites one parameter in place; the shape must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter `{name}`")))?;
        if value.dims() != var.dims() {
            return Err(Error::Integrity(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Overwrites every parameter from a safetensors file; names and shapes must match.
    pub fn load_into(&self, path: impl AsRef<Path>, device: &Device) -> Result<()> {
        let path = path.as_ref();
        let map = candle_core::safetensors::load(path, device)?;
        for (name, var) in &self.entries {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("{} lacks parameter `{name}`", path.display())))?;
            if t.dims() != var.dims() {
                return Err(Error::Integrity(format!(
                    "parameter `{name}` has shape {:?}, checkpoint {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Normal samples with the given std, redrawn outside two standard deviations when `truncate`.
pub fn normal_tensor<R: Rng>(
    rng: &mut R,
    shape: &[usize],
    std: f64,
    truncate: bool,
    device: &Device,
) -> Result<Tensor> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))?;
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if !truncate || v.abs() <= 2.0 * std {
                break v as f32;
            }
        })
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn hash_changes_with_contents() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let v = store
            .insert(
                "a.w",
                normal_tensor(&mut rng, &[2, 3], 0.02, true, &Device::Cpu).unwrap(),
            )
            .unwrap();
        store
            .insert("b.w", Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        let before = store.hash_prefix("a.").unwrap();
        let b_before = store.hash_prefix("b.").unwrap();
        v.set(&Tensor::ones((2, 3), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_ne!(before, store.hash_prefix("a.").unwrap());
        assert_eq!(b_before, store.hash_prefix("b.").unwrap());
        assert!(store
            .insert("a.w", Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap())
            .is_err());
    }

    #[test]
    fn truncated_normal_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = normal_tensor(&mut rng, &[1000], 0.02, true, &Device::Cpu).unwrap();
        let v = t.to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-7));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut a = ParamStore::new();
        a.insert("x", normal_tensor(&mut rng, &[4], 1.0, false, &Device::Cpu).unwrap())
            .unwrap();
        let mut b = ParamStore::new();
        b.insert("x", Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        let p = dir.path().join("p.safetensors");
        a.save(&p).unwrap();
        b.load_into(&p, &Device::Cpu).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    }
}
