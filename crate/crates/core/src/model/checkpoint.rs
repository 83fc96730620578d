//! Versioned checkpoint container.
//!
//! Layout: the magic line `NMTFORGE-CKPT-1`, one line of JSON describing the
//! config, array names and shapes, RNG state and free-form metadata, then
//! every array's values as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamVisit, TransformerParams};
use super::TransformerConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "NMTFORGE-CKPT-1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TransformerConfig,
    pub params: TransformerParams,
    /// Seed of the run; together with `step` it fixes every later random draw.
    pub seed: u64,
    pub step: u64,
    /// Additional arrays such as optimizer moments.
    pub extra: Vec<(String, ArrayD<f64>)>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    rng: RngState,
    params: Vec<ArrayEntry>,
    extra: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(config: TransformerConfig, params: TransformerParams) -> Self {
        Checkpoint { config, params, seed: 0, step: 0, extra: Vec::new(), meta: serde_json::Value::Null }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut params = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        self.params.visit("", &mut |name, a| {
            params.push(ArrayEntry { name, shape: a.shape().to_vec() });
            for v in a.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        });
        let mut extra = Vec::new();
        for (name, a) in &self.extra {
            extra.push(ArrayEntry { name: name.clone(), shape: a.shape().to_vec() });
            for v in a.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            config: self.config.clone(),
            rng: RngState { seed: self.seed, step: self.step },
            params,
            extra,
            meta: self.meta.clone(),
        };
        let mut out = format!("{CHECKPOINT_MAGIC}\n").into_bytes();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        out.extend(data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let rest = bytes
            .strip_prefix(format!("{CHECKPOINT_MAGIC}\n").as_bytes())
            .ok_or_else(|| bad(format!("missing {CHECKPOINT_MAGIC} header")))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;
        let mut data = &rest[nl + 1..];
        let mut take = |shape: &[usize], name: &str| -> Result<ArrayD<f64>> {
            let n: usize = shape.iter().product();
            if data.len() < n * 8 {
                return Err(bad(format!("array {name} is truncated")));
            }
            let values = data[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            data = &data[n * 8..];
            Ok(ArrayD::from_shape_vec(IxDyn(shape), values).expect("length matches shape"))
        };

        let mut params = TransformerParams::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0));
        let expected = params.named_shapes();
        if expected.len() != header.params.len() {
            return Err(bad(format!("expected {} parameter arrays, found {}", expected.len(), header.params.len())));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&header.params) {
            if *name != entry.name || *shape != entry.shape {
                return Err(bad(format!("parameter {} {:?} does not match expected {name} {shape:?}", entry.name, entry.shape)));
            }
            loaded.push(take(&entry.shape, &entry.name)?);
        }
        let mut it = loaded.into_iter();
        params.visit_mut("", &mut |_, mut a| a.assign(&it.next().expect("counted")));
        let extra = header.extra.iter().map(|e| Ok((e.name.clone(), take(&e.shape, &e.name)?))).collect::<Result<Vec<_>>>()?;
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        Ok(Checkpoint { config: header.config, params, seed: header.rng.seed, step: header.rng.step, extra, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_bitwise_identical() {
        let mut cfg = TransformerConfig::tiny(11, 13);
        cfg.n_layers = 1;
        let params = TransformerParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut ck = Checkpoint::new(cfg, params);
        ck.seed = 99;
        ck.step = 17;
        ck.extra.push(("adam.m.x".into(), ArrayD::from_elem(IxDyn(&[2, 3]), -0.5)));
        ck.meta = serde_json::json!({"best_bleu": 12.5});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut a = Vec::new();
        ck.params.visit("", &mut |_, v| a.extend(v.iter().map(|x| x.to_bits())));
        let mut b = Vec::new();
        back.params.visit("", &mut |_, v| b.extend(v.iter().map(|x| x.to_bits())));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = TransformerConfig::tiny(5, 5);
        let params = TransformerParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let bytes = Checkpoint::new(cfg, params).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE\n{}\n").is_err());
    }
}
