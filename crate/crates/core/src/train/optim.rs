use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Array, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW step with decoupled weight decay; `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut Array,
    grad: &Array,
    m: &mut Array,
    v: &mut Array,
    t: u64,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || m.shape() != grad.shape() || v.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "adamw: param {:?}, grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let t = t.max(1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p = *p * decay - lr * mh / (vh.sqrt() + cfg.eps);
        });
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Array>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        grads.values_mut().for_each(|g| g.mapv_inplace(|v| v * scale));
    }
    norm
}

pub fn global_norm(grads: &BTreeMap<String, Array>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Array,
    v: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, weight_decay: f64) -> Self {
        Self {
            cfg,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor named in `grads`.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, g) in grads {
            let t = store.get(name)?;
            if !t.requires_grad {
                continue;
            }
            let mut p = (*t.data).clone();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Array::zeros(IxDyn(g.shape())),
                v: Array::zeros(IxDyn(g.shape())),
            });
            adamw_update(&mut p, g, &mut mom.m, &mut mom.v, self.step, lr, self.weight_decay, &self.cfg)?;
            store.set_data(name, p)?;
        }
        Ok(())
    }

    /// Step counter and moments, bit-exact (`f64` little endian).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            step: self.step,
            tensors: self
                .moments
                .iter()
                .map(|(k, m)| (k.clone(), m.m.shape().to_vec()))
                .collect(),
        };
        let head = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(8 + head.len());
        buf.extend((head.len() as u64).to_le_bytes());
        buf.extend(&head);
        for m in self.moments.values() {
            for v in m.m.iter().chain(m.v.iter()) {
                buf.extend(v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, cfg: AdamWConfig, weight_decay: f64) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = || Error::Checkpoint(format!("{}: truncated optimizer state", path.display()));
        let hl = u64::from_le_bytes(bytes.get(..8).ok_or_else(bad)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(bytes.get(8..8 + hl).ok_or_else(bad)?)?;
        let mut off = 8 + hl;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let end = off + 8 * n;
            let chunk = bytes.get(off..end).ok_or_else(bad)?;
            off = end;
            Ok(chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut moments = BTreeMap::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let m = Array::from_shape_vec(IxDyn(&shape), take(n)?).unwrap();
            let v = Array::from_shape_vec(IxDyn(&shape), take(n)?).unwrap();
            moments.insert(name, Moments { m, v });
        }
        if off != bytes.len() {
            return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
        }
        Ok(Self {
            cfg,
            weight_decay,
            step: header.step,
            moments,
        })
    }
}
