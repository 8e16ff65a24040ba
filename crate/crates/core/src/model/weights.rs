use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::config::ViPFormerConfig;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Optimised by gradient descent.
    Learnable,
    /// Carried state that is not optimised (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, name-addressable tensor collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub(crate) fn expect(&self, name: &str) -> &Tensor<T> {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn learnable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Learnable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Truncated normal (σ = 0.02, cut at ±2σ) weight initialiser.
pub fn trunc_normal<T: Real>(shape: &[usize], rng: &mut RngStream) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z = rng.normal();
            if z.abs() <= 2.0 {
                break T::lit(0.02 * z);
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("valid init shape")
}

struct Builder<'a, T: Real> {
    store: ParamStore<T>,
    rng: &'a mut RngStream,
}

impl<T: Real> Builder<'_, T> {
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = trunc_normal(&[fan_in, fan_out], self.rng);
        self.store.insert(format!("{prefix}.weight"), w, ParamKind::Learnable)?;
        self.store.insert(
            format!("{prefix}.bias"),
            Tensor::zeros(&[fan_out]),
            ParamKind::Learnable,
        )
    }

    fn norm(&mut self, prefix: &str, width: usize) -> Result<()> {
        self.store.insert(
            format!("{prefix}.gamma"),
            Tensor::full(&[width], T::one()),
            ParamKind::Learnable,
        )?;
        self.store.insert(
            format!("{prefix}.beta"),
            Tensor::zeros(&[width]),
            ParamKind::Learnable,
        )
    }

    fn batch_norm(&mut self, prefix: &str, width: usize) -> Result<()> {
        self.norm(prefix, width)?;
        self.store.insert(
            format!("{prefix}.running_mean"),
            Tensor::zeros(&[width]),
            ParamKind::Buffer,
        )?;
        self.store.insert(
            format!("{prefix}.running_var"),
            Tensor::full(&[width], T::one()),
            ParamKind::Buffer,
        )?;
        self.store.insert(
            format!("{prefix}.updates"),
            Tensor::zeros(&[1]),
            ParamKind::Buffer,
        )
    }
}

/// Freshly initialised weights for `config`.
pub fn init_weights<T: Real>(config: &ViPFormerConfig, rng: &RngStream) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut init = rng.substream(crate::rng::Purpose::Init, 0);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: &mut init,
    };
    let d = config.dim;
    let ph = config.point_hidden;
    b.linear("image_adapter", config.image_patch_width(), d)?;
    let pos = trunc_normal(&[config.image_tokens(), d], b.rng);
    b.store.insert("image_pos", pos, ParamKind::Learnable)?;
    b.linear("point_adapter.fc1", config.point_patch_width(), ph)?;
    b.linear("point_adapter.fc2", ph, d)?;
    b.linear("point_pos.fc1", config.point_channels, ph)?;
    b.linear("point_pos.fc2", ph, d)?;
    for l in 0..config.layers {
        let p = format!("encoder.{l}");
        b.norm(&format!("{p}.ln1"), d)?;
        b.linear(&format!("{p}.attn.qkv"), d, 3 * d)?;
        b.linear(&format!("{p}.attn.proj"), d, d)?;
        b.norm(&format!("{p}.ln2"), d)?;
        b.linear(&format!("{p}.mlp.fc1"), d, config.mlp_ratio * d)?;
        b.linear(&format!("{p}.mlp.fc2"), config.mlp_ratio * d, d)?;
    }
    b.batch_norm("output_adapter.bn1", 2 * d)?;
    b.linear("output_adapter.fc1", 2 * d, d)?;
    b.batch_norm("output_adapter.bn2", d)?;
    b.linear("output_adapter.fc2", d, config.out_dim)?;
    Ok(b.store)
}

/// Adds (or replaces) the finetuning head `{2D → D, ReLU, dropout, D → classes}`.
pub fn init_classifier_head<T: Real>(
    store: &mut ParamStore<T>,
    config: &ViPFormerConfig,
    num_classes: usize,
    rng: &RngStream,
) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::param("classifier needs at least one class"));
    }
    store.remove_prefix("head.");
    let mut init = rng.substream(crate::rng::Purpose::Init, 1);
    let taken = std::mem::take(store);
    let mut b = Builder {
        store: taken,
        rng: &mut init,
    };
    let result = b
        .linear("head.fc1", 2 * config.dim, config.dim)
        .and_then(|_| b.linear("head.fc2", config.dim, num_classes));
    *store = b.store;
    result
}
