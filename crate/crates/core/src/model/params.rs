use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::seeds;

const INIT_STD: f64 = 0.02;

/// Named parameter tensors plus the fixed positional tables.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
    pos_encoder: Tensor<T>,
    pos_decoder: Tensor<T>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Sinusoidal table over `positions` flat grid indices:
/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_table<T: Scalar>(positions: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions * dim);
    for p in 0..positions {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data.push(T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![positions, dim], data).expect("table shape")
}

fn truncated_normal(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = seeds::rng(seed);
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect()
}

fn block_layout(prefix: &str, dim: usize, mlp: usize) -> Vec<(String, Vec<usize>, Init)> {
    let hidden = dim * mlp;
    vec![
        (format!("{prefix}.norm1.weight"), vec![dim], Init::Ones),
        (format!("{prefix}.norm1.bias"), vec![dim], Init::Zeros),
        (format!("{prefix}.attn.qkv.weight"), vec![dim, 3 * dim], Init::Normal),
        (format!("{prefix}.attn.qkv.bias"), vec![3 * dim], Init::Zeros),
        (format!("{prefix}.attn.proj.weight"), vec![dim, dim], Init::Normal),
        (format!("{prefix}.attn.proj.bias"), vec![dim], Init::Zeros),
        (format!("{prefix}.norm2.weight"), vec![dim], Init::Ones),
        (format!("{prefix}.norm2.bias"), vec![dim], Init::Zeros),
        (format!("{prefix}.mlp.fc1.weight"), vec![dim, hidden], Init::Normal),
        (format!("{prefix}.mlp.fc1.bias"), vec![hidden], Init::Zeros),
        (format!("{prefix}.mlp.fc2.weight"), vec![hidden, dim], Init::Normal),
        (format!("{prefix}.mlp.fc2.bias"), vec![dim], Init::Zeros),
    ]
}

fn layout(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>, Init)>> {
    let grid = config.grid()?;
    let token = grid.token_dim();
    let (de, dd) = (config.encoder.dim, config.decoder.dim);
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![token, de], Init::Normal),
        ("patch_embed.bias".to_string(), vec![de], Init::Zeros),
    ];
    for i in 0..config.encoder.depth {
        out.extend(block_layout(&format!("encoder.blocks.{i}"), de, config.mlp_ratio));
    }
    out.push(("decoder.embed.weight".into(), vec![de, dd], Init::Normal));
    out.push(("decoder.embed.bias".into(), vec![dd], Init::Zeros));
    out.push(("decoder.mask_token".into(), vec![1, dd], Init::Normal));
    for i in 0..config.decoder.depth {
        out.extend(block_layout(&format!("decoder.blocks.{i}"), dd, config.mlp_ratio));
    }
    out.push(("decoder.norm.weight".into(), vec![dd], Init::Ones));
    out.push(("decoder.norm.bias".into(), vec![dd], Init::Zeros));
    out.push(("decoder.head.weight".into(), vec![dd, token], Init::Normal));
    out.push(("decoder.head.bias".into(), vec![token], Init::Zeros));
    out.push(("cls_token".into(), vec![1, de], Init::Normal));
    out.push(("classifier.weight".into(), vec![1, de], Init::Zeros));
    out.push(("classifier.bias".into(), vec![1], Init::Zeros));
    Ok(out)
}

/// Fresh parameters: truncated normal (std 0.02, cut at two std) for weight
/// matrices and embeddings, ones for norm gains, zeros for every bias and the
/// classifier. Each tensor draws from its own seed stream keyed by name.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, init) in layout(config)? {
        let n = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal => truncated_normal(seeds::derive(seed, &name), n)
                .into_iter()
                .map(T::lit)
                .collect(),
        };
        tensors.push(Tensor::new(shape, data)?.with_requires_grad(true));
        names.push(name);
    }
    ModelParams::from_parts(config.clone(), names, tensors)
}

impl<T: Scalar> ModelParams<T> {
    pub(crate) fn from_parts(
        config: ModelConfig,
        names: Vec<String>,
        tensors: Vec<Tensor<T>>,
    ) -> Result<Self> {
        let grid = config.grid()?;
        let mut lookup = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if lookup.insert(n.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate parameter name {n}")));
            }
        }
        Ok(Self {
            pos_encoder: sinusoidal_table(grid.num_tokens(), config.encoder.dim),
            pos_decoder: sinusoidal_table(grid.num_tokens(), config.decoder.dim),
            config,
            names,
            tensors,
            lookup,
        })
    }

    /// Same names, shapes and trainable flags with new values.
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != self.tensors.len()
            || tensors.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim("replacement tensors differ in count or shape"));
        }
        let tensors = tensors
            .into_iter()
            .zip(&self.tensors)
            .map(|(t, old)| t.with_requires_grad(old.requires_grad()))
            .collect();
        Self::from_parts(self.config.clone(), self.names.clone(), tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    /// Mutable access for optimizers; names and shapes stay fixed.
    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.lookup.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.index_of(name)?;
        Ok(&mut self.tensors[i])
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: &Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(format!(
                "{name}: cannot assign {:?} into {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        let requires = slot.requires_grad();
        *slot = value.clone().with_requires_grad(requires);
        Ok(())
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        let keep: Vec<bool> = self.names.iter().map(|n| !n.starts_with(prefix)).collect();
        let mut k = keep.iter();
        self.names.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.tensors.retain(|_| *k.next().unwrap());
        self.lookup = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    pub fn pos_encoder(&self) -> &Tensor<T> {
        &self.pos_encoder
    }

    pub fn pos_decoder(&self) -> &Tensor<T> {
        &self.pos_decoder
    }

    /// Total number of scalar parameters (positional tables excluded).
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Marks parameters trainable iff `f(name)` holds.
    pub fn set_trainable(&mut self, f: impl Fn(&str) -> bool) {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            t.set_requires_grad(f(n));
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams::from_parts(
            self.config.clone(),
            self.names.clone(),
            self.tensors
                .iter()
                .map(|t| {
                    let r = t.requires_grad();
                    t.cast::<U>().with_requires_grad(r)
                })
                .collect(),
        )
        .expect("validated config")
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_identical(&self, other: &ModelParams<T>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
            })
    }
}

/// Expected parameter names and shapes for `config`, in canonical order.
pub(crate) fn expected_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(layout(config)?
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect())
}
