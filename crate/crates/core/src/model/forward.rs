use super::{ModelParams, StackConfig};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::tubelet::{make_tube_mask, masked_rows_mse, patchify, select_visible, TubeMask};

/// One forward/backward pass over a borrowed parameter set.
///
/// Parameters are copied onto the tape on first use, so a classification
/// pass never touches decoder weights.
pub struct Session<'p, T: Scalar> {
    params: &'p ModelParams<T>,
    tape: Tape<T>,
    bound: Vec<Option<Var>>,
}

/// Per-parameter gradients from one session, aligned with `params.names()`.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, i: usize) -> Option<&[T]> {
        self.grads.get(i).and_then(|g| g.as_deref())
    }

    /// Adds `scale * grad` into each trainable tensor's gradient buffer.
    pub fn accumulate_into(&self, params: &mut ModelParams<T>, scale: T) -> Result<()> {
        for (t, g) in params.tensors_mut().iter_mut().zip(&self.grads) {
            if let (true, Some(g)) = (t.requires_grad(), g) {
                t.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ModelParams<T>) -> Self {
        Self {
            params,
            tape: Tape::new(),
            bound: vec![None; params.len()],
        }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        let i = self.params.index_of(name)?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.tensors()[i].clone());
        self.bound[i] = Some(v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let eps = T::lit(self.params.config().ln_eps);
        self.tape.layer_norm(x, g, b, eps)
    }

    fn attention(&mut self, x: Var, prefix: &str, stack: StackConfig) -> Result<Var> {
        let d = stack.dim;
        let dh = d / stack.heads;
        let qkv = self.linear(x, &format!("{prefix}.qkv"))?;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut heads = Vec::with_capacity(stack.heads);
        for h in 0..stack.heads {
            let q = self.tape.slice_cols(qkv, h * dh, (h + 1) * dh)?;
            let k = self.tape.slice_cols(qkv, d + h * dh, d + (h + 1) * dh)?;
            let v = self.tape.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
            let kt = self.tape.transpose(k)?;
            let s = self.tape.matmul(q, kt)?;
            let s = self.tape.scale(s, scale);
            let a = self.tape.softmax(s, 1)?;
            heads.push(self.tape.matmul(a, v)?);
        }
        let o = self.tape.concat_cols(&heads)?;
        self.linear(o, &format!("{prefix}.proj"))
    }

    fn block(&mut self, x: Var, prefix: &str, stack: StackConfig) -> Result<Var> {
        let h = self.norm(x, &format!("{prefix}.norm1"))?;
        let h = self.attention(h, &format!("{prefix}.attn"), stack)?;
        let x = self.tape.add(x, h)?;
        let h = self.norm(x, &format!("{prefix}.norm2"))?;
        let h = self.linear(h, &format!("{prefix}.mlp.fc1"))?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, &format!("{prefix}.mlp.fc2"))?;
        self.tape.add(x, h)
    }

    /// Embeds tokens at grid positions `index_map`, optionally prepends the
    /// CLS embedding, and runs the encoder stack. Row 0 is `z_cls` when
    /// `with_cls` is set.
    pub fn encode(&mut self, tokens: &Tensor<T>, index_map: &[usize], with_cls: bool) -> Result<Var> {
        let (v, d) = tokens.dims2()?;
        let grid = self.params.config().grid()?;
        if d != grid.token_dim() || v != index_map.len() {
            return Err(Error::dim(format!(
                "tokens {:?} with {} positions; expected token dim {}",
                tokens.shape(),
                index_map.len(),
                grid.token_dim()
            )));
        }
        let n = grid.num_tokens();
        if let Some(&p) = index_map.iter().find(|&&p| p >= n) {
            return Err(Error::Index(format!("position {p} out of range for {n} grid tokens")));
        }
        let x = self.tape.constant(tokens.clone());
        let x = self.linear(x, "patch_embed")?;
        let table = self.tape.constant(self.params.pos_encoder().clone());
        let pos = self.tape.gather_rows(table, index_map)?;
        let mut x = self.tape.add(x, pos)?;
        if with_cls {
            let cls = self.param("cls_token")?;
            x = self.tape.concat_rows(&[cls, x])?;
        }
        let stack = self.params.config().encoder;
        for i in 0..stack.depth {
            x = self.block(x, &format!("encoder.blocks.{i}"), stack)?;
        }
        Ok(x)
    }

    /// Reconstructs the masked tokens from encoder output `z` (visible rows
    /// in grid order). Returns `[M, token_dim]` in grid order.
    pub fn decode_reconstruct(&mut self, z: Var, mask: &TubeMask) -> Result<Var> {
        let grid = self.params.config().grid()?;
        if mask.grid() != &grid {
            return Err(Error::dim("mask grid differs from the model grid"));
        }
        let visible = mask.visible_indices();
        let masked = mask.masked_indices();
        let (v, _) = self.tape.value(z).dims2()?;
        if v != visible.len() || v + masked.len() != grid.num_tokens() {
            return Err(Error::dim(format!(
                "{v} encoded rows for {} visible and {} masked of {} tokens",
                visible.len(),
                masked.len(),
                grid.num_tokens()
            )));
        }
        let x = self.linear(z, "decoder.embed")?;
        let mask_token = self.param("decoder.mask_token")?;
        let pool = self.tape.concat_rows(&[x, mask_token])?;
        let mut slot = vec![v; grid.num_tokens()];
        for (k, &p) in visible.iter().enumerate() {
            slot[p] = k;
        }
        let full = self.tape.gather_rows(pool, &slot)?;
        let table = self.tape.constant(self.params.pos_decoder().clone());
        let mut x = self.tape.add(full, table)?;
        let stack = self.params.config().decoder;
        for i in 0..stack.depth {
            x = self.block(x, &format!("decoder.blocks.{i}"), stack)?;
        }
        let x = self.norm(x, "decoder.norm")?;
        let x = self.tape.gather_rows(x, &masked)?;
        self.linear(x, "decoder.head")
    }

    /// Patchify, tube-mask, encode visible tokens, decode, masked MSE.
    pub fn pretrain_loss(&mut self, frames: &Tensor<T>, ratio: f64, seed: u64) -> Result<Var> {
        let grid = self.params.config().grid()?;
        let tokens = patchify(frames, &grid)?;
        let mask = make_tube_mask(&grid, ratio, seed)?;
        self.masked_loss(&tokens, &mask)
    }

    /// Reconstruction loss for pre-patchified tokens under a given mask.
    pub fn masked_loss(&mut self, tokens: &Tensor<T>, mask: &TubeMask) -> Result<Var> {
        let (visible, index_map) = select_visible(tokens, mask)?;
        let z = self.encode(&visible, &index_map, false)?;
        let pred = self.decode_reconstruct(z, mask)?;
        masked_rows_mse(&mut self.tape, pred, tokens, &mask.masked_indices())
    }

    /// `W . z_cls + b` over all tokens, unmasked. Shape `[1, 1]`.
    pub fn classify_logit(&mut self, frames: &Tensor<T>) -> Result<Var> {
        let grid = self.params.config().grid()?;
        let tokens = patchify(frames, &grid)?;
        let all: Vec<usize> = (0..grid.num_tokens()).collect();
        let z = self.encode(&tokens, &all, true)?;
        let z_cls = self.tape.gather_rows(z, &[0])?;
        let w = self.param("classifier.weight")?;
        let wt = self.tape.transpose(w)?;
        let logit = self.tape.matmul(z_cls, wt)?;
        let b = self.param("classifier.bias")?;
        self.tape.add_row(logit, b)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads<T>> {
        let grads: Gradients<T> = self.tape.backward(loss)?;
        Ok(ParamGrads {
            grads: self
                .bound
                .iter()
                .map(|b| b.and_then(|v| grads.get(v).map(<[T]>::to_vec)))
                .collect(),
        })
    }
}

/// Encoder output for `visible` tokens at grid positions `index_map`.
pub fn encode<T: Scalar>(
    visible: &Tensor<T>,
    index_map: &[usize],
    params: &ModelParams<T>,
    with_cls: bool,
) -> Result<Tensor<T>> {
    let mut s = Session::new(params);
    let z = s.encode(visible, index_map, with_cls)?;
    Ok(s.value(z).clone())
}

pub fn decode_reconstruct<T: Scalar>(
    z: &Tensor<T>,
    mask: &TubeMask,
    params: &ModelParams<T>,
) -> Result<Tensor<T>> {
    let mut s = Session::new(params);
    let zv = s.tape.constant(z.clone());
    let out = s.decode_reconstruct(zv, mask)?;
    Ok(s.value(out).clone())
}

/// Reconstruction loss of one `[C, T, H, W]` clip under a fresh tube mask.
pub fn pretrain_forward<T: Scalar>(
    frames: &Tensor<T>,
    ratio: f64,
    seed: u64,
    params: &ModelParams<T>,
) -> Result<T> {
    let mut s = Session::new(params);
    let loss = s.pretrain_loss(frames, ratio, seed)?;
    Ok(s.value(loss).data()[0])
}

/// Seizure probability `sigmoid(W . z_cls + b)` for one clip.
pub fn classify_forward<T: Scalar>(frames: &Tensor<T>, params: &ModelParams<T>) -> Result<T> {
    let mut s = Session::new(params);
    let logit = s.classify_logit(frames)?;
    let y = s.tape.sigmoid(logit);
    Ok(s.value(y).data()[0])
}
