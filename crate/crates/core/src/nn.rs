//! Parameter storage and the pre-norm transformer block shared by the
//! student and the teacher.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Which depth bucket a parameter belongs to, for layer-wise LR decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embed,
    Block(usize),
    Head,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        self.groups.push(group);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn group(&self, i: usize) -> ParamGroup {
        self.groups[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Binds every parameter as a tape leaf. With `trainable == false` the
    /// leaves are constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t.shape().to_vec(), t.data().to_vec())
                        .expect("parameter shapes are consistent")
                }
            })
            .collect()
    }

    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(Error::dim("binding does not match the parameter store"));
        }
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces tensor values from `(name, tensor)` pairs, requiring an
    /// exact match of names, order and shapes.
    pub fn load_values(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::format(format!(
                    "checkpoint tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    self.names[i],
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.with_grad();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Truncated normal (cut at two standard deviations).
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Glorot standard deviation for a `fan_in × fan_out` matrix.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f32 {
    (2.0 / (fan_in + fan_out) as f32).sqrt()
}

/// Sine/cosine encoding over a flat position index: even dimensions carry
/// `sin(pos / 10000^(2i/d))`, odd ones the matching cosine.
pub fn sinusoidal_positions(count: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; count * dim];
    for pos in 0..count {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let a = pos as f64 * freq;
            out[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() } as f32;
        }
    }
    out
}

/// Parameter indices of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

impl BlockParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t, group);
        Self {
            ln1_g: add("ln1.weight", Tensor::from_fn(&[dim], |_| 1.0)),
            ln1_b: add("ln1.bias", Tensor::zeros(&[dim])),
            qkv_w: add("attn.qkv.weight", trunc_normal(rng, &[dim, 3 * dim], 0.02)),
            qkv_b: add("attn.qkv.bias", Tensor::zeros(&[3 * dim])),
            proj_w: add("attn.proj.weight", trunc_normal(rng, &[dim, dim], 0.02)),
            proj_b: add("attn.proj.bias", Tensor::zeros(&[dim])),
            ln2_g: add("ln2.weight", Tensor::from_fn(&[dim], |_| 1.0)),
            ln2_b: add("ln2.bias", Tensor::zeros(&[dim])),
            fc1_w: add("mlp.fc1.weight", trunc_normal(rng, &[dim, hidden], 0.02)),
            fc1_b: add("mlp.fc1.bias", Tensor::zeros(&[hidden])),
            fc2_w: add("mlp.fc2.weight", trunc_normal(rng, &[hidden, dim], 0.02)),
            fc2_b: add("mlp.fc2.bias", Tensor::zeros(&[dim])),
        }
    }
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Output of one block, optionally with the per-head attention matrices.
pub struct BlockOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// `x + attn(ln1(x))`, then `x + mlp(ln2(x))`. Attention is joint over all
/// rows of `x`.
pub fn block_forward(
    tape: &mut Tape,
    p: &[Var],
    b: &BlockParams,
    x: Var,
    heads: usize,
    keep_attention: bool,
) -> Result<BlockOutput> {
    let dim = tape.shape(x)[1];
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config(format!("dim {dim} not divisible by {heads} heads")));
    }
    let hd = dim / heads;
    let h = tape.layer_norm(x, p[b.ln1_g], p[b.ln1_b])?;
    let qkv = linear(tape, h, p[b.qkv_w], p[b.qkv_b])?;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::new();
    for head in 0..heads {
        let q = tape.slice_cols(qkv, head * hd, hd)?;
        let k = tape.slice_cols(qkv, dim + head * hd, hd)?;
        let v = tape.slice_cols(qkv, 2 * dim + head * hd, hd)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s);
        if keep_attention {
            attention.push(a);
        }
        outs.push(tape.matmul(a, v)?);
    }
    let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let o = linear(tape, o, p[b.proj_w], p[b.proj_b])?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, p[b.ln2_g], p[b.ln2_b])?;
    let h = linear(tape, h, p[b.fc1_w], p[b.fc1_b])?;
    let h = tape.gelu(h);
    let h = linear(tape, h, p[b.fc2_w], p[b.fc2_b])?;
    let out = tape.add(x, h)?;
    Ok(BlockOutput { out, attention })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_sin_zero_cos_one() {
        let pe = sinusoidal_positions(4, 6);
        for i in 0..6 {
            assert_eq!(pe[i], if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn trunc_normal_respects_cut() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = trunc_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    use rand::SeedableRng;
}
