//! Patch embedding and the pre-norm transformer encoder.

use crate::nn::LN_EPS;
use crate::{Error, Result, Scalar, Var};

/// A weight/bias pair on the graph: a linear layer (`weight [D_in, D_out]`)
/// or a layer-norm affine (`gamma`, `beta`).
#[derive(Debug, Clone, Copy)]
pub struct Affine<'g, T: Scalar> {
    pub weight: Var<'g, T>,
    pub bias: Var<'g, T>,
}

impl<'g, T: Scalar> Affine<'g, T> {
    pub fn linear(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(self.weight, self.bias)
    }

    pub fn layer_norm(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(self.weight, self.bias, LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'g, T: Scalar> {
    pub query: Affine<'g, T>,
    pub key: Affine<'g, T>,
    pub value: Affine<'g, T>,
    pub output: Affine<'g, T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockParams<'g, T: Scalar> {
    pub norm1: Affine<'g, T>,
    pub attention: AttentionParams<'g, T>,
    pub norm2: Affine<'g, T>,
    pub fc1: Affine<'g, T>,
    pub fc2: Affine<'g, T>,
}

/// Cuts `[B, C, H, W]` into non-overlapping `p×p` patches and flattens each
/// in `(c, row, col)` order: `[B, (H/p)·(W/p), C·p²]`, tokens in row-major
/// order over the patch grid.
pub fn patchify<'g, T: Scalar>(f: Var<'g, T>, p: usize) -> Result<Var<'g, T>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::invalid("patchify", format!("expected [B, C, H, W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "feature map {h}x{w} is not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    f.reshape(&[b, c, gh, p, gw, p])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b, gh * gw, c * p * p])
}

/// Splits `[B, n, d]` into `[B, h, n, d/h]`.
fn split_heads<'g, T: Scalar>(x: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], heads, s[2] / heads])?.permute(&[0, 2, 1, 3])
}

/// Multi-head scaled dot-product self-attention over `z [B, n, d]`.
/// Returns the projected output and the attention probabilities
/// `[B, heads, n, n]`.
pub fn multi_head_attention<'g, T: Scalar>(
    z: Var<'g, T>,
    p: &AttentionParams<'g, T>,
    heads: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(Error::invalid("attention", format!("expected [B, n, d], got {s:?}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("d_model {d} is not divisible by heads {heads}")));
    }
    let dk = d / heads;
    let q = split_heads(p.query.linear(z)?, heads)?;
    let k = split_heads(p.key.linear(z)?, heads)?.transpose(2, 3)?;
    let v = split_heads(p.value.linear(z)?, heads)?;
    let scores = q.matmul(k)?.scale(T::one() / T::of_usize(dk).sqrt())?;
    let attn = scores.softmax()?;
    let merged = attn
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, d])?;
    Ok((p.output.linear(merged)?, attn))
}

/// Pre-norm block: `z' = MSA(LN(z)) + z`, then `MLP(LN(z')) + z'` with a
/// GELU between the two MLP layers. Returns the block output and its
/// attention probabilities.
pub fn transformer_block<'g, T: Scalar>(
    z: Var<'g, T>,
    p: &BlockParams<'g, T>,
    heads: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (attended, attn) = multi_head_attention(p.norm1.layer_norm(z)?, &p.attention, heads)?;
    let z1 = attended.add(z)?;
    let hidden = p.fc1.linear(p.norm2.layer_norm(z1)?)?.gelu()?;
    let z2 = p.fc2.linear(hidden)?.add(z1)?;
    Ok((z2, attn))
}
