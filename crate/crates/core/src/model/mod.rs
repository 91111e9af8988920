//! The TransClaw U-Net.
//!
//! A convolutional encoder of `levels` stages (two conv-BN-ReLU units, then
//! 2×2 max pooling) feeds its deepest map, cut into `patch_size²` patches, to
//! a pre-norm transformer. The token grid is restored to a feature map (the
//! bottleneck, decoder level `levels + 1`), from which two branches rise:
//!
//! * the bottom-upsampling path, one conv-BN-ReLU unit then an upsample per
//!   level, giving one feature per level;
//! * the claw decoder, where level `i` concatenates — each after resampling
//!   to the level's extent and a 3×3 channel-reducing conv — the enabled
//!   shallower encoder features (average-pooled down), the same-level
//!   up-path feature, and every deeper decoder output (upsampled), then fuses
//!   them with two conv-BN-ReLU units.
//!
//! A 1×1 conv on decoder level 1 yields per-pixel class logits.

mod attention;
mod config;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::BatchNormMode;
use crate::{Error, Graph, Result, Scalar, Tensor, Var};

pub use attention::{multi_head_attention, patchify, transformer_block, Affine, AttentionParams, BlockParams};
pub use config::{ModelConfig, Source, CONFIG_VERSION};
pub use params::{BufferStore, Param, ParamKind, ParamStore};

/// Standard deviation of the position-embedding initialization.
pub const POSITION_INIT_STD: f64 = 0.02;

/// Indices of a weight/bias (or gamma/beta) pair in the [`ParamStore`].
#[derive(Debug, Clone, Copy)]
struct Pair {
    weight: usize,
    bias: usize,
}

/// conv 3×3 → batch norm → ReLU
#[derive(Debug, Clone, Copy)]
struct Unit {
    conv: Pair,
    norm: Pair,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    first: Unit,
    second: Unit,
}

#[derive(Debug, Clone, Copy)]
struct TransformerLayer {
    norm1: Pair,
    query: Pair,
    key: Pair,
    value: Pair,
    output: Pair,
    norm2: Pair,
    fc1: Pair,
    fc2: Pair,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    sources: Vec<(Source, Pair)>,
    fuse: Block,
}

/// Where every parameter of the architecture lives; derived from the config.
#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Block>,
    embed: Pair,
    position: Option<usize>,
    layers: Vec<TransformerLayer>,
    final_norm: Pair,
    restore: Pair,
    up: Vec<Unit>,
    decoder: Vec<DecoderLevel>,
    head: Pair,
}

struct Builder<T: Scalar> {
    params: ParamStore<T>,
    buffers: BufferStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    /// He-uniform weights `U(±√(6/fan_in))`, zero bias.
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Pair {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let w = Tensor::uniform([c_out, c_in, k, k], bound, &mut self.rng);
        Pair {
            weight: self.params.push(format!("{name}.weight"), ParamKind::Weight, w),
            bias: self.params.push(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros([c_out])),
        }
    }

    /// Unit-variance-preserving uniform weights `U(±√(3/fan_in))`, zero bias.
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Pair {
        let bound = (3.0 / d_in as f64).sqrt();
        let w = Tensor::uniform([d_in, d_out], bound, &mut self.rng);
        Pair {
            weight: self.params.push(format!("{name}.weight"), ParamKind::Weight, w),
            bias: self.params.push(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros([d_out])),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Pair {
        Pair {
            weight: self.params.push(format!("{name}.gamma"), ParamKind::Norm, Tensor::full([c], T::one())),
            bias: self.params.push(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros([c])),
        }
    }

    fn unit(&mut self, name: &str, c_in: usize, c_out: usize) -> Unit {
        Unit {
            conv: self.conv(&format!("{name}.conv"), c_in, c_out, 3),
            norm: self.norm(&format!("{name}.bn"), c_out),
            stats: self.buffers.push(format!("{name}.bn"), c_out),
        }
    }

    fn block(&mut self, name: &str, c_in: usize, c_out: usize) -> Block {
        Block {
            first: self.unit(&format!("{name}.unit1"), c_in, c_out),
            second: self.unit(&format!("{name}.unit2"), c_out, c_out),
        }
    }

    fn layout(&mut self, cfg: &ModelConfig) -> Layout {
        let n_c = cfg.levels;
        let mut encoder = Vec::with_capacity(n_c);
        let mut c_in = cfg.in_channels;
        for i in 1..=n_c {
            encoder.push(self.block(&format!("encoder.{i}"), c_in, cfg.level_width(i)));
            c_in = cfg.level_width(i);
        }

        let d = cfg.d_model;
        let patch_len = cfg.level_width(n_c) * cfg.patch_size * cfg.patch_size;
        let embed = self.linear("transformer.embed", patch_len, d);
        let position = cfg.position_embedding.then(|| {
            let pos = Tensor::randn([cfg.tokens(), d], POSITION_INIT_STD, &mut self.rng);
            self.params.push("transformer.position".into(), ParamKind::Position, pos)
        });
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("transformer.layer.{l}");
                TransformerLayer {
                    norm1: self.norm(&format!("{p}.norm1"), d),
                    query: self.linear(&format!("{p}.attention.query"), d, d),
                    key: self.linear(&format!("{p}.attention.key"), d, d),
                    value: self.linear(&format!("{p}.attention.value"), d, d),
                    output: self.linear(&format!("{p}.attention.output"), d, d),
                    norm2: self.norm(&format!("{p}.norm2"), d),
                    fc1: self.linear(&format!("{p}.mlp.fc1"), d, cfg.d_mlp),
                    fc2: self.linear(&format!("{p}.mlp.fc2"), cfg.d_mlp, d),
                }
            })
            .collect();
        let final_norm = self.norm("transformer.norm", d);
        let restore = self.conv("transformer.restore", d, cfg.bottleneck_width(), 3);

        // up path, deepest level first; stored by level
        let mut up = Vec::with_capacity(n_c);
        let mut c_in = cfg.bottleneck_width();
        for i in (1..=n_c).rev() {
            up.push(self.unit(&format!("up.{i}"), c_in, cfg.level_width(i)));
            c_in = cfg.level_width(i);
        }
        up.reverse();

        // the bottleneck has the deepest level's width
        let width_of = |s: Source, i: usize| match s {
            Source::Encoder(k) | Source::Decoder(k) => cfg.level_width(k.min(n_c)),
            Source::Up => cfg.level_width(i),
        };
        let mut decoder = Vec::with_capacity(n_c);
        for i in (1..=n_c).rev() {
            let p = format!("decoder.{i}");
            let sources = cfg
                .decoder_sources(i)
                .into_iter()
                .zip(cfg.source_widths(i))
                .map(|(s, w)| {
                    let tag = match s {
                        Source::Encoder(k) => format!("encoder{k}"),
                        Source::Up => "up".to_string(),
                        Source::Decoder(k) => format!("decoder{k}"),
                    };
                    (s, self.conv(&format!("{p}.reduce.{tag}"), width_of(s, i), w, 3))
                })
                .collect();
            let w = cfg.level_width(i);
            decoder.push(DecoderLevel {
                sources,
                fuse: self.block(&format!("{p}.fuse"), w, w),
            });
        }
        decoder.reverse();
        let head = self.conv("head", cfg.level_width(1), cfg.num_classes, 1);

        Layout {
            encoder,
            embed,
            position,
            layers,
            final_norm,
            restore,
            up,
            decoder,
            head,
        }
    }
}

/// Batch-norm behaviour of a forward pass.
pub enum NormMode<'a, T> {
    /// batch statistics; running statistics are updated
    Train(&'a mut BufferStore<T>),
    /// running statistics
    Eval(&'a BufferStore<T>),
}

/// Every intermediate of one forward pass.
pub struct Trace<'g, T: Scalar> {
    /// encoder level features before pooling, level 1 first
    pub encoder: Vec<Var<'g, T>>,
    /// pooled deepest map: the transformer's input
    pub pooled: Var<'g, T>,
    /// patch embedding plus position embedding `[B, n, d_model]`
    pub embedded: Var<'g, T>,
    /// token sequence after each transformer layer
    pub layers: Vec<Var<'g, T>>,
    /// attention probabilities `[B, heads, n, n]` per layer
    pub attention: Vec<Var<'g, T>>,
    /// restored token grid `[B, C_b, H/P, W/P]`
    pub bottleneck: Var<'g, T>,
    /// up-path features, level 1 first
    pub up: Vec<Var<'g, T>>,
    /// decoder outputs for levels `1..=levels + 1`
    pub decoder: Vec<Var<'g, T>>,
    pub logits: Var<'g, T>,
}

/// The TransClaw U-Net: configuration, named parameters and batch-norm
/// running statistics.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    layout: Arc<Layout>,
    params: ParamStore<T>,
    buffers: BufferStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model; initialization is a pure function of
    /// the config and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            buffers: BufferStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let layout = b.layout(&config);
        Ok(Model {
            config,
            layout: Arc::new(layout),
            params: b.params,
            buffers: b.buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BufferStore<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BufferStore<T> {
        &mut self.buffers
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    /// Registers every parameter on `g`, keyed by its store index.
    pub fn param_vars<'g>(&self, g: &'g Graph<T>) -> Vec<Var<'g, T>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(i, &p.value))
            .collect()
    }

    /// Training-mode forward pass; updates batch-norm running statistics.
    pub fn forward_train<'g>(&mut self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let p = self.param_vars(g);
        let trace = run(&self.config, &self.layout, x, &p, NormMode::Train(&mut self.buffers))?;
        Ok(trace.logits)
    }

    /// Inference-mode forward pass.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.trace(g, x)?.logits)
    }

    /// Inference-mode forward pass returning every intermediate.
    pub fn trace<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Trace<'g, T>> {
        let p = self.param_vars(g);
        run(&self.config, &self.layout, x, &p, NormMode::Eval(&self.buffers))
    }

    /// Forward pass with caller-supplied parameter nodes, one per store
    /// entry in store order.
    pub fn forward_with<'g>(
        &self,
        x: Var<'g, T>,
        params: &[Var<'g, T>],
        norm: NormMode<'_, T>,
    ) -> Result<Trace<'g, T>> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(
                "forward",
                format!("{} parameter nodes for {} parameters", params.len(), self.params.len()),
            ));
        }
        run(&self.config, &self.layout, x, params, norm)
    }

    /// Patch embedding of a deepest-level feature map: patchify, linear
    /// projection, then the position embedding when enabled.
    pub fn patch_embed<'g>(&self, g: &'g Graph<T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let p = self.param_vars(g);
        patch_embed(&self.config, &self.layout, f, &p)
    }

    /// The transformer layers and final layer norm over a token sequence.
    pub fn encode_tokens<'g>(&self, g: &'g Graph<T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        let p = self.param_vars(g);
        let (z, _, _) = encode_tokens(&self.config, &self.layout, z, &p)?;
        Ok(z)
    }

    /// Per-pixel argmax class of `images [B, C, H, W]`, row-major `[B, H, W]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<u8>> {
        let g = Graph::new();
        let logits = self.forward(&g, g.constant(images.clone()))?.value();
        Ok(argmax_channels(&logits))
    }
}

/// Argmax over axis 1 of `[B, K, H, W]`; ties go to the lowest class.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
    let v = logits.data();
    let mut out = vec![0u8; b * plane];
    for n in 0..b {
        for px in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if v[(n * k + c) * plane + px] > v[(n * k + best) * plane + px] {
                    best = c;
                }
            }
            out[n * plane + px] = best as u8;
        }
    }
    out
}

fn affine<'g, T: Scalar>(p: &[Var<'g, T>], pair: Pair) -> Affine<'g, T> {
    Affine {
        weight: p[pair.weight],
        bias: p[pair.bias],
    }
}

fn conv<'g, T: Scalar>(x: Var<'g, T>, p: &[Var<'g, T>], pair: Pair, padding: usize) -> Result<Var<'g, T>> {
    x.conv2d(p[pair.weight], Some(p[pair.bias]), 1, padding)
}

fn unit<'g, T: Scalar>(x: Var<'g, T>, p: &[Var<'g, T>], u: Unit, norm: &mut NormMode<'_, T>) -> Result<Var<'g, T>> {
    let mode = match norm {
        NormMode::Train(b) => BatchNormMode::Train(&mut b.stats[u.stats]),
        NormMode::Eval(b) => BatchNormMode::Eval(&b.stats[u.stats]),
    };
    conv(x, p, u.conv, 1)?
        .batch_norm2d(p[u.norm.weight], p[u.norm.bias], mode)?
        .relu()
}

fn block<'g, T: Scalar>(x: Var<'g, T>, p: &[Var<'g, T>], b: Block, norm: &mut NormMode<'_, T>) -> Result<Var<'g, T>> {
    let h = unit(x, p, b.first, norm)?;
    unit(h, p, b.second, norm)
}

fn patch_embed<'g, T: Scalar>(cfg: &ModelConfig, layout: &Layout, f: Var<'g, T>, p: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let tokens = affine(p, layout.embed).linear(patchify(f, cfg.patch_size)?)?;
    let Some(pos) = layout.position else {
        return Ok(tokens);
    };
    let s = tokens.shape();
    let pos = p[pos];
    if pos.shape() != s[1..] {
        return Err(Error::Config(format!(
            "feature map yields {} tokens, position embedding expects {}",
            s[1],
            pos.shape()[0]
        )));
    }
    let pos = pos.reshape(&[1, s[1], s[2]])?;
    let pos = if s[0] == 1 { pos } else { Var::concat(&vec![pos; s[0]], 0)? };
    tokens.add(pos)
}

type Encoded<'g, T> = (Var<'g, T>, Vec<Var<'g, T>>, Vec<Var<'g, T>>);

fn encode_tokens<'g, T: Scalar>(cfg: &ModelConfig, layout: &Layout, z: Var<'g, T>, p: &[Var<'g, T>]) -> Result<Encoded<'g, T>> {
    let mut z = z;
    let mut outs = Vec::with_capacity(layout.layers.len());
    let mut attn = Vec::with_capacity(layout.layers.len());
    for l in &layout.layers {
        let params = BlockParams {
            norm1: affine(p, l.norm1),
            attention: AttentionParams {
                query: affine(p, l.query),
                key: affine(p, l.key),
                value: affine(p, l.value),
                output: affine(p, l.output),
            },
            norm2: affine(p, l.norm2),
            fc1: affine(p, l.fc1),
            fc2: affine(p, l.fc2),
        };
        let (next, a) = transformer_block(z, &params, cfg.heads)?;
        z = next;
        outs.push(z);
        attn.push(a);
    }
    Ok((affine(p, layout.final_norm).layer_norm(z)?, outs, attn))
}

fn resample<'g, T: Scalar>(x: Var<'g, T>, to: (usize, usize), cfg: &ModelConfig) -> Result<Var<'g, T>> {
    let from = x.shape()[2];
    if from == to.0 {
        Ok(x)
    } else if from > to.0 {
        x.avgpool2d(from / to.0)
    } else {
        x.upsample(to.0 / from, cfg.upsample)
    }
}

fn run<'g, T: Scalar>(
    cfg: &ModelConfig,
    layout: &Layout,
    x: Var<'g, T>,
    p: &[Var<'g, T>],
    mut norm: NormMode<'_, T>,
) -> Result<Trace<'g, T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.height || s[3] != cfg.width {
        return Err(Error::Config(format!(
            "input shape {s:?} does not match the model's [B, {}, {}, {}]",
            cfg.in_channels, cfg.height, cfg.width
        )));
    }
    let n_c = cfg.levels;

    let mut encoder = Vec::with_capacity(n_c);
    let mut h = x;
    for b in &layout.encoder {
        h = block(h, p, *b, &mut norm)?;
        encoder.push(h);
        h = h.maxpool2d()?;
    }
    let pooled = h;

    let embedded = patch_embed(cfg, layout, pooled, p)?;
    let (z, layers, attention) = encode_tokens(cfg, layout, embedded, p)?;
    let (gh, gw) = cfg.token_grid();
    let grid = z.permute(&[0, 2, 1])?.reshape(&[s[0], cfg.d_model, gh, gw])?;
    let bottleneck = conv(grid, p, layout.restore, 1)?;

    let mut up = vec![bottleneck; n_c];
    let mut u = bottleneck;
    for i in (1..=n_c).rev() {
        u = resample(unit(u, p, layout.up[i - 1], &mut norm)?, cfg.level_extent(i), cfg)?;
        up[i - 1] = u;
    }

    // decoder[k - 1] holds level k; level n_c + 1 is the bottleneck itself
    let mut decoder = vec![bottleneck; n_c + 1];
    for i in (1..=n_c).rev() {
        let level = &layout.decoder[i - 1];
        let target = cfg.level_extent(i);
        let mut parts = Vec::with_capacity(level.sources.len());
        for &(src, reduce) in &level.sources {
            let feature = match src {
                Source::Encoder(k) => encoder[k - 1],
                Source::Up => up[i - 1],
                Source::Decoder(k) => decoder[k - 1],
            };
            parts.push(conv(resample(feature, target, cfg)?, p, reduce, 1)?);
        }
        let fused = if parts.len() == 1 { parts[0] } else { Var::concat(&parts, 1)? };
        decoder[i - 1] = block(fused, p, level.fuse, &mut norm)?;
    }
    let logits = conv(decoder[0], p, layout.head, 0)?;

    Ok(Trace {
        encoder,
        pooled,
        embedded,
        layers,
        attention,
        bottleneck,
        up,
        decoder,
        logits,
    })
}

#[cfg(test)]
mod tests;
