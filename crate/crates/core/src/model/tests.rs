use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::finite_diff_check_many;

fn tiny() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        num_classes: 3,
        base_channels: 4,
        layers: 1,
        heads: 2,
        d_model: 8,
        d_mlp: 16,
        ..Default::default()
    }
}

fn input<T: Scalar>(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn([batch, cfg.in_channels, cfg.height, cfg.width], 1.0, &mut rng)
}

fn extents(vars: &[Var<'_, f32>]) -> Vec<usize> {
    vars.iter().map(|v| v.shape()[2]).collect()
}

#[test]
fn default_shape_trace() {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
    let g = Graph::new();
    let t = m.trace(&g, g.constant(input(&cfg, 2, 1))).unwrap();
    assert_eq!(extents(&t.encoder), [64, 32, 16]);
    assert_eq!(
        t.encoder.iter().map(|v| v.shape()[1]).collect::<Vec<_>>(),
        [16, 32, 64]
    );
    assert!(t.encoder.iter().all(|v| v.shape()[0] == 2));
    assert_eq!(t.pooled.shape(), [2, 64, 8, 8]);
    assert_eq!(t.embedded.shape(), [2, 64, 64]);
    assert_eq!(t.layers.len(), 4);
    assert_eq!(t.bottleneck.shape(), [2, 64, 8, 8]);
    assert_eq!(extents(&t.up), [64, 32, 16]);
    assert_eq!(extents(&t.decoder), [64, 32, 16, 8]);
    assert_eq!(t.logits.shape(), [2, 4, 64, 64]);
}

#[test]
fn top_decoder_level_is_the_bottleneck_bitwise() {
    let cfg = tiny();
    let m = Model::<f32>::new(cfg.clone(), 3).unwrap();
    let g = Graph::new();
    let t = m.trace(&g, g.constant(input(&cfg, 1, 2))).unwrap();
    let top = t.decoder[cfg.levels].value();
    let bottleneck = t.bottleneck.value();
    assert_eq!(top.shape(), bottleneck.shape());
    assert!(top
        .data()
        .iter()
        .zip(bottleneck.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn fused_width_is_level_width_for_every_topology() {
    for skips in 0..=3 {
        for same in [false, true] {
            let cfg = ModelConfig {
                skips,
                include_same_level_encoder: same,
                base_channels: 8,
                ..tiny()
            };
            let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
            let g = Graph::new();
            let t = m.trace(&g, g.constant(input(&cfg, 1, 0))).unwrap();
            for i in 1..=cfg.levels {
                assert_eq!(t.decoder[i - 1].shape()[1], cfg.level_width(i), "skips {skips} level {i}");
            }
        }
    }
}

#[test]
fn zero_skip_budget_uses_only_deeper_decoder_outputs() {
    let cfg = ModelConfig { skips: 0, ..tiny() };
    let m = Model::<f32>::new(cfg, 0).unwrap();
    assert!(m.params().iter().all(|p| !p.name.contains("reduce.up") && !p.name.contains("reduce.encoder")));
    assert!(m.params().index_of("decoder.1.reduce.decoder4.weight").is_some());
}

#[test]
fn identical_samples_give_identical_logits() {
    let cfg = tiny();
    let m = Model::<f32>::new(cfg.clone(), 5).unwrap();
    let one = input::<f32>(&cfg, 1, 9);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let x = Tensor::new([2, 1, 16, 16], two).unwrap();
    let g = Graph::new();
    let out = m.forward(&g, g.constant(x)).unwrap().value();
    let (a, b) = out.data().split_at(out.len() / 2);
    assert_eq!(a, b);
}

#[test]
fn default_init_forward_is_finite() {
    let cfg = ModelConfig::default();
    let mut m = Model::<f32>::new(cfg.clone(), 11).unwrap();
    let g = Graph::new();
    assert!(m.forward_train(&g, g.constant(input(&cfg, 2, 3))).unwrap().value().is_finite());
    let g = Graph::new();
    assert!(m.forward(&g, g.constant(input(&cfg, 1, 4))).unwrap().value().is_finite());
}

#[test]
fn wrong_input_extent_is_a_config_error() {
    let m = Model::<f32>::new(tiny(), 0).unwrap();
    let g = Graph::new();
    let err = m.forward(&g, g.constant(Tensor::zeros([1, 1, 32, 32]))).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn zeroed_transformer_layers_pass_tokens_through() {
    let cfg = ModelConfig::default();
    let mut m = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let names: Vec<String> = m
        .params()
        .iter()
        .filter(|p| p.name.starts_with("transformer.layer."))
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let shape = m.params().by_name(&name).unwrap().shape().to_vec();
        m.params_mut().set(&name, Tensor::zeros(shape)).unwrap();
    }
    let g = Graph::new();
    let t = m.trace(&g, g.constant(input(&cfg, 2, 5))).unwrap();
    assert_eq!(t.layers.last().unwrap().value().data(), t.embedded.value().data());
}

#[test]
fn attention_rows_sum_to_one_in_every_layer_and_head() {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::new(cfg.clone(), 2).unwrap();
    let g = Graph::new();
    let t = m.trace(&g, g.constant(input(&cfg, 2, 6))).unwrap();
    assert_eq!(t.attention.len(), cfg.layers);
    for a in &t.attention {
        assert_eq!(a.shape(), [2, cfg.heads, 64, 64]);
        for row in a.value().data().chunks(64) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }
}

/// Mirrors a `[B, C, h, w]` map left-to-right; with a 1×1 patch this
/// permutes the token order.
fn mirror(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape();
    let w = s[3];
    let mut out = t.clone();
    for (row_out, row_in) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
        for (j, v) in row_out.iter_mut().enumerate() {
            *v = row_in[w - 1 - j];
        }
    }
    out
}

/// Token sequence `[B, n, d]` with columns of the token grid mirrored.
fn mirror_tokens(t: &Tensor<f64>, grid_w: usize) -> Tensor<f64> {
    let s = t.shape();
    let (n, d) = (s[1], s[2]);
    let mut out = t.clone();
    for b in 0..s[0] {
        for tok in 0..n {
            let (r, c) = (tok / grid_w, tok % grid_w);
            let src = r * grid_w + (grid_w - 1 - c);
            let (o, i) = ((b * n + tok) * d, (b * n + src) * d);
            out.data_mut()[o..o + d].copy_from_slice(&t.data()[i..i + d]);
        }
    }
    out
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn token_order_matters_only_through_the_position_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for position_embedding in [false, true] {
        let cfg = ModelConfig {
            position_embedding,
            ..Default::default()
        };
        let mut m = Model::<f32>::new(cfg.clone(), 4).unwrap().cast::<f64>();
        if position_embedding {
            // a visible embedding, so the effect is not lost in rounding
            let pos = Tensor::randn([cfg.tokens(), cfg.d_model], 1.0, &mut rng);
            m.params_mut().set("transformer.position", pos).unwrap();
        }
        let f = Tensor::<f64>::randn([1, cfg.bottleneck_width(), 8, 8], 1.0, &mut rng);
        let run = |f: Tensor<f64>| {
            let g = Graph::new();
            let z = m.patch_embed(&g, g.constant(f)).unwrap();
            m.encode_tokens(&g, z).unwrap().value().as_ref().clone()
        };
        let direct = run(f.clone());
        let permuted = mirror_tokens(&run(mirror(&f)), 8);
        let diff = max_abs_diff(&direct, &permuted);
        if position_embedding {
            assert!(diff > 1e-3, "permuting tokens left the output unchanged ({diff})");
        } else {
            assert!(diff < 1e-9, "attention without positions is permutation-equivariant ({diff})");
        }
    }
}

#[test]
fn input_224_with_effective_patch_16_gives_196_tokens() {
    let cfg = ModelConfig {
        height: 224,
        width: 224,
        patch_size: 2,
        ..Default::default()
    };
    assert_eq!(cfg.effective_patch(), 16);
    let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
    let g = Graph::new();
    let f = g.constant(Tensor::zeros([1, cfg.bottleneck_width(), 28, 28]));
    assert_eq!(m.patch_embed(&g, f).unwrap().shape(), [1, 196, cfg.d_model]);
}

#[test]
fn grid_arithmetic_examples() {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
    let g = Graph::new();
    let f = g.constant(Tensor::zeros([1, 64, 8, 8]));
    assert_eq!(m.patch_embed(&g, f).unwrap().shape(), [1, 64, 64]);
    let wide = ModelConfig {
        patch_size: 8,
        ..cfg
    };
    assert_eq!(wide.tokens(), 1);
    let m = Model::<f32>::new(wide, 0).unwrap();
    let g = Graph::new();
    let t = m.trace(&g, g.constant(Tensor::zeros([1, 1, 64, 64]))).unwrap();
    assert_eq!(t.embedded.shape(), [1, 1, 64]);
    assert_eq!(t.logits.shape(), [1, 4, 64, 64]);
}

#[test]
fn empty_transformer_is_allowed() {
    let cfg = ModelConfig { layers: 0, ..tiny() };
    let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
    let g = Graph::new();
    let t = m.trace(&g, g.constant(input(&cfg, 1, 0))).unwrap();
    assert!(t.layers.is_empty());
    assert_eq!(t.logits.shape(), [1, 3, 16, 16]);
}

#[test]
fn initialization_is_seeded() {
    let a = Model::<f32>::new(tiny(), 7).unwrap();
    let b = Model::<f32>::new(tiny(), 7).unwrap();
    let c = Model::<f32>::new(tiny(), 8).unwrap();
    let same = |x: &Model<f32>, y: &Model<f32>| x.params().iter().zip(y.params().iter()).all(|(p, q)| p.value == q.value);
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}

#[test]
fn parameter_names_are_unique() {
    let m = Model::<f32>::new(ModelConfig { include_same_level_encoder: true, ..Default::default() }, 0).unwrap();
    let mut names: Vec<&str> = m.params().iter().map(|p| p.name.as_str()).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
}

#[test]
fn predict_returns_class_indices() {
    let cfg = tiny();
    let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
    let mask = m.predict(&input(&cfg, 2, 1)).unwrap();
    assert_eq!(mask.len(), 2 * 16 * 16);
    assert!(mask.iter().all(|&c| (c as usize) < cfg.num_classes));
}

#[test]
fn argmax_prefers_lowest_class_on_ties() {
    let logits = Tensor::<f32>::from_f64([1, 3, 1, 2], &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
    assert_eq!(argmax_channels(&logits), [0, 1]);
}

/// Finite differences through the whole network, in training mode, with
/// respect to every parameter tensor and the input.
#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = tiny();
    let model = Model::<f64>::new(cfg.clone(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut inputs = vec![Tensor::<f64>::randn([2, 1, 16, 16], 1.0, &mut rng)];
    for p in model.params().iter() {
        // perturb the zero biases and unit gains so every path is generic
        let mut v = p.value.as_ref().clone();
        for x in v.data_mut() {
            *x += 0.1 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng);
        }
        inputs.push(v);
    }
    let target: Vec<u8> = (0..2 * 16 * 16).map(|i| ((i * 7) % 3) as u8).collect();
    let reports = finite_diff_check_many(
        |_, v| {
            let mut buffers = model.buffers().clone();
            let t = model.forward_with(v[0], &v[1..], NormMode::Train(&mut buffers))?;
            t.logits.cross_entropy(&target)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    let mut names = vec!["input".to_string()];
    names.extend(model.params().iter().map(|p| p.name.clone()));
    for (name, r) in names.iter().zip(&reports) {
        assert!(r.max_rel_error < 1e-4, "{name}: {}", r.max_rel_error);
    }
}
