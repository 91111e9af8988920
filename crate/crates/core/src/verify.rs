//! The finite-difference gradient suite: every differentiable operator on
//! random inputs, plus a tiny end-to-end network, all in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{Model, ModelConfig, NormMode};
use crate::nn::{BatchNormMode, BatchNormStats, UpsampleMode, LN_EPS};
use crate::tensor::finite_diff_check_many;
use crate::{Graph, Result, Tensor, Var};

/// Pass threshold on the max relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Worst relative error of one operator over all its seeds and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// random input draws per operator
    pub seeds: u64,
    /// include the whole-network check
    pub end_to_end: bool,
    /// deliberately scale the backward rule of this operator (negative
    /// control)
    pub corrupt: Option<&'static str>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 3,
            end_to_end: true,
            corrupt: None,
        }
    }
}

/// Operator names in suite order (the backward-rule names, usable as
/// [`SuiteOptions::corrupt`]).
pub const OPERATORS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scalar-mul",
    "scalar-add",
    "matmul",
    "sum",
    "mean",
    "max",
    "reshape",
    "permute",
    "concat",
    "slice",
    "relu",
    "gelu",
    "softmax",
    "linear",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "upsample",
    "batch_norm2d",
    "layer_norm",
    "cross_entropy",
];

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Random values kept away from zero, so kinks are not straddled.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// Random values at least 0.01 apart, so max-type
/// selections are stable under the difference step.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, v).expect("matching length")
}

/// Scalar loss with a non-uniform upstream gradient: `Σ y ⊙ W` for a fixed
/// random `W`.
fn project<'g>(g: &'g Graph<f64>, y: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = g.constant(Tensor::randn(y.shape(), 1.0, &mut rng));
    y.mul(w)?.sum(None)
}

struct Runner {
    opts: SuiteOptions,
    rows: Vec<CheckRow>,
}

impl Runner {
    fn check<M, F>(&mut self, name: &'static str, make: M, f: F) -> Result<()>
    where
        M: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
    {
        let corrupt = self.opts.corrupt;
        let mut worst = 0.0f64;
        for seed in 0..self.opts.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = make(&mut rng);
            let reports = finite_diff_check_many(
                |g, v| {
                    g.corrupt_backward(corrupt);
                    f(g, v)
                },
                &inputs,
                STEP,
            )?;
            worst = reports.iter().map(|r| r.max_rel_error).fold(worst, f64::max);
        }
        self.rows.push(CheckRow {
            name,
            max_rel_error: worst,
        });
        Ok(())
    }
}

/// Runs the suite; one row per operator, then `end_to_end` when enabled.
pub fn gradient_suite(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let mut r = Runner {
        opts: opts.clone(),
        rows: Vec::new(),
    };
    let two = |s: &'static [usize]| move |rng: &mut ChaCha8Rng| vec![randn(s, rng), randn(s, rng)];
    let one = |s: &'static [usize]| move |rng: &mut ChaCha8Rng| vec![randn(s, rng)];

    r.check("add", two(&[3, 4]), |g, v| project(g, v[0].add(v[1])?))?;
    r.check("sub", two(&[3, 4]), |g, v| project(g, v[0].sub(v[1])?))?;
    r.check("mul", two(&[3, 4]), |g, v| project(g, v[0].mul(v[1])?))?;
    r.check("scalar-mul", one(&[3, 4]), |g, v| project(g, v[0].scale(2.5)?))?;
    r.check("scalar-add", one(&[3, 4]), |g, v| project(g, v[0].add_scalar(-0.75)?))?;
    r.check(
        "matmul",
        |rng| vec![randn(&[2, 3, 4], rng), randn(&[2, 4, 5], rng)],
        |g, v| project(g, v[0].matmul(v[1])?),
    )?;
    r.check("sum", one(&[3, 4, 2]), |g, v| project(g, v[0].sum(Some(1))?))?;
    r.check("mean", one(&[3, 4, 2]), |g, v| project(g, v[0].mean(Some(0))?))?;
    r.check("max", |rng| vec![distinct(&[3, 5], rng)], |g, v| project(g, v[0].max(Some(1))?))?;
    r.check("reshape", one(&[2, 6]), |g, v| project(g, v[0].reshape(&[3, 4])?))?;
    r.check("permute", one(&[2, 3, 4]), |g, v| project(g, v[0].permute(&[2, 0, 1])?))?;
    r.check(
        "concat",
        |rng| vec![randn(&[2, 3], rng), randn(&[2, 1], rng)],
        |g, v| project(g, Var::concat(&[v[0], v[1], v[0]], 1)?),
    )?;
    r.check("slice", one(&[4, 5]), |g, v| project(g, v[0].slice(1, 1, 3)?))?;
    r.check("relu", |rng| vec![off_zero(&[4, 5], rng)], |g, v| project(g, v[0].relu()?))?;
    r.check("gelu", one(&[4, 5]), |g, v| project(g, v[0].gelu()?))?;
    r.check("softmax", one(&[3, 6]), |g, v| project(g, v[0].softmax()?))?;
    r.check(
        "linear",
        |rng| vec![randn(&[2, 3, 4], rng), randn(&[4, 5], rng), randn(&[5], rng)],
        |g, v| project(g, v[0].linear(v[1], v[2])?),
    )?;
    r.check(
        "conv2d",
        |rng| vec![randn(&[2, 3, 5, 5], rng), randn(&[4, 3, 3, 3], rng), randn(&[4], rng)],
        |g, v| {
            let a = v[0].conv2d(v[1], Some(v[2]), 1, 1)?;
            let b = v[0].conv2d(v[1], None, 2, 0)?;
            project(g, a)?.add(project(g, b)?)
        },
    )?;
    r.check("maxpool2d", |rng| vec![distinct(&[2, 2, 4, 6], rng)], |g, v| project(g, v[0].maxpool2d()?))?;
    r.check("avgpool2d", one(&[2, 2, 4, 6]), |g, v| project(g, v[0].avgpool2d(2)?))?;
    r.check("upsample", one(&[2, 2, 3, 4]), |g, v| {
        let a = v[0].upsample(2, UpsampleMode::Bilinear)?;
        let b = v[0].upsample(4, UpsampleMode::Nearest)?;
        project(g, a)?.add(project(g, b)?)
    })?;
    r.check(
        "batch_norm2d",
        |rng| vec![randn(&[3, 2, 3, 3], rng), randn(&[2], rng), randn(&[2], rng)],
        |g, v| {
            let mut stats = BatchNormStats::new(2);
            project(g, v[0].batch_norm2d(v[1], v[2], BatchNormMode::Train(&mut stats))?)
        },
    )?;
    r.check(
        "layer_norm",
        |rng| vec![randn(&[2, 3, 5], rng), randn(&[5], rng), randn(&[5], rng)],
        |g, v| project(g, v[0].layer_norm(v[1], v[2], LN_EPS)?),
    )?;
    r.check("cross_entropy", one(&[2, 3, 2, 2]), |_, v| {
        v[0].cross_entropy(&[0, 1, 2, 1, 2, 2, 0, 1])
    })?;

    if opts.end_to_end {
        end_to_end(&mut r)?;
    }
    Ok(r.rows)
}

/// The smallest configuration exercising every architectural path:
/// 16×16 input, three conv levels, one transformer layer with two heads.
pub fn tiny_config() -> ModelConfig {
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

/// Finite differences through the whole network in training mode, with
/// respect to the input and every parameter tensor (perturbed from their
/// initial values so no gain or bias sits at a special value).
fn end_to_end(r: &mut Runner) -> Result<()> {
    let model = Model::<f64>::new(tiny_config(), 21)?;
    let target: Vec<u8> = (0..2 * 16 * 16).map(|i| ((i * 7) % 3) as u8).collect();
    let make = |rng: &mut ChaCha8Rng| {
        let mut inputs = vec![randn(&[2, 1, 16, 16], rng)];
        for p in model.params().iter() {
            let mut v = p.value.as_ref().clone();
            for x in v.data_mut() {
                *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            inputs.push(v);
        }
        inputs
    };
    let seeds = r.opts.seeds;
    r.opts.seeds = 1;
    let out = r.check("end_to_end", make, |_, v| {
        let mut buffers = model.buffers().clone();
        let t = model.forward_with(v[0], &v[1..], NormMode::Train(&mut buffers))?;
        t.logits.cross_entropy(&target)
    });
    r.opts.seeds = seeds;
    out
}

/// Aligned `operator  max_rel_error  status` table.
pub fn render_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<14} {:>14}  status\n", "operator", "max_rel_error");
    for row in rows {
        out.push_str(&format!(
            "{:<14} {:>14.3e}  {}\n",
            row.name,
            row.max_rel_error,
            if row.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}
