//! Central finite-difference checks of the reverse pass in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::attention::Selection;
use super::graph::{AttentionMode, Graph, Var};
use super::model::{ForwardOptions, Model};
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use super::{AttentionKind, EncoderConfig, ModelConfig};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub scalars: usize,
    /// `||analytic - numeric|| / (||analytic|| + ||numeric||)`.
    pub rel_error: f64,
    pub passed: bool,
}

/// Compares backward against central differences for every scalar of `params`.
pub fn check<F>(name: &str, params: &mut ParamSet<f64>, h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut grads = params.zeros_like();
        let mut g = Graph::new(params, false, 0);
        let loss = build(&mut g)?;
        g.backward(loss, &mut grads)?;
        grads
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new(p, false, 0);
        let loss = build(&mut g)?;
        Ok(g.value(loss).item())
    };
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut scalars = 0;
    for id in params.ids().collect::<Vec<ParamId>>() {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).data()[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
            scalars += 1;
        }
    }
    let denom = na.sqrt() + nn.sqrt();
    let rel_error = if denom < 1e-300 { 0.0 } else { diff.sqrt() / denom };
    Ok(GradCheck {
        name: name.to_string(),
        scalars,
        rel_error,
        passed: rel_error < TOLERANCE,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values `gap` apart, offset from zero, in random order: small perturbations
/// never reorder them or cross a kink at zero.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let data = idx.iter().map(|&i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar objective `sum(out * w)` with fixed random weights `w`.
fn project(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Builder = Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>>;

fn op_case(seed: u64, op: &str) -> (ParamSet<f64>, Builder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let s = seed;
    let b: Builder = match op {
        "matmul" => {
            ps.insert("a", uniform(&mut rng, &[4, 3], -1.0, 1.0));
            ps.insert("b", uniform(&mut rng, &[3, 5], -1.0, 1.0));
            Box::new(move |g| {
                let (a, b) = (g.named("a")?, g.named("b")?);
                let y = g.matmul(a, b)?;
                project(g, y, s)
            })
        }
        "add_bias" | "add" | "sub" | "mul" | "scale" => {
            ps.insert("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            let bshape: &[usize] = if op == "add_bias" { &[4] } else { &[3, 4] };
            ps.insert("b", uniform(&mut rng, bshape, -1.0, 1.0));
            let op = op.to_string();
            Box::new(move |g| {
                let (a, b) = (g.named("a")?, g.named("b")?);
                let y = match op.as_str() {
                    "add_bias" => g.add_bias(a, b)?,
                    "add" => g.add(a, b)?,
                    "sub" => g.sub(a, b)?,
                    "mul" => g.mul(a, b)?,
                    _ => {
                        let t = g.scale(a, -1.7);
                        g.mul(t, b)?
                    }
                };
                project(g, y, s)
            })
        }
        "relu" | "gelu" | "elu" => {
            ps.insert("x", spread(&mut rng, &[4, 5], 0.15));
            let op = op.to_string();
            Box::new(move |g| {
                let x = g.named("x")?;
                let y = match op.as_str() {
                    "relu" => g.relu(x),
                    "gelu" => g.gelu(x),
                    _ => g.elu(x),
                };
                project(g, y, s)
            })
        }
        "layer_norm" => {
            ps.insert("x", uniform(&mut rng, &[3, 6], -2.0, 2.0));
            ps.insert("g", uniform(&mut rng, &[6], 0.5, 1.5));
            ps.insert("b", uniform(&mut rng, &[6], -0.5, 0.5));
            Box::new(move |g| {
                let (x, gm, b) = (g.named("x")?, g.named("g")?, g.named("b")?);
                let y = g.layer_norm(x, gm, b)?;
                project(g, y, s)
            })
        }
        "attention_full" | "attention_probsparse" => {
            ps.insert("q", uniform(&mut rng, &[6, 4], -1.0, 1.0));
            ps.insert("k", uniform(&mut rng, &[7, 4], -1.0, 1.0));
            ps.insert("v", uniform(&mut rng, &[7, 6], -1.0, 1.0));
            let sparse = op == "attention_probsparse";
            Box::new(move |g| {
                let (q, k, v) = (g.named("q")?, g.named("k")?, g.named("v")?);
                let y = if sparse {
                    let sel = vec![Selection::Rows(vec![1, 4]), Selection::Rows(vec![0, 2, 5])];
                    g.attention_with_selection(q, k, v, 2, sel)?
                } else {
                    g.attention(q, k, v, 2, AttentionMode::Full)?
                };
                project(g, y, s)
            })
        }
        "dropout" => {
            ps.insert("x", uniform(&mut rng, &[4, 4], -1.0, 1.0));
            let mask: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
            Box::new(move |g| {
                let x = g.named("x")?;
                let y = g.dropout_with_mask(x, mask.clone())?;
                project(g, y, s)
            })
        }
        "conv1d" => {
            ps.insert("x", uniform(&mut rng, &[5, 3], -1.0, 1.0));
            ps.insert("w", uniform(&mut rng, &[9, 2], -1.0, 1.0));
            ps.insert("b", uniform(&mut rng, &[2], -1.0, 1.0));
            Box::new(move |g| {
                let (x, w, b) = (g.named("x")?, g.named("w")?, g.named("b")?);
                let y = g.conv1d(x, w, b)?;
                project(g, y, s)
            })
        }
        "max_pool" => {
            ps.insert("x", spread(&mut rng, &[7, 3], 0.05));
            Box::new(move |g| {
                let x = g.named("x")?;
                let y = g.max_pool(x)?;
                project(g, y, s)
            })
        }
        "mean_rows" => {
            ps.insert("x", uniform(&mut rng, &[5, 3], -1.0, 1.0));
            Box::new(move |g| {
                let x = g.named("x")?;
                let y = g.mean_rows(x);
                project(g, y, s)
            })
        }
        "l1" => {
            ps.insert("p", spread(&mut rng, &[1, 6], 0.3));
            Box::new(move |g| {
                let p = g.named("p")?;
                g.l1(p, &[0.05, -0.1, 0.2, 0.33, -0.41, 0.6])
            })
        }
        other => unreachable!("unknown op {other}"),
    };
    (ps, b)
}

pub const OPS: &[&str] = &[
    "matmul",
    "add_bias",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "elu",
    "layer_norm",
    "attention_full",
    "attention_probsparse",
    "dropout",
    "conv1d",
    "max_pool",
    "mean_rows",
    "l1",
];

/// Small two-stream model; 12 tokens keep every ProbSparse query exact.
pub fn small_model_config(attention: AttentionKind) -> ModelConfig {
    ModelConfig {
        input_rows: 6,
        clip_len: 12,
        encoder: EncoderConfig {
            d_model: 8,
            heads: 2,
            d_ff: 12,
            layers: 3,
            distill: true,
            dropout: 0.0,
            sparse_factor: 5,
            attention,
        },
        mlp_hidden: 6,
        two_stream: true,
    }
}

pub fn check_model(seed: u64, attention: AttentionKind) -> Result<GradCheck> {
    let mut model = Model::<f64>::init(small_model_config(attention), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // shift the output far from the target so the L1 kink is never crossed
    model.set_output_bias(50.0);
    let fore = uniform(&mut rng, &[12, 6], 0.0, 1.0);
    let back = uniform(&mut rng, &[12, 6], 0.0, 1.0);
    let config = model.config.clone();
    let probe = Model { config, params: ParamSet::new() };
    let name = match attention {
        AttentionKind::Full => "model_full",
        AttentionKind::ProbSparse => "model_probsparse",
    };
    check(name, &mut model.params, FD_STEP, |g| {
        let out = probe.forward(g, &fore, Some(&back), ForwardOptions::default())?;
        g.l1(out, &[0.0])
    })
}

/// Every op plus the complete model.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (i, op) in OPS.iter().enumerate() {
        let (mut ps, build) = op_case(seed.wrapping_add(i as u64), op);
        out.push(check(op, &mut ps, FD_STEP, build)?);
    }
    out.push(check_model(seed, AttentionKind::Full)?);
    out.push(check_model(seed, AttentionKind::ProbSparse)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for seed in [1, 2] {
            for (i, op) in OPS.iter().enumerate() {
                let (mut ps, build) = op_case(seed + i as u64, op);
                let r = check(op, &mut ps, FD_STEP, build).unwrap();
                assert!(r.passed, "{op} seed {seed}: {}", r.rel_error);
            }
        }
    }

    #[test]
    fn whole_model_passes() {
        for kind in [AttentionKind::Full, AttentionKind::ProbSparse] {
            let r = check_model(3, kind).unwrap();
            assert!(r.passed, "{}: {}", r.name, r.rel_error);
            assert!(r.scalars > 1000);
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        // an objective whose graph ignores a parameter that the numeric side sees
        let mut ps = ParamSet::<f64>::new();
        ps.insert("x", Tensor::full(&[2], 1.0));
        let r = check("broken", &mut ps, FD_STEP, |g| {
            let x = g.named("x")?;
            let c = g.constant(g.value(x).clone());
            let y = g.mul(x, c)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(!r.passed);
    }
}
