use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{xavier_uniform, ParamSet};
use super::tensor::{Real, Tensor};
use super::ModelConfig;
use crate::embedding::FeatureMatrix;
use crate::error::{Error, Result};

pub const FORE: &str = "fs";
pub const BACK: &str = "bs";

/// Parameters plus the configuration that fixes their shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

/// Switches used by structural checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace the pooled background embedding by zeros.
    pub zero_back: bool,
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(...)`.
pub fn positional_table<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * d];
    for p in 0..len {
        for i in 0..d {
            let expo = (2 * (i / 2)) as f64 / d as f64;
            let angle = p as f64 / 10000f64.powf(expo);
            data[p * d + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, d], data).expect("len x d")
}

/// Token matrix (`t x rows`) of a clip stored as `rows x t`.
pub fn clip_tokens<T: Real>(clip: &FeatureMatrix) -> Tensor<T> {
    let (rows, cols) = (clip.rows(), clip.cols());
    let mut data = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for (c, v) in clip.row(r).iter().enumerate() {
            data[c * rows + r] = T::of(*v as f64);
        }
    }
    Tensor::new(vec![cols, rows], data).expect("t x rows")
}

fn stream_shapes(prefix: &str, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize, usize)> {
    // (name, shape, fan_in, fan_out); fan 0 marks non-matrix tensors
    let e = &cfg.encoder;
    let d = e.d_model;
    let mut out = vec![
        (format!("{prefix}.in.w"), vec![cfg.input_rows, d], cfg.input_rows, d),
        (format!("{prefix}.in.b"), vec![d], 0, 0),
    ];
    for l in 0..e.layers {
        let p = format!("{prefix}.l{l}");
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.w{m}"), vec![d, d], d, d));
            out.push((format!("{p}.b{m}"), vec![d], 0, 0));
        }
        out.push((format!("{p}.ln1.g"), vec![d], 0, 1));
        out.push((format!("{p}.ln1.b"), vec![d], 0, 0));
        out.push((format!("{p}.ff1.w"), vec![d, e.d_ff], d, e.d_ff));
        out.push((format!("{p}.ff1.b"), vec![e.d_ff], 0, 0));
        out.push((format!("{p}.ff2.w"), vec![e.d_ff, d], e.d_ff, d));
        out.push((format!("{p}.ff2.b"), vec![d], 0, 0));
        out.push((format!("{p}.ln2.g"), vec![d], 0, 1));
        out.push((format!("{p}.ln2.b"), vec![d], 0, 0));
        if e.distill && l + 1 < e.layers {
            out.push((format!("{p}.conv.w"), vec![3 * d, d], 3 * d, d));
            out.push((format!("{p}.conv.b"), vec![d], 0, 0));
        }
    }
    out
}

/// Names and shapes of every tensor, in storage order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut layout: Vec<_> = stream_shapes(FORE, cfg)
        .into_iter()
        .map(|(n, s, _, _)| (n, s))
        .collect();
    if cfg.two_stream {
        layout.extend(stream_shapes(BACK, cfg).into_iter().map(|(n, s, _, _)| (n, s)));
    }
    let (d, h) = (cfg.encoder.d_model, cfg.mlp_hidden);
    layout.push(("head.w1".into(), vec![d, h]));
    layout.push(("head.b1".into(), vec![h]));
    layout.push(("head.w2".into(), vec![h, 1]));
    layout.push(("head.b2".into(), vec![1]));
    layout
}

impl<T: Real> Model<T> {
    /// Xavier-uniform matrices, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut streams = vec![FORE];
        if config.two_stream {
            streams.push(BACK);
        }
        for s in streams {
            for (name, shape, fan_in, fan_out) in stream_shapes(s, &config) {
                let t = match (fan_in, fan_out) {
                    (0, 1) => Tensor::full(&shape, T::one()),
                    (0, _) => Tensor::zeros(&shape),
                    (i, o) => xavier_uniform(&mut rng, &shape, i, o),
                };
                params.insert(name, t);
            }
        }
        let (d, h) = (config.encoder.d_model, config.mlp_hidden);
        params.insert("head.w1", xavier_uniform(&mut rng, &[d, h], d, h));
        params.insert("head.b1", Tensor::zeros(&[h]));
        params.insert("head.w2", xavier_uniform(&mut rng, &[h, 1], h, 1));
        params.insert("head.b2", Tensor::zeros(&[1]));
        Ok(Model { config, params })
    }

    /// Wraps existing tensors after checking them against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            let first = layout
                .iter()
                .find(|(n, _)| params.id(n).is_none())
                .map(|(n, _)| n.clone())
                .or_else(|| {
                    params
                        .entries()
                        .iter()
                        .find(|e| !layout.iter().any(|(n, _)| *n == e.name))
                        .map(|e| e.name.clone())
                })
                .unwrap_or_default();
            return Err(Error::shape(format!(
                "tensor {first}: expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            match params.by_name(name) {
                None => return Err(Error::shape(format!("tensor {name} missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::shape(format!(
                        "tensor {name}: stored dims {:?}, model expects {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn set_output_bias(&mut self, b: f64) {
        if let Some(t) = self.params.by_name_mut("head.b2") {
            t.data_mut()[0] = T::of(b);
        }
    }

    /// Overwrites every background-stream tensor with its foreground twin.
    pub fn copy_fore_to_back(&mut self) -> Result<()> {
        if !self.config.two_stream {
            return Err(Error::invalid("single-stream model has no background stream"));
        }
        self.params.copy_prefix(&format!("{FORE}."), &format!("{BACK}."))
    }

    pub fn zero_stream(&mut self, prefix: &str) {
        let ids: Vec<_> = self
            .params
            .ids()
            .filter(|&id| self.params.name(id).starts_with(&format!("{prefix}.")))
            .collect();
        for id in ids {
            self.params.get_mut(id).data_mut().fill(T::zero());
        }
    }

    fn check_tokens(&self, tokens: &Tensor<T>) -> Result<()> {
        let (t, rows) = tokens.dims2();
        if rows != self.config.input_rows || t != self.config.clip_len {
            return Err(Error::shape(format!(
                "clip is {rows} rows x {t} frames, model expects {} x {}",
                self.config.input_rows, self.config.clip_len
            )));
        }
        Ok(())
    }

    /// Encoder stack of one stream, mean-pooled to `1 x d_model`.
    pub fn stream_embedding(&self, g: &mut Graph<'_, T>, prefix: &str, tokens: &Tensor<T>) -> Result<Var> {
        self.check_tokens(tokens)?;
        let e = &self.config.encoder;
        let d = e.d_model;
        let x = g.constant(tokens.clone());
        let w = g.named(&format!("{prefix}.in.w"))?;
        let b = g.named(&format!("{prefix}.in.b"))?;
        let h = g.matmul(x, w)?;
        let h = g.add_bias(h, b)?;
        let pe = g.constant(positional_table(tokens.dims2().0, d));
        let h = g.add(h, pe)?;
        let mut h = g.dropout(h, e.dropout);
        for l in 0..e.layers {
            h = self.encoder_layer(g, &format!("{prefix}.l{l}"), h, l + 1 == e.layers)?;
        }
        Ok(g.mean_rows(h))
    }

    fn linear(&self, g: &mut Graph<'_, T>, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = g.named(w)?;
        let bv = g.named(b)?;
        let y = g.matmul(x, wv)?;
        g.add_bias(y, bv)
    }

    /// Self-attention block, feed-forward block, then optional distilling.
    pub fn encoder_layer(&self, g: &mut Graph<'_, T>, p: &str, x: Var, last: bool) -> Result<Var> {
        let e = &self.config.encoder;
        let q = self.linear(g, x, &format!("{p}.wq"), &format!("{p}.bq"))?;
        let k = self.linear(g, x, &format!("{p}.wk"), &format!("{p}.bk"))?;
        let v = self.linear(g, x, &format!("{p}.wv"), &format!("{p}.bv"))?;
        let a = g.attention(q, k, v, e.heads, e.attention_mode())?;
        let a = self.linear(g, a, &format!("{p}.wo"), &format!("{p}.bo"))?;
        let a = g.dropout(a, e.dropout);
        let y = g.add(x, a)?;
        let (g1, b1) = (g.named(&format!("{p}.ln1.g"))?, g.named(&format!("{p}.ln1.b"))?);
        let y = g.layer_norm(y, g1, b1)?;
        let f = self.linear(g, y, &format!("{p}.ff1.w"), &format!("{p}.ff1.b"))?;
        let f = g.gelu(f);
        let f = g.dropout(f, e.dropout);
        let f = self.linear(g, f, &format!("{p}.ff2.w"), &format!("{p}.ff2.b"))?;
        let f = g.dropout(f, e.dropout);
        let z = g.add(y, f)?;
        let (g2, b2) = (g.named(&format!("{p}.ln2.g"))?, g.named(&format!("{p}.ln2.b"))?);
        let z = g.layer_norm(z, g2, b2)?;
        if !e.distill || last {
            return Ok(z);
        }
        let (cw, cb) = (g.named(&format!("{p}.conv.w"))?, g.named(&format!("{p}.conv.b"))?);
        let c = g.conv1d(z, cw, cb)?;
        let c = g.elu(c);
        g.max_pool(c)
    }

    /// MLP head applied to a `1 x d_model` feature.
    pub fn head(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let h = self.linear(g, z, "head.w1", "head.b1")?;
        let h = g.gelu(h);
        self.linear(g, h, "head.w2", "head.b2")
    }

    /// Predicted heart rate (bpm) node for one clip given as token matrices.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        fore: &Tensor<T>,
        back: Option<&Tensor<T>>,
        opts: ForwardOptions,
    ) -> Result<Var> {
        let zf = self.stream_embedding(g, FORE, fore)?;
        let diff = if self.config.two_stream {
            let back = back.ok_or_else(|| Error::invalid("two-stream model needs a background clip"))?;
            let zb = if opts.zero_back {
                self.check_tokens(back)?;
                g.constant(Tensor::zeros(&[1, self.config.encoder.d_model]))
            } else {
                self.stream_embedding(g, BACK, back)?
            };
            g.sub(zf, zb)?
        } else {
            zf
        };
        self.head(g, diff)
    }

    /// Inference helper: dropout off, ProbSparse sampling seeded by `seed`.
    pub fn predict(&self, fore: &Tensor<T>, back: Option<&Tensor<T>>, seed: u64) -> Result<f64> {
        let mut g = Graph::new(&self.params, false, seed);
        let out = self.forward(&mut g, fore, back, ForwardOptions::default())?;
        Ok(g.value(out).item().f64())
    }
}

/// Sum of absolute errors.
pub fn l1_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(p, t)| (p - t).abs()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AttentionKind, EncoderConfig};
    use rand::Rng;

    fn small_config(two_stream: bool) -> ModelConfig {
        ModelConfig {
            input_rows: 6,
            clip_len: 12,
            encoder: EncoderConfig {
                d_model: 8,
                heads: 2,
                d_ff: 16,
                layers: 3,
                distill: true,
                dropout: 0.1,
                sparse_factor: 5,
                attention: AttentionKind::ProbSparse,
            },
            mlp_hidden: 8,
            two_stream,
        }
    }

    fn random_tokens(seed: u64, t: usize, rows: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * rows).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![t, rows], data).unwrap()
    }

    #[test]
    fn distill_token_counts() {
        let e = EncoderConfig::default();
        assert_eq!(e.token_counts(300).unwrap(), vec![300, 150, 75]);
        let off = EncoderConfig { distill: false, ..e.clone() };
        assert_eq!(off.token_counts(300).unwrap(), vec![300, 300, 300]);
        assert!(e.token_counts(1).is_err());
    }

    #[test]
    fn layer_halves_tokens() {
        let mut cfg = small_config(true);
        cfg.clip_len = 300;
        cfg.encoder.d_model = 8;
        let m = Model::<f32>::init(cfg, 1).unwrap();
        let mut g = Graph::new(&m.params, false, 0);
        let x = g.constant(Tensor::full(&[300, 8], 0.1));
        let y = m.encoder_layer(&mut g, "fs.l0", x, false).unwrap();
        assert_eq!(g.value(y).dims2(), (150, 8));
    }

    #[test]
    fn zero_weights_zero_input_give_zero() {
        let cfg = small_config(true);
        let mut m = Model::<f64>::init(cfg, 3).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            let name = m.params.name(id).to_string();
            if name.starts_with("fs.l0.") && !name.ends_with(".g") {
                m.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new(&m.params, false, 0);
        let x = g.constant(Tensor::zeros(&[12, 8]));
        let y = m.encoder_layer(&mut g, "fs.l0", x, true).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inference_is_deterministic() {
        let m = Model::<f64>::init(small_config(true), 5).unwrap();
        let (f, b) = (random_tokens(1, 12, 6), random_tokens(2, 12, 6));
        let a = m.predict(&f, Some(&b), 9).unwrap();
        let c = m.predict(&f, Some(&b), 9).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn symmetric_streams_cancel() {
        let mut m = Model::<f64>::init(small_config(true), 5).unwrap();
        m.copy_fore_to_back().unwrap();
        let reference = {
            let mut g = Graph::new(&m.params, false, 0);
            let z = g.constant(Tensor::zeros(&[1, 8]));
            let out = m.head(&mut g, z).unwrap();
            g.value(out).item()
        };
        for seed in 0..3 {
            let x = random_tokens(seed, 12, 6);
            let p = m.predict(&x, Some(&x), 4).unwrap();
            assert!((p - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn background_perturbation_changes_output() {
        let m = Model::<f64>::init(small_config(true), 5).unwrap();
        let f = random_tokens(1, 12, 6);
        let mut b = random_tokens(2, 12, 6);
        let base = m.predict(&f, Some(&b), 0).unwrap();
        b.data_mut()[7] += 1e-3;
        let moved = m.predict(&f, Some(&b), 0).unwrap();
        assert!((moved - base).abs() > 1e-9);
    }

    #[test]
    fn zeroing_back_stream_leaves_fore_values() {
        let m = Model::<f64>::init(small_config(true), 5).unwrap();
        let mut z = m.clone();
        z.zero_stream(BACK);
        let f = random_tokens(1, 12, 6);
        let emb = |m: &Model<f64>| {
            let mut g = Graph::new(&m.params, false, 0);
            let v = m.stream_embedding(&mut g, FORE, &f).unwrap();
            g.value(v).clone()
        };
        assert_eq!(emb(&m), emb(&z));
    }

    #[test]
    fn token_order_matters() {
        let m = Model::<f64>::init(small_config(false), 5).unwrap();
        let f = random_tokens(1, 12, 6);
        let mut rev = f.clone();
        for t in 0..12 {
            rev.data_mut()[t * 6..(t + 1) * 6].copy_from_slice(&f.data()[(11 - t) * 6..(12 - t) * 6]);
        }
        let a = m.predict(&f, None, 0).unwrap();
        let b = m.predict(&rev, None, 0).unwrap();
        assert!((a - b).abs() > 1e-9);
    }

    #[test]
    fn single_stream_matches_zeroed_back() {
        let two = Model::<f64>::init(small_config(true), 5).unwrap();
        let mut one = Model::<f64>::init(small_config(false), 6).unwrap();
        for e in one.params.entries().to_vec() {
            *one.params.by_name_mut(&e.name).unwrap() = two.params.by_name(&e.name).unwrap().clone();
        }
        assert!(one.params.entries().iter().all(|e| !e.name.starts_with("bs.")));
        let f = random_tokens(1, 12, 6);
        let b = random_tokens(2, 12, 6);
        let mut g = Graph::new(&two.params, false, 0);
        let out = two
            .forward(&mut g, &f, Some(&b), ForwardOptions { zero_back: true })
            .unwrap();
        let p2 = g.value(out).item();
        let p1 = one.predict(&f, None, 0).unwrap();
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn wrong_clip_shape_rejected() {
        let m = Model::<f64>::init(small_config(false), 5).unwrap();
        assert!(m.predict(&random_tokens(1, 11, 6), None, 0).is_err());
        assert!(m.predict(&random_tokens(1, 12, 5), None, 0).is_err());
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&[70.0, 80.0], &[70.0, 80.0]).unwrap(), 0.0);
        assert_eq!(l1_loss(&[70.0], &[75.0]).unwrap(), 5.0);
        assert!(l1_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn positional_table_values() {
        let pe = positional_table::<f64>(3, 4);
        assert_eq!(&pe.data()[0..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[6] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }
}
