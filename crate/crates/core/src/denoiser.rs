//! UNet noise-prediction network.
//!
//! Topology: input conv, a down path of residual blocks (optionally followed
//! by self-attention) with strided-conv downsampling between levels, a middle
//! block, and a mirrored up path that consumes the down-path skips through
//! channel concatenation. Residual blocks are conditioned on a sinusoidal
//! timestep embedding passed through a two-layer MLP.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, ConvGeometry, Gradients, Graph, ParamId, ParamStore, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub sample_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub block_channels: Vec<usize>,
    pub layers_per_block: usize,
    pub attention_levels: BTreeSet<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            sample_size: 128,
            in_channels: 3,
            out_channels: 3,
            block_channels: vec![64, 128, 128, 256],
            layers_per_block: 2,
            attention_levels: [2, 3].into_iter().collect(),
        }
    }
}

impl DenoiserConfig {
    /// 8×8 two-level configuration that trains in seconds on a CPU.
    pub fn desk_scale() -> Self {
        Self {
            sample_size: 8,
            in_channels: 3,
            out_channels: 3,
            block_channels: vec![16, 32],
            layers_per_block: 1,
            attention_levels: [1].into_iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.layers_per_block == 0 {
            return Err(Error::config("denoiser needs at least one level and one layer per block"));
        }
        if self.block_channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.in_channels != self.out_channels {
            return Err(Error::config(format!(
                "in_channels {} must equal out_channels {}",
                self.in_channels, self.out_channels
            )));
        }
        let factor = 1usize << (self.block_channels.len() - 1);
        if self.sample_size == 0 || self.sample_size % factor != 0 {
            return Err(Error::config(format!(
                "sample_size {} not divisible by {factor}",
                self.sample_size
            )));
        }
        if let Some(&bad) = self.attention_levels.iter().find(|&&l| l >= self.block_channels.len()) {
            return Err(Error::config(format!("attention level {bad} does not exist")));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of integer timesteps, `[B, dim]`, values in `[-1, 1]`.
pub fn timestep_embedding<E: Element>(timesteps: &[usize], dim: usize) -> Tensor<E> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let start = data.len();
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            data.push(E::of((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            data.push(E::of((t as f64 * freq).cos()));
        }
        data.resize(start + dim, E::zero());
    }
    Tensor::from_vec(vec![timesteps.len(), dim], data).expect("embedding shape")
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    geo: ConvGeometry,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

#[derive(Clone, Debug)]
struct Stage {
    resnets: Vec<ResBlock>,
    attns: Vec<Option<AttnBlock>>,
    resample: Option<Conv>,
}

fn norm_groups(channels: usize) -> usize {
    (1..=channels.min(32)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

struct Builder<'a, E: Element> {
    store: &'a mut ParamStore<E>,
    rng: ChaCha8Rng,
}

impl<E: Element> Builder<'_, E> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = cin * k * k;
        let w = fan_in_uniform(vec![cout, cin, k, k], fan_in, &mut self.rng);
        let b = fan_in_uniform(vec![cout], fan_in, &mut self.rng);
        Conv {
            w: self.store.insert(format!("{name}.weight"), w, true),
            b: self.store.insert(format!("{name}.bias"), b, true),
            geo: ConvGeometry::same(stride, k),
        }
    }

    fn norm(&mut self, name: &str, ch: usize) -> Norm {
        Norm {
            gamma: self.store.insert(format!("{name}.weight"), Tensor::full(vec![ch], E::one()), true),
            beta: self.store.insert(format!("{name}.bias"), Tensor::zeros(vec![ch]), true),
            groups: norm_groups(ch),
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        let w = fan_in_uniform(vec![fout, fin], fin, &mut self.rng);
        let b = fan_in_uniform(vec![fout], fin, &mut self.rng);
        Dense {
            w: self.store.insert(format!("{name}.weight"), w, true),
            b: self.store.insert(format!("{name}.bias"), b, true),
        }
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1),
            time: self.dense(&format!("{name}.time_emb_proj"), temb, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.conv_shortcut"), cin, cout, 1, 1)),
        }
    }

    fn attn(&mut self, name: &str, ch: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.group_norm"), ch),
            q: self.conv(&format!("{name}.to_q"), ch, ch, 1, 1),
            k: self.conv(&format!("{name}.to_k"), ch, ch, 1, 1),
            v: self.conv(&format!("{name}.to_v"), ch, ch, 1, 1),
            proj: self.conv(&format!("{name}.to_out"), ch, ch, 1, 1),
        }
    }
}

/// Noise-prediction UNet with its parameters.
#[derive(Clone, Debug)]
pub struct Denoiser<E: Element = f32> {
    config: DenoiserConfig,
    num_timesteps: usize,
    params: ParamStore<E>,
    conv_in: Conv,
    time1: Dense,
    time2: Dense,
    down: Vec<Stage>,
    mid: (ResBlock, AttnBlock, ResBlock),
    up: Vec<Stage>,
    norm_out: Norm,
    conv_out: Conv,
}

impl<E: Element> Denoiser<E> {
    /// Builds a freshly initialized network for timesteps in `[0, num_timesteps)`.
    pub fn new(config: DenoiserConfig, num_timesteps: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_timesteps == 0 {
            return Err(Error::config("num_timesteps must be positive"));
        }
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let chans = &config.block_channels;
        let c0 = chans[0];
        let temb = 4 * c0;
        let conv_in = b.conv("conv_in", config.in_channels, c0, 3, 1);
        let time1 = b.dense("time_embedding.linear_1", c0, temb);
        let time2 = b.dense("time_embedding.linear_2", temb, temb);

        let mut skips = vec![c0];
        let mut cur = c0;
        let mut down = Vec::new();
        for (lvl, &ch) in chans.iter().enumerate() {
            let mut stage = Stage {
                resnets: Vec::new(),
                attns: Vec::new(),
                resample: None,
            };
            for j in 0..config.layers_per_block {
                stage.resnets.push(b.resblock(&format!("down_blocks.{lvl}.resnets.{j}"), cur, ch, temb));
                cur = ch;
                let attn = config
                    .attention_levels
                    .contains(&lvl)
                    .then(|| b.attn(&format!("down_blocks.{lvl}.attentions.{j}"), ch));
                stage.attns.push(attn);
                skips.push(cur);
            }
            if lvl + 1 < chans.len() {
                stage.resample = Some(b.conv(&format!("down_blocks.{lvl}.downsamplers.0.conv"), cur, cur, 3, 2));
                skips.push(cur);
            }
            down.push(stage);
        }
        let mid = (
            b.resblock("mid_block.resnets.0", cur, cur, temb),
            b.attn("mid_block.attentions.0", cur),
            b.resblock("mid_block.resnets.1", cur, cur, temb),
        );
        let mut up = Vec::new();
        for (i, lvl) in (0..chans.len()).rev().enumerate() {
            let ch = chans[lvl];
            let mut stage = Stage {
                resnets: Vec::new(),
                attns: Vec::new(),
                resample: None,
            };
            for j in 0..=config.layers_per_block {
                let skip = skips.pop().expect("skip stack balanced");
                stage
                    .resnets
                    .push(b.resblock(&format!("up_blocks.{i}.resnets.{j}"), cur + skip, ch, temb));
                cur = ch;
                let attn = config
                    .attention_levels
                    .contains(&lvl)
                    .then(|| b.attn(&format!("up_blocks.{i}.attentions.{j}"), ch));
                stage.attns.push(attn);
            }
            if lvl > 0 {
                stage.resample = Some(b.conv(&format!("up_blocks.{i}.upsamplers.0.conv"), cur, cur, 3, 1));
            }
            up.push(stage);
        }
        debug_assert!(skips.is_empty());
        let norm_out = b.norm("conv_norm_out", cur);
        let conv_out = b.conv("conv_out", cur, config.out_channels, 3, 1);
        Ok(Self {
            config,
            num_timesteps,
            params,
            conv_in,
            time1,
            time2,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.trainable_count()
    }

    /// Same network with parameters converted to another element type.
    pub fn cast<F: Element>(&self) -> Denoiser<F> {
        Denoiser {
            config: self.config.clone(),
            num_timesteps: self.num_timesteps,
            params: self.params.cast(),
            conv_in: self.conv_in.clone(),
            time1: self.time1.clone(),
            time2: self.time2.clone(),
            down: self.down.clone(),
            mid: self.mid.clone(),
            up: self.up.clone(),
            norm_out: self.norm_out.clone(),
            conv_out: self.conv_out.clone(),
        }
    }

    fn check_inputs(&self, x_t: &Tensor<E>, timesteps: &[usize]) -> Result<()> {
        let c = &self.config;
        let b = x_t.shape().first().copied().unwrap_or(0);
        x_t.ensure_shape(&[b, c.in_channels, c.sample_size, c.sample_size])?;
        if b == 0 {
            return Err(Error::Empty("empty batch".into()));
        }
        if timesteps.len() != b {
            return Err(Error::ShapeMismatch {
                expected: vec![b],
                actual: vec![timesteps.len()],
            });
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t >= self.num_timesteps) {
            return Err(Error::TimestepOutOfRange {
                t,
                num_timesteps: self.num_timesteps,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the predicted-noise node.
    pub fn forward(&self, g: &mut Graph<'_, E>, x: Var, timesteps: &[usize]) -> Result<Var> {
        let c0 = self.config.block_channels[0];
        let emb = g.input(timestep_embedding(timesteps, c0));
        let emb = dense(g, &self.time1, emb)?;
        let emb = g.silu(emb);
        let emb = dense(g, &self.time2, emb)?;
        let emb = g.silu(emb);

        let mut h = conv(g, &self.conv_in, x)?;
        let mut skips = vec![h];
        for stage in &self.down {
            for (res, attn) in stage.resnets.iter().zip(&stage.attns) {
                h = resblock(g, res, h, emb)?;
                if let Some(a) = attn {
                    h = attention(g, a, h)?;
                }
                skips.push(h);
            }
            if let Some(ds) = &stage.resample {
                h = conv(g, ds, h)?;
                skips.push(h);
            }
        }
        h = resblock(g, &self.mid.0, h, emb)?;
        h = attention(g, &self.mid.1, h)?;
        h = resblock(g, &self.mid.2, h, emb)?;
        for stage in &self.up {
            for (res, attn) in stage.resnets.iter().zip(&stage.attns) {
                let skip = skips.pop().expect("skip stack balanced");
                h = g.concat_channels(h, skip)?;
                h = resblock(g, res, h, emb)?;
                if let Some(a) = attn {
                    h = attention(g, a, h)?;
                }
            }
            if let Some(us) = &stage.resample {
                h = g.upsample2x(h)?;
                h = conv(g, us, h)?;
            }
        }
        h = norm(g, &self.norm_out, h)?;
        h = g.silu(h);
        conv(g, &self.conv_out, h)
    }

    /// Predicted noise for `x_t: [B, C, H, W]` at per-sample `timesteps`.
    pub fn predict_noise(&self, x_t: &Tensor<E>, timesteps: &[usize]) -> Result<Tensor<E>> {
        self.check_inputs(x_t, timesteps)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(x_t.clone());
        let out = self.forward(&mut g, x, timesteps)?;
        Ok(g.value(out).clone())
    }

    /// Noise-prediction MSE and its parameter gradients.
    pub fn loss_and_grads(&self, x_t: &Tensor<E>, timesteps: &[usize], eps: &Tensor<E>) -> Result<(f64, Gradients<E>)> {
        self.check_inputs(x_t, timesteps)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(x_t.clone());
        let pred = self.forward(&mut g, x, timesteps)?;
        let loss = g.mse(pred, eps.clone())?;
        let value = g.value(loss).data()[0].f64();
        let grads = g.backward(loss)?;
        Ok((value, grads))
    }

    /// Noise-prediction MSE without gradients.
    pub fn loss(&self, x_t: &Tensor<E>, timesteps: &[usize], eps: &Tensor<E>) -> Result<f64> {
        self.check_inputs(x_t, timesteps)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(x_t.clone());
        let pred = self.forward(&mut g, x, timesteps)?;
        let loss = g.mse(pred, eps.clone())?;
        Ok(g.value(loss).data()[0].f64())
    }
}

fn conv<E: Element>(g: &mut Graph<'_, E>, c: &Conv, x: Var) -> Result<Var> {
    let w = g.param(c.w);
    let b = g.param(c.b);
    g.conv2d(x, w, Some(b), c.geo)
}

fn norm<E: Element>(g: &mut Graph<'_, E>, n: &Norm, x: Var) -> Result<Var> {
    let gamma = g.param(n.gamma);
    let beta = g.param(n.beta);
    g.group_norm(x, gamma, beta, n.groups)
}

fn dense<E: Element>(g: &mut Graph<'_, E>, d: &Dense, x: Var) -> Result<Var> {
    let w = g.param(d.w);
    let b = g.param(d.b);
    g.linear(x, w, Some(b))
}

fn resblock<E: Element>(g: &mut Graph<'_, E>, r: &ResBlock, x: Var, emb: Var) -> Result<Var> {
    let h = norm(g, &r.norm1, x)?;
    let h = g.silu(h);
    let h = conv(g, &r.conv1, h)?;
    let t = dense(g, &r.time, emb)?;
    let h = g.add_channel_bias(h, t)?;
    let h = norm(g, &r.norm2, h)?;
    let h = g.silu(h);
    let h = conv(g, &r.conv2, h)?;
    let skip = match &r.skip {
        Some(s) => conv(g, s, x)?,
        None => x,
    };
    g.add(skip, h)
}

fn attention<E: Element>(g: &mut Graph<'_, E>, a: &AttnBlock, x: Var) -> Result<Var> {
    let h = norm(g, &a.norm, x)?;
    let q = conv(g, &a.q, h)?;
    let k = conv(g, &a.k, h)?;
    let v = conv(g, &a.v, h)?;
    let o = g.attention(q, k, v)?;
    let o = conv(g, &a.proj, o)?;
    g.add(x, o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_conv_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        b.conv("c", 3, 8, 3, 1);
        assert_eq!(store.trainable_count(), 3 * 3 * 3 * 8 + 8);
        assert_eq!(store.trainable_count(), 224);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            DenoiserConfig {
                layers_per_block: 0,
                ..DenoiserConfig::desk_scale()
            },
            DenoiserConfig {
                block_channels: vec![],
                ..DenoiserConfig::desk_scale()
            },
            DenoiserConfig {
                out_channels: 1,
                ..DenoiserConfig::desk_scale()
            },
            DenoiserConfig {
                sample_size: 6,
                block_channels: vec![4, 8, 8],
                ..DenoiserConfig::desk_scale()
            },
            DenoiserConfig {
                attention_levels: [5].into_iter().collect(),
                ..DenoiserConfig::desk_scale()
            },
        ];
        for cfg in bad {
            assert!(Denoiser::<f32>::new(cfg, 10, 0).is_err());
        }
    }

    #[test]
    fn doubling_widths_increases_count() {
        let small = Denoiser::<f32>::new(DenoiserConfig::desk_scale(), 10, 0).unwrap();
        let mut cfg = DenoiserConfig::desk_scale();
        cfg.block_channels.iter_mut().for_each(|c| *c *= 2);
        let big = Denoiser::<f32>::new(cfg, 10, 0).unwrap();
        assert!(big.count_parameters() > small.count_parameters());
    }

    #[test]
    fn output_shape_and_determinism() {
        let model = Denoiser::<f32>::new(DenoiserConfig::desk_scale(), 50, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = Tensor::<f32>::randn(vec![1, 3, 8, 8], &mut rng);
        let batch = Tensor::stack_leading(&[one.clone(), one.clone()]).unwrap();
        let out = model.predict_noise(&batch, &[7, 7]).unwrap();
        assert_eq!(out.shape(), &[2, 3, 8, 8]);
        assert!(out.is_finite());
        assert_eq!(out.index_leading(0).data(), out.index_leading(1).data());
        assert_eq!(model.predict_noise(&batch, &[7, 7]).unwrap(), out);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = Denoiser::<f32>::new(DenoiserConfig::desk_scale(), 50, 3).unwrap();
        assert!(model.predict_noise(&Tensor::zeros(vec![1, 3, 8, 8]), &[50]).is_err());
        assert!(model.predict_noise(&Tensor::zeros(vec![1, 1, 8, 8]), &[0]).is_err());
        assert!(model.predict_noise(&Tensor::zeros(vec![1, 3, 16, 16]), &[0]).is_err());
        assert!(model.predict_noise(&Tensor::zeros(vec![2, 3, 8, 8]), &[0]).is_err());
    }

    #[test]
    fn timestep_embedding_bounded() {
        let e = timestep_embedding::<f64>(&[0, 1, 999, 13_999], 15);
        assert_eq!(e.shape(), &[4, 15]);
        assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
