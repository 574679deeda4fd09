//! Swin transformer encoder with a convolutional U-shaped decoder.

mod config;
mod params;

use std::sync::Arc;

use rand::Rng;

pub use config::{ModelConfig, NUM_STAGES};
pub use params::{block_prefix, count_flops, count_parameters, level_shapes, padded_input, param_specs};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, ParamStore, Tape, Tensor, Var};
use crate::windowing::{cyclic_shift, window_partition, window_reverse, WindowConfig};

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Flattened relative position index `[T * T]` into a `(2m-1)^3` table for
/// a window of extents `window <= m` per axis.
pub fn relative_position_index(window: [usize; 3], m: usize) -> Vec<usize> {
    let side = 2 * m - 1;
    let coords: Vec<[usize; 3]> = (0..window[0])
        .flat_map(|h| (0..window[1]).flat_map(move |w| (0..window[2]).map(move |d| [h, w, d])))
        .collect();
    let mut out = Vec::with_capacity(coords.len() * coords.len());
    for a in &coords {
        for b in &coords {
            let r = |i: usize| a[i] + m - 1 - b[i];
            out.push((r(0) * side + r(1)) * side + r(2));
        }
    }
    out
}

/// Network parameters plus the configuration they were built for.
#[derive(Clone, Debug)]
pub struct SwinUnetr<E: Element> {
    config: ModelConfig,
    params: ParamStore<E>,
}

/// Encoder outputs, channels first: input and five levels of decreasing
/// resolution.
pub struct StageOutputs<'t, E: Element> {
    pub levels: Vec<Var<'t, E>>,
}

impl<E: Element> SwinUnetr<E> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_specs(&param_specs(&config), rng)?;
        Ok(SwinUnetr { config, params })
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<E>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let p = params
                .by_name(&s.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", s.name)))?;
            if p.value().shape() != s.shape.as_slice() {
                return Err(shape_err!("parameter {} has shape {:?}, expected {:?}", s.name, p.value().shape(), s.shape));
            }
        }
        Ok(SwinUnetr { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<E> {
        self.params
    }

    /// Same parameters converted to another element type.
    pub fn cast<F: Element>(&self) -> SwinUnetr<F> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params
                .insert(crate::tensor::Parameter::new(p.name(), p.value().cast()))
                .expect("unique names");
        }
        SwinUnetr { config: self.config.clone(), params }
    }

    fn p<'t>(&self, tape: &'t Tape<E>, name: &str) -> Result<Var<'t, E>> {
        let p = self
            .params
            .by_name(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        Ok(tape.param(p))
    }

    fn opt<'t>(&self, tape: &'t Tape<E>, name: &str) -> Option<Var<'t, E>> {
        self.params.by_name(name).map(|p| tape.param(p))
    }

    fn linear<'t>(&self, x: &Var<'t, E>, name: &str) -> Result<Var<'t, E>> {
        let tape = x.tape();
        let w = self.p(tape, &format!("{name}.weight"))?;
        let b = self.opt(tape, &format!("{name}.bias"));
        x.linear(&w, b.as_ref())
    }

    fn layer_norm<'t>(&self, x: &Var<'t, E>, name: &str) -> Result<Var<'t, E>> {
        let tape = x.tape();
        let g = self.p(tape, &format!("{name}.weight"))?;
        let b = self.p(tape, &format!("{name}.bias"))?;
        x.layer_norm(Some(&g), Some(&b), NORM_EPS)
    }

    /// Attention bias `[heads, T, T]` for a (possibly clamped) window.
    fn attention_bias<'t>(&self, tape: &'t Tape<E>, prefix: &str, stage: usize, window: [usize; 3]) -> Result<Var<'t, E>> {
        let heads = self.config.heads[stage];
        let t: usize = window.iter().product();
        if !self.config.use_relative_position_bias {
            return Ok(tape.constant(Tensor::zeros(vec![heads, t, t])));
        }
        let table = self.p(tape, &format!("{prefix}.attn.relative_position_bias"))?;
        let idx = Arc::new(relative_position_index(window, self.config.window_size));
        table.index_rows(idx)?.reshape(&[t, t, heads])?.permute(&[2, 0, 1])
    }

    /// Window attention branch on an already normalized grid `[B, H, W, D, c]`:
    /// pad, shift, partition, attend, project, then undo the geometry.
    pub fn window_msa<'t>(&self, h: &Var<'t, E>, stage: usize, block: usize, wc: &WindowConfig) -> Result<Var<'t, E>> {
        let tape = h.tape();
        let s = h.shape().to_vec();
        if s.len() != 5 || [s[1], s[2], s[3]] != wc.grid {
            return Err(shape_err!("block input {s:?} does not match window grid {:?}", wc.grid));
        }
        let prefix = block_prefix(stage, block);
        let heads = self.config.heads[stage];
        let pads = [(0, 0), (0, wc.padded[0] - s[1]), (0, wc.padded[1] - s[2]), (0, wc.padded[2] - s[3]), (0, 0)];
        let h = h.pad(&pads)?;
        let h = cyclic_shift(&h, wc.shift, false)?;
        let h = window_partition(&h, wc.window)?;
        let qkv = self.linear(&h, &format!("{prefix}.attn.qkv"))?;
        let bias = self.attention_bias(tape, &prefix, stage, wc.window)?;
        let mask = wc.mask();
        let a = qkv.window_attention(&bias, heads, mask.as_ref())?;
        let a = self.linear(&a, &format!("{prefix}.attn.proj"))?;
        let a = window_reverse(&a, wc.window, wc.padded, s[0])?;
        let a = cyclic_shift(&a, wc.shift, true)?;
        a.slice(&[0..s[0], 0..s[1], 0..s[2], 0..s[3], 0..s[4]])
    }

    /// Pre-norm transformer block on a channel-last grid `[B, H, W, D, c]`
    /// with an explicit window geometry.
    pub fn swin_block_with<'t>(&self, z: &Var<'t, E>, stage: usize, block: usize, wc: &WindowConfig) -> Result<Var<'t, E>> {
        let prefix = block_prefix(stage, block);
        let h = self.layer_norm(z, &format!("{prefix}.norm1"))?;
        let z = z.add(&self.window_msa(&h, stage, block, wc)?)?;
        let m = self.layer_norm(&z, &format!("{prefix}.norm2"))?;
        let m = self.linear(&m, &format!("{prefix}.mlp.fc1"))?.gelu();
        let m = self.linear(&m, &format!("{prefix}.mlp.fc2"))?;
        z.add(&m)
    }

    /// Block `block` of `stage` with the configured window; odd blocks shift.
    pub fn swin_block<'t>(&self, z: &Var<'t, E>, stage: usize, block: usize) -> Result<Var<'t, E>> {
        let s = z.shape();
        if s.len() != 5 {
            return Err(shape_err!("block input must be [B, H, W, D, C], got {s:?}"));
        }
        let wc = WindowConfig::new([s[1], s[2], s[3]], self.config.window_size, block % 2 == 1)?;
        self.swin_block_with(z, stage, block, &wc)
    }

    /// Patch embedding: `[B, S, H, W, D]` to channel-last `[B, H/p, W/p, D/p, C]`.
    pub fn patch_embed<'t>(&self, x: &Var<'t, E>) -> Result<Var<'t, E>> {
        let tape = x.tape();
        let w = self.p(tape, "encoder.patch_embed.weight")?;
        let b = self.p(tape, "encoder.patch_embed.bias")?;
        let p = self.config.patch_size;
        let s = x.shape();
        if s.len() != 5 {
            return Err(shape_err!("input must be [B, S, H, W, D], got {s:?}"));
        }
        let pads: Vec<(usize, usize)> = s.iter().enumerate().map(|(i, &d)| (0, if i >= 2 { d.div_ceil(p) * p - d } else { 0 })).collect();
        x.pad(&pads)?.conv3d(&w, Some(&b), p, 0)?.permute(&[0, 2, 3, 4, 1])
    }

    /// 2x2x2 neighbourhood merge: `[B, H, W, D, c]` to `[B, H/2, W/2, D/2, 2c]`.
    pub fn patch_merge<'t>(&self, z: &Var<'t, E>, stage: usize) -> Result<Var<'t, E>> {
        let s = z.shape().to_vec();
        let pads = [(0, 0), (0, s[1] % 2), (0, s[2] % 2), (0, s[3] % 2), (0, 0)];
        let z = z.pad(&pads)?;
        let (b, h, w, d, c) = (s[0], s[1].div_ceil(2), s[2].div_ceil(2), s[3].div_ceil(2), s[4]);
        let z = z
            .reshape(&[b, h, 2, w, 2, d, 2, c])?
            .permute(&[0, 1, 3, 5, 2, 4, 6, 7])?
            .reshape(&[b, h, w, d, 8 * c])?;
        let z = self.layer_norm(&z, &format!("encoder.stage{stage}.merge.norm"))?;
        self.linear(&z, &format!("encoder.stage{stage}.merge.reduction"))
    }

    /// Encoder levels for an input whose extents are multiples of the divisor.
    pub fn encode<'t>(&self, x: &Var<'t, E>) -> Result<StageOutputs<'t, E>> {
        let hidden = |z: &Var<'t, E>| -> Result<Var<'t, E>> { z.layer_norm(None, None, NORM_EPS)?.permute(&[0, 4, 1, 2, 3]) };
        let mut z = self.patch_embed(x)?;
        let mut levels = vec![x.clone(), hidden(&z)?];
        for i in 0..NUM_STAGES {
            for j in 0..self.config.depths[i] {
                z = self.swin_block(&z, i, j)?;
            }
            z = self.patch_merge(&z, i)?;
            levels.push(hidden(&z)?);
        }
        Ok(StageOutputs { levels })
    }

    fn conv<'t>(&self, x: &Var<'t, E>, name: &str, padding: usize) -> Result<Var<'t, E>> {
        let w = self.p(x.tape(), &format!("{name}.weight"))?;
        x.conv3d(&w, None, 1, padding)
    }

    /// Two 3x3x3 conv / instance-norm layers with an additive skip.
    pub fn residual_block<'t>(&self, x: &Var<'t, E>, name: &str) -> Result<Var<'t, E>> {
        let y = self
            .conv(x, &format!("{name}.conv1"), 1)?
            .instance_norm(None, None, NORM_EPS)?
            .leaky_relu(LEAKY_SLOPE);
        let y = self.conv(&y, &format!("{name}.conv2"), 1)?.instance_norm(None, None, NORM_EPS)?;
        let skip = if self.params.by_name(&format!("{name}.proj.weight")).is_some() {
            self.conv(x, &format!("{name}.proj"), 0)?.instance_norm(None, None, NORM_EPS)?
        } else {
            x.clone()
        };
        Ok(y.add(&skip)?.leaky_relu(LEAKY_SLOPE))
    }

    fn up_block<'t>(&self, x: &Var<'t, E>, skip: &Var<'t, E>, name: &str) -> Result<Var<'t, E>> {
        let w = self.p(x.tape(), &format!("{name}.upsample.weight"))?;
        let up = x.conv_transpose3d(&w, None, 2)?;
        if up.shape() != skip.shape() {
            return Err(shape_err!("{name}: upsampled {:?} does not match skip {:?}", up.shape(), skip.shape()));
        }
        let cat = Var::concat(&[&up, skip], 1)?;
        drop(up);
        self.residual_block(&cat, &format!("{name}.block"))
    }

    /// Logits from encoder levels.
    pub fn decode<'t>(&self, st: StageOutputs<'t, E>) -> Result<Var<'t, E>> {
        let mut lv = st.levels.into_iter().map(Some).collect::<Vec<_>>();
        let mut take = |i: usize| lv[i].take().expect("level used once");
        let enc0 = self.residual_block(&take(0), "decoder.enc0")?;
        let enc1 = self.residual_block(&take(1), "decoder.enc1")?;
        let enc2 = self.residual_block(&take(2), "decoder.enc2")?;
        let enc3 = self.residual_block(&take(3), "decoder.enc3")?;
        let hs3 = take(4);
        let dec = self.residual_block(&take(5), "decoder.bottleneck")?;
        let dec = self.up_block(&dec, &hs3, "decoder.up4")?;
        drop(hs3);
        let dec = self.up_block(&dec, &enc3, "decoder.up3")?;
        drop(enc3);
        let dec = self.up_block(&dec, &enc2, "decoder.up2")?;
        drop(enc2);
        let dec = self.up_block(&dec, &enc1, "decoder.up1")?;
        drop(enc1);
        let dec = self.up_block(&dec, &enc0, "decoder.up0")?;
        drop(enc0);
        let tape = dec.tape();
        let w = self.p(tape, "head.weight")?;
        let b = self.p(tape, "head.bias")?;
        dec.conv3d(&w, Some(&b), 1, 0)
    }

    /// Logits `[B, out, H, W, D]` for input `[B, S, H, W, D]`. Extents that
    /// are not multiples of the divisor are zero-padded and cropped back.
    pub fn forward<'t>(&self, x: &Var<'t, E>) -> Result<Var<'t, E>> {
        let s = x.shape().to_vec();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(shape_err!(
                "input must be [B, {}, H, W, D], got {s:?}",
                self.config.in_channels
            ));
        }
        let k = self.config.divisor();
        let pads: Vec<(usize, usize)> = s.iter().enumerate().map(|(i, &d)| (0, if i >= 2 { d.div_ceil(k) * k - d } else { 0 })).collect();
        let xp = x.pad(&pads)?;
        let logits = self.decode(self.encode(&xp)?)?;
        logits.slice(&[0..s[0], 0..self.config.out_channels, 0..s[2], 0..s[3], 0..s[4]])
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = Tape::no_grad();
        let y = self.forward(&tape.constant(x.clone()))?;
        Ok(y.into_value())
    }
}

#[cfg(test)]
mod tests;
