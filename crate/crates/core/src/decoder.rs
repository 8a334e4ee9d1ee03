//! Scale-aware upsampling and the prediction head.
//!
//! Each stage pools the semantic maps `M` (`[N_C, h, w, d_F]`) into a spatial
//! gate and a channel gate, uses them to activate an earlier backbone level,
//! and fuses the activated features into `M` upsampled by two.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::grid::Sampling;
use crate::nn::{Ctx, Linear, ParamStore};

pub const UPSAMPLE_FACTOR: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_stages: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { num_stages: 2 }
    }
}

impl DecoderConfig {
    pub fn validate(&self, backbone_levels: usize) -> Result<()> {
        if self.num_stages + 1 > backbone_levels {
            return Err(Error::config(format!(
                "{} upsampling stages need at least {} backbone levels, have {backbone_levels}",
                self.num_stages,
                self.num_stages + 1
            )));
        }
        Ok(())
    }
}

/// Spatial gate `[h, w, 1]` and channel gate `[d_F]`, both in `(0, 1)`.
pub struct Gates<'t> {
    pub spatial: Var<'t>,
    pub channel: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    feat_proj: Linear,
    sp_inner: Linear,
    sp_out: Linear,
    ch_inner: Linear,
    ch_out: Linear,
    fuse: Linear,
    connect: Linear,
    d_f: usize,
}

impl DecoderStage {
    pub fn new(store: &mut ParamStore, prefix: &str, feat_dim: usize, d_f: usize) -> Result<Self> {
        let lin = |store: &mut ParamStore, name: &str, i, o| Linear::new(store, &format!("{prefix}.{name}"), i, o);
        Ok(Self {
            feat_proj: lin(store, "feat_proj", feat_dim, d_f)?,
            sp_inner: lin(store, "sp_inner", d_f, d_f)?,
            sp_out: lin(store, "sp_out", d_f, 1)?,
            ch_inner: lin(store, "ch_inner", d_f, d_f)?,
            ch_out: lin(store, "ch_out", d_f, d_f)?,
            fuse: lin(store, "fuse", 2 * d_f, d_f)?,
            connect: lin(store, "connect", d_f, d_f)?,
            d_f,
        })
    }

    /// Pools `M` into the two gates. Pointwise maps commute with the means,
    /// so the means are taken first.
    pub fn activation_vectors<'t>(&self, cx: &Ctx<'t>, m: Var<'t>) -> Result<Gates<'t>> {
        let s = m.shape();
        let (h, w, d) = (s[1], s[2], s[3]);
        let per_pixel = m.mean_axis(0)?.reshape(&[h, w, d])?;
        let spatial = self
            .sp_out
            .forward(cx, self.sp_inner.forward(cx, per_pixel)?)?
            .sigmoid();
        let pooled = per_pixel.mean_axis(0)?.mean_axis(1)?.reshape(&[d])?;
        let channel = self
            .ch_out
            .forward(cx, self.ch_inner.forward(cx, pooled)?)?
            .sigmoid();
        Ok(Gates { spatial, channel })
    }

    /// `(V_sp ⊙ F, V_ch ⊙ F)` for features `F` of shape `[H, W, d_F]`; the
    /// spatial gate is bilinearly resized to `H × W` first.
    pub fn activate_features<'t>(&self, f: Var<'t>, gates: &Gates<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let s = f.shape();
        if s.len() != 3 || s[2] != gates.channel.dim(0) {
            return Err(Error::shape(format!(
                "features {s:?} do not match channel gate of width {}",
                gates.channel.dim(0)
            )));
        }
        let sp = gates.spatial.resize_bilinear(0, s[0], s[1], Sampling::HalfPixel)?;
        Ok((f.mul(&sp)?, f.mul(&gates.channel)?))
    }

    /// `[G, M↑]` concatenated on the feature axis and fused back to `d_F`,
    /// where `G = F_sp + F_ch + F` is shared by every category.
    pub fn fuse_scale<'t>(
        &self,
        cx: &Ctx<'t>,
        m: Var<'t>,
        f: Var<'t>,
        f_sp: Var<'t>,
        f_ch: Var<'t>,
    ) -> Result<Var<'t>> {
        let s = m.shape();
        let (h, w) = (s[1] * UPSAMPLE_FACTOR, s[2] * UPSAMPLE_FACTOR);
        if f.shape() != [h, w, self.d_f] {
            return Err(Error::shape(format!(
                "scale features {:?} do not match upsampled maps {h}x{w}x{}",
                f.shape(),
                self.d_f
            )));
        }
        let m_up = m.resize_bilinear(1, h, w, Sampling::HalfPixel)?;
        let g = f_sp.add(&f_ch)?.add(&f)?;
        // Linear over a concatenation, split into its two halves so G is
        // projected once rather than per category.
        let weight = cx.param(self.fuse.weight_name())?;
        let bias = self.fuse.bias_name().map(|n| cx.param(n)).transpose()?;
        let from_g = g.linear(&weight.narrow(0, 0, self.d_f)?, None)?;
        let from_m = m_up.linear(&weight.narrow(0, self.d_f, self.d_f)?, bias.as_ref())?;
        from_m.add(&from_g.reshape(&[1, h, w, self.d_f])?)
    }

    /// One full stage on `M` and a raw backbone level `[h_L, w_L, d]`:
    /// gates, scale fusion, GELU, then the connection map.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, m: Var<'t>, level: Var<'t>) -> Result<Var<'t>> {
        let s = m.shape();
        if s.len() != 4 || s[3] != self.d_f {
            return Err(Error::shape(format!(
                "semantic maps must be [N_C, h, w, {}], got {s:?}",
                self.d_f
            )));
        }
        let (h, w) = (s[1] * UPSAMPLE_FACTOR, s[2] * UPSAMPLE_FACTOR);
        let f = self
            .feat_proj
            .forward(cx, level)?
            .resize_bilinear(0, h, w, Sampling::HalfPixel)?;
        let gates = self.activation_vectors(cx, m)?;
        let (f_sp, f_ch) = self.activate_features(f, &gates)?;
        let fused = self.fuse_scale(cx, m, f, f_sp, f_ch)?.gelu();
        self.connect.forward(cx, fused)
    }
}

/// Stages in order; stage `s` consumes the backbone level `L - 2 - s`.
#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<DecoderStage>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, backbone_levels: usize, feat_dim: usize, d_f: usize) -> Result<Self> {
        cfg.validate(backbone_levels)?;
        let stages = (0..cfg.num_stages)
            .map(|s| DecoderStage::new(store, &format!("decoder.stage{s}"), feat_dim, d_f))
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[DecoderStage] {
        &self.stages
    }

    /// `levels` are the backbone levels, shallow to deep.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, mut m: Var<'t>, levels: &[Var<'t>]) -> Result<Var<'t>> {
        if self.stages.len() + 1 > levels.len() {
            return Err(Error::config(format!(
                "{} stages but only {} backbone levels",
                self.stages.len(),
                levels.len()
            )));
        }
        let deepest = levels.len() - 1;
        for (s, stage) in self.stages.iter().enumerate() {
            m = stage.forward(cx, m, levels[deepest - 1 - s])?;
        }
        Ok(m)
    }
}

/// Per-category linear probe followed by resizing to the image.
#[derive(Debug, Clone)]
pub struct Head {
    proj: Linear,
}

impl Head {
    pub fn new(store: &mut ParamStore, d_f: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, "head.proj", d_f, 1)?,
        })
    }

    /// `[N_C, h, w, d_F] -> [out_h, out_w, N_C]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, m: Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let s = m.shape();
        self.proj
            .forward(cx, m)?
            .reshape(&[s[0], s[1], s[2]])?
            .resize_bilinear(1, out_h, out_w, Sampling::HalfPixel)?
            .permute(&[1, 2, 0])
    }
}
