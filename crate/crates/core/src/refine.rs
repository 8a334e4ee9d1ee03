//! Spatial and category refinement of the semantic map stack
//! `[N_C, h, w, d_F]`.
//!
//! Spatial refinement runs a regular-window then a shifted-window attention
//! block over each category slice. Category refinement runs one attention
//! block over the `N_C` category tokens at every pixel, with no positional
//! terms. Weights are shared across slices and pixels respectively.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, Mlp, ParamStore, SelfAttention};

const MLP_EXPANSION: usize = 4;
const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub repeats: usize,
    pub window_size: usize,
    pub heads: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            repeats: 2,
            window_size: 8,
            heads: 4,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, d_f: usize) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::config("refine repeats must be at least 1"));
        }
        if self.window_size == 0 {
            return Err(Error::config("window_size must be positive"));
        }
        if self.heads == 0 || d_f % self.heads != 0 {
            return Err(Error::config(format!(
                "d_F {d_f} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// One pre-norm windowed attention block plus feed-forward.
#[derive(Debug, Clone)]
struct WindowBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    rel_bias: String,
    window: usize,
    heads: usize,
    shifted: bool,
}

/// Window geometry for one forward call.
struct Layout {
    window: usize,
    shift: usize,
    padded_h: usize,
    padded_w: usize,
}

impl WindowBlock {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, cfg: &RefineConfig, shifted: bool) -> Result<Self> {
        let ws = cfg.window_size;
        let rel_bias = store.register(
            &format!("{prefix}.rel_bias"),
            &[(2 * ws - 1) * (2 * ws - 1), cfg.heads],
            Init::Normal(0.02),
            true,
        )?;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d)?,
            attn: SelfAttention::new(store, &format!("{prefix}.attn"), d, cfg.heads)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d)?,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), d, MLP_EXPANSION)?,
            rel_bias,
            window: ws,
            heads: cfg.heads,
            shifted,
        })
    }

    fn layout(&self, h: usize, w: usize) -> Layout {
        // A map no larger than one window is attended as a single window.
        let side = h.max(w);
        let (window, shift) = if side <= self.window {
            (side, 0)
        } else if self.shifted {
            (self.window, self.window / 2)
        } else {
            (self.window, 0)
        };
        Layout {
            window,
            shift,
            padded_h: h.div_ceil(window) * window,
            padded_w: w.div_ceil(window) * window,
        }
    }

    /// Row of the bias table for each (query, key) pair inside a window.
    fn bias_indices(&self, window: usize) -> Vec<usize> {
        let span = 2 * self.window - 1;
        let t = window * window;
        let mut idx = Vec::with_capacity(t * t);
        for i in 0..t {
            let (yi, xi) = (i / window, i % window);
            for j in 0..t {
                let (yj, xj) = (j / window, j % window);
                let dy = yi + self.window - 1 - yj;
                let dx = xi + self.window - 1 - xj;
                idx.push(dy * span + dx);
            }
        }
        idx
    }

    /// `[windows, t, t]` additive mask separating regions that the cyclic
    /// shift brought together.
    fn shift_mask(lay: &Layout) -> Result<Tensor> {
        let (ws, s) = (lay.window, lay.shift);
        let region = |i: usize, n: usize| -> usize {
            if i < n - ws {
                0
            } else if i < n - s {
                1
            } else {
                2
            }
        };
        let (nh, nw) = (lay.padded_h / ws, lay.padded_w / ws);
        let t = ws * ws;
        let mut data = Vec::with_capacity(nh * nw * t * t);
        for wy in 0..nh {
            for wx in 0..nw {
                let labels: Vec<usize> = (0..t)
                    .map(|k| {
                        let y = wy * ws + k / ws;
                        let x = wx * ws + k % ws;
                        region(y, lay.padded_h) * 3 + region(x, lay.padded_w)
                    })
                    .collect();
                for &a in &labels {
                    for &b in &labels {
                        data.push(if a == b { 0.0 } else { MASK_VALUE });
                    }
                }
            }
        }
        Tensor::new(&[nh * nw, t, t], data)
    }

    fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
        let lay = self.layout(h, w);
        let ws = lay.window;
        let (nh, nw) = (lay.padded_h / ws, lay.padded_w / ws);
        let t = ws * ws;

        let mut y = self
            .norm1
            .forward(cx, x)?
            .pad_end(1, lay.padded_h - h)?
            .pad_end(2, lay.padded_w - w)?;
        if lay.shift > 0 {
            y = y.roll_back(1, lay.shift)?.roll_back(2, lay.shift)?;
        }
        let windows = y
            .reshape(&[n, nh, ws, nw, ws, d])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n * nh * nw, t, d])?;
        let bias = cx
            .param(&self.rel_bias)?
            .index_select(0, &self.bias_indices(ws))?
            .reshape(&[t, t, self.heads])?
            .permute(&[2, 0, 1])?;
        let mask = if lay.shift > 0 {
            Some(cx.constant(Self::shift_mask(&lay)?))
        } else {
            None
        };
        let mut a = self
            .attn
            .forward(cx, windows, Some(bias), mask)?
            .reshape(&[n, nh, nw, ws, ws, d])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n, lay.padded_h, lay.padded_w, d])?;
        if lay.shift > 0 {
            a = a
                .roll_back(1, lay.padded_h - lay.shift)?
                .roll_back(2, lay.padded_w - lay.shift)?;
        }
        if lay.padded_h != h {
            a = a.narrow(1, 0, h)?;
        }
        if lay.padded_w != w {
            a = a.narrow(2, 0, w)?;
        }
        let x = x.add(&a)?;
        let m = self.mlp.forward(cx, self.norm2.forward(cx, x)?)?;
        x.add(&m)
    }
}

/// Regular-window block followed by a shifted-window block, applied to every
/// category slice.
#[derive(Debug, Clone)]
pub struct SpatialRefine {
    blocks: [WindowBlock; 2],
}

impl SpatialRefine {
    pub fn new(store: &mut ParamStore, prefix: &str, d_f: usize, cfg: &RefineConfig) -> Result<Self> {
        cfg.validate(d_f)?;
        Ok(Self {
            blocks: [
                WindowBlock::new(store, &format!("{prefix}.0"), d_f, cfg, false)?,
                WindowBlock::new(store, &format!("{prefix}.1"), d_f, cfg, true)?,
            ],
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, m: Var<'t>) -> Result<Var<'t>> {
        check_stack(&m)?;
        let m = self.blocks[0].forward(cx, m)?;
        self.blocks[1].forward(cx, m)
    }
}

/// Position-free attention across categories at each pixel.
#[derive(Debug, Clone)]
pub struct CategoryRefine {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl CategoryRefine {
    pub fn new(store: &mut ParamStore, prefix: &str, d_f: usize, cfg: &RefineConfig) -> Result<Self> {
        cfg.validate(d_f)?;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d_f)?,
            attn: SelfAttention::new(store, &format!("{prefix}.attn"), d_f, cfg.heads)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d_f)?,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), d_f, MLP_EXPANSION)?,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, m: Var<'t>) -> Result<Var<'t>> {
        check_stack(&m)?;
        let s = m.shape();
        let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
        let x = m.permute(&[1, 2, 0, 3])?.reshape(&[h * w, n, d])?;
        let a = self.attn.forward(cx, self.norm1.forward(cx, x)?, None, None)?;
        let x = x.add(&a)?;
        let f = self.mlp.forward(cx, self.norm2.forward(cx, x)?)?;
        x.add(&f)?.reshape(&[h, w, n, d])?.permute(&[2, 0, 1, 3])
    }
}

/// `repeats` alternations of spatial and category refinement.
#[derive(Debug, Clone)]
pub struct RefineBlock {
    layers: Vec<(SpatialRefine, CategoryRefine)>,
}

impl RefineBlock {
    pub fn new(store: &mut ParamStore, d_f: usize, cfg: &RefineConfig) -> Result<Self> {
        cfg.validate(d_f)?;
        let layers = (0..cfg.repeats)
            .map(|i| {
                Ok((
                    SpatialRefine::new(store, &format!("refine.{i}.spatial"), d_f, cfg)?,
                    CategoryRefine::new(store, &format!("refine.{i}.category"), d_f, cfg)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[(SpatialRefine, CategoryRefine)] {
        &self.layers
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, mut m: Var<'t>) -> Result<Var<'t>> {
        for (spatial, category) in &self.layers {
            m = spatial.forward(cx, m)?;
            m = category.forward(cx, m)?;
        }
        Ok(m)
    }
}

fn check_stack(m: &Var<'_>) -> Result<()> {
    if m.rank() != 4 {
        return Err(Error::shape(format!(
            "semantic map stack must be [N_C, h, w, d_F], got {:?}",
            m.shape()
        )));
    }
    Ok(())
}
