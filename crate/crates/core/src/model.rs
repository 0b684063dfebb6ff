//! Patch-transformer velocity field conditioned on the noisy image, the masked
//! source and the mask.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::matting::MattingPlan;
use crate::params::ParamSet;
use crate::rng::{domain, RngStream};
use crate::tensor::Tensor;

/// Smallest timestep the network and samplers accept.
pub const T_MIN: f32 = 0.05;

/// z_t (3) + masked source (3) + mask (1).
pub const IN_CHANNELS: usize = 7;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by 4 for the positional encoding",
                self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn token_dim(&self) -> usize {
        IN_CHANNELS * self.patch_size * self.patch_size
    }

    pub fn out_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// `[C,H,W]` to `[N, C*p*p]`; token `(i,j)` covers rows `i*p..i*p+p` and
/// columns `j*p..j*p+p`, features ordered channel, row, column.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by patch size {p}")));
    }
    let idx = patch_index(c, h, w, p);
    let d = image.data();
    Tensor::from_vec(
        vec![(h / p) * (w / p), c * p * p],
        idx.iter().map(|&i| d[i]).collect(),
    )
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || tokens.shape() != [(h / p) * (w / p), c * p * p] {
        return Err(Error::Shape(format!(
            "tokens {:?} do not tile a {c}x{h}x{w} image with patch {p}",
            tokens.shape()
        )));
    }
    let idx = unpatch_index(c, h, w, p);
    let d = tokens.data();
    Tensor::from_vec(vec![c, h, w], idx.iter().map(|&i| d[i]).collect())
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected [C,H,W], got {s:?}"))),
    }
}

/// For each token feature, the flat image index it reads.
fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let gw = w / p;
    let mut idx = Vec::with_capacity(c * h * w);
    for tok in 0..(h / p) * gw {
        let (ti, tj) = (tok / gw, tok % gw);
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    idx.push(ch * h * w + (ti * p + dy) * w + tj * p + dx);
                }
            }
        }
    }
    idx
}

/// For each image pixel, the flat token-matrix index it reads.
fn unpatch_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let gw = w / p;
    let fdim = c * p * p;
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let tok = (y / p) * gw + x / p;
                idx.push(tok * fdim + ch * p * p + (y % p) * p + x % p);
            }
        }
    }
    idx
}

/// Sinusoidal features of `t` (scaled by 1000), `dim` values.
pub fn timestep_features(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * t as f64 * freq;
        out[i] = a.sin() as f32;
        out[half + i] = a.cos() as f32;
    }
    out
}

/// Fixed 2D sinusoidal encoding `[gh*gw, dim]`: first half encodes the row,
/// second half the column.
pub fn position_encoding(gh: usize, gw: usize, dim: usize) -> Vec<f32> {
    let q = dim / 4;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for i in 0..gh {
        for j in 0..gw {
            for pos in [i, j] {
                let sin_cos: Vec<(f32, f32)> = (0..q)
                    .map(|k| {
                        let a = pos as f64 / 10_000f64.powf(k as f64 / q as f64);
                        (a.sin() as f32, a.cos() as f32)
                    })
                    .collect();
                out.extend(sin_cos.iter().map(|s| s.0));
                out.extend(sin_cos.iter().map(|s| s.1));
            }
        }
    }
    out
}

/// Fallback hole value when nothing outside the mask is visible.
pub const DATA_MEAN: f32 = 0.5;
/// Spread assumed for clean hole pixels around the smooth fill.
pub const DATA_STD: f32 = 0.02;

/// Gauss-Seidel sweeps of the harmonic hole fill.
pub const FILL_SWEEPS: usize = 300;

/// Parameter-free smooth fill of the masked region: each hole pixel becomes
/// the mean of its 4-neighbours, with unmasked pixels held fixed. Pixels
/// outside the hole keep their source values. Starts from the mean of the
/// unmasked pixels.
pub fn harmonic_fill(source: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(source)?;
    if mask.shape() != [1, h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} for source {:?}",
            mask.shape(),
            source.shape()
        )));
    }
    let m = mask.data();
    let hole: Vec<usize> = (0..h * w).filter(|&i| m[i] > 0.5).collect();
    let mut out = source.data().to_vec();
    if hole.is_empty() {
        return Tensor::from_vec(vec![c, h, w], out);
    }
    let known = h * w - hole.len();
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        let mean = if known > 0 {
            let s: f64 = (0..h * w).filter(|&i| m[i] <= 0.5).map(|i| plane[i] as f64).sum();
            (s / known as f64) as f32
        } else {
            DATA_MEAN
        };
        for &i in &hole {
            plane[i] = mean;
        }
        for _ in 0..FILL_SWEEPS {
            for &i in &hole {
                let (y, x) = (i / w, i % w);
                let mut acc = 0.0f32;
                let mut n = 0.0f32;
                if y > 0 {
                    acc += plane[i - w];
                    n += 1.0;
                }
                if y + 1 < h {
                    acc += plane[i + w];
                    n += 1.0;
                }
                if x > 0 {
                    acc += plane[i - 1];
                    n += 1.0;
                }
                if x + 1 < w {
                    acc += plane[i + 1];
                    n += 1.0;
                }
                plane[i] = acc / n;
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// `(c_skip, c_out)` for the interpolant `z_t = (1 - t) x0 + t z1` with
/// data spread `DATA_STD` around its centre: the linear estimate of x0
/// from `z_t` and the residual scale left for the network.
pub fn preconditioning(t: f32) -> (f32, f32) {
    let (t, s2) = (t as f64, (DATA_STD as f64).powi(2));
    let denom = (1.0 - t).powi(2) * s2 + t * t;
    let c_skip = (1.0 - t) * s2 / denom;
    let c_out = t * DATA_STD as f64 / denom.sqrt();
    (c_skip as f32, c_out as f32)
}

/// Fixed multiplier on the output gate parameter.
pub const GATE_GAIN: f32 = 10.0;

/// Amplitude of the fixed positional encoding, matched to the weight init.
pub const POS_SCALE: f32 = 0.02;

/// Largest relative patch offset with its own attention bias; farther
/// offsets share the edge entry.
pub const REL_RANGE: usize = 7;
const REL_SIDE: usize = 2 * REL_RANGE + 1;

/// For every (query, key) token pair of a `gh x gw` grid, the index of its
/// clipped relative offset in a `REL_SIDE^2` bias table.
pub fn relative_index(gh: usize, gw: usize) -> Vec<usize> {
    let r = REL_RANGE as isize;
    let n = gh * gw;
    let mut idx = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qy, qx) = ((q / gw) as isize, (q % gw) as isize);
        for k in 0..n {
            let (ky, kx) = ((k / gw) as isize, (k % gw) as isize);
            let dy = (ky - qy).clamp(-r, r) + r;
            let dx = (kx - qx).clamp(-r, r) + r;
            idx.push(dy as usize * REL_SIDE + dx as usize);
        }
    }
    idx
}

/// Sinusoidal timestep features followed by Linear, SiLU, Linear.
pub struct TimestepEmbedding;

impl TimestepEmbedding {
    pub fn record(g: &mut Graph, net: &VelocityNet, t: f32) -> Var {
        let dim = net.config.embed_dim;
        let feats = g.input_raw(vec![1, dim], timestep_features(t, dim));
        let h = net.linear(g, feats, "time.fc1");
        let h = g.silu(h);
        net.linear(g, h, "time.fc2")
    }
}

/// Truncated normal: resample draws beyond two standard deviations.
fn trunc_normal(shape: &[usize], std: f32, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v = rng.normal();
        if v.abs() <= 2.0 {
            data.push(v * std);
        }
    }
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    pub config: NetConfig,
    pub params: ParamSet,
}

impl VelocityNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::keyed(seed, &[domain::PARAM_INIT]);
        let e = config.embed_dim;
        let hidden = e * config.mlp_ratio;
        let mut params = ParamSet::default();
        let mut linear = |params: &mut ParamSet, name: &str, i: usize, o: usize, zero: bool| {
            let w = if zero {
                Tensor::zeros(&[i, o])
            } else {
                trunc_normal(&[i, o], INIT_STD, &mut rng)
            };
            params.insert(format!("{name}.w"), w.with_grad());
            params.insert(format!("{name}.b"), Tensor::zeros(&[o]).with_grad());
        };
        let norm = |params: &mut ParamSet, name: &str| {
            params.insert(format!("{name}.g"), Tensor::full(&[e], 1.0).with_grad());
            params.insert(format!("{name}.b"), Tensor::zeros(&[e]).with_grad());
        };
        linear(&mut params, "embed", config.token_dim(), e, false);
        linear(&mut params, "time.fc1", e, e, false);
        linear(&mut params, "time.fc2", e, e, false);
        for b in 0..config.depth {
            linear(&mut params, &format!("block{b}.ada"), e, 4 * e, true);
            norm(&mut params, &format!("block{b}.ln1"));
            linear(&mut params, &format!("block{b}.qkv"), e, 3 * e, false);
            params.insert(
                format!("block{b}.relpos"),
                Tensor::zeros(&[config.heads, REL_SIDE * REL_SIDE]).with_grad(),
            );
            linear(&mut params, &format!("block{b}.proj"), e, e, false);
            norm(&mut params, &format!("block{b}.ln2"));
            linear(&mut params, &format!("block{b}.fc1"), e, hidden, false);
            linear(&mut params, &format!("block{b}.fc2"), hidden, e, false);
        }
        linear(&mut params, "final.ada", e, 2 * e, true);
        norm(&mut params, "final.ln");
        linear(&mut params, "final.out", e, config.out_dim(), true);
        linear(&mut params, "skip", config.token_dim(), config.out_dim(), true);
        params.insert("gate", Tensor::zeros(&[1]).with_grad());
        Ok(Self { config, params })
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        let slot = self
            .params
            .slot(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"));
        g.param(slot, self.params.by_slot(slot))
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let gain = self.p(g, &format!("{name}.g"));
        let bias = self.p(g, &format!("{name}.b"));
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    /// `x * (1 + scale) + shift`, with shift and scale taken from columns
    /// `at..at+2e` of `m`.
    fn modulate(&self, g: &mut Graph, x: Var, m: Var, at: usize) -> Var {
        let e = self.config.embed_dim;
        let shift = g.slice_cols(m, at, e);
        let scale = g.slice_cols(m, at + e, e);
        let xs = g.mul_row(x, scale);
        let x = g.add(x, xs);
        g.add_row(x, shift)
    }

    fn attention(
        &self,
        g: &mut Graph,
        x: Var,
        block: usize,
        rel: &Arc<Vec<usize>>,
        plan: Option<&MattingPlan>,
    ) -> Var {
        let e = self.config.embed_dim;
        let n = g.shape(x)[0];
        let table = self.p(g, &format!("block{block}.relpos"));
        let d = self.config.head_dim();
        let qkv = self.linear(g, x, &format!("block{block}.qkv"));
        let pins = plan.filter(|p| !p.is_identity()).map(|p| p.pins());
        let scale = 1.0 / (d as f32).sqrt();
        let heads: Vec<Var> = (0..self.config.heads)
            .map(|h| {
                let q = g.slice_cols(qkv, h * d, d);
                let k = g.slice_cols(qkv, e + h * d, d);
                let v = g.slice_cols(qkv, 2 * e + h * d, d);
                let kt = g.transpose(k);
                let logits = g.matmul(q, kt);
                let logits = g.scale(logits, scale);
                let offset = h * REL_SIDE * REL_SIDE;
                let index = Arc::new(rel.iter().map(|&i| offset + i).collect());
                let bias = g.gather(table, index, vec![n, n]);
                let logits = g.add(logits, bias);
                let logits = match &pins {
                    Some(p) => g.pin_to_row_extrema(logits, p.clone()),
                    None => logits,
                };
                let att = g.softmax_rows(logits);
                g.matmul(att, v)
            })
            .collect();
        let o = g.concat_cols(&heads);
        self.linear(g, o, &format!("block{block}.proj"))
    }

    /// Record the forward pass into `g` and return the `[3,H,W]` velocity.
    pub fn record(
        &self,
        g: &mut Graph,
        z_t: &Tensor,
        source: &Tensor,
        mask: &Tensor,
        t: f32,
        plan: Option<&MattingPlan>,
    ) -> Result<Var> {
        let (c, h, w) = chw(z_t)?;
        let p = self.config.patch_size;
        if c != 3 || source.shape() != [3, h, w] || mask.shape() != [1, h, w] {
            return Err(Error::Shape(format!(
                "z_t {:?}, source {:?}, mask {:?} are inconsistent",
                z_t.shape(),
                source.shape(),
                mask.shape()
            )));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("{h}x{w} not divisible by patch size {p}")));
        }
        if !(t.is_finite() && (T_MIN - 1e-6..=1.0 + 1e-6).contains(&t)) {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [{T_MIN}, 1]"
            )));
        }
        let n = (h / p) * (w / p);
        if let Some(plan) = plan {
            if plan.n != n {
                return Err(Error::Shape(format!(
                    "matting plan over {} tokens, image has {n}",
                    plan.n
                )));
            }
        }
        let stack = |zscale: f32| -> Result<Tensor> {
            let mut data = Vec::with_capacity(IN_CHANNELS * h * w);
            data.extend(z_t.data().iter().map(|&v| v * zscale));
            data.extend_from_slice(source.data());
            data.extend_from_slice(mask.data());
            patchify(&Tensor::from_vec(vec![IN_CHANNELS, h, w], data)?, p)
        };
        // the transformer sees z_t damped by (1 - t); the linear skip sees it raw
        let tokens = g.input(&stack(1.0 - t)?);
        let raw = g.input(&stack(1.0)?);

        let e = self.config.embed_dim;
        let mut x = self.linear(g, tokens, "embed");
        let pos = position_encoding(h / p, w / p, e);
        let pos = g.input_raw(vec![n, e], pos.into_iter().map(|v| v * POS_SCALE).collect());
        x = g.add(x, pos);
        let temb = TimestepEmbedding::record(g, self, t);
        x = g.add_row(x, temb);
        let cond = g.silu(temb);
        let rel = Arc::new(relative_index(h / p, w / p));

        for b in 0..self.config.depth {
            let ada = self.linear(g, cond, &format!("block{b}.ada"));
            let hn = self.norm(g, x, &format!("block{b}.ln1"));
            let hn = self.modulate(g, hn, ada, 0);
            let a = self.attention(g, hn, b, &rel, plan);
            x = g.add(x, a);
            let hn = self.norm(g, x, &format!("block{b}.ln2"));
            let hn = self.modulate(g, hn, ada, 2 * e);
            let m = self.linear(g, hn, &format!("block{b}.fc1"));
            let m = g.gelu(m);
            let m = self.linear(g, m, &format!("block{b}.fc2"));
            x = g.add(x, m);
        }
        let ada = self.linear(g, cond, "final.ada");
        let x = self.norm(g, x, "final.ln");
        let x = self.modulate(g, x, ada, 0);
        let out = self.linear(g, x, "final.out");
        let skip = self.linear(g, raw, "skip");
        let head = g.add(out, skip);
        let head = g.gather(head, Arc::new(unpatch_index(3, h, w, p)), vec![3, h * w]);
        // Inside the hole x0 is estimated as mu + c_skip * (z_t - (1 - t) mu) +
        // c_out * head around the smooth fill mu; outside it is the source. The
        // fixed part enters through a zero-initialised gate so an untrained
        // network outputs v = 0.
        let (c_skip, c_out) = preconditioning(t);
        let hw = h * w;
        let md = mask.data();
        let fill = harmonic_fill(source, mask)?;
        let fixed: Vec<f32> = z_t
            .data()
            .iter()
            .zip(source.data())
            .zip(fill.data())
            .enumerate()
            .map(|(i, ((&z, &s), &mu))| {
                let m = md[i % hw];
                let hole = mu + c_skip * (z - (1.0 - t) * mu);
                let x0 = s + m * hole;
                (z - x0) / t
            })
            .collect();
        let fixed = g.input_raw(vec![3 * hw, 1], fixed);
        let gate = self.p(g, "gate");
        let gate = g.scale(gate, GATE_GAIN);
        let copy = g.mul_row(fixed, gate);
        let copy = g.gather(copy, Arc::new((0..3 * hw).collect()), vec![3, hw]);
        let head = g.scale(head, -c_out / t);
        let v = g.add(copy, head);
        let v = g.gather(v, Arc::new((0..3 * h * w).collect()), vec![3, h, w]);
        Ok(v)
    }

    /// Evaluate the velocity field. With `plan = None` attention is unmodulated.
    pub fn velocity_forward(
        &self,
        z_t: &Tensor,
        source: &Tensor,
        mask: &Tensor,
        t: f32,
        plan: Option<&MattingPlan>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.record(&mut g, z_t, source, mask, t, plan)?;
        g.check_finite()?;
        Ok(g.to_tensor(v))
    }

    pub fn num_tokens(&self, h: usize, w: usize) -> usize {
        (h / self.config.patch_size) * (w / self.config.patch_size)
    }
}
