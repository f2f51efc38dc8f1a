//! The state-propagating denoising network.
//!
//! A multi-scale 1-D encoder–decoder over the condition sequence with
//! self-attention at the bottleneck. The network consumes a propagation
//! state (one feature sequence per resolution level) alongside the condition
//! and the step index, and emits the noise prediction together with the next
//! state: each level's incoming state is fused into the encoder path, and a
//! GRU cell updates it from that level's decoder-path features so the
//! outgoing state summarizes the step's full computation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamRef, ParamSpace, Scalar};
use crate::condition::AggregatedCondition;
use crate::error::{Error, Result};

/// How the incoming state is fused into a block's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Bias-free projection of the state added to the features. A zero state
    /// contributes exactly nothing.
    Add,
    /// Channel concat followed by a projection back to block width.
    Concat,
    /// Block features attend over the state sequence.
    CrossAttention,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionMode::Add),
            "concat" => Ok(FusionMode::Concat),
            "cross-attention" => Ok(FusionMode::CrossAttention),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion mode '{other}' (expected add|concat|cross-attention)"
            ))),
        }
    }
}

/// Denoiser hyperparameters. `state_enabled = false` is the severed variant:
/// the same architecture with the state paths never built, leaving the state
/// parameters untouched by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub levels: usize,
    pub base_width: usize,
    pub attn_heads: usize,
    pub fusion: FusionMode,
    pub time_embed_width: usize,
    pub state_width: usize,
    pub state_enabled: bool,
    /// Condition channel count the network was built for.
    pub c_in: usize,
}

impl DenoiserConfig {
    /// Defaults for the desk-scale benchmark: three levels, doubling widths,
    /// four attention heads at the bottleneck, additive state fusion.
    pub fn desk_default(c_in: usize) -> Self {
        Self {
            levels: 3,
            base_width: 48,
            attn_heads: 4,
            fusion: FusionMode::Add,
            time_embed_width: 128,
            state_width: 48,
            state_enabled: true,
            c_in,
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Sequence lengths must be divisible by this; shorter inputs are
    /// right-padded with zeros.
    pub fn len_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn padded_len(&self, l: usize) -> usize {
        l.div_ceil(self.len_multiple()) * self.len_multiple()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_width == 0 || self.state_width == 0 || self.c_in == 0 {
            return Err(Error::InvalidArgument(
                "levels, widths and input channels must be positive".into(),
            ));
        }
        let bottleneck = self.width(self.levels - 1);
        if self.attn_heads == 0 || bottleneck % self.attn_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention heads ({}) must divide the bottleneck width ({bottleneck})",
                self.attn_heads
            )));
        }
        if self.time_embed_width % 2 != 0 || self.time_embed_width == 0 {
            return Err(Error::InvalidArgument(
                "time embedding width must be even and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Multi-scale feature sequences carried between denoising steps. Level `i`
/// holds `[padded_len / 2^i x state_width]`; an all-zero state is the valid
/// initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationState {
    levels: Vec<Array2<f64>>,
    /// Step index whose forward pass emitted this state; `None` for the
    /// all-zero initial state.
    pub emitted_at: Option<usize>,
}

impl PropagationState {
    pub fn from_levels(levels: Vec<Array2<f64>>, emitted_at: Option<usize>) -> Self {
        Self { levels, emitted_at }
    }

    pub fn zeros(config: &DenoiserConfig, l: usize) -> Self {
        let lp = config.padded_len(l);
        let levels = (0..config.levels)
            .map(|i| Array2::zeros((lp >> i, config.state_width)))
            .collect();
        Self {
            levels,
            emitted_at: None,
        }
    }

    pub fn levels(&self) -> &[Array2<f64>] {
        &self.levels
    }

    pub fn shapes_match(&self, config: &DenoiserConfig, l: usize) -> bool {
        let lp = config.padded_len(l);
        self.levels.len() == config.levels
            && self
                .levels
                .iter()
                .enumerate()
                .all(|(i, s)| s.dim() == (lp >> i, config.state_width))
    }

    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(|l| l.iter().all(|v| v.is_finite()))
    }
}

/// Noise estimates for the two coordinate channels, `[L x 2]`. Only query
/// rows are consumed downstream.
#[derive(Debug, Clone)]
pub struct EpsPrediction {
    pub values: Array2<f64>,
}

/// The denoising network: architecture plus its parameter registry. The
/// flat parameter vector itself lives with the caller (optimizer state,
/// checkpoints), keyed by this registry.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    space: ParamSpace,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut space = ParamSpace::new();
        build_space(&config, &mut space);
        Ok(Self { config, space })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        self.space.init_vec(seed)
    }

    pub fn param_count(&self) -> usize {
        self.space.len()
    }

    /// Parameters belonging to the state machinery (fusion projections and
    /// recurrent cells).
    pub fn state_param_count(&self) -> usize {
        self.space.count_where(|n| n.starts_with("state."))
    }

    fn p(&self, name: &str) -> ParamRef {
        self.space
            .entries()
            .iter()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("unknown param '{name}'"))
            .r#ref
    }

    /// Sinusoidal embedding of the step index, before the learned projection.
    fn sinusoid(&self, t: usize) -> Array2<f64> {
        let d = self.config.time_embed_width;
        let half = d / 2;
        let mut v = Array2::zeros((1, d));
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            v[[0, i]] = arg.sin();
            v[[0, half + i]] = arg.cos();
        }
        v
    }

    fn temb_node<T: Scalar>(&self, g: &mut Graph<T>, t: usize) -> usize {
        let sin = g.input(self.sinusoid(t).mapv(T::from_f64));
        let w1 = g.param(self.p("temb.lin1.w"));
        let b1 = g.param(self.p("temb.lin1.b"));
        let h = g.matmul(sin, w1);
        let h = g.add_row(h, b1);
        let h = g.silu(h);
        let w2 = g.param(self.p("temb.lin2.w"));
        let b2 = g.param(self.p("temb.lin2.b"));
        let h = g.matmul(h, w2);
        g.add_row(h, b2)
    }

    /// The projected step embedding as plain values (diagnostics and tests).
    pub fn time_embedding(&self, params: &[f64], t: usize) -> Array2<f64> {
        let mut g = Graph::new(params);
        let node = self.temb_node(&mut g, t);
        g.value(node).clone()
    }

    fn res_block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        x: usize,
        temb: usize,
        w_in: usize,
        w_out: usize,
    ) -> usize {
        let ln1g = g.param(self.p(&format!("{prefix}.ln1.g")));
        let ln1b = g.param(self.p(&format!("{prefix}.ln1.b")));
        let h = g.layer_norm(x, ln1g, ln1b);
        let h = g.silu(h);
        let c1w = g.param(self.p(&format!("{prefix}.conv1.w")));
        let c1b = g.param(self.p(&format!("{prefix}.conv1.b")));
        let h = g.conv1d(h, c1w, Some(c1b), 3, 1);

        let ew = g.param(self.p(&format!("{prefix}.emb.w")));
        let eb = g.param(self.p(&format!("{prefix}.emb.b")));
        let evec = g.matmul(temb, ew);
        let evec = g.add_row(evec, eb);
        let h = g.add_row(h, evec);

        let ln2g = g.param(self.p(&format!("{prefix}.ln2.g")));
        let ln2b = g.param(self.p(&format!("{prefix}.ln2.b")));
        let h2 = g.layer_norm(h, ln2g, ln2b);
        let h2 = g.silu(h2);
        let c2w = g.param(self.p(&format!("{prefix}.conv2.w")));
        let c2b = g.param(self.p(&format!("{prefix}.conv2.b")));
        let h2 = g.conv1d(h2, c2w, Some(c2b), 3, 1);

        let skip = if w_in == w_out {
            x
        } else {
            let sw = g.param(self.p(&format!("{prefix}.skip.w")));
            g.matmul(x, sw)
        };
        g.add(skip, h2)
    }

    /// Fuses a state level into block features at the same resolution.
    pub fn fuse_state<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: usize,
        state: usize,
        level: usize,
    ) -> Result<usize> {
        if g.value(features).nrows() != g.value(state).nrows() {
            return Err(Error::Shape(format!(
                "fuse length mismatch at level {level}: {} vs {}",
                g.value(features).nrows(),
                g.value(state).nrows()
            )));
        }
        Ok(match self.config.fusion {
            FusionMode::Add => {
                let w = g.param(self.p(&format!("state.fuse{level}.w")));
                let proj = g.matmul(state, w);
                g.add(features, proj)
            }
            FusionMode::Concat => {
                let w = g.param(self.p(&format!("state.fuse{level}.w")));
                let cat = g.concat_cols(features, state);
                g.matmul(cat, w)
            }
            FusionMode::CrossAttention => {
                let qw = g.param(self.p(&format!("state.fuse{level}.q.w")));
                let kw = g.param(self.p(&format!("state.fuse{level}.k.w")));
                let vw = g.param(self.p(&format!("state.fuse{level}.v.w")));
                let ow = g.param(self.p(&format!("state.fuse{level}.o.w")));
                let q = g.matmul(features, qw);
                let k = g.matmul(state, kw);
                let v = g.matmul(state, vw);
                let att = g.attention(q, k, v, 1);
                let proj = g.matmul(att, ow);
                g.add(features, proj)
            }
        })
    }

    /// Gated recurrent update of one state level from same-resolution block
    /// features; output shape equals the incoming state shape.
    pub fn update_state<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: usize,
        state: usize,
        level: usize,
    ) -> Result<usize> {
        if g.value(features).nrows() != g.value(state).nrows() {
            return Err(Error::Shape(format!(
                "state update length mismatch at level {level}"
            )));
        }
        let u = self.config.state_width;
        let wx = g.param(self.p(&format!("state.gru{level}.wx")));
        let wh = g.param(self.p(&format!("state.gru{level}.wh")));
        let bx = g.param(self.p(&format!("state.gru{level}.bx")));
        let bh = g.param(self.p(&format!("state.gru{level}.bh")));

        let gx = g.matmul(features, wx);
        let gx = g.add_row(gx, bx);
        let gh = g.matmul(state, wh);
        let gh = g.add_row(gh, bh);

        let rx = g.slice_cols(gx, 0, u);
        let zx = g.slice_cols(gx, u, 2 * u);
        let nx = g.slice_cols(gx, 2 * u, 3 * u);
        let rh = g.slice_cols(gh, 0, u);
        let zh = g.slice_cols(gh, u, 2 * u);
        let nh = g.slice_cols(gh, 2 * u, 3 * u);

        let r_pre = g.add(rx, rh);
        let r = g.sigmoid(r_pre);
        let z_pre = g.add(zx, zh);
        let z = g.sigmoid(z_pre);
        let gated = g.mul(r, nh);
        let n_pre = g.add(nx, gated);
        let n = g.tanh(n_pre);

        let omz = g.one_minus(z);
        let new_part = g.mul(omz, n);
        let keep_part = g.mul(z, state);
        Ok(g.add(new_part, keep_part))
    }

    /// Builds the full forward graph on already-padded inputs. Returns the
    /// `[padded_len x 2]` noise prediction node and one outgoing state node
    /// per level. With `state_enabled = false` no state subgraph is built and
    /// the returned state nodes are zero inputs.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        cond: usize,
        t: usize,
        state_in: &[usize],
    ) -> Result<(usize, Vec<usize>)> {
        let cfg = &self.config;
        let lp = g.value(cond).nrows();
        if g.value(cond).ncols() != cfg.c_in {
            return Err(Error::Shape(format!(
                "condition has {} channels, network expects {}",
                g.value(cond).ncols(),
                cfg.c_in
            )));
        }
        if lp % cfg.len_multiple() != 0 {
            return Err(Error::InvalidArgument(format!(
                "sequence length {lp} not divisible by {}",
                cfg.len_multiple()
            )));
        }
        if state_in.len() != cfg.levels {
            return Err(Error::Shape(format!(
                "state has {} levels, config wants {}",
                state_in.len(),
                cfg.levels
            )));
        }
        for (i, &s) in state_in.iter().enumerate() {
            if g.value(s).dim() != (lp >> i, cfg.state_width) {
                return Err(Error::Shape(format!(
                    "state level {i}: {:?} does not match ({}, {})",
                    g.value(s).dim(),
                    lp >> i,
                    cfg.state_width
                )));
            }
        }

        let temb = self.temb_node(g, t);
        let stem_w = g.param(self.p("stem.w"));
        let stem_b = g.param(self.p("stem.b"));
        let mut h = g.conv1d(cond, stem_w, Some(stem_b), 3, 1);

        // Encoder path with per-level state fusion.
        let mut skips = Vec::new();
        for i in 0..cfg.levels - 1 {
            if cfg.state_enabled {
                h = self.fuse_state(g, h, state_in[i], i)?;
            }
            let w = cfg.width(i);
            h = self.res_block(g, &format!("enc{i}.res0"), h, temb, w, w);
            h = self.res_block(g, &format!("enc{i}.res1"), h, temb, w, w);
            skips.push(h);
            let dw = g.param(self.p(&format!("down{i}.w")));
            let db = g.param(self.p(&format!("down{i}.b")));
            h = g.conv1d(h, dw, Some(db), 3, 2);
        }

        // Bottleneck: two residual blocks around multi-head self-attention.
        let deep = cfg.levels - 1;
        let wd = cfg.width(deep);
        if cfg.state_enabled {
            h = self.fuse_state(g, h, state_in[deep], deep)?;
        }
        h = self.res_block(g, "mid.res0", h, temb, wd, wd);
        {
            let lng = g.param(self.p("mid.attn.ln.g"));
            let lnb = g.param(self.p("mid.attn.ln.b"));
            let a = g.layer_norm(h, lng, lnb);
            let qw = g.param(self.p("mid.attn.q.w"));
            let kw = g.param(self.p("mid.attn.k.w"));
            let vw = g.param(self.p("mid.attn.v.w"));
            let ow = g.param(self.p("mid.attn.o.w"));
            let q = g.matmul(a, qw);
            let k = g.matmul(a, kw);
            let v = g.matmul(a, vw);
            let att = g.attention(q, k, v, cfg.attn_heads);
            let o = g.matmul(att, ow);
            h = g.add(h, o);
        }
        h = self.res_block(g, "mid.res1", h, temb, wd, wd);

        let mut state_out = vec![0usize; cfg.levels];
        state_out[deep] = if cfg.state_enabled {
            self.update_state(g, h, state_in[deep], deep)?
        } else {
            state_in[deep]
        };

        // Decoder path; each level's output features drive its state update.
        for i in (0..cfg.levels - 1).rev() {
            let w = cfg.width(i);
            h = g.upsample2(h);
            let uw = g.param(self.p(&format!("up{i}.w")));
            let ub = g.param(self.p(&format!("up{i}.b")));
            h = g.conv1d(h, uw, Some(ub), 3, 1);
            h = g.concat_cols(h, skips[i]);
            h = self.res_block(g, &format!("dec{i}.res0"), h, temb, 2 * w, w);
            h = self.res_block(g, &format!("dec{i}.res1"), h, temb, w, w);
            state_out[i] = if cfg.state_enabled {
                self.update_state(g, h, state_in[i], i)?
            } else {
                state_in[i]
            };
        }

        let hg = g.param(self.p("head.ln.g"));
        let hb = g.param(self.p("head.ln.b"));
        let out = g.layer_norm(h, hg, hb);
        let out = g.silu(out);
        let hw = g.param(self.p("head.w"));
        let hbias = g.param(self.p("head.b"));
        let eps = g.conv1d(out, hw, Some(hbias), 3, 1);
        Ok((eps, state_out))
    }

    /// One denoising evaluation outside any training loop: pads the
    /// condition, runs the forward graph and strips padding from the noise
    /// prediction. Deterministic given parameters and inputs.
    pub fn denoise_forward<T: Scalar>(
        &self,
        params: &[T],
        cond: &AggregatedCondition,
        t: usize,
        state: &PropagationState,
    ) -> Result<(EpsPrediction, PropagationState)> {
        let l = cond.data().nrows();
        if !state.shapes_match(&self.config, l) {
            return Err(Error::Shape(format!(
                "state shapes do not match config for length {l}"
            )));
        }
        let mut g = Graph::new(params);
        let cond_node = g.input(pad_rows(cond.data(), self.config.padded_len(l)).mapv(T::from_f64));
        let state_nodes: Vec<usize> = state
            .levels()
            .iter()
            .map(|s| g.input(s.mapv(T::from_f64)))
            .collect();
        let (eps_node, state_out) = self.forward_graph(&mut g, cond_node, t, &state_nodes)?;

        let eps_full = g.value(eps_node).mapv(Scalar::to_f64);
        let eps = eps_full.slice(ndarray::s![0..l, ..]).to_owned();
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite noise prediction at step {t}"
            )));
        }
        let levels: Vec<Array2<f64>> = state_out
            .iter()
            .map(|&n| g.value(n).mapv(Scalar::to_f64))
            .collect();
        Ok((
            EpsPrediction { values: eps },
            PropagationState {
                levels,
                emitted_at: Some(t),
            },
        ))
    }
}

/// Right-pads `a` with zero rows up to `rows`.
pub fn pad_rows(a: &Array2<f64>, rows: usize) -> Array2<f64> {
    if a.nrows() == rows {
        return a.clone();
    }
    let mut out = Array2::zeros((rows, a.ncols()));
    out.slice_mut(ndarray::s![0..a.nrows(), ..]).assign(a);
    out
}

fn alloc_res_block(space: &mut ParamSpace, prefix: &str, w_in: usize, w_out: usize, temb: usize) {
    let conv1_std = 1.0 / ((3 * w_in) as f64).sqrt();
    let conv2_std = 1.0 / ((3 * w_out) as f64).sqrt();
    space.alloc(format!("{prefix}.ln1.g"), 1, w_in, Init::Ones);
    space.alloc(format!("{prefix}.ln1.b"), 1, w_in, Init::Zeros);
    space.alloc(format!("{prefix}.conv1.w"), 3 * w_in, w_out, Init::Normal { std: conv1_std });
    space.alloc(format!("{prefix}.conv1.b"), 1, w_out, Init::Zeros);
    space.alloc(
        format!("{prefix}.emb.w"),
        temb,
        w_out,
        Init::Normal { std: 1.0 / (temb as f64).sqrt() },
    );
    space.alloc(format!("{prefix}.emb.b"), 1, w_out, Init::Zeros);
    space.alloc(format!("{prefix}.ln2.g"), 1, w_out, Init::Ones);
    space.alloc(format!("{prefix}.ln2.b"), 1, w_out, Init::Zeros);
    space.alloc(format!("{prefix}.conv2.w"), 3 * w_out, w_out, Init::Normal { std: conv2_std });
    space.alloc(format!("{prefix}.conv2.b"), 1, w_out, Init::Zeros);
    if w_in != w_out {
        space.alloc(
            format!("{prefix}.skip.w"),
            w_in,
            w_out,
            Init::Normal { std: 1.0 / (w_in as f64).sqrt() },
        );
    }
}

fn build_space(cfg: &DenoiserConfig, space: &mut ParamSpace) {
    let temb = cfg.time_embed_width;
    let w0 = cfg.width(0);
    space.alloc(
        "stem.w",
        3 * cfg.c_in,
        w0,
        Init::Normal { std: 1.0 / ((3 * cfg.c_in) as f64).sqrt() },
    );
    space.alloc("stem.b", 1, w0, Init::Zeros);
    let temb_std = 1.0 / (temb as f64).sqrt();
    space.alloc("temb.lin1.w", temb, temb, Init::Normal { std: temb_std });
    space.alloc("temb.lin1.b", 1, temb, Init::Zeros);
    space.alloc("temb.lin2.w", temb, temb, Init::Normal { std: temb_std });
    space.alloc("temb.lin2.b", 1, temb, Init::Zeros);

    for i in 0..cfg.levels - 1 {
        let w = cfg.width(i);
        alloc_res_block(space, &format!("enc{i}.res0"), w, w, temb);
        alloc_res_block(space, &format!("enc{i}.res1"), w, w, temb);
        let wn = cfg.width(i + 1);
        space.alloc(
            format!("down{i}.w"),
            3 * w,
            wn,
            Init::Normal { std: 1.0 / ((3 * w) as f64).sqrt() },
        );
        space.alloc(format!("down{i}.b"), 1, wn, Init::Zeros);
    }

    let deep = cfg.levels - 1;
    let wd = cfg.width(deep);
    let attn_std = 1.0 / (wd as f64).sqrt();
    alloc_res_block(space, "mid.res0", wd, wd, temb);
    space.alloc("mid.attn.ln.g", 1, wd, Init::Ones);
    space.alloc("mid.attn.ln.b", 1, wd, Init::Zeros);
    space.alloc("mid.attn.q.w", wd, wd, Init::Normal { std: attn_std });
    space.alloc("mid.attn.k.w", wd, wd, Init::Normal { std: attn_std });
    space.alloc("mid.attn.v.w", wd, wd, Init::Normal { std: attn_std });
    space.alloc("mid.attn.o.w", wd, wd, Init::Normal { std: attn_std });
    alloc_res_block(space, "mid.res1", wd, wd, temb);

    for i in (0..cfg.levels - 1).rev() {
        let w = cfg.width(i);
        let wup = cfg.width(i + 1);
        space.alloc(
            format!("up{i}.w"),
            3 * wup,
            w,
            Init::Normal { std: 1.0 / ((3 * wup) as f64).sqrt() },
        );
        space.alloc(format!("up{i}.b"), 1, w, Init::Zeros);
        alloc_res_block(space, &format!("dec{i}.res0"), 2 * w, w, temb);
        alloc_res_block(space, &format!("dec{i}.res1"), w, w, temb);
    }

    space.alloc("head.ln.g", 1, w0, Init::Ones);
    space.alloc("head.ln.b", 1, w0, Init::Zeros);
    // Zero-init output head: the untrained network predicts zero noise.
    space.alloc("head.w", 3 * w0, 2, Init::Zeros);
    space.alloc("head.b", 1, 2, Init::Zeros);

    // State machinery, allocated regardless of `state_enabled` so the intact
    // and severed variants share one parameter layout. Fusion weights start
    // near zero: the state enters as a gentle signal that training grows,
    // which keeps the inference-time state feedback loop stable.
    let u = cfg.state_width;
    const FUSE_STD: f64 = 0.01;
    for i in 0..cfg.levels {
        let w = cfg.width(i);
        match cfg.fusion {
            FusionMode::Add => {
                space.alloc(format!("state.fuse{i}.w"), u, w, Init::Normal { std: FUSE_STD });
            }
            FusionMode::Concat => {
                space.alloc(
                    format!("state.fuse{i}.w"),
                    w + u,
                    w,
                    Init::StackedIdentityNoise { std: FUSE_STD },
                );
            }
            FusionMode::CrossAttention => {
                let std_w = 1.0 / (w as f64).sqrt();
                let std_u = 1.0 / (u as f64).sqrt();
                space.alloc(format!("state.fuse{i}.q.w"), w, u, Init::Normal { std: std_w });
                space.alloc(format!("state.fuse{i}.k.w"), u, u, Init::Normal { std: std_u });
                space.alloc(format!("state.fuse{i}.v.w"), u, u, Init::Normal { std: std_u });
                space.alloc(format!("state.fuse{i}.o.w"), u, w, Init::Normal { std: FUSE_STD });
            }
        }
        space.alloc(
            format!("state.gru{i}.wx"),
            w,
            3 * u,
            Init::Normal { std: 1.0 / (w as f64).sqrt() },
        );
        space.alloc(
            format!("state.gru{i}.wh"),
            u,
            3 * u,
            Init::Normal { std: 1.0 / (u as f64).sqrt() },
        );
        space.alloc(format!("state.gru{i}.bx"), 1, 3 * u, Init::Zeros);
        // Positive update-gate bias: the state starts as a slow-moving
        // integrator rather than churning every step.
        space.alloc(
            format!("state.gru{i}.bh"),
            1,
            3 * u,
            Init::SectionConst {
                sections: 3,
                section: 1,
                value: 1.0,
            },
        );
    }
}
