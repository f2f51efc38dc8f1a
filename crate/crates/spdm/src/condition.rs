//! Aggregated-condition assembly.
//!
//! Every denoising step consumes one `[L x C]` array built by channel-wise
//! concatenation on the merged timeline: the noisy coordinates, the
//! linear-interpolation prior, the query mask, the normalized timestamps and
//! one block per registered context embedder. Rows stay positionally aligned
//! across blocks; across a rollout only the noisy coordinates at query rows
//! ever change.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeds;
use crate::traj::{linear_prior, normalize, RawContext, RecoveryTask};

/// Channel spans for the noisy coordinates, prior, mask and time channels.
pub const NOISY_XY: Range<usize> = 0..2;
pub const PRIOR_XY: Range<usize> = 2..4;
pub const MASK: Range<usize> = 4..5;
pub const TIME: Range<usize> = 5..6;
const CORE_CHANNELS: usize = 6;

/// Named channel spans tiling the full channel dimension. Identical across
/// all diffusion steps of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionLayout {
    l: usize,
    embedder_blocks: Vec<(String, usize)>,
}

impl ConditionLayout {
    pub fn new(l: usize, embedder_blocks: Vec<(String, usize)>) -> Self {
        Self { l, embedder_blocks }
    }

    pub fn len(&self) -> usize {
        self.l
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0
    }

    pub fn c_total(&self) -> usize {
        CORE_CHANNELS + self.embedder_blocks.iter().map(|(_, w)| w).sum::<usize>()
    }

    /// Ordered `(name, width)` pairs for the context blocks; persisted in
    /// checkpoints so recovery can validate embedder compatibility.
    pub fn embedder_blocks(&self) -> &[(String, usize)] {
        &self.embedder_blocks
    }

    /// Channel span of a context block, by embedder name.
    pub fn context_span(&self, name: &str) -> Option<Range<usize>> {
        let mut start = CORE_CHANNELS;
        for (n, w) in &self.embedder_blocks {
            if n == name {
                return Some(start..start + w);
            }
            start += w;
        }
        None
    }
}

/// Binary mask over the merged timeline: 1 at inserted (query) positions,
/// 0 at observed positions.
pub fn build_mask(sparse_len: usize, query_positions: &[usize], l: usize) -> Result<Vec<f64>> {
    if sparse_len + query_positions.len() != l {
        return Err(Error::Shape(format!(
            "sparse ({sparse_len}) + query ({}) does not tile length {l}",
            query_positions.len()
        )));
    }
    let mut mask = vec![0.0; l];
    for &p in query_positions {
        if p >= l {
            return Err(Error::OutOfRange(format!(
                "query position {p} outside merged timeline of length {l}"
            )));
        }
        mask[p] = 1.0;
    }
    Ok(mask)
}

/// The merged timeline of a recovery task: raw and normalized timestamps
/// plus which rows came from the query.
#[derive(Debug, Clone)]
pub struct MergedTimeline {
    times: Vec<f64>,
    norm_times: Vec<f64>,
    query_rows: Vec<usize>,
    mask: Vec<f64>,
}

impl MergedTimeline {
    pub fn build(task: &RecoveryTask) -> Result<Self> {
        let times = task.merged_times();
        let l = times.len();
        let norm_times: Vec<f64> = times.iter().map(|&t| task.norm.norm_time(t)).collect();
        let query_rows: Vec<usize> = task
            .query
            .times()
            .iter()
            .map(|qt| times.partition_point(|&t| t < *qt))
            .collect();
        let mask = build_mask(task.sparse.len(), &query_rows, l)?;
        Ok(Self {
            times,
            norm_times,
            query_rows,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn norm_times(&self) -> &[f64] {
        &self.norm_times
    }

    /// Row indices of query positions, in query (time) order.
    pub fn query_rows(&self) -> &[usize] {
        &self.query_rows
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }
}

/// Turns a raw context into a sequential embedding aligned with the merged
/// timeline. Implementations must return exactly `[L x width]`.
pub trait ContextEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn width(&self) -> usize;
    fn embed(&self, ctx: Option<&RawContext>, timeline: &MergedTimeline) -> Result<Array2<f64>>;
}

/// Ordered set of context embedders. Registration order fixes the layout.
#[derive(Default)]
pub struct EmbedderRegistry {
    embedders: Vec<Box<dyn ContextEmbedder>>,
}

impl EmbedderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, embedder: Box<dyn ContextEmbedder>) {
        self.embedders.push(embedder);
    }

    pub fn layout(&self, l: usize) -> ConditionLayout {
        ConditionLayout::new(
            l,
            self.embedders
                .iter()
                .map(|e| (e.name().to_string(), e.width()))
                .collect(),
        )
    }

    pub fn is_compatible(&self, layout: &ConditionLayout) -> bool {
        let mine: Vec<(String, usize)> = self
            .embedders
            .iter()
            .map(|e| (e.name().to_string(), e.width()))
            .collect();
        mine == layout.embedder_blocks()
    }

    /// Runs every registered embedder against the task's contexts.
    pub fn embed_all(
        &self,
        contexts: &[RawContext],
        timeline: &MergedTimeline,
    ) -> Result<Vec<(String, Array2<f64>)>> {
        self.embedders
            .iter()
            .map(|e| {
                let ctx = contexts.iter().find(|c| c.name == e.name());
                let emb = e.embed(ctx, timeline)?;
                if emb.dim() != (timeline.len(), e.width()) {
                    return Err(Error::Shape(format!(
                        "embedder '{}' produced {:?}, expected ({}, {})",
                        e.name(),
                        emb.dim(),
                        timeline.len(),
                        e.width()
                    )));
                }
                Ok((e.name().to_string(), emb))
            })
            .collect()
    }
}

/// The per-step aggregated condition: `[L x C]` data plus its layout and the
/// current diffusion step tag.
#[derive(Debug, Clone)]
pub struct AggregatedCondition {
    data: Array2<f64>,
    layout: ConditionLayout,
    t: usize,
    query_rows: Vec<usize>,
}

impl AggregatedCondition {
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn layout(&self) -> &ConditionLayout {
        &self.layout
    }

    pub fn step(&self) -> usize {
        self.t
    }

    pub fn query_rows(&self) -> &[usize] {
        &self.query_rows
    }

    /// Noisy coordinates at the query rows, in query order.
    pub fn noisy_at_query(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.query_rows.len(), 2));
        for (j, &r) in self.query_rows.iter().enumerate() {
            out[[j, 0]] = self.data[[r, 0]];
            out[[j, 1]] = self.data[[r, 1]];
        }
        out
    }

    /// Returns a new condition where only the noisy-coordinate span at query
    /// rows carries `x_t`; every other cell is bit-identical. `x_t` rows
    /// follow query order.
    pub fn refresh(&self, x_t: &Array2<f64>, t: usize) -> Result<Self> {
        if x_t.dim() != (self.query_rows.len(), 2) {
            return Err(Error::Shape(format!(
                "refresh expects ({}, 2) noisy rows, got {:?}",
                self.query_rows.len(),
                x_t.dim()
            )));
        }
        let mut next = self.clone();
        for (j, &r) in self.query_rows.iter().enumerate() {
            next.data[[r, 0]] = x_t[[j, 0]];
            next.data[[r, 1]] = x_t[[j, 1]];
        }
        next.t = t;
        Ok(next)
    }

    /// FNV-1a checksum over every cell that must stay fixed during a rollout
    /// (everything except the noisy-coordinate span at query rows).
    pub fn fixed_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let is_query: Vec<bool> = {
            let mut q = vec![false; self.data.nrows()];
            for &r in &self.query_rows {
                q[r] = true;
            }
            q
        };
        for (r, row) in self.data.rows().into_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if NOISY_XY.contains(&c) && is_query[r] {
                    continue;
                }
                feed(v);
            }
        }
        h
    }
}

/// Channel-wise concatenation of the noisy trajectory, the prior, the mask,
/// the normalized timestamps and the context embeddings, in fixed layout
/// order. Length mismatches report the offending block by name.
pub fn assemble(
    tau_t: &Array2<f64>,
    prior: &Array2<f64>,
    mask: &[f64],
    norm_times: &[f64],
    embeddings: &[(String, Array2<f64>)],
    t: usize,
) -> Result<AggregatedCondition> {
    let l = tau_t.nrows();
    if tau_t.ncols() != 2 {
        return Err(Error::Shape("noisy block must have 2 channels".into()));
    }
    if prior.dim() != (l, 2) {
        return Err(Error::Shape(format!(
            "block 'prior': expected ({l}, 2), got {:?}",
            prior.dim()
        )));
    }
    if mask.len() != l {
        return Err(Error::Shape(format!(
            "block 'mask': expected length {l}, got {}",
            mask.len()
        )));
    }
    if norm_times.len() != l {
        return Err(Error::Shape(format!(
            "block 'time': expected length {l}, got {}",
            norm_times.len()
        )));
    }
    for (name, e) in embeddings {
        if e.nrows() != l {
            return Err(Error::Shape(format!(
                "block '{name}': expected {l} rows, got {}",
                e.nrows()
            )));
        }
    }

    let layout = ConditionLayout::new(
        l,
        embeddings
            .iter()
            .map(|(n, e)| (n.clone(), e.ncols()))
            .collect(),
    );
    let mut data = Array2::zeros((l, layout.c_total()));
    for r in 0..l {
        data[[r, 0]] = tau_t[[r, 0]];
        data[[r, 1]] = tau_t[[r, 1]];
        data[[r, 2]] = prior[[r, 0]];
        data[[r, 3]] = prior[[r, 1]];
        data[[r, 4]] = mask[r];
        data[[r, 5]] = norm_times[r];
        let mut c = CORE_CHANNELS;
        for (_, e) in embeddings {
            for k in 0..e.ncols() {
                data[[r, c + k]] = e[[r, k]];
            }
            c += e.ncols();
        }
    }
    let query_rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 1.0)
        .map(|(i, _)| i)
        .collect();
    Ok(AggregatedCondition {
        data,
        layout,
        t,
        query_rows,
    })
}

/// Builds the full condition for a recovery task: interpolation prior, mask,
/// normalized time channel, context embeddings and the noisy coordinates
/// (`x_query` rows at query positions, exact sparse coordinates elsewhere).
pub fn build_condition(
    task: &RecoveryTask,
    registry: &EmbedderRegistry,
    x_query: &Array2<f64>,
    t: usize,
) -> Result<AggregatedCondition> {
    let timeline = MergedTimeline::build(task)?;
    if x_query.dim() != (timeline.query_rows().len(), 2) {
        return Err(Error::Shape(format!(
            "x_query must cover the {} query rows, got {:?}",
            timeline.query_rows().len(),
            x_query.dim()
        )));
    }

    let prior_traj = linear_prior(&task.sparse, &task.query)?;
    let prior_norm = normalize(&prior_traj, &task.norm)?;
    let prior = prior_norm.slice(ndarray::s![.., 0..2]).to_owned();

    // Noisy block: exact (normalized) sparse coordinates at observed rows,
    // caller-provided values at query rows.
    let mut tau = prior.clone();
    for (j, &r) in timeline.query_rows().iter().enumerate() {
        tau[[r, 0]] = x_query[[j, 0]];
        tau[[r, 1]] = x_query[[j, 1]];
    }

    let embeddings = registry.embed_all(&task.contexts, &timeline)?;
    assemble(
        &tau,
        &prior,
        timeline.mask(),
        timeline.norm_times(),
        &embeddings,
        t,
    )
}

/// Normalized timestamps plus bounded sinusoidal features of them.
/// Feature 0 is the normalized time itself; the rest are sin/cos pairs at
/// doubling frequencies. Deterministic and parameter-free.
pub struct TimeEmbedder {
    width: usize,
}

impl TimeEmbedder {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidArgument("time embedder width must be > 0".into()));
        }
        Ok(Self { width })
    }
}

impl ContextEmbedder for TimeEmbedder {
    fn name(&self) -> &str {
        "time"
    }

    fn width(&self) -> usize {
        self.width
    }

    fn embed(&self, _ctx: Option<&RawContext>, timeline: &MergedTimeline) -> Result<Array2<f64>> {
        let l = timeline.len();
        let mut out = Array2::zeros((l, self.width));
        for (r, &u) in timeline.norm_times().iter().enumerate() {
            out[[r, 0]] = u;
            for k in 1..self.width {
                let pair = ((k - 1) / 2) as i32;
                let arg = std::f64::consts::PI * 2f64.powi(pair) * u;
                out[[r, k]] = if k % 2 == 1 { arg.sin() } else { arg.cos() };
            }
        }
        Ok(out)
    }
}

/// Fixed lookup table broadcast along the timeline. Row 0 is reserved for
/// unknown identities; id `k` maps to row `k + 1`.
pub struct IdEmbedder {
    name: String,
    n_ids: u64,
    table: Array2<f64>,
}

impl IdEmbedder {
    pub fn new(name: impl Into<String>, n_ids: u64, width: usize, seed: u64) -> Result<Self> {
        if width == 0 || n_ids == 0 {
            return Err(Error::InvalidArgument(
                "id embedder needs width > 0 and n_ids > 0".into(),
            ));
        }
        let mut rng = seeds::stream_rng(seed, "id-embedder");
        let scale = 1.0 / (width as f64).sqrt();
        let table = Array2::from_shape_simple_fn((n_ids as usize + 1, width), || {
            let v: f64 = rng.sample(StandardNormal);
            v * scale
        });
        Ok(Self {
            name: name.into(),
            n_ids,
            table,
        })
    }
}

impl ContextEmbedder for IdEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn width(&self) -> usize {
        self.table.ncols()
    }

    fn embed(&self, ctx: Option<&RawContext>, timeline: &MergedTimeline) -> Result<Array2<f64>> {
        let row = match ctx.map(|c| &c.payload) {
            Some(crate::traj::ContextPayload::Id(id)) if *id < self.n_ids => *id as usize + 1,
            _ => 0, // unknown
        };
        let mut out = Array2::zeros((timeline.len(), self.table.ncols()));
        for r in 0..timeline.len() {
            for c in 0..self.table.ncols() {
                out[[r, c]] = self.table[[row, c]];
            }
        }
        Ok(out)
    }
}
