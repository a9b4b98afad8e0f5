//! The learned noise predictor: a desk-scale diffusion transformer over
//! agent tokens, conditioned per token on its own noise level.
//!
//! Architecture, in forward order:
//!
//! 1. affine embedding of the 8 state channels plus a validity flag;
//! 2. per-token noise-level embedding (sinusoidal features through a
//!    two-layer gated projection) driving shift/scale/gate modulation of
//!    every block;
//! 3. rotary position encoding over (physical timestep, discretized noise
//!    level) inside attention;
//! 4. map cross-attention from agent tokens to a fixed-length set of map
//!    tokens produced by learnable queries cross-attending lane points;
//! 5. block pairs of [temporal self-attention within each agent] then
//!    [spatial self-attention across agents within each frame], each with a
//!    4x feedforward;
//! 6. validity as an attention mask: invalid tokens neither attend nor are
//!    attended;
//! 7. final normalization and an affine projection back to 8 channels.
//!
//! Modulation layers and the output projection start at zero, so a freshly
//! initialized model predicts exactly zero noise.

use ndarray::{Array2, Array3};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseMatrix;
use crate::scene::{ChannelStats, LaneKind, MapSet, SceneTensor, CHANNELS};
use crate::{Error, Result};

use super::net::{
    gelu_arr, gelu_bwd, silu_arr, silu_bwd, AttnCore, AttnCoreCache, LayerNorm, LayerNormCache,
    Linear, Rope, RopeArgs,
};
use super::params::{GradBuffer, Init, ParamBuilder, ParamStore};

/// Input features per token: the 8 state channels plus a validity flag.
pub const INPUT_FEATURES: usize = CHANNELS + 1;
/// Map point features: normalized (x, y) plus a lane-kind one-hot.
pub const MAP_POINT_FEATURES: usize = 2 + LaneKind::COUNT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width H.
    pub hidden: usize,
    /// Number of temporal+spatial block pairs B.
    pub block_pairs: usize,
    pub heads: usize,
    /// Fixed-length map token count Q.
    pub map_queries: usize,
    /// Feedforward width multiplier (4 => 4H).
    pub ffn_mult: usize,
    /// Noise grid M used to discretize levels for the rotary noise axis.
    pub grid: usize,
}

impl ModelConfig {
    /// Desk-scale defaults trainable on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 64,
            block_pairs: 2,
            heads: 4,
            map_queries: 16,
            ffn_mult: 4,
            grid: 32,
        }
    }

    /// Configuration at the reference scale (kept for completeness; not a
    /// CPU-friendly setting).
    pub fn reference() -> Self {
        ModelConfig {
            hidden: 256,
            block_pairs: 4,
            heads: 8,
            map_queries: 16,
            ffn_mult: 4,
            grid: 32,
        }
    }

    /// Miniature configuration for gradient checks.
    pub fn miniature() -> Self {
        ModelConfig {
            hidden: 8,
            block_pairs: 1,
            heads: 2,
            map_queries: 4,
            ffn_mult: 2,
            grid: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.block_pairs == 0
            || self.heads == 0
            || self.map_queries == 0
            || self.ffn_mult == 0
            || self.grid == 0
        {
            return Err(Error::invalid("model config values must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::invalid("hidden width must be divisible by heads"));
        }
        if (self.hidden / self.heads) % 4 != 0 {
            return Err(Error::invalid(
                "head dim must be divisible by 4 for two-axis rotary encoding",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum BlockAxis {
    Temporal,
    Spatial,
}

#[derive(Clone, Copy, Debug)]
struct DitBlock {
    ln1: LayerNorm,
    qkv: Linear,
    attn_out: Linear,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    modulation: Linear,
    axis: BlockAxis,
}

#[derive(Clone, Copy, Debug)]
struct PlainBlock {
    ln1: LayerNorm,
    qkv: Linear,
    attn_out: Linear,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

/// The denoiser model: config, parameters, and the channel statistics its
/// inputs were normalized with (map features share the position stats).
pub struct DenoiserModel {
    pub cfg: ModelConfig,
    pub stats: ChannelStats,
    pub params: ParamStore,
    input_proj: Linear,
    noise_mlp1: Linear,
    noise_mlp2: Linear,
    map_point_ln: LayerNorm,
    map_point_embed: Linear,
    map_queries: super::params::ParamId,
    map_cross_lnq: LayerNorm,
    map_cross_q: Linear,
    map_cross_kv: Linear,
    map_cross_out: Linear,
    map_blocks: Vec<PlainBlock>,
    map_final_ln: LayerNorm,
    agent_cross_ln: LayerNorm,
    agent_cross_q: Linear,
    agent_cross_kv: Linear,
    agent_cross_out: Linear,
    blocks: Vec<DitBlock>,
    final_ln: LayerNorm,
    output_proj: Linear,
    rope: Rope,
}

impl DenoiserModel {
    pub fn new(cfg: ModelConfig, stats: ChannelStats, seed: u64) -> Result<Self> {
        cfg.validate()?;
        stats.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let mut pb = ParamBuilder::new(&mut rng);

        let input_proj = Linear::new(&mut pb, "input_proj", INPUT_FEATURES, h, Init::FanIn(INPUT_FEATURES));
        let noise_mlp1 = Linear::new(&mut pb, "noise_embed.mlp1", h, h, Init::FanIn(h));
        let noise_mlp2 = Linear::new(&mut pb, "noise_embed.mlp2", h, h, Init::FanIn(h));

        let map_point_ln = LayerNorm::affine(&mut pb, "map.point_ln", MAP_POINT_FEATURES);
        let map_point_embed = Linear::new(
            &mut pb,
            "map.point_embed",
            MAP_POINT_FEATURES,
            h,
            Init::FanIn(MAP_POINT_FEATURES),
        );
        let map_queries = pb.add("map.queries", &[cfg.map_queries, h], Init::Normal(0.02));
        let map_cross_lnq = LayerNorm::affine(&mut pb, "map.cross.lnq", h);
        let map_cross_q = Linear::new(&mut pb, "map.cross.q", h, h, Init::FanIn(h));
        let map_cross_kv = Linear::new(&mut pb, "map.cross.kv", h, 2 * h, Init::FanIn(h));
        let map_cross_out = Linear::new(&mut pb, "map.cross.out", h, h, Init::FanIn(h));
        let map_blocks = (0..2)
            .map(|i| PlainBlock {
                ln1: LayerNorm::affine(&mut pb, &format!("map.block{i}.ln1"), h),
                qkv: Linear::new(&mut pb, &format!("map.block{i}.qkv"), h, 3 * h, Init::FanIn(h)),
                attn_out: Linear::new(&mut pb, &format!("map.block{i}.out"), h, h, Init::FanIn(h)),
                ln2: LayerNorm::affine(&mut pb, &format!("map.block{i}.ln2"), h),
                ffn1: Linear::new(
                    &mut pb,
                    &format!("map.block{i}.ffn1"),
                    h,
                    cfg.ffn_mult * h,
                    Init::FanIn(h),
                ),
                ffn2: Linear::new(
                    &mut pb,
                    &format!("map.block{i}.ffn2"),
                    cfg.ffn_mult * h,
                    h,
                    Init::FanIn(cfg.ffn_mult * h),
                ),
            })
            .collect();
        let map_final_ln = LayerNorm::affine(&mut pb, "map.final_ln", h);

        let agent_cross_ln = LayerNorm::affine(&mut pb, "agent_cross.ln", h);
        let agent_cross_q = Linear::new(&mut pb, "agent_cross.q", h, h, Init::FanIn(h));
        let agent_cross_kv = Linear::new(&mut pb, "agent_cross.kv", h, 2 * h, Init::FanIn(h));
        let agent_cross_out = Linear::new(&mut pb, "agent_cross.out", h, h, Init::FanIn(h));

        let mut blocks = Vec::new();
        for pair in 0..cfg.block_pairs {
            for (axis, tag) in [(BlockAxis::Temporal, "temporal"), (BlockAxis::Spatial, "spatial")] {
                let name = format!("block{pair}.{tag}");
                blocks.push(DitBlock {
                    ln1: LayerNorm::plain(),
                    qkv: Linear::new(&mut pb, &format!("{name}.qkv"), h, 3 * h, Init::FanIn(h)),
                    attn_out: Linear::new(&mut pb, &format!("{name}.out"), h, h, Init::FanIn(h)),
                    ln2: LayerNorm::plain(),
                    ffn1: Linear::new(
                        &mut pb,
                        &format!("{name}.ffn1"),
                        h,
                        cfg.ffn_mult * h,
                        Init::FanIn(h),
                    ),
                    ffn2: Linear::new(
                        &mut pb,
                        &format!("{name}.ffn2"),
                        cfg.ffn_mult * h,
                        h,
                        Init::FanIn(cfg.ffn_mult * h),
                    ),
                    modulation: Linear::new(&mut pb, &format!("{name}.adaln"), h, 6 * h, Init::Zero),
                    axis,
                });
            }
        }
        let final_ln = LayerNorm::affine(&mut pb, "final_ln", h);
        let output_proj = Linear::new(&mut pb, "output_proj", h, CHANNELS, Init::Zero);

        let params = pb.finish();
        let rope = Rope::new(h / cfg.heads);
        Ok(DenoiserModel {
            cfg,
            stats,
            params,
            input_proj,
            noise_mlp1,
            noise_mlp2,
            map_point_ln,
            map_point_embed,
            map_queries,
            map_cross_lnq,
            map_cross_q,
            map_cross_kv,
            map_cross_out,
            map_blocks,
            map_final_ln,
            agent_cross_ln,
            agent_cross_q,
            agent_cross_kv,
            agent_cross_out,
            blocks,
            final_ln,
            output_proj,
            rope,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.layout().total_len()
    }

    /// Overwrites every parameter with small random values. Intended for
    /// gradient checks, where zero-initialized gates would otherwise leave
    /// most of the network without gradient flow.
    pub fn randomize_parameters(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).unwrap();
        for v in self.params.data_mut() {
            *v = dist.sample(&mut rng);
        }
    }

    fn token_features(&self, scene: &SceneTensor) -> Array2<f64> {
        let (a, t) = scene.valid.dim();
        let mut feat = Array2::zeros((a * t, INPUT_FEATURES));
        for ai in 0..a {
            for ti in 0..t {
                let row = ai * t + ti;
                if scene.valid[[ai, ti]] {
                    for c in 0..CHANNELS {
                        feat[[row, c]] = scene.states[[ai, ti, c]];
                    }
                    feat[[row, CHANNELS]] = 1.0;
                }
            }
        }
        feat
    }

    /// Sinusoidal features of a noise level, DiT-style: the level is scaled
    /// to [0, 1000] and expanded over geometrically spaced frequencies.
    fn noise_features(&self, k: &NoiseMatrix) -> Array2<f64> {
        let (a, t) = k.dim();
        let h = self.cfg.hidden;
        let half = h / 2;
        let mut feat = Array2::zeros((a * t, h));
        for ai in 0..a {
            for ti in 0..t {
                let row = ai * t + ti;
                let arg = k.get(ai, ti) * 1000.0;
                for i in 0..half {
                    let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                    feat[[row, i]] = (arg * freq).cos();
                    feat[[row, half + i]] = (arg * freq).sin();
                }
            }
        }
        feat
    }

    fn map_point_features(&self, map: &MapSet) -> Array2<f64> {
        let points: Vec<(usize, usize, f64, f64, f64)> = map.valid_points().collect();
        let mut feat = Array2::zeros((points.len(), MAP_POINT_FEATURES));
        for (row, &(_, _, x, y, kind)) in points.iter().enumerate() {
            feat[[row, 0]] = (x - self.stats.mean[0]) / self.stats.std[0];
            feat[[row, 1]] = (y - self.stats.mean[1]) / self.stats.std[1];
            let kind_idx = (kind as usize).min(LaneKind::COUNT - 1);
            feat[[row, 2 + kind_idx]] = 1.0;
        }
        feat
    }

    fn attn_core(&self) -> AttnCore {
        AttnCore {
            heads: self.cfg.heads,
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward caches
// ---------------------------------------------------------------------------

struct PlainBlockCache {
    ln1: LayerNormCache,
    ln1_out: Array2<f64>,
    attn: AttnCoreCache,
    attn_cat: Array2<f64>,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
}

struct DitBlockCache {
    ln1: LayerNormCache,
    mvec: [Array2<f64>; 6],
    h1m: Array2<f64>,
    segments: Vec<AttnCoreCache>,
    attn_cat: Array2<f64>,
    attn_out: Array2<f64>,
    ln2: LayerNormCache,
    h2m: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_out: Array2<f64>,
}

struct MapEncoderCache {
    points_ln: LayerNormCache,
    points_ln_out: Array2<f64>,
    pemb: Array2<f64>,
    lnq: LayerNormCache,
    lnq_out: Array2<f64>,
    cross: AttnCoreCache,
    cross_out_in: Array2<f64>,
    blocks: Vec<PlainBlockCache>,
    final_ln: LayerNormCache,
    tokens: Array2<f64>,
}

pub struct ForwardCache {
    agents: usize,
    frames: usize,
    valid: Array2<bool>,
    pos_t: Vec<usize>,
    pos_n: Vec<usize>,
    feat: Array2<f64>,
    sin_feat: Array2<f64>,
    noise_pre: Array2<f64>,
    noise_act: Array2<f64>,
    cond: Array2<f64>,
    scond: Array2<f64>,
    map: MapEncoderCache,
    agent_cross_ln: LayerNormCache,
    agent_cross_ln_out: Array2<f64>,
    agent_cross: AttnCoreCache,
    agent_cross_cat: Array2<f64>,
    blocks: Vec<DitBlockCache>,
    final_ln_cache: LayerNormCache,
    final_ln_out: Array2<f64>,
}

impl DenoiserModel {
    fn plain_block_forward(
        &self,
        block: &PlainBlock,
        x: &Array2<f64>,
    ) -> (Array2<f64>, PlainBlockCache) {
        let ps = &self.params;
        let core = self.attn_core();
        let n = x.dim().0;
        let h = self.cfg.hidden;
        let mask = vec![true; n];
        let (ln1_out, ln1) = block.ln1.forward(ps, x);
        let qkv = block.qkv.forward(ps, &ln1_out);
        let q = qkv.slice(ndarray::s![.., 0..h]).to_owned();
        let k = qkv.slice(ndarray::s![.., h..2 * h]).to_owned();
        let v = qkv.slice(ndarray::s![.., 2 * h..3 * h]).to_owned();
        let (attn_cat, attn) = core.forward(&q, &k, &v, &mask, None);
        let a_out = block.attn_out.forward(ps, &attn_cat);
        let x_mid = x + &a_out;
        let (ln2_out, ln2) = block.ln2.forward(ps, &x_mid);
        let ffn_pre = block.ffn1.forward(ps, &ln2_out);
        let ffn_act = gelu_arr(&ffn_pre);
        let f_out = block.ffn2.forward(ps, &ffn_act);
        let x_out = &x_mid + &f_out;
        (
            x_out,
            PlainBlockCache {
                ln1,
                ln1_out,
                attn,
                attn_cat,
                ln2,
                ln2_out,
                ffn_pre,
                ffn_act,
            },
        )
    }

    fn plain_block_backward(
        &self,
        block: &PlainBlock,
        cache: &PlainBlockCache,
        dx_out: &Array2<f64>,
        g: &mut GradBuffer,
    ) -> Array2<f64> {
        let ps = &self.params;
        let core = self.attn_core();
        let h = self.cfg.hidden;
        let df_out = dx_out.clone();
        let dffn_act = block.ffn2.backward(ps, &cache.ffn_act, &df_out, g);
        let dffn_pre = gelu_bwd(&cache.ffn_pre, &dffn_act);
        let dln2_out = block.ffn1.backward(ps, &cache.ln2_out, &dffn_pre, g);
        let mut dx_mid = dx_out.clone();
        dx_mid += &block.ln2.backward(ps, &cache.ln2, &dln2_out, g);
        let da_out = dx_mid.clone();
        let dattn_cat = block.attn_out.backward(ps, &cache.attn_cat, &da_out, g);
        let (dq, dk, dv) = core.backward(&cache.attn, &dattn_cat, None);
        let n = dq.dim().0;
        let mut dqkv = Array2::zeros((n, 3 * h));
        dqkv.slice_mut(ndarray::s![.., 0..h]).assign(&dq);
        dqkv.slice_mut(ndarray::s![.., h..2 * h]).assign(&dk);
        dqkv.slice_mut(ndarray::s![.., 2 * h..3 * h]).assign(&dv);
        let dln1_out = block.qkv.backward(ps, &cache.ln1_out, &dqkv, g);
        let mut dx = dx_mid;
        dx += &block.ln1.backward(ps, &cache.ln1, &dln1_out, g);
        dx
    }

    fn encode_map_cached(&self, map: &MapSet) -> (Array2<f64>, MapEncoderCache) {
        let ps = &self.params;
        let core = self.attn_core();
        let h = self.cfg.hidden;
        let q_cnt = self.cfg.map_queries;
        let points_raw = self.map_point_features(map);
        let (points_ln_out, points_ln) = self.map_point_ln.forward(ps, &points_raw);
        let pemb = self.map_point_embed.forward(ps, &points_ln_out);
        let q0 = ps.view2(self.map_queries).to_owned();
        let (lnq_out, lnq) = self.map_cross_lnq.forward(ps, &q0);
        let q_in = self.map_cross_q.forward(ps, &lnq_out);
        let kv = self.map_cross_kv.forward(ps, &pemb);
        let k = kv.slice(ndarray::s![.., 0..h]).to_owned();
        let v = kv.slice(ndarray::s![.., h..2 * h]).to_owned();
        let mask = vec![true; pemb.dim().0];
        let (cross_out_in, cross) = core.forward(&q_in, &k, &v, &mask, None);
        let cross_proj = self.map_cross_out.forward(ps, &cross_out_in);
        let mut x = q0 + &cross_proj;
        let mut blocks = Vec::with_capacity(self.map_blocks.len());
        for block in &self.map_blocks {
            let (next, cache) = self.plain_block_forward(block, &x);
            blocks.push(cache);
            x = next;
        }
        let (tokens, final_ln) = self.map_final_ln.forward(ps, &x);
        debug_assert_eq!(tokens.dim(), (q_cnt, h));
        (
            tokens.clone(),
            MapEncoderCache {
                points_ln,
                points_ln_out,
                pemb,
                lnq,
                lnq_out,
                cross,
                cross_out_in,
                blocks,
                final_ln,
                tokens,
            },
        )
    }

    fn encode_map_backward(
        &self,
        cache: &MapEncoderCache,
        d_tokens: &Array2<f64>,
        g: &mut GradBuffer,
    ) {
        let ps = &self.params;
        let core = self.attn_core();
        let h = self.cfg.hidden;
        let mut dx = self
            .map_final_ln
            .backward(ps, &cache.final_ln, d_tokens, g);
        for (block, bcache) in self.map_blocks.iter().zip(cache.blocks.iter()).rev() {
            dx = self.plain_block_backward(block, bcache, &dx, g);
        }
        // dx is the gradient at q0 + cross_proj.
        let dcross_proj = dx.clone();
        let dcross_out_in = self
            .map_cross_out
            .backward(ps, &cache.cross_out_in, &dcross_proj, g);
        let (dq_in, dk, dv) = core.backward(&cache.cross, &dcross_out_in, None);
        let n_pts = dk.dim().0;
        let mut dkv = Array2::zeros((n_pts, 2 * h));
        dkv.slice_mut(ndarray::s![.., 0..h]).assign(&dk);
        dkv.slice_mut(ndarray::s![.., h..2 * h]).assign(&dv);
        let dpemb = self.map_cross_kv.backward(ps, &cache.pemb, &dkv, g);
        let dpoints_ln_out = self
            .map_point_embed
            .backward(ps, &cache.points_ln_out, &dpemb, g);
        let _ = self
            .map_point_ln
            .backward(ps, &cache.points_ln, &dpoints_ln_out, g);
        let dlnq_out = self.map_cross_q.backward(ps, &cache.lnq_out, &dq_in, g);
        let dq0_ln = self.map_cross_lnq.backward(ps, &cache.lnq, &dlnq_out, g);
        let dq0 = dx + &dq0_ln;
        let mut gq = g.view2_mut(self.map_queries);
        gq += &dq0;
    }

    /// Attention segments for a block axis: contiguous per-agent row ranges
    /// for temporal attention, strided per-frame gathers for spatial.
    fn segment_rows(&self, axis: BlockAxis, agents: usize, frames: usize) -> Vec<Vec<usize>> {
        match axis {
            BlockAxis::Temporal => (0..agents)
                .map(|a| (0..frames).map(|t| a * frames + t).collect())
                .collect(),
            BlockAxis::Spatial => (0..frames)
                .map(|t| (0..agents).map(|a| a * frames + t).collect())
                .collect(),
        }
    }

    fn dit_block_forward(
        &self,
        block: &DitBlock,
        x: &Array2<f64>,
        scond: &Array2<f64>,
        cache_common: &ForwardCommon<'_>,
    ) -> (Array2<f64>, DitBlockCache) {
        let ps = &self.params;
        let core = self.attn_core();
        let h = self.cfg.hidden;
        let n = x.dim().0;
        let mvec_full = block.modulation.forward(ps, scond);
        let mut mvec: Vec<Array2<f64>> = Vec::with_capacity(6);
        for i in 0..6 {
            mvec.push(mvec_full.slice(ndarray::s![.., i * h..(i + 1) * h]).to_owned());
        }
        let [shift1, scale1, gate1, shift2, scale2, gate2]: [Array2<f64>; 6] =
            mvec.try_into().unwrap();

        let (ln1_out, ln1) = block.ln1.forward(ps, x);
        let mut h1m = ln1_out;
        h1m.zip_mut_with(&scale1, |v, s| *v *= 1.0 + s);
        h1m += &shift1;

        let qkv = block.qkv.forward(ps, &h1m);
        let q = qkv.slice(ndarray::s![.., 0..h]).to_owned();
        let k = qkv.slice(ndarray::s![.., h..2 * h]).to_owned();
        let v = qkv.slice(ndarray::s![.., 2 * h..3 * h]).to_owned();

        let segments_rows = self.segment_rows(block.axis, cache_common.agents, cache_common.frames);
        let mut attn_cat = Array2::zeros((n, h));
        let mut segments = Vec::with_capacity(segments_rows.len());
        for rows in &segments_rows {
            let gather = |m: &Array2<f64>| -> Array2<f64> {
                let mut out = Array2::zeros((rows.len(), h));
                for (i, &r) in rows.iter().enumerate() {
                    out.row_mut(i).assign(&m.row(r));
                }
                out
            };
            let qs = gather(&q);
            let ks = gather(&k);
            let vs = gather(&v);
            let mask: Vec<bool> = rows.iter().map(|&r| cache_common.valid_flat[r]).collect();
            let pos_t: Vec<usize> = rows.iter().map(|&r| cache_common.pos_t[r]).collect();
            let pos_n: Vec<usize> = rows.iter().map(|&r| cache_common.pos_n[r]).collect();
            let rope_args = RopeArgs {
                rope: &self.rope,
                q_pos_t: &pos_t,
                q_pos_n: &pos_n,
                k_pos_t: &pos_t,
                k_pos_n: &pos_n,
            };
            let (o, c) = core.forward(&qs, &ks, &vs, &mask, Some(&rope_args));
            for (i, &r) in rows.iter().enumerate() {
                attn_cat.row_mut(r).assign(&o.row(i));
            }
            segments.push(c);
        }

        let attn_out = block.attn_out.forward(ps, &attn_cat);
        let mut x_mid = x.clone();
        for i in 0..n {
            for j in 0..h {
                x_mid[[i, j]] += gate1[[i, j]] * attn_out[[i, j]];
            }
        }

        let (ln2_out, ln2) = block.ln2.forward(ps, &x_mid);
        let mut h2m = ln2_out;
        h2m.zip_mut_with(&scale2, |v, s| *v *= 1.0 + s);
        h2m += &shift2;
        let ffn_pre = block.ffn1.forward(ps, &h2m);
        let ffn_act = gelu_arr(&ffn_pre);
        let ffn_out = block.ffn2.forward(ps, &ffn_act);
        let mut x_out = x_mid.clone();
        for i in 0..n {
            for j in 0..h {
                x_out[[i, j]] += gate2[[i, j]] * ffn_out[[i, j]];
            }
        }

        (
            x_out,
            DitBlockCache {
                ln1,
                mvec: [shift1, scale1, gate1, shift2, scale2, gate2],
                h1m,
                segments,
                attn_cat,
                attn_out,
                ln2,
                h2m,
                ffn_pre,
                ffn_act,
                ffn_out,
            },
        )
    }

    fn dit_block_backward(
        &self,
        block: &DitBlock,
        cache: &DitBlockCache,
        dx_out: &Array2<f64>,
        scond: &Array2<f64>,
        dscond: &mut Array2<f64>,
        cache_common: &ForwardCommon<'_>,
        g: &mut GradBuffer,
    ) -> Array2<f64> {
        let ps = &self.params;
        let core = self.attn_core();
        let h = self.cfg.hidden;
        let n = dx_out.dim().0;
        let [shift1, scale1, gate1, _shift2, scale2, gate2] = &cache.mvec;
        let _ = shift1;

        let mut dmvec = Array2::zeros((n, 6 * h));

        // FFN branch.
        let mut dffn_out = Array2::zeros((n, h));
        for i in 0..n {
            for j in 0..h {
                dffn_out[[i, j]] = dx_out[[i, j]] * gate2[[i, j]];
                dmvec[[i, 5 * h + j]] = dx_out[[i, j]] * cache.ffn_out[[i, j]];
            }
        }
        let dffn_act = block.ffn2.backward(ps, &cache.ffn_act, &dffn_out, g);
        let dffn_pre = gelu_bwd(&cache.ffn_pre, &dffn_act);
        let dh2m = block.ffn1.backward(ps, &cache.h2m, &dffn_pre, g);
        let mut dln2_out = Array2::zeros((n, h));
        for i in 0..n {
            for j in 0..h {
                dln2_out[[i, j]] = dh2m[[i, j]] * (1.0 + scale2[[i, j]]);
                dmvec[[i, 4 * h + j]] = dh2m[[i, j]] * cache.ln2.xhat[[i, j]];
                dmvec[[i, 3 * h + j]] = dh2m[[i, j]];
            }
        }
        let mut dx_mid = dx_out.clone();
        dx_mid += &block.ln2.backward(ps, &cache.ln2, &dln2_out, g);

        // Attention branch.
        let mut dattn_out = Array2::zeros((n, h));
        for i in 0..n {
            for j in 0..h {
                dattn_out[[i, j]] = dx_mid[[i, j]] * gate1[[i, j]];
                dmvec[[i, 2 * h + j]] = dx_mid[[i, j]] * cache.attn_out[[i, j]];
            }
        }
        let dattn_cat = block.attn_out.backward(ps, &cache.attn_cat, &dattn_out, g);

        let segments_rows = self.segment_rows(block.axis, cache_common.agents, cache_common.frames);
        let mut dq = Array2::zeros((n, h));
        let mut dk = Array2::zeros((n, h));
        let mut dv = Array2::zeros((n, h));
        for (rows, seg_cache) in segments_rows.iter().zip(cache.segments.iter()) {
            let mut dout_seg = Array2::zeros((rows.len(), h));
            for (i, &r) in rows.iter().enumerate() {
                dout_seg.row_mut(i).assign(&dattn_cat.row(r));
            }
            let pos_t: Vec<usize> = rows.iter().map(|&r| cache_common.pos_t[r]).collect();
            let pos_n: Vec<usize> = rows.iter().map(|&r| cache_common.pos_n[r]).collect();
            let rope_args = RopeArgs {
                rope: &self.rope,
                q_pos_t: &pos_t,
                q_pos_n: &pos_n,
                k_pos_t: &pos_t,
                k_pos_n: &pos_n,
            };
            let (dqs, dks, dvs) = core.backward(seg_cache, &dout_seg, Some(&rope_args));
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..h {
                    dq[[r, j]] += dqs[[i, j]];
                    dk[[r, j]] += dks[[i, j]];
                    dv[[r, j]] += dvs[[i, j]];
                }
            }
        }
        let mut dqkv = Array2::zeros((n, 3 * h));
        dqkv.slice_mut(ndarray::s![.., 0..h]).assign(&dq);
        dqkv.slice_mut(ndarray::s![.., h..2 * h]).assign(&dk);
        dqkv.slice_mut(ndarray::s![.., 2 * h..3 * h]).assign(&dv);
        let dh1m = block.qkv.backward(ps, &cache.h1m, &dqkv, g);
        let mut dln1_out = Array2::zeros((n, h));
        for i in 0..n {
            for j in 0..h {
                dln1_out[[i, j]] = dh1m[[i, j]] * (1.0 + scale1[[i, j]]);
                dmvec[[i, h + j]] = dh1m[[i, j]] * cache.ln1.xhat[[i, j]];
                dmvec[[i, j]] = dh1m[[i, j]];
            }
        }
        let mut dx_in = dx_mid;
        dx_in += &block.ln1.backward(ps, &cache.ln1, &dln1_out, g);

        *dscond += &block.modulation.backward(ps, scond, &dmvec, g);
        dx_in
    }
}

struct ForwardCommon<'a> {
    agents: usize,
    frames: usize,
    valid_flat: &'a [bool],
    pos_t: &'a [usize],
    pos_n: &'a [usize],
}

impl DenoiserModel {
    /// Full forward pass returning the noise prediction `(A, T, 8)` and the
    /// cache required by [`DenoiserModel::backward`].
    pub fn forward_cached(
        &self,
        scene: &SceneTensor,
        k: &NoiseMatrix,
        map: &MapSet,
    ) -> Result<(Array3<f64>, ForwardCache)> {
        let (a, t) = scene.valid.dim();
        if k.dim() != (a, t) {
            return Err(Error::invalid("noise matrix shape mismatch"));
        }
        let ps = &self.params;
        let h = self.cfg.hidden;
        let n = a * t;
        let core = self.attn_core();

        let valid: Vec<bool> = {
            let mut v = Vec::with_capacity(n);
            for ai in 0..a {
                for ti in 0..t {
                    v.push(scene.valid[[ai, ti]]);
                }
            }
            v
        };
        let pos_t: Vec<usize> = (0..n).map(|r| r % t).collect();
        let pos_n: Vec<usize> = (0..n)
            .map(|r| {
                let (ai, ti) = (r / t, r % t);
                ((k.get(ai, ti) * self.cfg.grid as f64).round() as i64)
                    .clamp(0, self.cfg.grid as i64) as usize
            })
            .collect();

        let feat = self.token_features(scene);
        let x0 = self.input_proj.forward(ps, &feat);

        let sin_feat = self.noise_features(k);
        let noise_pre = self.noise_mlp1.forward(ps, &sin_feat);
        let noise_act = silu_arr(&noise_pre);
        let cond = self.noise_mlp2.forward(ps, &noise_act);
        let scond = silu_arr(&cond);

        let (map_tokens, map_cache) = self.encode_map_cached(map);

        // Agent tokens cross-attend the map tokens (pre-LN residual).
        let (cross_ln_out, cross_ln) = self.agent_cross_ln.forward(ps, &x0);
        let q = self.agent_cross_q.forward(ps, &cross_ln_out);
        let kv = self.agent_cross_kv.forward(ps, &map_tokens);
        let km = kv.slice(ndarray::s![.., 0..h]).to_owned();
        let vm = kv.slice(ndarray::s![.., h..2 * h]).to_owned();
        let mask = vec![true; map_tokens.dim().0];
        let (cross_cat, cross_cache) = core.forward(&q, &km, &vm, &mask, None);
        let cross_out = self.agent_cross_out.forward(ps, &cross_cat);
        let x_after_cross = &x0 + &cross_out;


        let common = ForwardCommon {
            agents: a,
            frames: t,
            valid_flat: &valid,
            pos_t: &pos_t,
            pos_n: &pos_n,
        };

        let mut x = x_after_cross;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = self.dit_block_forward(block, &x, &scond, &common);
            block_caches.push(cache);
            x = next;
        }

        let (final_ln_out, final_ln_cache) = self.final_ln.forward(ps, &x);
        let out = self.output_proj.forward(ps, &final_ln_out);

        for v in out.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "denoiser output".into(),
                });
            }
        }

        let mut eps = Array3::zeros((a, t, CHANNELS));
        for ai in 0..a {
            for ti in 0..t {
                for c in 0..CHANNELS {
                    eps[[ai, ti, c]] = out[[ai * t + ti, c]];
                }
            }
        }

        let valid_arr = scene.valid.clone();
        Ok((
            eps,
            ForwardCache {
                agents: a,
                frames: t,
                valid: valid_arr,
                pos_t,
                pos_n,
                feat,
                sin_feat,
                noise_pre,
                noise_act,
                cond,
                scond,
                map: map_cache,
                agent_cross_ln: cross_ln,
                agent_cross_ln_out: cross_ln_out,
                agent_cross: cross_cache,
                agent_cross_cat: cross_cat,
                blocks: block_caches,
                final_ln_cache,
                final_ln_out,
            },
        ))
    }

    /// Accumulates parameter gradients for `d_eps` (gradient of the loss
    /// with respect to the prediction) into `g`.
    pub fn backward(&self, cache: &ForwardCache, d_eps: &Array3<f64>, g: &mut GradBuffer) {
        let ps = &self.params;
        let core = self.attn_core();
        let h = self.cfg.hidden;
        let (a, t) = (cache.agents, cache.frames);
        let n = a * t;

        let mut dout = Array2::zeros((n, CHANNELS));
        for ai in 0..a {
            for ti in 0..t {
                for c in 0..CHANNELS {
                    dout[[ai * t + ti, c]] = d_eps[[ai, ti, c]];
                }
            }
        }

        let dfinal_ln_out = self.output_proj.backward(ps, &cache.final_ln_out, &dout, g);
        let mut dx = self
            .final_ln
            .backward(ps, &cache.final_ln_cache, &dfinal_ln_out, g);

        let common = ForwardCommon {
            agents: a,
            frames: t,
            valid_flat: cache.valid.as_slice().unwrap(),
            pos_t: &cache.pos_t,
            pos_n: &cache.pos_n,
        };

        let mut dscond = Array2::zeros((n, h));
        for (block, bcache) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            dx = self.dit_block_backward(block, bcache, &dx, &cache.scond, &mut dscond, &common, g);
        }

        // Agent-map cross attention.
        let dcross_out = dx.clone();
        let dcross_cat = self
            .agent_cross_out
            .backward(ps, &cache.agent_cross_cat, &dcross_out, g);
        let (dq, dkm, dvm) = core.backward(&cache.agent_cross, &dcross_cat, None);
        let q_cnt = self.cfg.map_queries;
        let mut dkv = Array2::zeros((q_cnt, 2 * h));
        dkv.slice_mut(ndarray::s![.., 0..h]).assign(&dkm);
        dkv.slice_mut(ndarray::s![.., h..2 * h]).assign(&dvm);
        let d_map_tokens = self
            .agent_cross_kv
            .backward(ps, &cache.map.tokens, &dkv, g);
        self.encode_map_backward(&cache.map, &d_map_tokens, g);
        let dcross_ln_out = self
            .agent_cross_q
            .backward(ps, &cache.agent_cross_ln_out, &dq, g);
        let mut dx0 = dx; // residual path
        dx0 += &self
            .agent_cross_ln
            .backward(ps, &cache.agent_cross_ln, &dcross_ln_out, g);

        // Noise embedding path.
        let dcond = silu_bwd(&cache.cond, &dscond);
        let dnoise_act = self.noise_mlp2.backward(ps, &cache.noise_act, &dcond, g);
        let dnoise_pre = silu_bwd(&cache.noise_pre, &dnoise_act);
        let _ = self
            .noise_mlp1
            .backward(ps, &cache.sin_feat, &dnoise_pre, g);

        // Input embedding.
        let _ = self.input_proj.backward(ps, &cache.feat, &dx0, g);
    }
}
