//! Forward and backward passes of the ranker over a single chunk.
//!
//! Activations are stored channel-major (`channels × frames`) so pointwise
//! convolutions are plain GEMMs and depthwise convolutions run along
//! contiguous rows.

use crate::dsp::LogMelFeatures;
use crate::error::{Error, Result};
use crate::selectors::ChannelScores;

use super::chunk::{chunk_utterance, Chunk, ChunkMode};
use super::{BlockIndex, RankerModel, Real};

const INPUT_NORM_EPS: f64 = 1e-5;
const GLN_EPS: f64 = 1e-8;

/// Only pre-activation tensors are kept; normalized activations are
/// recomputed during backward, which is cheaper than streaming them
/// through memory.
#[derive(Debug, Clone)]
struct BlockCache<T> {
    h_in: Vec<T>,
    /// conv_in output, before PReLU.
    a: Vec<T>,
    norm1: NormStats<T>,
    /// depthwise output, before PReLU.
    c: Vec<T>,
    norm2: NormStats<T>,
}

#[derive(Debug, Clone, Copy)]
struct NormStats<T> {
    mean: T,
    inv: T,
}

/// Activations of one forward pass, consumed by [`RankerModel::backward`].
#[derive(Debug, Clone)]
pub struct ChunkCache<T> {
    n_frames: usize,
    n_valid: usize,
    mask: Vec<T>,
    in_xhat: Vec<T>,
    in_inv: Vec<T>,
    /// Masked, normalized input, `n_mels × n_frames`.
    feat: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    h_out: Vec<T>,
    pub score: T,
}

impl<T: Real> ChunkCache<T> {
    pub fn score(&self) -> T {
        self.score
    }

    /// Sign pattern of every PReLU input, used to detect kink crossings in
    /// finite-difference checks.
    pub fn activation_signs(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.a.iter().chain(&b.c).map(|&v| v > T::zero()))
            .collect()
    }
}

fn prelu<T: Real>(x: &[T], alpha: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    prelu_into(x, alpha, &mut out);
    out
}

fn prelu_into<T: Real>(x: &[T], alpha: T, out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v.max(T::zero()) + alpha * v.min(T::zero());
    }
}

/// Writes `d_in` into `dx` and accumulates `d_alpha`.
fn prelu_backward<T: Real>(x: &[T], alpha: T, dy: &[T], d_alpha: &mut T, dx: &mut [T]) {
    let mut acc = [0.0f64; LANES];
    for (i, ((d, &v), &g)) in dx.iter_mut().zip(x).zip(dy).enumerate() {
        acc[i % LANES] += (g * v.min(T::zero())).widen();
        *d = if v > T::zero() { g } else { alpha * g };
    }
    *d_alpha += T::narrow(acc.iter().sum());
}

const LANES: usize = 8;

// Reductions accumulate in f64 with independent lanes so the loops
// vectorize; in the f32 path this keeps normalization gradients accurate.

fn lane_sum<T: Real>(x: &[T]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = x.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().map(|v| v.widen()).sum();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v.widen();
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `sum((x - shift) * y)`.
fn lane_dot<T: Real>(x: &[T], y: &[T], shift: f64) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; LANES];
    let xs = x.chunks_exact(LANES);
    let ys = y.chunks_exact(LANES);
    let tail: f64 = xs
        .remainder()
        .iter()
        .zip(ys.remainder())
        .map(|(&a, &b)| (a.widen() - shift) * b.widen())
        .sum();
    for (cx, cy) in xs.zip(ys) {
        for ((a, &u), &v) in acc.iter_mut().zip(cx).zip(cy) {
            *a += (u.widen() - shift) * v.widen();
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn lane_sq_dev<T: Real>(x: &[T], mean: f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = x.chunks_exact(LANES);
    let tail: f64 = chunks
        .remainder()
        .iter()
        .map(|&v| (v.widen() - mean).powi(2))
        .sum();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            let d = v.widen() - mean;
            *a += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Global layer norm over a whole `rows × cols` activation, per-row affine.
fn gln<T: Real>(y: &[T], rows: usize, gain: &[T], bias: &[T]) -> (NormStats<T>, Vec<T>) {
    let n = y.len() as f64;
    let mean = lane_sum(y) / n;
    let var = lane_sq_dev(y, mean) / n;
    let stats = NormStats {
        mean: T::narrow(mean),
        inv: T::narrow((var + GLN_EPS).sqrt().recip()),
    };
    let mut out = vec![T::zero(); y.len()];
    gln_apply(y, rows, stats, gain, bias, &mut out);
    (stats, out)
}

fn gln_apply<T: Real>(
    y: &[T],
    rows: usize,
    st: NormStats<T>,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let cols = y.len() / rows;
    for r in 0..rows {
        let scale = gain[r] * st.inv;
        let span = r * cols..(r + 1) * cols;
        for (o, &v) in out[span.clone()].iter_mut().zip(&y[span]) {
            *o = scale * (v - st.mean) + bias[r];
        }
    }
}

/// `y` is the layer input (not the normalized value).
#[allow(clippy::too_many_arguments)]
fn gln_backward<T: Real>(
    dout: &[T],
    y: &[T],
    st: NormStats<T>,
    rows: usize,
    gain: &[T],
    d_gain: &mut [T],
    d_bias: &mut [T],
    dx: &mut [T],
) {
    let cols = dout.len() / rows;
    let NormStats { mean, inv } = st;
    // With dxhat = gain_r * dout: m1 = mean(dxhat), m2 = mean(dxhat * xhat).
    let (mut m1, mut m2) = (0.0f64, 0.0f64);
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        let db = lane_sum(&dout[span.clone()]);
        let dg = inv.widen() * lane_dot(&y[span.clone()], &dout[span], mean.widen());
        d_gain[r] += T::narrow(dg);
        d_bias[r] += T::narrow(db);
        m1 += gain[r].widen() * db;
        m2 += gain[r].widen() * dg;
    }
    let n = dout.len() as f64;
    // dx = inv * (g * dy - m1 - (v - mean) * inv * m2)
    let c1 = T::narrow(inv.widen() * m1 / n);
    let k = T::narrow(inv.widen() * inv.widen() * m2 / n);
    for r in 0..rows {
        let g = inv * gain[r];
        let span = r * cols..(r + 1) * cols;
        for ((d, &dy), &v) in dx[span.clone()]
            .iter_mut()
            .zip(&dout[span.clone()])
            .zip(&y[span])
        {
            *d = g * dy - k * (v - mean) - c1;
        }
    }
}

fn depthwise<T: Real>(
    x: &[T],
    rows: usize,
    weight: &[T],
    bias: &[T],
    kernel: usize,
    dilation: usize,
) -> Vec<T> {
    let cols = x.len() / rows;
    let half = (kernel / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        dst.fill(bias[r]);
        for k in 0..kernel {
            let w = weight[r * kernel + k];
            let shift = (k as isize - half) * dilation as isize;
            // dst[t] += w * src[t + shift] where in range.
            let (t0, t1) = valid_range(cols, shift);
            let s0 = (t0 as isize + shift) as usize;
            for (d, &v) in dst[t0..t1].iter_mut().zip(&src[s0..s0 + (t1 - t0)]) {
                *d += w * v;
            }
        }
    }
    out
}

fn valid_range(cols: usize, shift: isize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (cols as isize - shift.max(0)).max(0) as usize;
    (t0.min(cols), t1.max(t0.min(cols)))
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Real>(
    dout: &[T],
    x: &[T],
    rows: usize,
    weight: &[T],
    kernel: usize,
    dilation: usize,
    d_weight: &mut [T],
    d_bias: &mut [T],
    dx: &mut [T],
) {
    let cols = x.len() / rows;
    let half = (kernel / 2) as isize;
    dx.fill(T::zero());
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let g = &dout[r * cols..(r + 1) * cols];
        let dsrc = &mut dx[r * cols..(r + 1) * cols];
        d_bias[r] += T::narrow(lane_sum(g));
        for k in 0..kernel {
            let w = weight[r * kernel + k];
            let shift = (k as isize - half) * dilation as isize;
            let (t0, t1) = valid_range(cols, shift);
            let s0 = (t0 as isize + shift) as usize;
            let len = t1 - t0;
            d_weight[r * kernel + k] += T::narrow(lane_dot(&g[t0..t1], &src[s0..s0 + len], 0.0));
            for (d, &v) in dsrc[s0..s0 + len].iter_mut().zip(&g[t0..t1]) {
                *d += w * v;
            }
        }
    }
}

/// `W · x + b` for `W: out × inp`, `x: inp × cols`.
fn affine<T: Real>(w: &[T], b: &[T], x: &[T], out: usize, inp: usize, cols: usize) -> Vec<T> {
    let mut y = vec![T::zero(); out * cols];
    for (row, &bias) in y.chunks_exact_mut(cols).zip(b) {
        row.fill(bias);
    }
    T::gemm(
        out,
        inp,
        cols,
        T::one(),
        w,
        false,
        x,
        false,
        T::one(),
        &mut y,
    );
    y
}

/// Accumulates `dW += dy · xᵀ`, `db += Σ_t dy`, and `dx (+)= Wᵀ · dy`.
#[allow(clippy::too_many_arguments)]
fn affine_backward<T: Real>(
    dy: &[T],
    w: &[T],
    x: &[T],
    out: usize,
    inp: usize,
    cols: usize,
    d_w: &mut [T],
    d_b: &mut [T],
    dx: &mut [T],
    accumulate_dx: bool,
) {
    T::gemm(out, cols, inp, T::one(), dy, false, x, true, T::one(), d_w);
    for (db, row) in d_b.iter_mut().zip(dy.chunks_exact(cols)) {
        *db += T::narrow(lane_sum(row));
    }
    let beta = if accumulate_dx { T::one() } else { T::zero() };
    T::gemm(inp, out, cols, T::one(), w, true, dy, false, beta, dx);
}

impl<T: Real> RankerModel<T> {
    fn check_chunk(&self, chunk: &Chunk) -> Result<()> {
        let cfg = self.config();
        if chunk.n_frames != cfg.chunk_frames || chunk.n_mels != cfg.n_mels {
            return Err(Error::Shape {
                expected: format!("{}x{} chunk", cfg.chunk_frames, cfg.n_mels),
                got: format!("{}x{} chunk", chunk.n_frames, chunk.n_mels),
            });
        }
        if chunk.data.len() != chunk.n_frames * chunk.n_mels {
            return Err(Error::Shape {
                expected: format!("{} values", chunk.n_frames * chunk.n_mels),
                got: format!("{} values", chunk.data.len()),
            });
        }
        if chunk.n_valid == 0 || chunk.n_valid > chunk.n_frames {
            return Err(Error::invalid(format!(
                "chunk has {} valid frames out of {}",
                chunk.n_valid, chunk.n_frames
            )));
        }
        Ok(())
    }

    /// Scores one chunk and keeps the activations needed for backward.
    pub fn forward(&self, chunk: &Chunk) -> Result<ChunkCache<T>> {
        self.check_chunk(chunk)?;
        let cfg = self.config();
        let lay = self.layout();
        let p = self.params();
        let (nt, nf, nb) = (chunk.n_frames, cfg.n_mels, cfg.bottleneck);

        let mask: Vec<T> = (0..nt)
            .map(|t| {
                if t < chunk.n_valid {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();

        // Per-frame layer norm over mel bands; padded frames are zeroed.
        let gain = &p[lay.in_norm_g.clone()];
        let bias = &p[lay.in_norm_b.clone()];
        let mut in_xhat = vec![T::zero(); nt * nf];
        let mut in_inv = vec![T::zero(); nt];
        let mut feat = vec![T::zero(); nf * nt];
        let nf_t = T::of(nf as f64);
        for t in 0..nt {
            let row: Vec<T> = chunk.data[t * nf..(t + 1) * nf]
                .iter()
                .map(|&v| T::of(v))
                .collect();
            let mean = row.iter().copied().sum::<T>() / nf_t;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf_t;
            let inv = (var + T::of(INPUT_NORM_EPS)).sqrt().recip();
            in_inv[t] = inv;
            for f in 0..nf {
                let xh = (row[f] - mean) * inv;
                in_xhat[t * nf + f] = xh;
                feat[f * nt + t] = mask[t] * (gain[f] * xh + bias[f]);
            }
        }

        let h = affine(
            &p[lay.in_proj_w.clone()],
            &p[lay.in_proj_b.clone()],
            &feat,
            nb,
            nf,
            nt,
        );

        let (blocks, h) = self.blocks_forward(h, 0, nt);
        let score = self.pool(&h, &mask, chunk.n_valid);

        Ok(ChunkCache {
            n_frames: nt,
            n_valid: chunk.n_valid,
            mask,
            in_xhat,
            in_inv,
            feat,
            blocks,
            h_out: h,
            score,
        })
    }

    /// Residual blocks `start..`, from the stream entering block `start`.
    fn blocks_forward(
        &self,
        mut h: Vec<T>,
        start: usize,
        nt: usize,
    ) -> (Vec<BlockCache<T>>, Vec<T>) {
        let cfg = self.config();
        let lay = self.layout();
        let p = self.params();
        let (nb, nh) = (cfg.bottleneck, cfg.hidden);
        let mut blocks = Vec::with_capacity(lay.blocks.len() - start);
        for bi in &lay.blocks[start..] {
            let a = affine(
                &p[bi.conv_in_w.clone()],
                &p[bi.conv_in_b.clone()],
                &h,
                nh,
                nb,
                nt,
            );
            let a_act = prelu(&a, p[bi.act1]);
            let (norm1, n1) = gln(&a_act, nh, &p[bi.norm1_g.clone()], &p[bi.norm1_b.clone()]);
            drop(a_act);
            let c = depthwise(
                &n1,
                nh,
                &p[bi.dw_w.clone()],
                &p[bi.dw_b.clone()],
                cfg.kernel,
                bi.dilation,
            );
            drop(n1);
            let c_act = prelu(&c, p[bi.act2]);
            let (norm2, n2) = gln(&c_act, nh, &p[bi.norm2_g.clone()], &p[bi.norm2_b.clone()]);
            drop(c_act);
            let r = affine(
                &p[bi.conv_out_w.clone()],
                &p[bi.conv_out_b.clone()],
                &n2,
                nb,
                nh,
                nt,
            );
            let h_next: Vec<T> = h.iter().zip(&r).map(|(&x, &y)| x + y).collect();
            blocks.push(BlockCache {
                h_in: std::mem::replace(&mut h, h_next),
                a,
                norm1,
                c,
                norm2,
            });
        }
        (blocks, h)
    }

    /// Per-frame projection to a scalar, then masked mean pooling.
    fn pool(&self, h: &[T], mask: &[T], n_valid: usize) -> T {
        let lay = self.layout();
        let p = self.params();
        let nt = mask.len();
        let mut frame_scores = vec![p[lay.out_b]; nt];
        T::gemm(
            1,
            self.config().bottleneck,
            nt,
            T::one(),
            &p[lay.out_w.clone()],
            false,
            h,
            false,
            T::one(),
            &mut frame_scores,
        );
        T::narrow(lane_dot(&frame_scores, mask, 0.0)) / T::of(n_valid as f64)
    }

    /// Score and PReLU signs of blocks `start..` when only parameters from
    /// block `start` onward changed since `cache` was computed. `start`
    /// equal to the block count re-runs just the output projection.
    pub(crate) fn forward_from(&self, cache: &ChunkCache<T>, start: usize) -> (T, Vec<bool>) {
        let h = match cache.blocks.get(start) {
            Some(b) => b.h_in.clone(),
            None => cache.h_out.clone(),
        };
        let (blocks, h) = self.blocks_forward(h, start, cache.n_frames);
        let signs = blocks
            .iter()
            .flat_map(|b| b.a.iter().chain(&b.c).map(|&v| v > T::zero()))
            .collect();
        (self.pool(&h, &cache.mask, cache.n_valid), signs)
    }

    pub fn forward_score(&self, chunk: &Chunk) -> Result<T> {
        self.forward(chunk).map(|c| c.score)
    }

    /// Back-propagates `d_score` through a cached forward pass. Parameter
    /// gradients are added into `grad` (same layout as the parameters); the
    /// returned vector is the gradient with respect to the chunk input
    /// (`n_frames × n_mels`), zero on padded frames.
    pub fn backward(&self, cache: &ChunkCache<T>, d_score: T, grad: &mut [T]) -> Vec<T> {
        assert_eq!(grad.len(), self.params().len(), "gradient buffer size");
        let cfg = self.config();
        let lay = self.layout();
        let p = self.params();
        let (nt, nf, nb, nh) = (cache.n_frames, cfg.n_mels, cfg.bottleneck, cfg.hidden);

        let scale = d_score / T::of(cache.n_valid as f64);
        let d_frames: Vec<T> = cache.mask.iter().map(|&m| m * scale).collect();
        let w_out = &p[lay.out_w.clone()];
        grad[lay.out_b] += T::narrow(lane_sum(&d_frames));
        {
            let d_w = &mut grad[lay.out_w.clone()];
            T::gemm(
                1,
                nt,
                nb,
                T::one(),
                &d_frames,
                false,
                &cache.h_out,
                true,
                T::one(),
                d_w,
            );
        }
        let mut dh = vec![T::zero(); nb * nt];
        T::gemm(
            nb,
            1,
            nt,
            T::one(),
            w_out,
            true,
            &d_frames,
            false,
            T::zero(),
            &mut dh,
        );

        let mut scratch: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); nh * nt]);
        for (bi, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            self.block_backward(bi, bc, &mut dh, grad, nb, &mut scratch);
        }

        let mut d_feat = vec![T::zero(); nf * nt];
        {
            let (d_w, d_b) = split_two(grad, lay.in_proj_w.clone(), lay.in_proj_b.clone());
            affine_backward(
                &dh,
                &p[lay.in_proj_w.clone()],
                &cache.feat,
                nb,
                nf,
                nt,
                d_w,
                d_b,
                &mut d_feat,
                false,
            );
        }

        let gain = &p[lay.in_norm_g.clone()];
        let nf_t = T::of(nf as f64);
        let mut d_input = vec![T::zero(); nt * nf];
        let mut d_gain = vec![T::zero(); nf];
        let mut d_bias = vec![T::zero(); nf];
        for t in 0..nt {
            if cache.mask[t] == T::zero() {
                continue;
            }
            let xh = &cache.in_xhat[t * nf..(t + 1) * nf];
            let dy: Vec<T> = (0..nf)
                .map(|f| d_feat[f * nt + t] * cache.mask[t])
                .collect();
            let dxh: Vec<T> = (0..nf)
                .map(|f| {
                    d_gain[f] += dy[f] * xh[f];
                    d_bias[f] += dy[f];
                    dy[f] * gain[f]
                })
                .collect();
            let m1 = dxh.iter().copied().sum::<T>() / nf_t;
            let m2 = dxh.iter().zip(xh).map(|(&d, &x)| d * x).sum::<T>() / nf_t;
            for f in 0..nf {
                d_input[t * nf + f] = cache.in_inv[t] * (dxh[f] - m1 - xh[f] * m2);
            }
        }
        for (g, d) in grad[lay.in_norm_g.clone()].iter_mut().zip(&d_gain) {
            *g += *d;
        }
        for (g, d) in grad[lay.in_norm_b.clone()].iter_mut().zip(&d_bias) {
            *g += *d;
        }
        d_input
    }

    fn block_backward(
        &self,
        bi: &BlockIndex,
        bc: &BlockCache<T>,
        dh: &mut [T],
        grad: &mut [T],
        nb: usize,
        scratch: &mut [Vec<T>; 4],
    ) {
        let p = self.params();
        let kernel = self.config().kernel;
        let nh = self.config().hidden;
        let nt = dh.len() / nb;
        let [act, norm, d1, d2] = scratch;

        let (g1, b1) = (&p[bi.norm1_g.clone()], &p[bi.norm1_b.clone()]);
        let (g2, b2) = (&p[bi.norm2_g.clone()], &p[bi.norm2_b.clone()]);
        prelu_into(&bc.c, p[bi.act2], act);
        gln_apply(act, nh, bc.norm2, g2, b2, norm);

        // Residual: dh flows to h_in unchanged, plus through the branch.
        {
            let (d_w, d_b) = split_two(grad, bi.conv_out_w.clone(), bi.conv_out_b.clone());
            let w = &p[bi.conv_out_w.clone()];
            affine_backward(dh, w, norm, nb, nh, nt, d_w, d_b, d1, false);
        }
        {
            let (d_g, d_b) = split_two(grad, bi.norm2_g.clone(), bi.norm2_b.clone());
            gln_backward(d1, act, bc.norm2, nh, g2, d_g, d_b, d2);
        }
        prelu_backward(&bc.c, p[bi.act2], d2, &mut grad[bi.act2], d1);
        prelu_into(&bc.a, p[bi.act1], act);
        gln_apply(act, nh, bc.norm1, g1, b1, norm);
        {
            let (d_w, d_b) = split_two(grad, bi.dw_w.clone(), bi.dw_b.clone());
            let w = &p[bi.dw_w.clone()];
            depthwise_backward(d1, norm, nh, w, kernel, bi.dilation, d_w, d_b, d2);
        }
        {
            let (d_g, d_b) = split_two(grad, bi.norm1_g.clone(), bi.norm1_b.clone());
            gln_backward(d2, act, bc.norm1, nh, g1, d_g, d_b, d1);
        }
        prelu_backward(&bc.a, p[bi.act1], d1, &mut grad[bi.act1], d2);
        let (d_w, d_b) = split_two(grad, bi.conv_in_w.clone(), bi.conv_in_b.clone());
        let w = &p[bi.conv_in_w.clone()];
        affine_backward(d2, w, &bc.h_in, nh, nb, nt, d_w, d_b, dh, true);
    }
}

/// Two disjoint mutable ranges of the gradient buffer; `a` precedes `b`.
fn split_two<T>(
    buf: &mut [T],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [T], &mut [T]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

/// Mean chunk score of each channel under inference-mode chunking. Channels
/// are scored independently.
pub fn score_utterance<T: Real>(
    model: &RankerModel<T>,
    channels: &[LogMelFeatures],
) -> Result<ChannelScores> {
    if channels.is_empty() {
        return Err(Error::invalid("no channels to score"));
    }
    let scores = channels
        .iter()
        .map(|feats| {
            if feats.n_frames() == 0 {
                return Err(Error::invalid("empty feature matrix"));
            }
            let batch = chunk_utterance(feats, model.config(), ChunkMode::Infer)?;
            let mut total = 0.0;
            for chunk in &batch.chunks {
                total += model.forward_score(chunk)?.to_f64_lossy();
            }
            Ok(total / batch.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    ChannelScores::new(scores, "micrank")
}
