//! Per-timestep feed-forward subnetworks with batch normalisation, exact
//! reverse-mode gradients and the Adam update.
//!
//! Architecture of one subnet with input width `d` and hidden width `d + 10`:
//!
//! ```text
//! x -> BN0 -> W1 -> BN1 -> relu -> W2 -> BN2 -> relu -> W3 -> BN3 -> z
//!                                              \-> head (affine, 1 output)
//! ```
//!
//! Batch-norm shifts play the role of biases, so the dense layers carry none.
//! The optional head branches off the second hidden activation and is used by
//! the reflected solver for the increments of the reflecting process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("train-mode batch norm needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite gradient entry {index} at optimizer step {step}")]
    NonFiniteGradient { step: u64, index: usize },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub bn_epsilon: f64,
    pub bn_decay: f64,
    /// Weights are drawn with stddev `init_scale / sqrt(fan_in + fan_out)`.
    pub init_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { bn_epsilon: 1e-6, bn_decay: 0.99, init_scale: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Offsets of every parameter group inside a subnet's flat weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubnetLayout {
    pub dims: [usize; 4],
    pub exit_head: bool,
}

type Span = (usize, usize);

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w: [Span; 3],
    gamma: [Span; 4],
    beta: [Span; 4],
    head_w: Span,
    head_b: Span,
    total: usize,
}

impl SubnetLayout {
    pub fn new(d: usize, exit_head: bool) -> Self {
        Self { dims: [d, d + 10, d + 10, d], exit_head }
    }

    fn offsets(&self) -> Offsets {
        let mut at = 0;
        let mut take = |n: usize| {
            let s = (at, at + n);
            at += n;
            s
        };
        let [d0, d1, d2, d3] = self.dims;
        let w = [take(d0 * d1), take(d1 * d2), take(d2 * d3)];
        let gamma = [take(d0), take(d1), take(d2), take(d3)];
        let beta = [take(d0), take(d1), take(d2), take(d3)];
        let (head_w, head_b) = if self.exit_head { (take(d2), take(1)) } else { ((0, 0), (0, 0)) };
        Offsets { w, gamma, beta, head_w, head_b, total: at }
    }

    pub fn param_count(&self) -> usize {
        self.offsets().total
    }

    /// Widths of the four normalised layers.
    pub fn bn_widths(&self) -> [usize; 4] {
        self.dims
    }
}

/// Running statistics of one batch-norm layer (not trainable).
#[derive(Debug, Clone, PartialEq)]
pub struct MovingStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl MovingStats {
    fn fresh(width: usize) -> Self {
        Self { mean: vec![0.0; width], var: vec![1.0; width] }
    }
}

/// Weights, batch-norm affine parameters and moving statistics of one subnet.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetParams {
    pub layout: SubnetLayout,
    pub weights: Vec<f64>,
    pub moving: [MovingStats; 4],
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetOutput {
    /// `[batch × d]`.
    pub z: Vec<f64>,
    /// Raw head output per sample, before any positive-part map.
    pub head: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Intermediate values kept for [`SubnetParams::backward`].
#[derive(Debug, Clone)]
pub struct SubnetCache {
    mode: Mode,
    batch: usize,
    bn: [BnCache; 4],
    u0: Vec<f64>,
    v1: Vec<f64>,
    a1: Vec<f64>,
    v2: Vec<f64>,
    a2: Vec<f64>,
}

/// Gradients w.r.t. the flat weight vector and the input block.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetGrads {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// `c = op(a) · op(b) + beta_c · c` with `op(a)` of shape `m × k` and `op(b)`
/// of shape `k × n`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta_c: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta_c,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn bn_forward(
    x: &[f64],
    batch: usize,
    gamma: &[f64],
    beta: &[f64],
    moving: &mut MovingStats,
    mode: Mode,
    cfg: &NetConfig,
) -> (Vec<f64>, BnCache) {
    let w = gamma.len();
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; w];
            for row in x.chunks_exact(w) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= batch as f64);
            let mut var = vec![0.0; w];
            for row in x.chunks_exact(w) {
                for j in 0..w {
                    let c = row[j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= batch as f64);
            let decay = cfg.bn_decay;
            for j in 0..w {
                moving.mean[j] = decay * moving.mean[j] + (1.0 - decay) * mean[j];
                moving.var[j] = decay * moving.var[j] + (1.0 - decay) * var[j];
            }
            (mean, var)
        }
        Mode::Infer => (moving.mean.clone(), moving.var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.bn_epsilon).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ((xr, hr), yr) in x.chunks_exact(w).zip(xhat.chunks_exact_mut(w)).zip(y.chunks_exact_mut(w)) {
        for j in 0..w {
            hr[j] = (xr[j] - mean[j]) * inv_std[j];
            yr[j] = gamma[j] * hr[j] + beta[j];
        }
    }
    (y, BnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dgamma`, `dbeta`.
fn bn_backward(
    dy: &[f64],
    cache: &BnCache,
    gamma: &[f64],
    mode: Mode,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let w = gamma.len();
    let n = dy.len() / w;
    for (dr, hr) in dy.chunks_exact(w).zip(cache.xhat.chunks_exact(w)) {
        for j in 0..w {
            dgamma[j] += dr[j] * hr[j];
            dbeta[j] += dr[j];
        }
    }
    let mut dx = vec![0.0; dy.len()];
    match mode {
        Mode::Infer => {
            for (dxr, dr) in dx.chunks_exact_mut(w).zip(dy.chunks_exact(w)) {
                for j in 0..w {
                    dxr[j] = dr[j] * gamma[j] * cache.inv_std[j];
                }
            }
        }
        Mode::Train => {
            // dx = inv_std/N · (N dx̂ - Σ dx̂ - x̂ Σ dx̂·x̂) with dx̂ = dy·γ
            let mut sum = vec![0.0; w];
            let mut sum_h = vec![0.0; w];
            for (dr, hr) in dy.chunks_exact(w).zip(cache.xhat.chunks_exact(w)) {
                for j in 0..w {
                    let g = dr[j] * gamma[j];
                    sum[j] += g;
                    sum_h[j] += g * hr[j];
                }
            }
            let nf = n as f64;
            for ((dxr, dr), hr) in dx.chunks_exact_mut(w).zip(dy.chunks_exact(w)).zip(cache.xhat.chunks_exact(w)) {
                for j in 0..w {
                    let g = dr[j] * gamma[j];
                    dxr[j] = cache.inv_std[j] / nf * (nf * g - sum[j] - hr[j] * sum_h[j]);
                }
            }
        }
    }
    dx
}

/// Draws a subnet: normal weights, batch-norm scale in [0.1, 0.5], shift with
/// stddev 0.1, fresh moving statistics.
pub fn init_subnet(d: usize, exit_head: bool, cfg: &NetConfig, seed: u64) -> SubnetParams {
    assert!(d >= 1, "subnet width must be positive");
    let layout = SubnetLayout::new(d, exit_head);
    let off = layout.offsets();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = vec![0.0; off.total];
    let dims = layout.dims;
    for (l, span) in off.w.iter().enumerate() {
        let std = cfg.init_scale / ((dims[l] + dims[l + 1]) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite stddev");
        for v in &mut weights[span.0..span.1] {
            *v = normal.sample(&mut rng);
        }
    }
    let shift = Normal::new(0.0, 0.1).expect("finite stddev");
    for l in 0..4 {
        for v in &mut weights[off.gamma[l].0..off.gamma[l].1] {
            *v = rng.random_range(0.1..0.5);
        }
        for v in &mut weights[off.beta[l].0..off.beta[l].1] {
            *v = shift.sample(&mut rng);
        }
    }
    if exit_head {
        let std = cfg.init_scale / ((dims[2] + 1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite stddev");
        for v in &mut weights[off.head_w.0..off.head_w.1] {
            *v = normal.sample(&mut rng);
        }
    }
    let moving = dims.map(MovingStats::fresh);
    SubnetParams { layout, weights, moving }
}

impl SubnetParams {
    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn input_width(&self) -> usize {
        self.layout.dims[0]
    }

    pub fn output_width(&self) -> usize {
        self.layout.dims[3]
    }

    /// Runs the subnet on an `[batch × d]` block. Train mode normalises with
    /// batch statistics and folds them into the moving averages; infer mode
    /// only reads the moving statistics.
    pub fn forward(
        &mut self,
        x: &[f64],
        batch: usize,
        mode: Mode,
        cfg: &NetConfig,
    ) -> Result<(SubnetOutput, SubnetCache), NetError> {
        if mode == Mode::Train && batch < 2 {
            return Err(NetError::BatchTooSmall(batch));
        }
        let [d0, d1, d2, d3] = self.layout.dims;
        if x.len() != batch * d0 {
            return Err(NetError::ShapeMismatch { what: "subnet input", expected: batch * d0, got: x.len() });
        }
        let off = self.layout.offsets();
        let w = &self.weights;
        let sl = |s: Span| &w[s.0..s.1];
        let (gammas, betas) = (off.gamma.map(|s| (s.0, s.1)), off.beta.map(|s| (s.0, s.1)));
        let [m0, m1, m2, m3] = &mut self.moving;

        let (u0, c0) = bn_forward(x, batch, sl(gammas[0]), sl(betas[0]), m0, mode, cfg);
        let mut h1 = vec![0.0; batch * d1];
        gemm(batch, d0, d1, &u0, false, sl(off.w[0]), false, 0.0, &mut h1);
        let (v1, c1) = bn_forward(&h1, batch, sl(gammas[1]), sl(betas[1]), m1, mode, cfg);
        let a1: Vec<f64> = v1.iter().map(|v| v.max(0.0)).collect();
        let mut h2 = vec![0.0; batch * d2];
        gemm(batch, d1, d2, &a1, false, sl(off.w[1]), false, 0.0, &mut h2);
        let (v2, c2) = bn_forward(&h2, batch, sl(gammas[2]), sl(betas[2]), m2, mode, cfg);
        let a2: Vec<f64> = v2.iter().map(|v| v.max(0.0)).collect();
        let mut h3 = vec![0.0; batch * d3];
        gemm(batch, d2, d3, &a2, false, sl(off.w[2]), false, 0.0, &mut h3);
        let (z, c3) = bn_forward(&h3, batch, sl(gammas[3]), sl(betas[3]), m3, mode, cfg);

        let head = self.layout.exit_head.then(|| {
            let hw = sl(off.head_w);
            let hb = w[off.head_b.0];
            a2.chunks_exact(d2)
                .map(|row| hb + row.iter().zip(hw).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        });

        let cache = SubnetCache { mode, batch, bn: [c0, c1, c2, c3], u0, v1, a1, v2, a2 };
        Ok((SubnetOutput { z, head }, cache))
    }

    /// Inference without touching any state.
    pub fn infer(&self, x: &[f64], batch: usize, cfg: &NetConfig) -> Result<SubnetOutput, NetError> {
        let mut scratch = self.clone();
        scratch.forward(x, batch, Mode::Infer, cfg).map(|(out, _)| out)
    }

    /// Exact reverse-mode pass for the forward call that produced `cache`.
    pub fn backward(&self, cache: &SubnetCache, dz: &[f64], dhead: Option<&[f64]>) -> Result<SubnetGrads, NetError> {
        let [d0, d1, d2, d3] = self.layout.dims;
        let n = cache.batch;
        if dz.len() != n * d3 {
            return Err(NetError::ShapeMismatch { what: "output gradient", expected: n * d3, got: dz.len() });
        }
        if let Some(dh) = dhead {
            if !self.layout.exit_head || dh.len() != n {
                return Err(NetError::ShapeMismatch {
                    what: "head gradient",
                    expected: if self.layout.exit_head { n } else { 0 },
                    got: dh.len(),
                });
            }
        }
        let off = self.layout.offsets();
        let w = &self.weights;
        let mut g = vec![0.0; off.total];
        let mode = cache.mode;

        let (dgamma3, dbeta3) = split_pair(&mut g, off.gamma[3], off.beta[3]);
        let dh3 = bn_backward(dz, &cache.bn[3], &w[off.gamma[3].0..off.gamma[3].1], mode, dgamma3, dbeta3);

        gemm(d2, n, d3, &cache.a2, true, &dh3, false, 0.0, &mut g[off.w[2].0..off.w[2].1]);
        let mut da2 = vec![0.0; n * d2];
        gemm(n, d3, d2, &dh3, false, &w[off.w[2].0..off.w[2].1], true, 0.0, &mut da2);

        if let Some(dh) = dhead {
            let hw = &w[off.head_w.0..off.head_w.1];
            let mut dhw = vec![0.0; d2];
            let mut dhb = 0.0;
            for (row, (a2r, gh)) in da2.chunks_exact_mut(d2).zip(cache.a2.chunks_exact(d2).zip(dh)) {
                dhb += gh;
                for j in 0..d2 {
                    dhw[j] += gh * a2r[j];
                    row[j] += gh * hw[j];
                }
            }
            g[off.head_w.0..off.head_w.1].copy_from_slice(&dhw);
            g[off.head_b.0] = dhb;
        }

        let dv2: Vec<f64> = da2.iter().zip(&cache.v2).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
        let (dgamma2, dbeta2) = split_pair(&mut g, off.gamma[2], off.beta[2]);
        let dh2 = bn_backward(&dv2, &cache.bn[2], &w[off.gamma[2].0..off.gamma[2].1], mode, dgamma2, dbeta2);

        gemm(d1, n, d2, &cache.a1, true, &dh2, false, 0.0, &mut g[off.w[1].0..off.w[1].1]);
        let mut da1 = vec![0.0; n * d1];
        gemm(n, d2, d1, &dh2, false, &w[off.w[1].0..off.w[1].1], true, 0.0, &mut da1);

        let dv1: Vec<f64> = da1.iter().zip(&cache.v1).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
        let (dgamma1, dbeta1) = split_pair(&mut g, off.gamma[1], off.beta[1]);
        let dh1 = bn_backward(&dv1, &cache.bn[1], &w[off.gamma[1].0..off.gamma[1].1], mode, dgamma1, dbeta1);

        gemm(d0, n, d1, &cache.u0, true, &dh1, false, 0.0, &mut g[off.w[0].0..off.w[0].1]);
        let mut du0 = vec![0.0; n * d0];
        gemm(n, d1, d0, &dh1, false, &w[off.w[0].0..off.w[0].1], true, 0.0, &mut du0);

        let (dgamma0, dbeta0) = split_pair(&mut g, off.gamma[0], off.beta[0]);
        let dx = bn_backward(&du0, &cache.bn[0], &w[off.gamma[0].0..off.gamma[0].1], mode, dgamma0, dbeta0);

        Ok(SubnetGrads { params: g, input: dx })
    }

    /// Views into the flat weight vector, for tests and diagnostics.
    pub fn dense_weights(&self, layer: usize) -> &[f64] {
        let s = self.layout.offsets().w[layer];
        &self.weights[s.0..s.1]
    }

    pub fn dense_weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.layout.offsets().w[layer];
        &mut self.weights[s.0..s.1]
    }

    /// `(scale, shift)` of batch-norm layer `layer` (0 = input normalisation).
    pub fn bn_affine(&self, layer: usize) -> (&[f64], &[f64]) {
        let off = self.layout.offsets();
        let (g, b) = (off.gamma[layer], off.beta[layer]);
        (&self.weights[g.0..g.1], &self.weights[b.0..b.1])
    }

    pub fn bn_affine_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let off = self.layout.offsets();
        split_pair(&mut self.weights, off.gamma[layer], off.beta[layer])
    }

    /// Head weights followed by the head bias.
    pub fn head_params_mut(&mut self) -> Option<&mut [f64]> {
        let off = self.layout.offsets();
        self.layout.exit_head.then(move || &mut self.weights[off.head_w.0..off.head_b.1])
    }
}

/// Two disjoint mutable spans of one buffer (`a` before `b`).
fn split_pair(buf: &mut [f64], a: Span, b: Span) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.1 <= b.0);
    let (left, right) = buf.split_at_mut(b.0);
    (&mut left[a.0..a.1], &mut right[..b.1 - b.0])
}

/// Adam state over a fixed-length parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam update over a contiguous vector.
    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NetError> {
        self.step_segments(&mut [params], &[grads])
    }

    /// One Adam update over parameter groups laid end to end. The groups
    /// must always be passed in the same order.
    pub fn step_segments(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NetError> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        if total != self.first_moment.len() || params.len() != grads.len() {
            return Err(NetError::ShapeMismatch { what: "adam parameters", expected: self.first_moment.len(), got: total });
        }
        let mut offset = 0;
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(NetError::ShapeMismatch { what: "adam gradient group", expected: p.len(), got: g.len() });
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteGradient { step: self.step + 1, index: offset + i });
            }
            offset += p.len();
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, gi) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.first_moment[k];
                let v = &mut self.second_moment[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *pi -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                k += 1;
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"BSDENET\0";
const FORMAT_VERSION: u32 = 1;

/// Serialises subnets into a flat little-endian buffer: a manifest (layer
/// dims, head flag, parameter count per subnet) followed by weights and
/// moving statistics.
pub fn encode_subnets(subnets: &[SubnetParams]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(subnets.len() as u64).to_le_bytes());
    for s in subnets {
        for d in s.layout.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(s.layout.exit_head as u8);
        out.extend_from_slice(&(s.weights.len() as u64).to_le_bytes());
    }
    for s in subnets {
        for v in &s.weights {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in &s.moving {
            for v in m.mean.iter().chain(&m.var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| NetError::Checkpoint("truncated buffer".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_subnets(buf: &[u8]) -> Result<Vec<SubnetParams>, NetError> {
    let mut r = Reader { buf, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u64()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let exit_head = r.take(1)?[0] != 0;
        let n = r.u64()? as usize;
        let layout = SubnetLayout { dims, exit_head };
        if layout != SubnetLayout::new(dims[0], exit_head) || layout.param_count() != n {
            return Err(NetError::Checkpoint(format!("inconsistent manifest entry {dims:?}")));
        }
        manifest.push(layout);
    }
    let mut out = Vec::with_capacity(manifest.len());
    for layout in manifest {
        let weights = (0..layout.param_count()).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let mut moving = layout.dims.map(MovingStats::fresh);
        for m in &mut moving {
            for v in m.mean.iter_mut().chain(m.var.iter_mut()) {
                *v = r.f64()?;
            }
        }
        out.push(SubnetParams { layout, weights, moving });
    }
    if r.at != buf.len() {
        return Err(NetError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}
