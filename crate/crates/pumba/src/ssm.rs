//! Selective state-space scan with a diagonal, input-dependent transition.
//!
//! For channel `d` and state index `s` the recurrence is
//!
//! ```text
//! A_bar[t,d,s] = exp(delta[t,d] * A[d,s])
//! B_bar[t,d,s] = delta[t,d] * B[t,s]                   (Euler rule)
//!              = expm1(delta[t,d] * A[d,s]) / A[d,s] * B[t,s]   (exact zero-order hold)
//! h[t,d,s]     = A_bar[t,d,s] * h[t-1,d,s] + B_bar[t,d,s] * x[t,d]
//! y[t,d]       = sum_s C[t,s] * h[t,d,s] + D_skip[d] * x[t,d]
//! ```
//!
//! with `h[-1] = 0`. Unrolling the recurrence gives the hidden attention
//! matrix `alpha[d,i,j] = sum_s C[i,s] * prod_{k=j+1..=i} A_bar[k,d,s] * B_bar[j,d,s]`
//! so that `y[i,d] = sum_{j<=i} alpha[d,i,j] x[j,d] + D_skip[d] x[i,d]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, cst, softplus_scalar, Element, Tensor};

/// How the input matrix is discretized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discretization {
    /// `B_bar = delta * B`.
    #[default]
    Euler,
    /// `B_bar = (exp(delta * A) - 1) / A * B`.
    ZeroOrderHold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Hidden-attention entries whose decay product falls below this are zero.
pub const UNDERFLOW_CUTOFF: f64 = 1e-30;

/// Borrowed operands of one scan.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub x: &'a Tensor<T>,
    pub delta: &'a Tensor<T>,
    pub a: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
    pub c: &'a Tensor<T>,
    pub d_skip: &'a Tensor<T>,
    pub rule: Discretization,
}

impl<T: Element> ScanInputs<'_, T> {
    pub fn dims(&self) -> (usize, usize, usize) {
        let (t, d) = self.x.dims2();
        (t, d, self.a.dims2().1)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, d) = self.x.dims2();
        if self.x.is_empty() || t == 0 {
            return Err(Error::Contract("scan needs at least one token".into()));
        }
        let (ad, s) = self.a.dims2();
        let bad = |what: &'static str, got: &Tensor<T>| {
            Err(Error::dim(what, self.x.shape(), got.shape()))
        };
        if self.delta.dims2() != (t, d) {
            return bad("scan delta", self.delta);
        }
        if ad != d {
            return bad("scan A", self.a);
        }
        if self.b.dims2() != (t, s) {
            return bad("scan B", self.b);
        }
        if self.c.dims2() != (t, s) {
            return bad("scan C", self.c);
        }
        if self.d_skip.len() != d {
            return bad("scan D_skip", self.d_skip);
        }
        Ok(())
    }
}

#[inline]
fn discretize_entry<T: Element>(dt: T, a: T, b: T, rule: Discretization) -> (T, T) {
    let abar = (dt * a).exp();
    let bbar = match rule {
        Discretization::Euler => dt * b,
        Discretization::ZeroOrderHold => (dt * a).exp_m1() / a * b,
    };
    (abar, bbar)
}

/// Discretizes one step: `A_bar = exp(delta ⊗ A)`, `B_bar = delta ⊗ B`.
///
/// `a_diag` is `[D×S]`, `b_t` is `[S]`, `delta_t` is `[D]`.
pub fn discretize<T: Element>(
    a_diag: &Tensor<T>,
    b_t: &Tensor<T>,
    delta_t: &Tensor<T>,
    rule: Discretization,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d, s) = a_diag.dims2();
    if b_t.len() != s || delta_t.len() != d {
        return Err(Error::dim("discretize", a_diag.shape(), delta_t.shape()));
    }
    if let Some(bad) = delta_t.data().iter().find(|v| !(**v > T::zero())) {
        return Err(Error::Contract(format!(
            "step size must be positive, got {bad:?}"
        )));
    }
    if a_diag.data().iter().any(|v| !(*v < T::zero())) {
        return Err(Error::Contract("state matrix must be strictly negative".into()));
    }
    let mut abar = Tensor::zeros([d, s]);
    let mut bbar = Tensor::zeros([d, s]);
    for i in 0..d {
        for j in 0..s {
            let (ab, bb) = discretize_entry(delta_t.data()[i], a_diag.at2(i, j), b_t.data()[j], rule);
            abar.data_mut()[i * s + j] = ab;
            bbar.data_mut()[i * s + j] = bb;
        }
    }
    Ok((abar, bbar))
}

/// Advances the recurrence over `rows`, updating the carried state `h`
/// (`D×S`) and writing outputs into `y`.
fn scan_rows<T: Element>(
    inp: &ScanInputs<'_, T>,
    rows: std::ops::Range<usize>,
    h: &mut [T],
    y: &mut [T],
) {
    let (_, d, s) = inp.dims();
    let (x, delta, a, b, c) = (
        inp.x.data(),
        inp.delta.data(),
        inp.a.data(),
        inp.b.data(),
        inp.c.data(),
    );
    let skip = inp.d_skip.data();
    for t in rows {
        let b_t = &b[t * s..(t + 1) * s];
        let c_t = &c[t * s..(t + 1) * s];
        for ch in 0..d {
            let dt = delta[t * d + ch];
            let xv = x[t * d + ch];
            let hs = &mut h[ch * s..(ch + 1) * s];
            let a_row = &a[ch * s..(ch + 1) * s];
            let mut acc = T::zero();
            for k in 0..s {
                let (abar, bbar) = discretize_entry(dt, a_row[k], b_t[k], inp.rule);
                hs[k] = abar * hs[k] + bbar * xv;
                acc += c_t[k] * hs[k];
            }
            y[t * d + ch] = acc + skip[ch] * xv;
        }
    }
}

/// Runs the scan, optionally in blocks of `block` tokens that carry the
/// hidden state across block boundaries. Inputs must already be validated.
pub fn scan<T: Element>(inp: &ScanInputs<'_, T>, block: Option<usize>) -> Tensor<T> {
    let (t_len, d, s) = inp.dims();
    let block = block.unwrap_or(t_len).clamp(1, t_len.max(1));
    let mut h = vec![T::zero(); d * s];
    let mut y = vec![T::zero(); t_len * d];
    let mut start = 0;
    while start < t_len {
        let end = (start + block).min(t_len);
        scan_rows(inp, start..end, &mut h, &mut y);
        start = end;
    }
    Tensor::new([t_len, d], y).expect("scan output shape")
}

pub(crate) struct ScanGrads<T> {
    pub x: Tensor<T>,
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d_skip: Tensor<T>,
}

/// Adjoint of [`scan`]. Hidden states are recomputed rather than stored.
pub(crate) fn scan_backward<T: Element>(inp: &ScanInputs<'_, T>, gy: &Tensor<T>) -> ScanGrads<T> {
    let (t_len, d, s) = inp.dims();
    let (x, delta, a, b, c) = (
        inp.x.data(),
        inp.delta.data(),
        inp.a.data(),
        inp.b.data(),
        inp.c.data(),
    );
    let skip = inp.d_skip.data();
    let gy = gy.data();

    let mut hs = vec![T::zero(); t_len * d * s];
    for t in 0..t_len {
        for ch in 0..d {
            let dt = delta[t * d + ch];
            for k in 0..s {
                let (abar, bbar) = discretize_entry(dt, a[ch * s + k], b[t * s + k], inp.rule);
                let prev = if t == 0 {
                    T::zero()
                } else {
                    hs[((t - 1) * d + ch) * s + k]
                };
                hs[(t * d + ch) * s + k] = abar * prev + bbar * x[t * d + ch];
            }
        }
    }

    let mut gx = vec![T::zero(); t_len * d];
    let mut gdelta = vec![T::zero(); t_len * d];
    let mut ga = vec![T::zero(); d * s];
    let mut gb = vec![T::zero(); t_len * s];
    let mut gc = vec![T::zero(); t_len * s];
    let mut gskip = vec![T::zero(); d];
    // adjoint of h[t] flowing back from later steps, already multiplied by A_bar[t+1]
    let mut carry = vec![T::zero(); d * s];

    for t in (0..t_len).rev() {
        for ch in 0..d {
            let g = gy[t * d + ch];
            let dt = delta[t * d + ch];
            let xv = x[t * d + ch];
            gskip[ch] += g * xv;
            let mut gx_acc = g * skip[ch];
            let mut gdt_acc = T::zero();
            for k in 0..s {
                let idx = ch * s + k;
                let a_v = a[idx];
                let b_v = b[t * s + k];
                let h_t = hs[(t * d + ch) * s + k];
                gc[t * s + k] += g * h_t;
                let gh = g * c[t * s + k] + carry[idx];
                let h_prev = if t == 0 {
                    T::zero()
                } else {
                    hs[((t - 1) * d + ch) * s + k]
                };
                let abar = (dt * a_v).exp();
                let g_abar = gh * h_prev;
                let g_bbar = gh * xv;
                gdt_acc += g_abar * abar * a_v;
                ga[idx] += g_abar * abar * dt;
                match inp.rule {
                    Discretization::Euler => {
                        gx_acc += gh * dt * b_v;
                        gdt_acc += g_bbar * b_v;
                        gb[t * s + k] += g_bbar * dt;
                    }
                    Discretization::ZeroOrderHold => {
                        let em1 = (dt * a_v).exp_m1();
                        let f = em1 / a_v;
                        gx_acc += gh * f * b_v;
                        gdt_acc += g_bbar * b_v * abar;
                        ga[idx] += g_bbar * b_v * (dt * abar * a_v - em1) / (a_v * a_v);
                        gb[t * s + k] += g_bbar * f;
                    }
                }
                carry[idx] = gh * abar;
            }
            gx[t * d + ch] += gx_acc;
            gdelta[t * d + ch] += gdt_acc;
        }
    }

    ScanGrads {
        x: Tensor::new([t_len, d], gx).unwrap(),
        delta: Tensor::new([t_len, d], gdelta).unwrap(),
        a: Tensor::new([d, s], ga).unwrap(),
        b: Tensor::new([t_len, s], gb).unwrap(),
        c: Tensor::new([t_len, s], gc).unwrap(),
        d_skip: Tensor::new([d], gskip).unwrap(),
    }
}

/// Token-to-token influence matrices `[D×T×T]` of one scan, excluding the
/// skip term.
///
/// Decay products are evaluated as `exp(A * (cumΔ[i] - cumΔ[j]))` from
/// cumulative step sizes kept in 64-bit, so long products do not lose
/// precision; products below [`UNDERFLOW_CUTOFF`] are exactly zero.
pub fn hidden_attention<T: Element>(inp: &ScanInputs<'_, T>) -> Tensor<T> {
    let (t_len, d, s) = inp.dims();
    let cut = UNDERFLOW_CUTOFF.ln();
    let mut out = vec![T::zero(); d * t_len * t_len];
    let mut cum = vec![0.0f64; t_len];
    let mut bbar = vec![0.0f64; t_len];
    for ch in 0..d {
        let mut run = 0.0;
        for (t, slot) in cum.iter_mut().enumerate() {
            run += inp.delta.at2(t, ch).as_f64();
            *slot = run;
        }
        for k in 0..s {
            let a_v = inp.a.at2(ch, k);
            for (j, slot) in bbar.iter_mut().enumerate() {
                let (_, bb) = discretize_entry(inp.delta.at2(j, ch), a_v, inp.b.at2(j, k), inp.rule);
                *slot = bb.as_f64();
            }
            let a64 = a_v.as_f64();
            for i in 0..t_len {
                let c_ik = inp.c.at2(i, k).as_f64();
                if c_ik == 0.0 {
                    continue;
                }
                let row = &mut out[(ch * t_len + i) * t_len..(ch * t_len + i + 1) * t_len];
                for j in 0..=i {
                    let log_decay = a64 * (cum[i] - cum[j]);
                    if log_decay < cut {
                        continue;
                    }
                    row[j] += cst::<T>(c_ik * log_decay.exp() * bbar[j]);
                }
            }
        }
    }
    Tensor::new([d, t_len, t_len], out).unwrap()
}

/// Parameters of one selective SSM.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmLayerParams<T = f32> {
    /// `[D×S]`; the effective state matrix is `-exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `[D×S]` projection of token features to `B_t`.
    pub w_b: Tensor<T>,
    /// `[D×S]` projection of token features to `C_t`.
    pub w_c: Tensor<T>,
    /// `[D×D]` step-size projection.
    pub w_delta: Tensor<T>,
    /// `[D]` step-size bias.
    pub b_delta: Tensor<T>,
    /// `[D]` direct feed-through.
    pub d_skip: Tensor<T>,
    pub rule: Discretization,
}

/// `softplus⁻¹(y)` for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `A_log[d, s] = ln(s + 1)` for every channel.
pub fn init_a_log<T: Element>(d: usize, s: usize) -> Tensor<T> {
    Tensor::from_fn([d, s], |i| cst::<T>(((i % s) + 1) as f64).ln())
}

/// Step-size biases whose softplus is log-uniform in `[1e-3, 1e-1]`.
pub fn init_delta_bias<T: Element>(d: usize, rng: &mut impl Rng) -> Tensor<T> {
    let u = Uniform::new(1e-3f64.ln(), 1e-1f64.ln()).expect("valid range");
    Tensor::from_fn([d], |_| cst(inverse_softplus(u.sample(rng).exp())))
}

pub(crate) fn normal_tensor<T: Element>(
    shape: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        cst(z * std)
    })
}

impl<T: Element> SsmLayerParams<T> {
    pub fn init(channels: usize, state: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (channels as f64).sqrt();
        Self {
            a_log: init_a_log(channels, state),
            w_b: normal_tensor([channels, state], scale, rng),
            w_c: normal_tensor([channels, state], scale, rng),
            w_delta: normal_tensor([channels, channels], 0.1 * scale, rng),
            b_delta: init_delta_bias(channels, rng),
            d_skip: Tensor::ones([channels]),
            rule: Discretization::Euler,
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.dims2().0
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.dims2().1
    }

    /// Effective diagonal state matrix `-exp(a_log)`.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }

    /// Per-token `(delta, B, C)`.
    pub fn project(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let b = tensor::matmul(x, &self.w_b)?;
        let c = tensor::matmul(x, &self.w_c)?;
        let mut delta = tensor::matmul(x, &self.w_delta)?;
        let d = self.channels();
        for row in delta.data_mut().chunks_mut(d) {
            for (v, &bias) in row.iter_mut().zip(self.b_delta.data()) {
                *v = softplus_scalar(*v + bias);
            }
        }
        Ok((delta, b, c))
    }

    fn with_inputs<R>(
        &self,
        x: &Tensor<T>,
        f: impl FnOnce(&ScanInputs<'_, T>) -> R,
    ) -> Result<R> {
        if x.rank() != 2 || x.dims2().0 == 0 {
            return Err(Error::Contract(format!(
                "scan input must be a non-empty [T×D] matrix, got {:?}",
                x.shape()
            )));
        }
        let (delta, b, c) = self.project(x)?;
        let a = self.a();
        let inputs = ScanInputs {
            x,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d_skip: &self.d_skip,
            rule: self.rule,
        };
        inputs.validate()?;
        Ok(f(&inputs))
    }
}

/// Causal selective scan of `x: [T×D]`.
pub fn selective_scan<T: Element>(x: &Tensor<T>, params: &SsmLayerParams<T>) -> Result<Tensor<T>> {
    params.with_inputs(x, |inp| scan(inp, None))
}

/// [`selective_scan`] evaluated in chunks of `block` tokens.
pub fn selective_scan_blocked<T: Element>(
    x: &Tensor<T>,
    params: &SsmLayerParams<T>,
    block: usize,
) -> Result<Tensor<T>> {
    if block == 0 {
        return Err(Error::Contract("block size must be at least 1".into()));
    }
    params.with_inputs(x, |inp| scan(inp, Some(block)))
}

/// Scan in the given direction. The backward direction scans the reversed
/// sequence and restores the original token order on output.
pub fn directional_scan<T: Element>(
    x: &Tensor<T>,
    params: &SsmLayerParams<T>,
    dir: Direction,
) -> Result<Tensor<T>> {
    match dir {
        Direction::Forward => selective_scan(x, params),
        Direction::Backward => {
            let y = selective_scan(&tensor::reverse_rows(x), params)?;
            Ok(tensor::reverse_rows(&y))
        }
    }
}

/// `[D×T×T]` hidden attention of the forward scan of `x`.
pub fn materialize_hidden_attention<T: Element>(
    x: &Tensor<T>,
    params: &SsmLayerParams<T>,
) -> Result<Tensor<T>> {
    params.with_inputs(x, hidden_attention)
}

/// Maps attention computed on a reversed sequence back to original token
/// order: `out[d,i,j] = rev[d, T-1-i, T-1-j]`.
pub fn unreverse_attention<T: Element>(rev: &Tensor<T>) -> Tensor<T> {
    let (d, t) = (rev.shape()[0], rev.shape()[1]);
    let mut out = Tensor::zeros([d, t, t]);
    for ch in 0..d {
        for i in 0..t {
            for j in 0..t {
                out.data_mut()[(ch * t + i) * t + j] =
                    rev.data()[(ch * t + (t - 1 - i)) * t + (t - 1 - j)];
            }
        }
    }
    out
}

/// Gated additive fusion `y_fwd ⊙ SiLU(z) + y_bwd ⊙ SiLU(z)`.
pub fn bidirectional_fuse<T: Element>(
    y_fwd: &Tensor<T>,
    y_bwd: &Tensor<T>,
    z_gate: &Tensor<T>,
) -> Result<Tensor<T>> {
    if y_fwd.shape() != y_bwd.shape() {
        return Err(Error::dim("bidirectional_fuse", y_fwd.shape(), y_bwd.shape()));
    }
    if y_fwd.shape() != z_gate.shape() {
        return Err(Error::dim("bidirectional_fuse", y_fwd.shape(), z_gate.shape()));
    }
    let gate = z_gate.map(tensor::silu_scalar);
    let fwd = y_fwd.zip_map(&gate, "bidirectional_fuse", |a, g| a * g)?;
    let bwd = y_bwd.zip_map(&gate, "bidirectional_fuse", |a, g| a * g)?;
    fwd.zip_map(&bwd, "bidirectional_fuse", |a, b| a + b)
}

/// Implicit attention of every layer and direction of one encoder.
///
/// `matrices` has shape `[L×2×D×T×T]`; direction 0 is forward (lower
/// triangular), direction 1 backward (upper triangular, in original token
/// order).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenAttentionStack<T = f32> {
    pub matrices: Tensor<T>,
    pub token_count: usize,
}

impl<T: Element> HiddenAttentionStack<T> {
    /// Stacks per-layer `(forward, backward)` `[D×T×T]` matrices.
    pub fn from_layers(layers: &[(Tensor<T>, Tensor<T>)]) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Contract("attention stack needs at least one layer".into()))?;
        let shape = first.0.shape().to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::Contract(format!(
                "attention matrices must be [D×T×T], got {shape:?}"
            )));
        }
        let mut data = Vec::with_capacity(layers.len() * 2 * first.0.len());
        for (f, b) in layers {
            if f.shape() != shape.as_slice() || b.shape() != shape.as_slice() {
                return Err(Error::dim("attention stack", &shape, b.shape()));
            }
            data.extend_from_slice(f.data());
            data.extend_from_slice(b.data());
        }
        let matrices = Tensor::new([layers.len(), 2, shape[0], shape[1], shape[2]], data)?;
        Ok(Self {
            matrices,
            token_count: shape[1],
        })
    }

    pub fn layers(&self) -> usize {
        self.matrices.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.matrices.shape()[2]
    }

    pub fn get(&self, layer: usize, dir: usize, ch: usize, i: usize, j: usize) -> T {
        let s = self.matrices.shape();
        let t = s[3];
        self.matrices.data()[(((layer * 2 + dir) * s[2] + ch) * t + i) * t + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, s: usize, seed: u64) -> SsmLayerParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SsmLayerParams::init(d, s, &mut rng);
        p.w_delta = normal_tensor([d, d], 0.5, &mut rng);
        p.b_delta = normal_tensor([d], 0.5, &mut rng);
        p.d_skip = normal_tensor([d], 1.0, &mut rng);
        p
    }

    #[test]
    fn discretize_limits_and_values() {
        let a = Tensor::<f64>::full([2, 3], -1.0);
        let b = Tensor::<f64>::ones([3]);
        let (abar, bbar) = discretize(&a, &b, &Tensor::full([2], 1e-12), Discretization::Euler).unwrap();
        assert!(abar.data().iter().all(|&v| (v - 1.0).abs() < 1e-11));
        assert!(bbar.data().iter().all(|&v| v.abs() < 1e-11));
        let (abar, _) = discretize(&a, &b, &Tensor::full([2], 2f64.ln()), Discretization::Euler).unwrap();
        assert!(abar.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn discretize_rejects_non_positive_step() {
        let a = Tensor::<f32>::full([1, 1], -1.0);
        let err = discretize(&a, &Tensor::ones([1]), &Tensor::zeros([1]), Discretization::Euler);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn zoh_approaches_euler_for_small_steps() {
        let a = Tensor::<f64>::new([1, 2], vec![-1.0, -3.0]).unwrap();
        let b = Tensor::<f64>::new([2], vec![0.7, -0.2]).unwrap();
        let dt = Tensor::full([1], 1e-6);
        let (_, e) = discretize(&a, &b, &dt, Discretization::Euler).unwrap();
        let (_, z) = discretize(&a, &b, &dt, Discretization::ZeroOrderHold).unwrap();
        assert!(e.max_abs_diff(&z) < 1e-11);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let p = params(2, 2, 0);
        let x = Tensor::<f64>::zeros([0, 2]);
        assert!(matches!(selective_scan(&x, &p), Err(Error::Contract(_))));
        assert!(selective_scan_blocked(&Tensor::zeros([3, 2]), &p, 0).is_err());
    }

    #[test]
    fn blocked_scan_is_bitwise_equal() {
        let p = params(3, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = normal_tensor::<f64>([33, 3], 1.0, &mut rng);
        let full = selective_scan(&x, &p).unwrap();
        for block in [1, 5, 8, 33, 100] {
            assert_eq!(selective_scan_blocked(&x, &p, block).unwrap(), full);
        }
    }

    #[test]
    fn attention_is_causal_and_reconstructs() {
        let p = params(3, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = normal_tensor::<f64>([9, 3], 1.0, &mut rng);
        let alpha = materialize_hidden_attention(&x, &p).unwrap();
        let y = selective_scan(&x, &p).unwrap();
        for ch in 0..3 {
            for i in 0..9 {
                let mut acc = p.d_skip.data()[ch] * x.at2(i, ch);
                for j in 0..9 {
                    let v = alpha.data()[(ch * 9 + i) * 9 + j];
                    if j > i {
                        assert_eq!(v, 0.0);
                    }
                    acc += v * x.at2(j, ch);
                }
                assert!((acc - y.at2(i, ch)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn unreverse_maps_lower_to_upper() {
        let p = params(2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = normal_tensor::<f64>([6, 2], 1.0, &mut rng);
        let rev = materialize_hidden_attention(&tensor::reverse_rows(&x), &p).unwrap();
        let back = unreverse_attention(&rev);
        let y = directional_scan(&x, &p, Direction::Backward).unwrap();
        for ch in 0..2 {
            for i in 0..6 {
                let mut acc = p.d_skip.data()[ch] * x.at2(i, ch);
                for j in 0..6 {
                    let v = back.data()[(ch * 6 + i) * 6 + j];
                    if j < i {
                        assert_eq!(v, 0.0);
                    }
                    acc += v * x.at2(j, ch);
                }
                assert!((acc - y.at2(i, ch)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fuse_with_zero_gate_vanishes() {
        let y = Tensor::<f32>::from_fn([3, 2], |i| i as f32);
        let out = bidirectional_fuse(&y, &y, &Tensor::zeros([3, 2])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let big = bidirectional_fuse(&y, &Tensor::zeros([3, 2]), &Tensor::full([3, 2], 60.0)).unwrap();
        assert!(big.max_abs_diff(&y.map(|v| v * 60.0)) < 1e-3);
        assert!(bidirectional_fuse(&y, &Tensor::zeros([2, 3]), &y).is_err());
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for y in [1e-3, 0.05, 0.1, 2.0] {
            assert!((softplus_scalar(inverse_softplus(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn init_delta_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = init_delta_bias::<f64>(256, &mut rng);
        for &v in b.data() {
            let dt = softplus_scalar(v);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt));
        }
    }
}
