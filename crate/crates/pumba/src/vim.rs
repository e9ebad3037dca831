//! Vision encoder built from bidirectional selective-scan blocks.
//!
//! An `N×a×a` image is cut into `P = (a/l)²` square patches in row-major
//! order, each patch is projected to an `M`-dimensional token, and a learned
//! class token is inserted at index `⌊P/2⌋` so that both scan directions
//! reach it after half the sequence. Learned absolute position embeddings
//! are added after insertion. The encoder output is the final-normalized
//! class-token row.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssm::{self, Discretization, HiddenAttentionStack, ScanInputs, SsmLayerParams};
use crate::tensor::{self, cst, Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Geometry of the patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(image_size: usize, patch_size: usize, channels: usize) -> Result<Self> {
        if patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} is not divisible by patch size {patch_size}"
            )));
        }
        Ok(Self {
            image_size,
            patch_size,
            channels,
        })
    }

    /// Patches per side, `a / l`.
    pub fn side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `P = (a/l)²`.
    pub fn tokens(&self) -> usize {
        self.side() * self.side()
    }

    /// Width of a flattened patch, `N·l·l`.
    pub fn patch_width(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Position of the class token in a sequence of `p` patch tokens.
pub fn class_index(p: usize) -> usize {
    p / 2
}

/// Splits an `[N×a×a]` image into `[P×(N·l·l)]` rows, patches ordered
/// left-to-right then top-to-bottom, each row flattened channel-major.
pub fn patchify<T: Element>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let &[n, h, w] = image.shape() else {
        return Err(Error::Contract(format!(
            "image must be [N×a×a], got {:?}",
            image.shape()
        )));
    };
    if h != w {
        return Err(Error::Contract(format!("image must be square, got {h}×{w}")));
    }
    let grid = PatchGrid::new(h, patch_size, n)?;
    let (side, l) = (grid.side(), patch_size);
    let mut out = Vec::with_capacity(image.len());
    for pr in 0..side {
        for pc in 0..side {
            for ch in 0..n {
                for r in 0..l {
                    let row = pr * l + r;
                    let start = (ch * h + row) * w + pc * l;
                    out.extend_from_slice(&image.data()[start..start + l]);
                }
            }
        }
    }
    Tensor::new([grid.tokens(), grid.patch_width()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Element>(patches: &Tensor<T>, grid: PatchGrid) -> Result<Tensor<T>> {
    if patches.dims2() != (grid.tokens(), grid.patch_width()) {
        return Err(Error::dim(
            "unpatchify",
            patches.shape(),
            &[grid.tokens(), grid.patch_width()],
        ));
    }
    let (a, l, n, side) = (grid.image_size, grid.patch_size, grid.channels, grid.side());
    let mut img = Tensor::zeros([n, a, a]);
    for p in 0..grid.tokens() {
        let (pr, pc) = (p / side, p % side);
        let row = patches.row_slice(p);
        for ch in 0..n {
            for r in 0..l {
                let dst = (ch * a + pr * l + r) * a + pc * l;
                let src = (ch * l + r) * l;
                img.data_mut()[dst..dst + l].copy_from_slice(&row[src..src + l]);
            }
        }
    }
    Ok(img)
}

/// Token embeddings with the class token already inserted.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T = f32> {
    /// `[(P+1)×M]`.
    pub embeddings: Tensor<T>,
    pub class_index: usize,
}

/// Projects patches to `M` dimensions, inserts `cls_token` at `⌊P/2⌋` and
/// adds `pos_embed`.
pub fn embed_and_insert_cls<T: Element>(
    patches: &Tensor<T>,
    w_embed: &Tensor<T>,
    b_embed: &Tensor<T>,
    cls_token: &Tensor<T>,
    pos_embed: &Tensor<T>,
) -> Result<TokenSequence<T>> {
    let mut emb = tensor::matmul(patches, w_embed)?;
    let (p, m) = emb.dims2();
    if b_embed.len() != m || cls_token.len() != m {
        return Err(Error::dim("embed_and_insert_cls", emb.shape(), cls_token.shape()));
    }
    if pos_embed.dims2() != (p + 1, m) {
        return Err(Error::dim("embed_and_insert_cls", &[p + 1, m], pos_embed.shape()));
    }
    for row in emb.data_mut().chunks_mut(m) {
        for (v, &b) in row.iter_mut().zip(b_embed.data()) {
            *v += b;
        }
    }
    let ci = class_index(p);
    let mut data = Vec::with_capacity((p + 1) * m);
    data.extend_from_slice(&emb.data()[..ci * m]);
    data.extend_from_slice(cls_token.data());
    data.extend_from_slice(&emb.data()[ci * m..]);
    for (v, &q) in data.iter_mut().zip(pos_embed.data()) {
        *v += q;
    }
    Ok(TokenSequence {
        embeddings: Tensor::new([p + 1, m], data)?,
        class_index: ci,
    })
}

/// Width and depth of one encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderDims {
    /// Token width `M`.
    pub embed_dim: usize,
    /// Number of blocks `L`.
    pub depth: usize,
    /// Inner expansion factor `E`; scan channels are `E·M`.
    pub expand: usize,
    /// State size `S`.
    pub state_dim: usize,
    pub conv_width: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            depth: 4,
            expand: 2,
            state_dim: 16,
            conv_width: 4,
        }
    }
}

impl EncoderDims {
    pub fn inner(&self) -> usize {
        self.embed_dim * self.expand
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.depth == 0
            || self.expand == 0
            || self.state_dim == 0
            || self.conv_width == 0
        {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Parameter handles of one scan direction.
#[derive(Clone, Debug)]
pub struct DirectionIds {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl DirectionIds {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: &EncoderDims,
        rng: &mut impl Rng,
    ) -> Self {
        let d = dims.inner();
        let k = dims.conv_width;
        let bound = 1.0 / (k as f64).sqrt();
        let u = Uniform::new(-bound, bound).expect("valid range");
        let conv_w = Tensor::from_fn([d, k], |_| cst(u.sample(rng)));
        let conv_b = Tensor::from_fn([d], |_| cst(u.sample(rng)));
        let ssm = SsmLayerParams::<T>::init(d, dims.state_dim, rng);
        Self {
            conv_w: store.add(format!("{prefix}.conv_w"), conv_w),
            conv_b: store.add(format!("{prefix}.conv_b"), conv_b),
            w_b: store.add(format!("{prefix}.w_b"), ssm.w_b),
            w_c: store.add(format!("{prefix}.w_c"), ssm.w_c),
            w_delta: store.add(format!("{prefix}.w_delta"), ssm.w_delta),
            b_delta: store.add(format!("{prefix}.b_delta"), ssm.b_delta),
            a_log: store.add(format!("{prefix}.a_log"), ssm.a_log),
            d_skip: store.add(format!("{prefix}.d_skip"), ssm.d_skip),
        }
    }

    /// The SSM parameters of this direction as owned tensors.
    pub fn ssm_params<T: Element>(
        &self,
        store: &ParamStore<T>,
        rule: Discretization,
    ) -> SsmLayerParams<T> {
        SsmLayerParams {
            a_log: store.get(self.a_log).clone(),
            w_b: store.get(self.w_b).clone(),
            w_c: store.get(self.w_c).clone(),
            w_delta: store.get(self.w_delta).clone(),
            b_delta: store.get(self.b_delta).clone(),
            d_skip: store.get(self.d_skip).clone(),
            rule,
        }
    }
}

/// Tape handles of one scan's operands, kept for hidden-attention readout.
#[derive(Clone, Copy, Debug)]
pub struct ScanVars {
    pub x: Var,
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub d_skip: Var,
}

impl ScanVars {
    fn attention<T: Element>(&self, tape: &Tape<T>, rule: Discretization) -> Tensor<T> {
        let inputs = ScanInputs {
            x: tape.value(self.x),
            delta: tape.value(self.delta),
            a: tape.value(self.a),
            b: tape.value(self.b),
            c: tape.value(self.c),
            d_skip: tape.value(self.d_skip),
            rule,
        };
        ssm::hidden_attention(&inputs)
    }
}

/// Scan operands of both directions of every block in one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub blocks: Vec<[ScanVars; 2]>,
    pub class_index: usize,
    pub rule: Discretization,
}

impl EncoderTrace {
    /// Materializes the `[L×2×D×T×T]` hidden attention of this pass.
    pub fn attention_stack<T: Element>(&self, tape: &Tape<T>) -> Result<HiddenAttentionStack<T>> {
        let layers: Vec<_> = self
            .blocks
            .iter()
            .map(|[f, b]| {
                let fwd = f.attention(tape, self.rule);
                let bwd = ssm::unreverse_attention(&b.attention(tape, self.rule));
                (fwd, bwd)
            })
            .collect();
        HiddenAttentionStack::from_layers(&layers)
    }
}

/// One bidirectional block: pre-norm, gated forward and backward scans,
/// output projection and residual.
#[derive(Clone, Debug)]
pub struct VimBlock {
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub in_proj: ParamId,
    pub out_proj: ParamId,
    pub dirs: [DirectionIds; 2],
    pub inner: usize,
}

impl VimBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: &EncoderDims,
        rng: &mut impl Rng,
    ) -> Self {
        let (m, d) = (dims.embed_dim, dims.inner());
        Self {
            norm_g: store.add(format!("{prefix}.norm_g"), Tensor::ones([m])),
            norm_b: store.add(format!("{prefix}.norm_b"), Tensor::zeros([m])),
            in_proj: store.add(
                format!("{prefix}.in_proj"),
                ssm::normal_tensor([m, 2 * d], 1.0 / (m as f64).sqrt(), rng),
            ),
            out_proj: store.add(
                format!("{prefix}.out_proj"),
                ssm::normal_tensor(
                    [d, m],
                    1.0 / (d as f64).sqrt() / (dims.depth as f64).sqrt(),
                    rng,
                ),
            ),
            dirs: [
                DirectionIds::new(store, &format!("{prefix}.fwd"), dims, rng),
                DirectionIds::new(store, &format!("{prefix}.bwd"), dims, rng),
            ],
            inner: d,
        }
    }

    fn ssm_path<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        dir: usize,
        x: Var,
        rule: Discretization,
    ) -> Result<(Var, ScanVars)> {
        let ids = &self.dirs[dir];
        let conv = tape.conv1d(x, p.var(ids.conv_w), p.var(ids.conv_b))?;
        let xc = tape.silu(conv);
        let b = tape.matmul(xc, p.var(ids.w_b))?;
        let c = tape.matmul(xc, p.var(ids.w_c))?;
        let pre = tape.matmul(xc, p.var(ids.w_delta))?;
        let pre = tape.add_row(pre, p.var(ids.b_delta))?;
        let delta = tape.softplus(pre);
        let ea = tape.exp(p.var(ids.a_log));
        let a = tape.scale(ea, -T::one());
        let d_skip = p.var(ids.d_skip);
        let y = tape.scan(xc, delta, a, b, c, d_skip, rule)?;
        Ok((
            y,
            ScanVars {
                x: xc,
                delta,
                a,
                b,
                c,
                d_skip,
            },
        ))
    }

    /// Applies the block to `u: [T×M]` on the tape.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        u: Var,
        rule: Discretization,
    ) -> Result<(Var, [ScanVars; 2])> {
        let d = self.inner;
        let n = tape.layer_norm(u, p.var(self.norm_g), p.var(self.norm_b), cst(LAYER_NORM_EPS))?;
        let xz = tape.matmul(n, p.var(self.in_proj))?;
        let x = tape.slice(xz, Axis::Cols, 0, d)?;
        let z = tape.slice(xz, Axis::Cols, d, d)?;

        let (y_fwd, trace_fwd) = self.ssm_path(tape, p, 0, x, rule)?;
        let x_rev = tape.reverse_rows(x);
        let (y_rev, trace_bwd) = self.ssm_path(tape, p, 1, x_rev, rule)?;
        let y_bwd = tape.reverse_rows(y_rev);

        let gate = tape.silu(z);
        let gated_fwd = tape.mul(y_fwd, gate)?;
        let gated_bwd = tape.mul(y_bwd, gate)?;
        let fused = tape.add(gated_fwd, gated_bwd)?;
        let out = tape.matmul(fused, p.var(self.out_proj))?;
        Ok((tape.add(u, out)?, [trace_fwd, trace_bwd]))
    }

    /// Pure evaluation of the block on `tokens: [T×M]`.
    pub fn apply<T: Element>(
        &self,
        store: &ParamStore<T>,
        tokens: &Tensor<T>,
        rule: Discretization,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let u = tape.constant(tokens.clone());
        let (out, _) = self.forward(&mut tape, &p, u, rule)?;
        Ok(tape.value(out).clone())
    }
}

/// Class token, position embeddings, blocks and final norm over a token
/// sequence that does not yet contain the class token.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub tokens: usize,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<VimBlock>,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
}

impl SequenceEncoder {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        tokens: usize,
        dims: &EncoderDims,
        rng: &mut impl Rng,
    ) -> Self {
        let m = dims.embed_dim;
        let cls = store.add(
            format!("{prefix}.cls"),
            ssm::normal_tensor([1, m], 0.02, rng),
        );
        let pos = store.add(
            format!("{prefix}.pos"),
            ssm::normal_tensor([tokens + 1, m], 0.02, rng),
        );
        let blocks = (0..dims.depth)
            .map(|i| VimBlock::new(store, &format!("{prefix}.block{i}"), dims, rng))
            .collect();
        Self {
            tokens,
            cls,
            pos,
            blocks,
            norm_g: store.add(format!("{prefix}.norm_g"), Tensor::ones([m])),
            norm_b: store.add(format!("{prefix}.norm_b"), Tensor::zeros([m])),
        }
    }

    pub fn class_index(&self) -> usize {
        class_index(self.tokens)
    }

    /// Inserts the class token into `tokens: [P×M]`, runs every block and
    /// returns the normalized class row `[1×M]`.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
        rule: Discretization,
    ) -> Result<(Var, EncoderTrace)> {
        let (rows, _) = tape.value(tokens).dims2();
        if rows != self.tokens {
            return Err(Error::Contract(format!(
                "encoder expects {} tokens, got {rows}",
                self.tokens
            )));
        }
        let ci = self.class_index();
        let mut parts = Vec::with_capacity(3);
        if ci > 0 {
            parts.push(tape.slice(tokens, Axis::Rows, 0, ci)?);
        }
        parts.push(p.var(self.cls));
        if ci < rows {
            parts.push(tape.slice(tokens, Axis::Rows, ci, rows - ci)?);
        }
        let seq = tape.concat(&parts, Axis::Rows)?;
        let mut h = tape.add(seq, p.var(self.pos))?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, trace) = block.forward(tape, p, h, rule)?;
            h = next;
            blocks.push(trace);
        }
        let normed = tape.layer_norm(h, p.var(self.norm_g), p.var(self.norm_b), cst(LAYER_NORM_EPS))?;
        let cls = tape.slice(normed, Axis::Rows, ci, 1)?;
        Ok((
            cls,
            EncoderTrace {
                blocks,
                class_index: ci,
                rule,
            },
        ))
    }
}

/// Patch embedding followed by a [`SequenceEncoder`].
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub grid: PatchGrid,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub seq: SequenceEncoder,
}

impl ImageEncoder {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        grid: PatchGrid,
        dims: &EncoderDims,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = grid.patch_width();
        Self {
            grid,
            patch_w: store.add(
                format!("{prefix}.patch_w"),
                ssm::normal_tensor([fan_in, dims.embed_dim], 1.0 / (fan_in as f64).sqrt(), rng),
            ),
            patch_b: store.add(format!("{prefix}.patch_b"), Tensor::zeros([dims.embed_dim])),
            seq: SequenceEncoder::new(store, prefix, grid.tokens(), dims, rng),
        }
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: &Tensor<T>,
        rule: Discretization,
    ) -> Result<(Var, EncoderTrace)> {
        if image.shape() != [self.grid.channels, self.grid.image_size, self.grid.image_size] {
            return Err(Error::dim(
                "encode",
                image.shape(),
                &[self.grid.channels, self.grid.image_size, self.grid.image_size],
            ));
        }
        let patches = tape.constant(patchify(image, self.grid.patch_size)?);
        let emb = tape.matmul(patches, p.var(self.patch_w))?;
        let emb = tape.add_row(emb, p.var(self.patch_b))?;
        self.seq.forward(tape, p, emb, rule)
    }

    /// Pure evaluation: the `[M]` class-token embedding of `image`.
    pub fn encode<T: Element>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        rule: Discretization,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let (cls, _) = self.forward(&mut tape, &p, image, rule)?;
        let m = tape.value(cls).len();
        tape.value(cls).clone().reshape([m])
    }
}
