// SPDX-License-Identifier: Apache-2.0

//! One-block causal transformer with a frozen one-hot embedding.
//!
//! ```text
//! X  = onehot(context)                              (N_con × d, d = N)
//! H  = X + Attn(LN₁(X)·W_Q, LN₁(X)·W_K, LN₁(X)·W_V)·W_O
//! Y  = H + tanh(LN₂(H)·W₁ + b₁)·W₂ + b₂             (token-wise)
//! r  = flatten(Y)·W_R + b_R                          (d)
//! ```
//!
//! There is no positional embedding and the causal mask is always on. All
//! weight matrices are stored input-major (`y = x W`). In per-position mode
//! every token position owns its own `W_Q, W_K, W_V, W_O, W₁, b₁, W₂, b₂`;
//! layer-norm and readout parameters are always shared.
//!
//! The backward pass is written out by hand for this fixed graph.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKernelSpec, AttentionKind};
use crate::error::{Error, Result};
use crate::numeric::{self, axpy, dot, layer_norm_backward, layer_norm_forward, Matrix};
use crate::tasks::{argmax, Symbol};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSharing {
    Shared,
    PerPosition,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Alphabet size; also the embedding width.
    pub basis: usize,
    pub context_len: usize,
    pub kernel: AttentionKernelSpec,
    pub weight_sharing: WeightSharing,
    pub hidden_factor: usize,
    pub ln_eps: f64,
    /// Multiplies the `1/√fan_in` standard deviation of the weight init.
    #[serde(default = "default_init_gain")]
    pub init_gain: f64,
}

/// Gives the weights the variance of `U(−1/√fan_in, 1/√fan_in)`. The full
/// `1/√fan_in` standard deviation makes early training at `ε = 0.02` diverge
/// for a sizable fraction of seeds.
pub const DEFAULT_INIT_GAIN: f64 = 0.577_350_269_189_625_8;

fn default_init_gain() -> f64 {
    DEFAULT_INIT_GAIN
}

impl ModelConfig {
    pub fn new(basis: usize, context_len: usize, kernel: AttentionKernelSpec) -> Self {
        Self {
            basis,
            context_len,
            kernel,
            weight_sharing: WeightSharing::Shared,
            hidden_factor: 4,
            ln_eps: numeric::LN_EPS,
            init_gain: DEFAULT_INIT_GAIN,
        }
    }

    pub fn with_sharing(mut self, sharing: WeightSharing) -> Self {
        self.weight_sharing = sharing;
        self
    }

    pub fn dim(&self) -> usize {
        self.basis
    }

    pub fn hidden(&self) -> usize {
        self.hidden_factor * self.basis
    }

    fn copies(&self) -> usize {
        match self.weight_sharing {
            WeightSharing::Shared => 1,
            WeightSharing::PerPosition => self.context_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.basis < 2 {
            return Err(Error::Config(format!("basis {} < 2", self.basis)));
        }
        if self.context_len == 0 || self.hidden_factor == 0 {
            return Err(Error::Config("context_len and hidden_factor must be positive".into()));
        }
        if !(self.kernel.beta > 0.0) {
            return Err(Error::Config(format!("beta {} must be positive", self.kernel.beta)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps {} must be positive", self.ln_eps)));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(Error::Config(format!("init_gain {} must be positive", self.init_gain)));
        }
        Ok(())
    }
}

/// One named parameter tensor: `copies` stacked `rows × cols` matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Slot {
    pub name: &'static str,
    pub copies: usize,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.copies * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    #[inline]
    fn copy_range(&self, copy: usize) -> std::ops::Range<usize> {
        let size = self.rows * self.cols;
        let start = self.offset + copy * size;
        start..start + size
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub ln1_gain: Slot,
    pub ln1_bias: Slot,
    pub w_q: Slot,
    pub w_k: Slot,
    pub w_v: Slot,
    pub w_o: Slot,
    pub ln2_gain: Slot,
    pub ln2_bias: Slot,
    pub w_ff1: Slot,
    pub b_ff1: Slot,
    pub w_ff2: Slot,
    pub b_ff2: Slot,
    pub w_readout: Slot,
    pub b_readout: Slot,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.dim();
        let h = config.hidden();
        let c = config.copies();
        let mut offset = 0;
        let mut slot = |name, copies, rows, cols| {
            let s = Slot {
                name,
                copies,
                rows,
                cols,
                offset,
            };
            offset += s.len();
            s
        };
        let ln1_gain = slot("ln1_gain", 1, 1, d);
        let ln1_bias = slot("ln1_bias", 1, 1, d);
        let w_q = slot("w_q", c, d, d);
        let w_k = slot("w_k", c, d, d);
        let w_v = slot("w_v", c, d, d);
        let w_o = slot("w_o", c, d, d);
        let ln2_gain = slot("ln2_gain", 1, 1, d);
        let ln2_bias = slot("ln2_bias", 1, 1, d);
        let w_ff1 = slot("w_ff1", c, d, h);
        let b_ff1 = slot("b_ff1", c, 1, h);
        let w_ff2 = slot("w_ff2", c, h, d);
        let b_ff2 = slot("b_ff2", c, 1, d);
        let w_readout = slot("w_readout", 1, d * config.context_len, d);
        let b_readout = slot("b_readout", 1, 1, d);
        Self {
            ln1_gain,
            ln1_bias,
            w_q,
            w_k,
            w_v,
            w_o,
            ln2_gain,
            ln2_bias,
            w_ff1,
            b_ff1,
            w_ff2,
            b_ff2,
            w_readout,
            b_readout,
            total: offset,
        }
    }

    pub fn slots(&self) -> [Slot; 14] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ln2_gain,
            self.ln2_bias,
            self.w_ff1,
            self.b_ff1,
            self.w_ff2,
            self.b_ff2,
            self.w_readout,
            self.b_readout,
        ]
    }
}

/// Per-tensor parameter counts.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

pub fn param_count(config: &ModelConfig) -> ParamCount {
    let layout = ParamLayout::new(config);
    ParamCount {
        total: layout.total,
        breakdown: layout.slots().iter().map(|s| (s.name.to_string(), s.len())).collect(),
    }
}

/// All trainable weights as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: ParamLayout,
    data: Vec<f64>,
}

impl ModelParams {
    /// Gaussian weights with standard deviation `init_gain/√fan_in`, zero biases,
    /// unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let layout = ParamLayout::new(config);
        let mut data = vec![0.0; layout.total];
        for slot in [layout.ln1_gain, layout.ln2_gain] {
            data[slot.range()].fill(1.0);
        }
        for slot in [
            layout.w_q,
            layout.w_k,
            layout.w_v,
            layout.w_o,
            layout.w_ff1,
            layout.w_ff2,
            layout.w_readout,
        ] {
            let normal = Normal::new(0.0, config.init_gain / (slot.rows as f64).sqrt()).expect("valid std");
            for w in &mut data[slot.range()] {
                *w = normal.sample(rng);
            }
        }
        Self {
            config: *config,
            layout,
            data,
        }
    }

    pub fn from_flat(config: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        let layout = ParamLayout::new(config);
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch {
                op: "ModelParams::from_flat",
                left: (layout.total, 1),
                right: (data.len(), 1),
            });
        }
        Ok(Self {
            config: *config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, slot: &Slot) -> &[f64] {
        &self.data[slot.range()]
    }

    pub fn tensor_mut(&mut self, slot: &Slot) -> &mut [f64] {
        &mut self.data[slot.range()]
    }

    /// Zero-filled vector with the same layout, for gradients and velocity.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }
}

/// Borrowed view of one position's weights as matrices.
struct Weights<'a> {
    data: &'a [f64],
}

impl<'a> Weights<'a> {
    #[inline]
    fn get(&self, slot: &Slot, copy: usize) -> &'a [f64] {
        &self.data[slot.copy_range(copy)]
    }
}

/// Reusable activations from the last forward pass.
#[derive(Clone, Debug)]
pub struct Workspace {
    n: usize,
    d: usize,
    h: usize,
    context: Vec<Symbol>,
    xhat1: Vec<f64>,
    inv1: Vec<f64>,
    l1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    z: Vec<f64>,
    a: Vec<f64>,
    att: Vec<f64>,
    hres: Vec<f64>,
    xhat2: Vec<f64>,
    inv2: Vec<f64>,
    l2: Vec<f64>,
    t: Vec<f64>,
    y: Vec<f64>,
    readout: Vec<f64>,
    // backward scratch
    dy: Vec<f64>,
    dh: Vec<f64>,
    datt: Vec<f64>,
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dl1: Vec<f64>,
    dtmp_h: Vec<f64>,
    dtmp_d: Vec<f64>,
    da_row: Vec<f64>,
    dz_row: Vec<f64>,
}

impl Workspace {
    pub fn new(config: &ModelConfig) -> Self {
        let n = config.context_len;
        let d = config.dim();
        let h = config.hidden();
        let nd = n * d;
        Self {
            n,
            d,
            h,
            context: vec![0; n],
            xhat1: vec![0.0; nd],
            inv1: vec![0.0; n],
            l1: vec![0.0; nd],
            q: vec![0.0; nd],
            k: vec![0.0; nd],
            v: vec![0.0; nd],
            z: vec![0.0; n * n],
            a: vec![0.0; n * n],
            att: vec![0.0; nd],
            hres: vec![0.0; nd],
            xhat2: vec![0.0; nd],
            inv2: vec![0.0; n],
            l2: vec![0.0; nd],
            t: vec![0.0; n * h],
            y: vec![0.0; nd],
            readout: vec![0.0; d],
            dy: vec![0.0; nd],
            dh: vec![0.0; nd],
            datt: vec![0.0; nd],
            dq: vec![0.0; nd],
            dk: vec![0.0; nd],
            dv: vec![0.0; nd],
            dl1: vec![0.0; nd],
            dtmp_h: vec![0.0; h],
            dtmp_d: vec![0.0; d],
            da_row: vec![0.0; n],
            dz_row: vec![0.0; n],
        }
    }

    pub fn readout(&self) -> &[f64] {
        &self.readout
    }

    /// Attention weights of the last forward pass (`N_con × N_con`).
    pub fn attention(&self) -> Matrix {
        Matrix::from_vec(self.n, self.n, self.a.clone()).expect("square")
    }

    fn fits(&self, config: &ModelConfig) -> bool {
        self.n == config.context_len && self.d == config.dim() && self.h == config.hidden()
    }
}

/// Output of [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub readout: Vec<f64>,
    pub attention: Matrix,
}

fn check_context(config: &ModelConfig, context: &[Symbol]) -> Result<()> {
    if context.len() != config.context_len {
        return Err(Error::InvalidState(format!(
            "context of {} symbols for context_len {}",
            context.len(),
            config.context_len
        )));
    }
    if let Some(&s) = context.iter().find(|&&s| s >= config.basis) {
        return Err(Error::InvalidSymbol {
            symbol: s,
            basis: config.basis,
        });
    }
    Ok(())
}

/// Forward pass, allocating a fresh workspace.
pub fn forward(params: &ModelParams, context: &[Symbol]) -> Result<ForwardOutput> {
    let mut ws = Workspace::new(&params.config);
    forward_in(params, context, &mut ws)?;
    Ok(ForwardOutput {
        readout: ws.readout.clone(),
        attention: ws.attention(),
    })
}

/// Forward pass with the attention weights replaced by `weights`. The
/// kernel is bypassed entirely, so DPA and EA models must agree here.
pub fn forward_fixed_attention(
    params: &ModelParams,
    context: &[Symbol],
    weights: &Matrix,
) -> Result<Vec<f64>> {
    let n = params.config.context_len;
    if weights.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            op: "forward_fixed_attention",
            left: (n, n),
            right: weights.shape(),
        });
    }
    let mut ws = Workspace::new(&params.config);
    run_forward(params, context, &mut ws, Some(weights))?;
    Ok(ws.readout)
}

/// Forward pass into a reusable workspace; returns the readout.
pub fn forward_in<'w>(
    params: &ModelParams,
    context: &[Symbol],
    ws: &'w mut Workspace,
) -> Result<&'w [f64]> {
    run_forward(params, context, ws, None)?;
    Ok(&ws.readout)
}

fn run_forward(
    params: &ModelParams,
    context: &[Symbol],
    ws: &mut Workspace,
    fixed_attention: Option<&Matrix>,
) -> Result<()> {
    let config = &params.config;
    check_context(config, context)?;
    assert!(ws.fits(config), "workspace built for a different config");
    let lay = &params.layout;
    let w = Weights { data: &params.data };
    let (n, d, hd) = (ws.n, ws.d, ws.h);
    let shared = config.weight_sharing == WeightSharing::Shared;
    let pos = |m: usize| if shared { 0 } else { m };
    let eps = config.ln_eps;

    ws.context.copy_from_slice(context);
    let g1 = w.get(&lay.ln1_gain, 0);
    let b1 = w.get(&lay.ln1_bias, 0);
    let mut onehot = vec![0.0; d];

    // LN₁ and projections
    for m in 0..n {
        onehot.fill(0.0);
        onehot[context[m]] = 1.0;
        let rows = m * d..(m + 1) * d;
        ws.inv1[m] = layer_norm_forward(&onehot, g1, b1, eps, &mut ws.xhat1[rows.clone()], &mut ws.l1[rows.clone()]);
        let p = pos(m);
        let l1 = &ws.l1[rows.clone()];
        for (slot, out) in [(&lay.w_q, &mut ws.q), (&lay.w_k, &mut ws.k), (&lay.w_v, &mut ws.v)] {
            let dst = &mut out[rows.clone()];
            dst.fill(0.0);
            mat_acc(l1, w.get(slot, p), d, dst);
        }
    }

    // causal attention
    for m in 0..n {
        let zrow = &mut ws.z[m * n..m * n + m + 1];
        let qm = &ws.q[m * d..(m + 1) * d];
        for (kk, zk) in zrow.iter_mut().enumerate() {
            *zk = dot(qm, &ws.k[kk * d..(kk + 1) * d]);
        }
        let arow = &mut ws.a[m * n..(m + 1) * n];
        arow.fill(0.0);
        match fixed_attention {
            Some(fixed) => arow[..=m].copy_from_slice(&fixed.row(m)[..=m]),
            None => config.kernel.row_weights(&ws.z[m * n..m * n + m + 1], &mut arow[..=m]),
        }
        let att = &mut ws.att[m * d..(m + 1) * d];
        att.fill(0.0);
        for kk in 0..=m {
            let weight = ws.a[m * n + kk];
            if weight != 0.0 {
                axpy(weight, &ws.v[kk * d..(kk + 1) * d], att);
            }
        }
    }

    // residual, LN₂, feedforward
    let g2 = w.get(&lay.ln2_gain, 0);
    let b2 = w.get(&lay.ln2_bias, 0);
    for m in 0..n {
        let p = pos(m);
        let rows = m * d..(m + 1) * d;
        let hrow = &mut ws.hres[rows.clone()];
        hrow.fill(0.0);
        hrow[context[m]] = 1.0;
        mat_acc(&ws.att[rows.clone()], w.get(&lay.w_o, p), d, hrow);

        ws.inv2[m] = layer_norm_forward(
            &ws.hres[rows.clone()],
            g2,
            b2,
            eps,
            &mut ws.xhat2[rows.clone()],
            &mut ws.l2[rows.clone()],
        );
        let trow = &mut ws.t[m * hd..(m + 1) * hd];
        trow.copy_from_slice(w.get(&lay.b_ff1, p));
        mat_acc(&ws.l2[rows.clone()], w.get(&lay.w_ff1, p), hd, trow);
        trow.iter_mut().for_each(|x| *x = x.tanh());

        let yrow = &mut ws.y[rows.clone()];
        yrow.copy_from_slice(w.get(&lay.b_ff2, p));
        axpy(1.0, &ws.hres[rows.clone()], yrow);
        mat_acc(&ws.t[m * hd..(m + 1) * hd], w.get(&lay.w_ff2, p), d, yrow);
    }

    // readout
    ws.readout.copy_from_slice(w.get(&lay.b_readout, 0));
    mat_acc(&ws.y, w.get(&lay.w_readout, 0), d, &mut ws.readout);

    if !ws.readout.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("readout".into()));
    }
    Ok(())
}

/// `out += x · W` with `W` row-major `x.len() × cols`.
#[inline]
fn mat_acc(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, &w[i * cols..(i + 1) * cols], out);
        }
    }
}

/// `out += W · g`, i.e. the input-side gradient `g Wᵀ`.
#[inline]
fn mat_t_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = g.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o += dot(&w[i * cols..(i + 1) * cols], g);
    }
}

/// `W += xᵀ g` (outer product accumulation).
#[inline]
fn outer_acc(x: &[f64], g: &[f64], w: &mut [f64]) {
    let cols = g.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, g, &mut w[i * cols..(i + 1) * cols]);
        }
    }
}

/// Squared difference between the readout and the one-hot target.
pub fn loss(readout: &[f64], target: Symbol) -> f64 {
    readout
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let diff = r - if i == target { 1.0 } else { 0.0 };
            diff * diff
        })
        .sum()
}

/// Greedy decoding: largest readout component, lowest index on ties.
pub fn predict_from_readout(readout: &[f64]) -> Symbol {
    argmax(readout)
}

pub fn predict_greedy(params: &ModelParams, context: &[Symbol]) -> Result<Symbol> {
    let mut ws = Workspace::new(&params.config);
    Ok(predict_from_readout(forward_in(params, context, &mut ws)?))
}

/// Gradient of the loss from the forward pass stored in `ws`, accumulated
/// into `grads`. Returns the loss.
pub fn backward_in(params: &ModelParams, ws: &mut Workspace, target: Symbol, grads: &mut [f64]) -> Result<f64> {
    let config = &params.config;
    if target >= config.basis {
        return Err(Error::InvalidSymbol {
            symbol: target,
            basis: config.basis,
        });
    }
    if grads.len() != params.data.len() {
        return Err(Error::ShapeMismatch {
            op: "backward",
            left: (params.data.len(), 1),
            right: (grads.len(), 1),
        });
    }
    let lay = &params.layout;
    let w = Weights { data: &params.data };
    let (n, d, hd) = (ws.n, ws.d, ws.h);
    let shared = config.weight_sharing == WeightSharing::Shared;
    let pos = |m: usize| if shared { 0 } else { m };
    let kernel: AttentionKernelSpec = config.kernel;

    let value = loss(&ws.readout, target);
    let mut dr = ws.readout.clone();
    dr.iter_mut().for_each(|x| *x *= 2.0);
    dr[target] -= 2.0;

    // readout
    axpy(1.0, &dr, &mut grads[lay.b_readout.range()]);
    outer_acc(&ws.y, &dr, &mut grads[lay.w_readout.range()]);
    ws.dy.fill(0.0);
    mat_t_acc(w.get(&lay.w_readout, 0), &dr, &mut ws.dy);

    // feedforward and LN₂, token by token
    let g2 = w.get(&lay.ln2_gain, 0);
    for m in 0..n {
        let p = pos(m);
        let rows = m * d..(m + 1) * d;
        let dy = &ws.dy[rows.clone()];
        ws.dh[rows.clone()].copy_from_slice(dy);

        axpy(1.0, dy, &mut grads[lay.b_ff2.copy_range(p)]);
        let trow = &ws.t[m * hd..(m + 1) * hd];
        outer_acc(trow, dy, &mut grads[lay.w_ff2.copy_range(p)]);
        let dpre = &mut ws.dtmp_h;
        dpre.fill(0.0);
        mat_t_acc(w.get(&lay.w_ff2, p), dy, dpre);
        for (g, &t) in dpre.iter_mut().zip(trow) {
            *g *= 1.0 - t * t;
        }
        axpy(1.0, dpre, &mut grads[lay.b_ff1.copy_range(p)]);
        outer_acc(&ws.l2[rows.clone()], dpre, &mut grads[lay.w_ff1.copy_range(p)]);
        let dl2 = &mut ws.dtmp_d;
        dl2.fill(0.0);
        mat_t_acc(w.get(&lay.w_ff1, p), dpre, dl2);

        let (dg, db) = split_pair(grads, &lay.ln2_gain, &lay.ln2_bias);
        layer_norm_backward(
            dl2,
            &ws.xhat2[rows.clone()],
            ws.inv2[m],
            g2,
            dg,
            db,
            Some(&mut ws.dh[rows.clone()]),
        );

        // H = X + att·W_O
        let dh = &ws.dh[rows.clone()];
        outer_acc(&ws.att[rows.clone()], dh, &mut grads[lay.w_o.copy_range(p)]);
        let datt = &mut ws.datt[rows.clone()];
        datt.fill(0.0);
        mat_t_acc(w.get(&lay.w_o, p), dh, datt);
    }

    // attention
    ws.dq.fill(0.0);
    ws.dk.fill(0.0);
    ws.dv.fill(0.0);
    for m in 0..n {
        let datt = &ws.datt[m * d..(m + 1) * d];
        let arow = &ws.a[m * n..m * n + m + 1];
        let da = &mut ws.da_row[..=m];
        for kk in 0..=m {
            da[kk] = dot(datt, &ws.v[kk * d..(kk + 1) * d]);
            if arow[kk] != 0.0 {
                axpy(arow[kk], datt, &mut ws.dv[kk * d..(kk + 1) * d]);
            }
        }
        let dz = &mut ws.dz_row[..=m];
        dz.fill(0.0);
        kernel.row_backward(&ws.z[m * n..m * n + m + 1], arow, da, dz);
        let qm = &ws.q[m * d..(m + 1) * d];
        for kk in 0..=m {
            let g = dz[kk];
            if g != 0.0 {
                axpy(g, &ws.k[kk * d..(kk + 1) * d], &mut ws.dq[m * d..(m + 1) * d]);
                axpy(g, qm, &mut ws.dk[kk * d..(kk + 1) * d]);
            }
        }
    }

    // projections and LN₁
    let g1 = w.get(&lay.ln1_gain, 0);
    for m in 0..n {
        let p = pos(m);
        let rows = m * d..(m + 1) * d;
        let l1 = &ws.l1[rows.clone()];
        let dl1 = &mut ws.dl1[rows.clone()];
        dl1.fill(0.0);
        for (slot, g) in [(&lay.w_q, &ws.dq), (&lay.w_k, &ws.dk), (&lay.w_v, &ws.dv)] {
            let grow = &g[rows.clone()];
            outer_acc(l1, grow, &mut grads[slot.copy_range(p)]);
            mat_t_acc(w.get(slot, p), grow, dl1);
        }
        let (dg, db) = split_pair(grads, &lay.ln1_gain, &lay.ln1_bias);
        layer_norm_backward(dl1, &ws.xhat1[rows.clone()], ws.inv1[m], g1, dg, db, None);
    }

    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(value)
}

/// Mutable views of two adjacent slots (`first` immediately precedes `second`).
fn split_pair<'g>(grads: &'g mut [f64], first: &Slot, second: &Slot) -> (&'g mut [f64], &'g mut [f64]) {
    debug_assert_eq!(first.offset + first.len(), second.offset);
    let (a, b) = grads[first.offset..second.offset + second.len()].split_at_mut(first.len());
    (a, b)
}

/// Loss and gradients for one `(context, target)` pair.
pub fn backward(params: &ModelParams, context: &[Symbol], target: Symbol) -> Result<(f64, Vec<f64>)> {
    let mut ws = Workspace::new(&params.config);
    forward_in(params, context, &mut ws)?;
    let mut grads = params.zeros_like();
    let value = backward_in(params, &mut ws, target, &mut grads)?;
    Ok((value, grads))
}

/// Short label like `ea/shared`.
pub fn describe(config: &ModelConfig) -> String {
    let kernel = match config.kernel.kind {
        AttentionKind::Dpa => "dpa",
        AttentionKind::Ea => "ea",
    };
    let sharing = match config.weight_sharing {
        WeightSharing::Shared => "shared",
        WeightSharing::PerPosition => "per_position",
    };
    format!("{kernel}/{sharing}")
}
