//! Model building blocks: the agnostic causal block, ConvLSTM cell,
//! high-order graph convolution, batch normalization, and the shared
//! spatially local regressor head.
//!
//! Layers own their parameters as plain [`Tensor`]s. A forward pass leases
//! them onto a [`Tape`] as leaves and returns the leased handles in the same
//! order as [`params`](AgnosticConvBlock::params), so an optimizer can pair
//! gradients with parameters positionally.

use crate::error::{Error, Result};
use crate::tape::{SparsePattern, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use std::sync::Arc;

fn uniform_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

// ---------------------------------------------------------------------------
// Agnostic causal block
// ---------------------------------------------------------------------------

/// Two-stage location-agnostic convolution: a causal full-width kernel
/// collapses each frame to a column, then a learned row kernel re-expands
/// every column entry across space.
///
/// Stage 1 uses top-only padding of `t_past - 1`, so row `t` of the output
/// depends only on input rows `t - t_past + 1 ..= t`.
#[derive(Clone, Debug)]
pub struct AgnosticConvBlock {
    t_past: usize,
    h: usize,
    s: usize,
    cin: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl AgnosticConvBlock {
    pub fn new<R: Rng>(cin: usize, t_past: usize, h: usize, s: usize, rng: &mut R) -> Result<Self> {
        if t_past == 0 || h == 0 || s == 0 || cin == 0 {
            return Err(Error::Config("agnostic block extents must be positive".into()));
        }
        let fan = cin * t_past * s;
        Ok(AgnosticConvBlock {
            t_past,
            h,
            s,
            cin,
            w1: uniform_init(&[h, cin, t_past, s], fan, rng),
            b1: uniform_init(&[h], fan, rng),
            w2: uniform_init(&[h, s], 1, rng),
            b2: uniform_init(&[h], 1, rng),
        })
    }

    pub fn t_past(&self) -> usize {
        self.t_past
    }

    pub fn hidden(&self) -> usize {
        self.h
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let sh = tape.shape(x);
        if sh.len() != 4 || sh[1] != self.cin {
            return Err(Error::Shape {
                op: "agnostic_conv_forward",
                detail: format!("expected [B,{},T,S] input, got {:?}", self.cin, sh),
            });
        }
        if sh[3] != self.s {
            return Err(Error::Shape {
                op: "agnostic_conv_forward",
                detail: format!("spatial extent {} does not match block's S = {}", sh[3], self.s),
            });
        }
        Ok(())
    }

    /// Stage 1 only: `[B,C,T,S] -> [B,H,T,1]`.
    pub fn stage1(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape, x)?;
        let w1 = tape.leaf(self.w1.clone());
        let b1 = tape.leaf(self.b1.clone());
        let y = tape.conv2d(x, w1, Some(b1), (self.t_past - 1, 0, 0, 0))?;
        Ok((y, vec![w1, b1]))
    }

    /// Both stages: `[B,C,T,S] -> [B,H,T,S]`. Normalization and activation
    /// are the caller's concern.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let (col, mut params) = self.stage1(tape, x)?;
        let w2 = tape.leaf(self.w2.clone());
        let b2 = tape.leaf(self.b2.clone());
        let y = tape.conv_transpose_row(col, w2, Some(b2))?;
        params.push(w2);
        params.push(b2);
        Ok((y, params))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// `H·(C·t_past·S + 1) + H·(S + 1)`.
    pub fn count(&self) -> usize {
        self.h * (self.cin * self.t_past * self.s + 1) + self.h * (self.s + 1)
    }
}

// ---------------------------------------------------------------------------
// ConvLSTM cell
// ---------------------------------------------------------------------------

/// ConvLSTM cell with 3x3 input-to-state and state-to-state kernels and
/// shape-preserving padding, so gates, hidden state, and cell state all share
/// the input's frame shape.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    cin: usize,
    h: usize,
    // Gate order throughout: input, forget, candidate, output.
    w_x: [Tensor; 4],
    w_h: [Tensor; 4],
    b: [Tensor; 4],
    /// Reproduce the cell update with the input gate dropped from the
    /// candidate term (for comparison runs).
    pub paper_literal_cell: bool,
}

impl ConvLstmCell {
    pub fn new<R: Rng>(cin: usize, h: usize, rng: &mut R) -> Result<Self> {
        if cin == 0 || h == 0 {
            return Err(Error::Config("convlstm extents must be positive".into()));
        }
        let fan_x = cin * 9;
        let fan_h = h * 9;
        let mk = |c: usize, fan: usize, rng: &mut R| uniform_init(&[h, c, 3, 3], fan, rng);
        Ok(ConvLstmCell {
            cin,
            h,
            w_x: [
                mk(cin, fan_x, rng),
                mk(cin, fan_x, rng),
                mk(cin, fan_x, rng),
                mk(cin, fan_x, rng),
            ],
            w_h: [
                mk(h, fan_h, rng),
                mk(h, fan_h, rng),
                mk(h, fan_h, rng),
                mk(h, fan_h, rng),
            ],
            b: [
                uniform_init(&[h], fan_h, rng),
                uniform_init(&[h], fan_h, rng),
                uniform_init(&[h], fan_h, rng),
                uniform_init(&[h], fan_h, rng),
            ],
            paper_literal_cell: false,
        })
    }

    pub fn hidden(&self) -> usize {
        self.h
    }

    /// Leases all twelve parameter tensors; pass the result to every
    /// [`step`](Self::step) of one unrolled sequence.
    pub fn lease(&self, tape: &mut Tape) -> Vec<Var> {
        let mut out = Vec::with_capacity(12);
        for g in 0..4 {
            out.push(tape.leaf(self.w_x[g].clone()));
            out.push(tape.leaf(self.w_h[g].clone()));
            out.push(tape.leaf(self.b[g].clone()));
        }
        out
    }

    /// One recurrence step on frames `[B,C,h,w]` with states `[B,H,h,w]`.
    pub fn step(
        &self,
        tape: &mut Tape,
        leased: &[Var],
        x_t: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        if tape.shape(h_prev) != tape.shape(c_prev) {
            return Err(Error::Shape {
                op: "convlstm_step",
                detail: format!(
                    "hidden state {:?} vs cell state {:?}",
                    tape.shape(h_prev),
                    tape.shape(c_prev)
                ),
            });
        }
        let mut pre = [Var(0); 4];
        for g in 0..4 {
            let (wx, wh, b) = (leased[3 * g], leased[3 * g + 1], leased[3 * g + 2]);
            let zx = tape.conv2d(x_t, wx, Some(b), (1, 1, 1, 1))?;
            let zh = tape.conv2d(h_prev, wh, None, (1, 1, 1, 1))?;
            pre[g] = tape.add(zx, zh)?;
        }
        let i = tape.sigmoid(pre[0]);
        let f = tape.sigmoid(pre[1]);
        let g = tape.tanh(pre[2]);
        let o = tape.sigmoid(pre[3]);
        let keep = tape.mul(f, c_prev)?;
        let write = if self.paper_literal_cell {
            g
        } else {
            tape.mul(i, g)?
        };
        let c_t = tape.add(keep, write)?;
        let tc = tape.tanh(c_t);
        let h_t = tape.mul(o, tc)?;
        Ok((h_t, c_t))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(12);
        for g in 0..4 {
            out.push(&self.w_x[g]);
            out.push(&self.w_h[g]);
            out.push(&self.b[g]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(12);
        for (wx, (wh, b)) in self
            .w_x
            .iter_mut()
            .zip(self.w_h.iter_mut().zip(self.b.iter_mut()))
        {
            out.push(wx);
            out.push(wh);
            out.push(b);
        }
        out
    }

    /// `4·(9·H·C + 9·H² + H)`.
    pub fn count(&self) -> usize {
        4 * (9 * self.h * self.cin + 9 * self.h * self.h + self.h)
    }
}

// ---------------------------------------------------------------------------
// High-order graph convolution
// ---------------------------------------------------------------------------

/// Support masks `Ã^κ = min{A^κ + I, 1}` for hop orders `κ = 1..=k`,
/// stored as sparse coordinate lists in row-major order per hop.
#[derive(Clone, Debug)]
pub struct GraphStencil {
    s: usize,
    k: usize,
    orders: Vec<SparsePattern>,
    full: SparsePattern,
}

impl GraphStencil {
    /// Builds the stencil from a row-major `S x S` binary adjacency.
    pub fn from_adjacency(a: &[u8], s: usize, k: usize) -> Result<Self> {
        if a.len() != s * s {
            return Err(Error::Config(format!(
                "adjacency has {} entries, expected {}x{}",
                a.len(),
                s,
                s
            )));
        }
        if let Some(&v) = a.iter().find(|&&v| v > 1) {
            return Err(Error::Config(format!("adjacency must be binary, found entry {}", v)));
        }
        if k == 0 {
            return Err(Error::Config("hop order k must be positive".into()));
        }
        // Boolean matrix powers: walks of exactly length kappa.
        let mut power = a.to_vec();
        let mut orders = Vec::with_capacity(k);
        let mut full = Vec::new();
        for kappa in 0..k {
            if kappa > 0 {
                let mut next = vec![0u8; s * s];
                for i in 0..s {
                    for l in 0..s {
                        if power[i * s + l] == 1 {
                            for j in 0..s {
                                if a[l * s + j] == 1 {
                                    next[i * s + j] = 1;
                                }
                            }
                        }
                    }
                }
                power = next;
            }
            let mut entries = Vec::new();
            for i in 0..s {
                for j in 0..s {
                    if power[i * s + j] == 1 || i == j {
                        entries.push((i, j));
                    }
                }
            }
            full.extend_from_slice(&entries);
            orders.push(Arc::new(entries));
        }
        Ok(GraphStencil {
            s,
            k,
            orders,
            full: Arc::new(full),
        })
    }

    /// Identity adjacency: every `Ã^κ` is the identity (the agnostic
    /// configuration).
    pub fn identity(s: usize, k: usize) -> Result<Self> {
        GraphStencil::from_adjacency(&vec![0u8; s * s], s, k)
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Support of `Ã^κ` for `kappa` in `1..=k`.
    pub fn order(&self, kappa: usize) -> &SparsePattern {
        &self.orders[kappa - 1]
    }

    /// All orders concatenated, for packed multi-order weights.
    pub fn full(&self) -> &SparsePattern {
        &self.full
    }

    pub fn nnz_total(&self) -> usize {
        self.full.len()
    }

    /// `Ã^κ` as a dense binary matrix.
    pub fn a_tilde(&self, kappa: usize) -> Vec<u8> {
        let mut m = vec![0u8; self.s * self.s];
        for &(i, j) in self.order(kappa).iter() {
            m[i * self.s + j] = 1;
        }
        m
    }
}

/// Sum over hop orders of masked spatial mixing:
/// `out = sum_kappa (W_kappa o A~^kappa) X + B_kappa` on node-feature
/// matrices `[S,F]`, with one scalar weight per support entry and a bias per
/// node per order.
#[derive(Clone, Debug)]
pub struct GraphConvLayer {
    stencil: GraphStencil,
    w: Vec<Tensor>,
    b: Vec<Tensor>,
}

impl GraphConvLayer {
    pub fn new<R: Rng>(stencil: GraphStencil, rng: &mut R) -> Self {
        let s = stencil.s();
        // Fan-in per node is the max row occupancy of the union support.
        let mut row_occ = vec![0usize; s];
        for &(i, _) in stencil.full().iter() {
            row_occ[i] += 1;
        }
        let fan = row_occ.iter().copied().max().unwrap_or(1);
        let mut w = Vec::with_capacity(stencil.k());
        let mut b = Vec::with_capacity(stencil.k());
        for kappa in 1..=stencil.k() {
            let nnz = stencil.order(kappa).len();
            w.push(uniform_init(&[nnz], fan, rng));
            b.push(uniform_init(&[s], fan, rng));
        }
        GraphConvLayer { stencil, w, b }
    }

    pub fn stencil(&self) -> &GraphStencil {
        &self.stencil
    }

    /// `[S,F] -> [S,F]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let sh = tape.shape(x).to_vec();
        if sh.len() != 2 || sh[0] != self.stencil.s() {
            return Err(Error::Shape {
                op: "graph_conv",
                detail: format!(
                    "expected [{},F] node features, got {:?}",
                    self.stencil.s(),
                    sh
                ),
            });
        }
        let f = sh[1];
        let s = self.stencil.s();
        let xt = tape.transpose(x)?;
        let xr = tape.reshape(xt, &[f, 1, s])?;
        let mut acc: Option<Var> = None;
        let mut leased = Vec::with_capacity(2 * self.stencil.k());
        for kappa in 1..=self.stencil.k() {
            let pattern = self.stencil.order(kappa).clone();
            let wv = tape.leaf(self.w[kappa - 1].clone());
            let bv = tape.leaf(self.b[kappa - 1].clone());
            leased.push(wv);
            leased.push(bv);
            let wr = tape.reshape(wv, &[1, 1, pattern.len()])?;
            let y = tape.graph_conv(xr, wr, pattern)?;
            let br = tape.reshape(bv, &[1, s])?;
            let bb = tape.broadcast_batch(br, f)?;
            let yb = tape.add(y, bb)?;
            acc = Some(match acc {
                None => yb,
                Some(prev) => tape.add(prev, yb)?,
            });
        }
        let summed = acc.unwrap();
        let back = tape.reshape(summed, &[f, s])?;
        let out = tape.transpose(back)?;
        Ok((out, leased))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for kappa in 0..self.stencil.k() {
            out.push(&self.w[kappa]);
            out.push(&self.b[kappa]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter_mut().zip(self.b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn count(&self) -> usize {
        self.stencil.nnz_total() + self.stencil.k() * self.stencil.s()
    }
}

// ---------------------------------------------------------------------------
// Shared regressor head
// ---------------------------------------------------------------------------

/// Spatially local linear readout: flattens `[B,H,T,S]` to `[B,H·T,S]` and
/// applies a `T' x (H·T)` map independently at every column. Never mixes
/// space.
#[derive(Clone, Debug)]
pub struct RegressorHead {
    h: usize,
    t: usize,
    t_out: usize,
    w: Tensor,
    b: Tensor,
}

impl RegressorHead {
    pub fn new<R: Rng>(h: usize, t: usize, t_out: usize, rng: &mut R) -> Result<Self> {
        if h == 0 || t == 0 || t_out == 0 {
            return Err(Error::Config("regressor extents must be positive".into()));
        }
        let fan = h * t;
        Ok(RegressorHead {
            h,
            t,
            t_out,
            w: uniform_init(&[t_out, h * t], fan, rng),
            b: uniform_init(&[t_out], fan, rng),
        })
    }

    /// `[B,H,T,S] -> [B,T',S]`.
    pub fn forward(&self, tape: &mut Tape, latent: Var) -> Result<(Var, Vec<Var>)> {
        let sh = tape.shape(latent).to_vec();
        if sh.len() != 4 || sh[1] != self.h || sh[2] != self.t {
            return Err(Error::Shape {
                op: "regressor_forward",
                detail: format!(
                    "expected [B,{},{},S] latent, got {:?}",
                    self.h, self.t, sh
                ),
            });
        }
        let flat = tape.reshape(latent, &[sh[0], self.h * self.t, sh[3]])?;
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        let out = tape.linear_map(w, flat, Some(b))?;
        Ok((out, vec![w, b]))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }

    /// `H·T·T' + T'` (the bias is an addition over the weight-only count).
    pub fn count(&self) -> usize {
        self.h * self.t * self.t_out + self.t_out
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel normalization over batch and frame axes with learned scale
/// and shift. Running statistics (momentum 0.1) feed evaluation mode.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    c: usize,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            c,
            gamma: Tensor::filled(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: 0.1,
            eps: 1e-8,
        }
    }

    /// Normalizes `[B,C,..]`; `train` uses batch statistics and updates the
    /// running ones, eval uses the running statistics.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<(Var, Vec<Var>)> {
        let sh = tape.shape(x).to_vec();
        if sh.len() < 2 || sh[1] != self.c {
            return Err(Error::Shape {
                op: "batch_norm",
                detail: format!("expected [B,{},..] input, got {:?}", self.c, sh),
            });
        }
        let (mu, var) = if train {
            if sh[0] < 2 {
                return Err(Error::Config(
                    "batch_norm in train mode requires a batch of at least 2".into(),
                ));
            }
            let mu = tape.channel_mean(x)?;
            let mu_b = tape.broadcast_channel(mu, &sh)?;
            let centered = tape.sub(x, mu_b)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.channel_mean(sq)?;
            let m = self.momentum;
            for ci in 0..self.c {
                self.running_mean[ci] =
                    (1.0 - m) * self.running_mean[ci] + m * tape.value(mu).data()[ci];
                self.running_var[ci] =
                    (1.0 - m) * self.running_var[ci] + m * tape.value(var).data()[ci];
            }
            (mu, var)
        } else {
            let mu = tape.leaf(Tensor::from_vec(&[self.c], self.running_mean.clone())?);
            let var = tape.leaf(Tensor::from_vec(&[self.c], self.running_var.clone())?);
            (mu, var)
        };
        let mu_b = tape.broadcast_channel(mu, &sh)?;
        let centered = tape.sub(x, mu_b)?;
        let var_eps = tape.add_scalar(var, self.eps);
        let std = tape.sqrt(var_eps);
        let std_b = tape.broadcast_channel(std, &sh)?;
        let norm = tape.div(centered, std_b)?;
        let gv = tape.leaf(self.gamma.clone());
        let bv = tape.leaf(self.beta.clone());
        let g_b = tape.broadcast_channel(gv, &sh)?;
        let b_b = tape.broadcast_channel(bv, &sh)?;
        let scaled = tape.mul(norm, g_b)?;
        let out = tape.add(scaled, b_b)?;
        Ok((out, vec![gv, bv]))
    }

    /// Overwrites the running statistics (used by checkpoint restore and
    /// tests).
    pub fn set_running(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.c || var.len() != self.c {
            return Err(Error::Config("running-stat length mismatch".into()));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    pub fn running(&self) -> (&[f64], &[f64]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn count(&self) -> usize {
        2 * self.c
    }
}
