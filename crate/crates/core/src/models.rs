//! The six forecasters: traditional CNN and ConvLSTM, their
//! location-agnostic counterparts, and the two graph-convolutional LSTMs.
//! All map a batch of T x S frames to T' x S forecasts through the shared
//! regressor head.

use crate::error::{Error, Result};
use crate::layers::{
    AgnosticConvBlock, BatchNorm, ConvLstmCell, GraphStencil, RegressorHead,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "A-CNN")]
    ACnn,
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "A-ConvLSTM")]
    AConvLstm,
    #[serde(rename = "ConvLSTM")]
    ConvLstm,
    #[serde(rename = "A-GCN-LSTM")]
    AGcnLstm,
    #[serde(rename = "GCN-LSTM")]
    GcnLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::ACnn,
        ModelKind::Cnn,
        ModelKind::AConvLstm,
        ModelKind::ConvLstm,
        ModelKind::AGcnLstm,
        ModelKind::GcnLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ACnn => "A-CNN",
            ModelKind::Cnn => "CNN",
            ModelKind::AConvLstm => "A-ConvLSTM",
            ModelKind::ConvLstm => "ConvLSTM",
            ModelKind::AGcnLstm => "A-GCN-LSTM",
            ModelKind::GcnLstm => "GCN-LSTM",
        }
    }

    /// Whether the model consumes no spatial ordering or adjacency.
    pub fn is_agnostic(self) -> bool {
        matches!(
            self,
            ModelKind::ACnn | ModelKind::AConvLstm | ModelKind::AGcnLstm
        )
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model kind '{}'", s)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Input window length.
    pub t: usize,
    /// Forecast horizon.
    pub t_out: usize,
    /// Number of spatial locations.
    pub s: usize,
    /// Hidden channels of the convolutional stage.
    pub h: usize,
    /// Lag count; A-CNN only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_past: Option<usize>,
    /// Hop order; GCN variants only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Row-major binary adjacency; GCN-LSTM only (A-GCN-LSTM uses the
    /// identity implicitly).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<u8>>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.t_out == 0 || self.s == 0 || self.h == 0 {
            return Err(Error::Config("model extents must be positive".into()));
        }
        match (self.kind, self.t_past) {
            (ModelKind::ACnn, None) => {
                return Err(Error::Config("A-CNN requires t_past".into()))
            }
            (ModelKind::ACnn, Some(p)) if p == 0 || p > self.t => {
                return Err(Error::Config(format!(
                    "t_past must be in 1..={}, got {}",
                    self.t, p
                )))
            }
            (k, Some(_)) if k != ModelKind::ACnn => {
                return Err(Error::Config(format!("{} does not take t_past", k)))
            }
            _ => {}
        }
        let graphish = matches!(self.kind, ModelKind::AGcnLstm | ModelKind::GcnLstm);
        match (graphish, self.k) {
            (true, None) => return Err(Error::Config(format!("{} requires k", self.kind))),
            (true, Some(0)) => return Err(Error::Config("hop order k must be positive".into())),
            (false, Some(_)) => {
                return Err(Error::Config(format!("{} does not take k", self.kind)))
            }
            _ => {}
        }
        match (self.kind, &self.adjacency) {
            (ModelKind::GcnLstm, None) => {
                return Err(Error::Config("GCN-LSTM requires an adjacency".into()))
            }
            (ModelKind::GcnLstm, Some(a)) => validate_adjacency(a, self.s)?,
            (_, Some(_)) => {
                return Err(Error::Config(format!(
                    "{} does not take an adjacency",
                    self.kind
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

fn validate_adjacency(a: &[u8], s: usize) -> Result<()> {
    if a.len() != s * s {
        return Err(Error::Config(format!(
            "adjacency has {} entries, expected {}",
            a.len(),
            s * s
        )));
    }
    for i in 0..s {
        if a[i * s + i] != 0 {
            return Err(Error::Config(format!("adjacency diagonal must be zero (node {})", i)));
        }
        for j in 0..s {
            let v = a[i * s + j];
            if v > 1 {
                return Err(Error::Config("adjacency must be binary".into()));
            }
            if v != a[j * s + i] {
                return Err(Error::Config(format!(
                    "adjacency must be symmetric (nodes {}, {})",
                    i, j
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Agnostic ConvLSTM cell
// ---------------------------------------------------------------------------

/// LSTM cell whose gate transitions are agnostic causal convolutions: a
/// full-width kernel compresses the frame to a channel column, the sum of
/// input and state contributions is then re-expanded through a learned row
/// kernel per gate.
#[derive(Clone, Debug)]
struct AgnosticLstmCell {
    h: usize,
    s: usize,
    // Gate order: input, forget, candidate, output.
    w_x: [Tensor; 4], // [H,1,1,S]
    w_h: [Tensor; 4], // [H,H,1,S]
    row: [Tensor; 4], // [H,S]
    b: [Tensor; 4],   // [H]
}

impl AgnosticLstmCell {
    fn new<R: Rng>(h: usize, s: usize, rng: &mut R) -> Self {
        let bound_x = 1.0 / (s as f64).sqrt();
        let bound_h = 1.0 / ((h * s) as f64).sqrt();
        let mk4 = |f: &mut dyn FnMut() -> Tensor| [f(), f(), f(), f()];
        AgnosticLstmCell {
            h,
            s,
            w_x: mk4(&mut || Tensor::uniform(&[h, 1, 1, s], bound_x, rng)),
            w_h: mk4(&mut || Tensor::uniform(&[h, h, 1, s], bound_h, rng)),
            row: mk4(&mut || Tensor::uniform(&[h, s], 1.0, rng)),
            b: mk4(&mut || Tensor::uniform(&[h], bound_h, rng)),
        }
    }

    fn lease(&self, tape: &mut Tape) -> Vec<Var> {
        let mut out = Vec::with_capacity(16);
        for g in 0..4 {
            out.push(tape.leaf(self.w_x[g].clone()));
            out.push(tape.leaf(self.w_h[g].clone()));
            out.push(tape.leaf(self.row[g].clone()));
            out.push(tape.leaf(self.b[g].clone()));
        }
        out
    }

    /// `x_t: [B,1,1,S]`, states `[B,H,1,S]`.
    fn step(
        &self,
        tape: &mut Tape,
        leased: &[Var],
        x_t: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let mut pre = [None; 4];
        for g in 0..4 {
            let (wx, wh, row, b) = (
                leased[4 * g],
                leased[4 * g + 1],
                leased[4 * g + 2],
                leased[4 * g + 3],
            );
            let zx = tape.conv2d(x_t, wx, None, (0, 0, 0, 0))?;
            let zh = tape.conv2d(h_prev, wh, None, (0, 0, 0, 0))?;
            let zc = tape.add(zx, zh)?; // [B,H,1,1]
            pre[g] = Some(tape.conv_transpose_row(zc, row, Some(b))?);
        }
        let i = tape.sigmoid(pre[0].unwrap());
        let f = tape.sigmoid(pre[1].unwrap());
        let g = tape.tanh(pre[2].unwrap());
        let o = tape.sigmoid(pre[3].unwrap());
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c_t = tape.add(keep, write)?;
        let tc = tape.tanh(c_t);
        let h_t = tape.mul(o, tc)?;
        Ok((h_t, c_t))
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(16);
        for g in 0..4 {
            out.push(&self.w_x[g]);
            out.push(&self.w_h[g]);
            out.push(&self.row[g]);
            out.push(&self.b[g]);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let AgnosticLstmCell { w_x, w_h, row, b, .. } = self;
        let mut v: Vec<&mut Tensor> = Vec::with_capacity(16);
        for (((wx, wh), r), bb) in w_x
            .iter_mut()
            .zip(w_h.iter_mut())
            .zip(row.iter_mut())
            .zip(b.iter_mut())
        {
            v.push(wx);
            v.push(wh);
            v.push(r);
            v.push(bb);
        }
        v
    }

    /// `4·(H·S + H²·S + H·S + H)`.
    fn count(&self) -> usize {
        4 * (self.h * self.s + self.h * self.h * self.s + self.h * self.s + self.h)
    }
}

// ---------------------------------------------------------------------------
// Graph-convolutional LSTM cell
// ---------------------------------------------------------------------------

/// LSTM cell whose gate transitions are high-order graph convolutions over a
/// fixed stencil, with one packed weight per support entry per channel pair
/// and a per-node bias.
#[derive(Clone, Debug)]
struct GraphLstmCell {
    stencil: GraphStencil,
    h: usize,
    w_x: [Tensor; 4], // [H,1,E]
    w_h: [Tensor; 4], // [H,H,E]
    b: [Tensor; 4],   // [H,S]
}

impl GraphLstmCell {
    /// `replicate` draws one value per (channel pair, hop order) and tiles it
    /// across nodes, so identity-stencil models start with every node
    /// identical.
    fn new<R: Rng>(stencil: GraphStencil, h: usize, replicate: bool, rng: &mut R) -> Self {
        let s = stencil.s();
        let e = stencil.nnz_total();
        let k = stencil.k();
        let bound_x = 1.0 / (k as f64).sqrt();
        let bound_h = 1.0 / ((h * k) as f64).sqrt();

        let packed = |cout: usize, cin: usize, bound: f64, rng: &mut R| -> Tensor {
            if !replicate {
                return Tensor::uniform(&[cout, cin, e], bound, rng);
            }
            // One draw per (co, ci, order), tiled across that order's entries.
            let mut data = vec![0.0; cout * cin * e];
            for co in 0..cout {
                for ci in 0..cin {
                    let mut off = 0;
                    for kappa in 1..=k {
                        let nnz = stencil.order(kappa).len();
                        let v = rng.gen_range(-bound..=bound);
                        for ei in 0..nnz {
                            data[(co * cin + ci) * e + off + ei] = v;
                        }
                        off += nnz;
                    }
                }
            }
            Tensor::from_vec(&[cout, cin, e], data).unwrap()
        };

        let w_x = [
            packed(h, 1, bound_x, rng),
            packed(h, 1, bound_x, rng),
            packed(h, 1, bound_x, rng),
            packed(h, 1, bound_x, rng),
        ];
        let w_h = [
            packed(h, h, bound_h, rng),
            packed(h, h, bound_h, rng),
            packed(h, h, bound_h, rng),
            packed(h, h, bound_h, rng),
        ];
        let bias = |rng: &mut R| -> Tensor {
            if !replicate {
                return Tensor::uniform(&[h, s], bound_h, rng);
            }
            let mut data = vec![0.0; h * s];
            for hi in 0..h {
                let v = rng.gen_range(-bound_h..=bound_h);
                data[hi * s..(hi + 1) * s].fill(v);
            }
            Tensor::from_vec(&[h, s], data).unwrap()
        };
        let b = [bias(rng), bias(rng), bias(rng), bias(rng)];
        GraphLstmCell {
            stencil,
            h,
            w_x,
            w_h,
            b,
        }
    }

    fn lease(&self, tape: &mut Tape) -> Vec<Var> {
        let mut out = Vec::with_capacity(12);
        for g in 0..4 {
            out.push(tape.leaf(self.w_x[g].clone()));
            out.push(tape.leaf(self.w_h[g].clone()));
            out.push(tape.leaf(self.b[g].clone()));
        }
        out
    }

    /// `x_t: [B,1,S]`, states `[B,H,S]`.
    fn step(
        &self,
        tape: &mut Tape,
        leased: &[Var],
        x_t: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let batch = tape.shape(x_t)[0];
        let mut pre = [None; 4];
        for g in 0..4 {
            let (wx, wh, b) = (leased[3 * g], leased[3 * g + 1], leased[3 * g + 2]);
            let zx = tape.graph_conv(x_t, wx, self.stencil.full().clone())?;
            let zh = tape.graph_conv(h_prev, wh, self.stencil.full().clone())?;
            let z = tape.add(zx, zh)?;
            let bb = tape.broadcast_batch(b, batch)?;
            pre[g] = Some(tape.add(z, bb)?);
        }
        let i = tape.sigmoid(pre[0].unwrap());
        let f = tape.sigmoid(pre[1].unwrap());
        let g = tape.tanh(pre[2].unwrap());
        let o = tape.sigmoid(pre[3].unwrap());
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c_t = tape.add(keep, write)?;
        let tc = tape.tanh(c_t);
        let h_t = tape.mul(o, tc)?;
        Ok((h_t, c_t))
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(12);
        for g in 0..4 {
            out.push(&self.w_x[g]);
            out.push(&self.w_h[g]);
            out.push(&self.b[g]);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let GraphLstmCell { w_x, w_h, b, .. } = self;
        let mut v: Vec<&mut Tensor> = Vec::with_capacity(12);
        for ((wx, wh), bb) in w_x.iter_mut().zip(w_h.iter_mut()).zip(b.iter_mut()) {
            v.push(wx);
            v.push(wh);
            v.push(bb);
        }
        v
    }

    /// `4·(H·E + H²·E + H·S)` with `E` the total stencil support size.
    fn count(&self) -> usize {
        let e = self.stencil.nnz_total();
        4 * (self.h * e + self.h * self.h * e + self.h * self.stencil.s())
    }
}

// ---------------------------------------------------------------------------
// Forecaster
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Stage {
    Cnn {
        w: Tensor,
        b: Tensor,
        bn: BatchNorm,
    },
    ACnn {
        block: AgnosticConvBlock,
        bn: BatchNorm,
    },
    ConvLstm(ConvLstmCell),
    AConvLstm(AgnosticLstmCell),
    GcnLstm(GraphLstmCell),
}

/// A built model: convolutional stage producing an `H x T x S` latent image
/// plus the shared regressor head.
#[derive(Clone, Debug)]
pub struct Forecaster {
    cfg: ModelConfig,
    stage: Stage,
    head: RegressorHead,
}

/// Exact trainable-scalar counts, split by stage.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub conv_stage: usize,
    pub head: usize,
}

impl ParamCount {
    pub fn total(self) -> usize {
        self.conv_stage + self.head
    }
}

pub fn build_model(cfg: &ModelConfig) -> Result<Forecaster> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stage = match cfg.kind {
        ModelKind::Cnn => {
            let fan = 9;
            Stage::Cnn {
                w: Tensor::uniform(&[cfg.h, 1, 3, 3], 1.0 / (fan as f64).sqrt(), &mut rng),
                b: Tensor::uniform(&[cfg.h], 1.0 / (fan as f64).sqrt(), &mut rng),
                bn: BatchNorm::new(cfg.h),
            }
        }
        ModelKind::ACnn => Stage::ACnn {
            block: AgnosticConvBlock::new(1, cfg.t_past.unwrap(), cfg.h, cfg.s, &mut rng)?,
            bn: BatchNorm::new(cfg.h),
        },
        ModelKind::ConvLstm => Stage::ConvLstm(ConvLstmCell::new(1, cfg.h, &mut rng)?),
        ModelKind::AConvLstm => Stage::AConvLstm(AgnosticLstmCell::new(cfg.h, cfg.s, &mut rng)),
        ModelKind::GcnLstm => {
            let stencil =
                GraphStencil::from_adjacency(cfg.adjacency.as_ref().unwrap(), cfg.s, cfg.k.unwrap())?;
            Stage::GcnLstm(GraphLstmCell::new(stencil, cfg.h, false, &mut rng))
        }
        ModelKind::AGcnLstm => {
            let stencil = GraphStencil::identity(cfg.s, cfg.k.unwrap())?;
            Stage::GcnLstm(GraphLstmCell::new(stencil, cfg.h, true, &mut rng))
        }
    };
    let head = RegressorHead::new(cfg.h, cfg.t, cfg.t_out, &mut rng)?;
    Ok(Forecaster {
        cfg: cfg.clone(),
        stage,
        head,
    })
}

impl Forecaster {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn kind(&self) -> ModelKind {
        self.cfg.kind
    }

    /// `[B,T,S] -> [B,T',S]`. Returns the output and the leased parameter
    /// handles in [`params`](Self::params) order.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<(Var, Vec<Var>)> {
        let sh = tape.shape(x).to_vec();
        if sh.len() != 3 || sh[1] != self.cfg.t || sh[2] != self.cfg.s {
            return Err(Error::Shape {
                op: "forecaster_forward",
                detail: format!(
                    "expected [B,{},{}] input, got {:?}",
                    self.cfg.t, self.cfg.s, sh
                ),
            });
        }
        let batch = sh[0];
        let (t, s, h) = (self.cfg.t, self.cfg.s, self.cfg.h);
        let img = tape.reshape(x, &[batch, 1, t, s])?;

        let (latent, mut leased) = match &mut self.stage {
            Stage::Cnn { w, b, bn } => {
                let wv = tape.leaf(w.clone());
                let bv = tape.leaf(b.clone());
                let conv = tape.conv2d(img, wv, Some(bv), (1, 1, 1, 1))?;
                let (normed, bn_vars) = bn.forward(tape, conv, train)?;
                let act = tape.relu(normed);
                let mut vars = vec![wv, bv];
                vars.extend(bn_vars);
                (act, vars)
            }
            Stage::ACnn { block, bn } => {
                let (conv, mut vars) = block.forward(tape, img)?;
                let (normed, bn_vars) = bn.forward(tape, conv, train)?;
                let act = tape.relu(normed);
                vars.extend(bn_vars);
                (act, vars)
            }
            Stage::ConvLstm(cell) => {
                let vars = cell.lease(tape);
                let mut hs = tape.leaf(Tensor::zeros(&[batch, h, 1, s]));
                let mut cs = tape.leaf(Tensor::zeros(&[batch, h, 1, s]));
                let mut frames = Vec::with_capacity(t);
                for ti in 0..t {
                    let x_t = tape.slice(img, 2, ti, 1)?;
                    let (hn, cn) = cell.step(tape, &vars, x_t, hs, cs)?;
                    hs = hn;
                    cs = cn;
                    frames.push(hn);
                }
                let lat = tape.concat(2, &frames)?;
                (tape.relu(lat), vars)
            }
            Stage::AConvLstm(cell) => {
                let vars = cell.lease(tape);
                let mut hs = tape.leaf(Tensor::zeros(&[batch, h, 1, s]));
                let mut cs = tape.leaf(Tensor::zeros(&[batch, h, 1, s]));
                let mut frames = Vec::with_capacity(t);
                for ti in 0..t {
                    let x_t = tape.slice(img, 2, ti, 1)?;
                    let (hn, cn) = cell.step(tape, &vars, x_t, hs, cs)?;
                    hs = hn;
                    cs = cn;
                    frames.push(hn);
                }
                let lat = tape.concat(2, &frames)?;
                (tape.relu(lat), vars)
            }
            Stage::GcnLstm(cell) => {
                let vars = cell.lease(tape);
                let mut hs = tape.leaf(Tensor::zeros(&[batch, h, s]));
                let mut cs = tape.leaf(Tensor::zeros(&[batch, h, s]));
                let mut frames = Vec::with_capacity(t);
                for ti in 0..t {
                    let x_row = tape.slice(img, 2, ti, 1)?;
                    let x_t = tape.reshape(x_row, &[batch, 1, s])?;
                    let (hn, cn) = cell.step(tape, &vars, x_t, hs, cs)?;
                    hs = hn;
                    cs = cn;
                    let frame = tape.reshape(hn, &[batch, h, 1, s])?;
                    frames.push(frame);
                }
                let lat = tape.concat(2, &frames)?;
                (tape.relu(lat), vars)
            }
        };

        let (out, head_vars) = self.head.forward(tape, latent)?;
        leased.extend(head_vars);
        Ok((out, leased))
    }

    /// Convenience inference: eval-mode forward returning a plain tensor.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (y, _) = self.forward(&mut tape, xv, false)?;
        Ok(tape.value(y).clone())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = match &self.stage {
            Stage::Cnn { w, b, bn } => {
                let mut v = vec![w, b];
                v.extend(bn.params());
                v
            }
            Stage::ACnn { block, bn } => {
                let mut v = block.params();
                v.extend(bn.params());
                v
            }
            Stage::ConvLstm(cell) => cell.params(),
            Stage::AConvLstm(cell) => cell.params(),
            Stage::GcnLstm(cell) => cell.params(),
        };
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Forecaster { stage, head, .. } = self;
        let mut out: Vec<&mut Tensor> = match stage {
            Stage::Cnn { w, b, bn } => {
                let mut v: Vec<&mut Tensor> = vec![w, b];
                v.extend(bn.params_mut());
                v
            }
            Stage::ACnn { block, bn } => {
                let mut v = block.params_mut();
                v.extend(bn.params_mut());
                v
            }
            Stage::ConvLstm(cell) => cell.params_mut(),
            Stage::AConvLstm(cell) => cell.params_mut(),
            Stage::GcnLstm(cell) => cell.params_mut(),
        };
        out.extend(head.params_mut());
        out
    }

    /// Batch-norm running statistics, when the architecture has one.
    pub fn batch_norm(&self) -> Option<&BatchNorm> {
        match &self.stage {
            Stage::Cnn { bn, .. } | Stage::ACnn { bn, .. } => Some(bn),
            _ => None,
        }
    }

    pub fn batch_norm_mut(&mut self) -> Option<&mut BatchNorm> {
        match &mut self.stage {
            Stage::Cnn { bn, .. } | Stage::ACnn { bn, .. } => Some(bn),
            _ => None,
        }
    }
}

pub fn count_parameters(f: &Forecaster) -> ParamCount {
    let conv_stage = match &f.stage {
        Stage::Cnn { w, b, bn } => w.len() + b.len() + bn.count(),
        Stage::ACnn { block, bn } => block.count() + bn.count(),
        Stage::ConvLstm(cell) => cell.count(),
        Stage::AConvLstm(cell) => cell.count(),
        Stage::GcnLstm(cell) => cell.count(),
    };
    ParamCount {
        conv_stage,
        head: f.head.count(),
    }
}

/// Analytic total count for a hypothetical hidden width, without building.
pub fn count_for(cfg: &ModelConfig, h: usize) -> Result<usize> {
    let (t, tp, s) = (cfg.t, cfg.t_out, cfg.s);
    let conv = match cfg.kind {
        ModelKind::Cnn => h * 10 + 2 * h,
        ModelKind::ACnn => {
            let p = cfg
                .t_past
                .ok_or_else(|| Error::Config("A-CNN requires t_past".into()))?;
            h * (p * s + 1) + h * (s + 1) + 2 * h
        }
        ModelKind::ConvLstm => 4 * (9 * h + 9 * h * h + h),
        ModelKind::AConvLstm => 4 * (h * s + h * h * s + h * s + h),
        ModelKind::AGcnLstm | ModelKind::GcnLstm => {
            let k = cfg.k.ok_or_else(|| Error::Config("GCN variants require k".into()))?;
            let e = match cfg.kind {
                ModelKind::AGcnLstm => k * s,
                _ => {
                    let a = cfg
                        .adjacency
                        .as_ref()
                        .ok_or_else(|| Error::Config("GCN-LSTM requires an adjacency".into()))?;
                    GraphStencil::from_adjacency(a, s, k)?.nnz_total()
                }
            };
            4 * (h * e + h * h * e + h * s)
        }
    };
    Ok(conv + h * t * tp + tp)
}

/// Largest hidden width whose total parameter count stays at or below
/// `target_params`.
pub fn match_hidden_width(target_params: usize, cfg: &ModelConfig) -> Result<ModelConfig> {
    let min = count_for(cfg, 1)?;
    if target_params < min {
        return Err(Error::Config(format!(
            "target {} below the minimum {} for {}",
            target_params, min, cfg.kind
        )));
    }
    let mut h = 1;
    while count_for(cfg, h + 1)? <= target_params {
        h += 1;
    }
    let mut out = cfg.clone();
    out.h = h;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    epoch: usize,
    param_lens: Vec<usize>,
    /// Batch-norm running statistics (mean, then variance), when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn_running: Option<(Vec<f64>, Vec<f64>)>,
}

/// Writes a flat checkpoint: length-prefixed JSON header followed by the
/// little-endian f64 weight payload in declaration order.
pub fn save_checkpoint(f: &Forecaster, epoch: usize, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: 1,
        config: f.cfg.clone(),
        epoch,
        param_lens: f.params().iter().map(|p| p.len()).collect(),
        bn_running: f
            .batch_norm()
            .map(|bn| (bn.running().0.to_vec(), bn.running().1.to_vec())),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = std::fs::File::create(path)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for p in f.params() {
        for v in p.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Rebuilds a forecaster from a checkpoint; returns it with the stored
/// epoch.
pub fn load_checkpoint(path: &Path) -> Result<(Forecaster, usize)> {
    let mut file = std::fs::File::open(path)?;
    let mut len_buf = [0u8; 8];
    file.read_exact(&mut len_buf)?;
    let json_len = u64::from_le_bytes(len_buf) as usize;
    let mut json = vec![0u8; json_len];
    file.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.version != 1 {
        return Err(Error::Serde(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut model = build_model(&header.config)?;
    {
        let mut params = model.params_mut();
        if params.len() != header.param_lens.len() {
            return Err(Error::Serde("checkpoint parameter list mismatch".into()));
        }
        let mut buf = [0u8; 8];
        for (p, &want) in params.iter_mut().zip(&header.param_lens) {
            if p.len() != want {
                return Err(Error::Serde("checkpoint parameter length mismatch".into()));
            }
            for v in p.data_mut() {
                file.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
    }
    if let Some((mean, var)) = header.bn_running {
        let bn = model
            .batch_norm_mut()
            .ok_or_else(|| Error::Serde("checkpoint has running stats but model has no batch norm".into()))?;
        bn.set_running(mean, var)?;
    }
    Ok((model, header.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg(kind: ModelKind) -> ModelConfig {
        let mut cfg = ModelConfig {
            kind,
            t: 4,
            t_out: 2,
            s: 5,
            h: 3,
            t_past: None,
            k: None,
            adjacency: None,
            seed: 9,
        };
        match kind {
            ModelKind::ACnn => cfg.t_past = Some(3),
            ModelKind::AGcnLstm => cfg.k = Some(3),
            ModelKind::GcnLstm => {
                cfg.k = Some(3);
                // 5-cycle.
                let s = 5;
                let mut a = vec![0u8; s * s];
                for i in 0..s {
                    let j = (i + 1) % s;
                    a[i * s + j] = 1;
                    a[j * s + i] = 1;
                }
                cfg.adjacency = Some(a);
            }
            _ => {}
        }
        cfg
    }

    #[test]
    fn shape_contract_cnn() {
        let mut cfg = base_cfg(ModelKind::Cnn);
        cfg.t = 6;
        cfg.s = 8;
        cfg.h = 4;
        cfg.t_out = 2;
        let mut model = build_model(&cfg).unwrap();
        let x = Tensor::zeros(&[3, 6, 8]);
        let y = model.predict(&x).unwrap();
        assert_eq!(y.shape(), &[3, 2, 8]);
    }

    #[test]
    fn all_kinds_finite_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in ModelKind::ALL {
            let cfg = base_cfg(kind);
            let mut model = build_model(&cfg).unwrap();
            let x = Tensor::uniform(&[2, 4, 5], 3.0, &mut rng);
            let y = model.predict(&x).unwrap();
            assert_eq!(y.shape(), &[2, 2, 5], "{kind}");
            assert!(y.all_finite(), "{kind}");
        }
    }

    #[test]
    fn count_matches_enumeration_all_kinds() {
        for kind in ModelKind::ALL {
            let cfg = base_cfg(kind);
            let model = build_model(&cfg).unwrap();
            let count = count_parameters(&model);
            let enumerated: usize = model.params().iter().map(|p| p.len()).sum();
            assert_eq!(count.total(), enumerated, "{kind}");
            assert_eq!(count.total(), count_for(&cfg, cfg.h).unwrap(), "{kind}");
        }
    }

    #[test]
    fn config_field_combinations_rejected() {
        let mut cfg = base_cfg(ModelKind::Cnn);
        cfg.t_past = Some(2);
        assert!(build_model(&cfg).is_err());

        let mut cfg = base_cfg(ModelKind::ACnn);
        cfg.t_past = None;
        assert!(build_model(&cfg).is_err());

        let mut cfg = base_cfg(ModelKind::GcnLstm);
        cfg.k = None;
        assert!(build_model(&cfg).is_err());

        let mut cfg = base_cfg(ModelKind::GcnLstm);
        cfg.adjacency = None;
        assert!(build_model(&cfg).is_err());

        let mut cfg = base_cfg(ModelKind::AGcnLstm);
        cfg.adjacency = Some(vec![0u8; 25]);
        assert!(build_model(&cfg).is_err());

        // Asymmetric adjacency.
        let mut cfg = base_cfg(ModelKind::GcnLstm);
        let a = cfg.adjacency.as_mut().unwrap();
        a[1] = 0;
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = base_cfg(ModelKind::AConvLstm);
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn match_hidden_width_exact_and_minimum() {
        let cfg = base_cfg(ModelKind::Cnn);
        // Exactly achievable target.
        let want_h = 4;
        let target = count_for(&cfg, want_h).unwrap();
        let out = match_hidden_width(target, &cfg).unwrap();
        assert_eq!(out.h, want_h);
        // Target at minimum.
        let min = count_for(&cfg, 1).unwrap();
        assert_eq!(match_hidden_width(min, &cfg).unwrap().h, 1);
        // Below minimum errors.
        assert!(match_hidden_width(min - 1, &cfg).is_err());
    }

    #[test]
    fn match_hidden_width_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for kind in ModelKind::ALL {
            let cfg = base_cfg(kind);
            for _ in 0..10 {
                let target = rng.gen_range(count_for(&cfg, 1).unwrap()..3000);
                let out = match_hidden_width(target, &cfg).unwrap();
                let got = count_for(&cfg, out.h).unwrap();
                assert!(got <= target, "{kind}: {got} > {target}");
                assert!(
                    count_for(&cfg, out.h + 1).unwrap() > target,
                    "{kind}: H not maximal for target {target}"
                );
            }
        }
    }
}
