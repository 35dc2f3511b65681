//! Differentiable layer primitives with hand-derived backward passes.
//!
//! The model zoo is small and fixed, so there is no tape: each layer saves
//! what its backward pass needs during `forward`, and `backward` returns the
//! parameter gradients plus the gradient with respect to the layer input.
//! Batch gradients are sums over batch elements.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::StreamRng;
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Forward mode: training (dropout active) or evaluation (dropout identity).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter gradients keyed by parameter id, in a deterministic order.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn new() -> Self {
        Gradients::default()
    }

    /// Accumulates `grad` into the slot for `id`.
    pub fn accumulate(&mut self, id: &str, grad: Matrix) {
        match self.map.get_mut(id) {
            Some(g) => g.add_assign(&grad),
            None => {
                self.map.insert(id.to_string(), grad);
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<&Matrix> {
        self.map.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Sum of squared entries over all parameter tensors.
    pub fn sq_norm(&self) -> f64 {
        self.map.values().map(|m| m.sq_norm()).sum()
    }

    /// Sum of squared entries over ids selected by `keep`.
    pub fn sq_norm_filtered(&self, keep: impl Fn(&str) -> bool) -> f64 {
        self.map
            .iter()
            .filter(|(id, _)| keep(id))
            .map(|(_, m)| m.sq_norm())
            .sum()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for m in self.map.values_mut() {
            for v in m.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.accumulate(id, g.clone());
        }
    }

    /// Flattens selected tensors into one vector (deterministic id order).
    pub fn flatten_filtered(&self, keep: impl Fn(&str) -> bool) -> Vec<f64> {
        let mut out = Vec::new();
        for (id, m) in self.map.iter() {
            if keep(id) {
                out.extend_from_slice(m.data());
            }
        }
        out
    }
}

/// Affine map `y = x W + b` with `W`: in x out, `b`: 1 x out.
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Matrix,
    pub b: Matrix,
}

impl Affine {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut StreamRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut w = Matrix::zeros(fan_in, fan_out);
        for v in w.data_mut() {
            *v = rng.uniform(-bound, bound);
        }
        let mut b = Matrix::zeros(1, fan_out);
        for v in b.data_mut() {
            *v = rng.uniform(-bound, bound);
        }
        Affine { w, b }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Affine {
            w: Matrix::zeros(fan_in, fan_out),
            b: Matrix::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.w.rows() {
            return Err(Error::Shape {
                op: "affine forward",
                left: x.shape(),
                right: self.w.shape(),
            });
        }
        x.matmul(&self.w)?.add_row_broadcast(&self.b)
    }

    /// Returns (dW, db, dx) for upstream gradient `up`.
    pub fn backward(&self, x: &Matrix, up: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let dw = x.matmul_tn(up)?;
        let db = up.col_sums();
        let dx = up.matmul_nt(&self.w)?;
        Ok((dw, db, dx))
    }
}

/// Per-feature affine: `n_blocks` independent affines applied to consecutive
/// column slices, outputs concatenated. Used by the numerical embedders.
#[derive(Debug, Clone)]
pub struct BlockAffine {
    pub blocks: Vec<Affine>,
    pub in_per: usize,
    pub out_per: usize,
}

impl BlockAffine {
    pub fn init(n_blocks: usize, in_per: usize, out_per: usize, rng: &mut StreamRng) -> Self {
        let blocks = (0..n_blocks)
            .map(|_| Affine::init(in_per, out_per, rng))
            .collect();
        BlockAffine {
            blocks,
            in_per,
            out_per,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.blocks.len() * self.in_per
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.len() * self.out_per
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape {
                op: "block affine forward",
                left: x.shape(),
                right: (self.in_dim(), self.out_dim()),
            });
        }
        let widths = vec![self.in_per; self.blocks.len()];
        let inputs = x.split_cols(&widths);
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (blk, xin) in self.blocks.iter().zip(&inputs) {
            outs.push(blk.forward(xin)?);
        }
        let refs: Vec<&Matrix> = outs.iter().collect();
        Ok(Matrix::hconcat(&refs))
    }

    /// Returns per-block (dW, db) pairs and dx.
    pub fn backward(
        &self,
        x: &Matrix,
        up: &Matrix,
    ) -> Result<(Vec<(Matrix, Matrix)>, Matrix)> {
        let in_widths = vec![self.in_per; self.blocks.len()];
        let out_widths = vec![self.out_per; self.blocks.len()];
        let inputs = x.split_cols(&in_widths);
        let ups = up.split_cols(&out_widths);
        let mut param_grads = Vec::with_capacity(self.blocks.len());
        let mut dxs = Vec::with_capacity(self.blocks.len());
        for ((blk, xin), u) in self.blocks.iter().zip(&inputs).zip(&ups) {
            let (dw, db, dx) = blk.backward(xin, u)?;
            param_grads.push((dw, db));
            dxs.push(dx);
        }
        let refs: Vec<&Matrix> = dxs.iter().collect();
        Ok((param_grads, Matrix::hconcat(&refs)))
    }
}

/// Periodic feature encoding with trainable frequencies.
///
/// For feature `j` with coefficients `c_j` in R^k the scalar `x` maps to
/// `[cos(2 pi c_j1 x) .. cos(2 pi c_jk x), sin(..) .. sin(..)]`, so the
/// output width is `d * 2k`.
#[derive(Debug, Clone)]
pub struct Periodic {
    /// d x k trainable coefficients.
    pub coeff: Matrix,
}

impl Periodic {
    pub fn init(d: usize, k: usize, sigma: f64, rng: &mut StreamRng) -> Self {
        let mut coeff = Matrix::zeros(d, k);
        for v in coeff.data_mut() {
            *v = sigma * rng.normal();
        }
        Periodic { coeff }
    }

    pub fn n_features(&self) -> usize {
        self.coeff.rows()
    }

    pub fn n_coeffs(&self) -> usize {
        self.coeff.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.n_features() * 2 * self.n_coeffs()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let (d, k) = self.coeff.shape();
        if x.cols() != d {
            return Err(Error::Shape {
                op: "periodic forward",
                left: x.shape(),
                right: (d, k),
            });
        }
        let mut out = Matrix::zeros(x.rows(), d * 2 * k);
        for i in 0..x.rows() {
            let xi = x.row(i);
            let dst = out.row_mut(i);
            for j in 0..d {
                let base = j * 2 * k;
                for t in 0..k {
                    let theta = 2.0 * PI * self.coeff.get(j, t) * xi[j];
                    dst[base + t] = theta.cos();
                    dst[base + k + t] = theta.sin();
                }
            }
        }
        Ok(out)
    }

    /// Returns (dcoeff, dx).
    pub fn backward(&self, x: &Matrix, up: &Matrix) -> Result<(Matrix, Matrix)> {
        let (d, k) = self.coeff.shape();
        if up.cols() != d * 2 * k || up.rows() != x.rows() {
            return Err(Error::Shape {
                op: "periodic backward",
                left: up.shape(),
                right: (x.rows(), d * 2 * k),
            });
        }
        let mut dc = Matrix::zeros(d, k);
        let mut dx = Matrix::zeros(x.rows(), d);
        for i in 0..x.rows() {
            let xi = x.row(i);
            let u = up.row(i);
            for j in 0..d {
                let base = j * 2 * k;
                let mut dxj = 0.0;
                for t in 0..k {
                    let c = self.coeff.get(j, t);
                    let theta = 2.0 * PI * c * xi[j];
                    let (sin_t, cos_t) = theta.sin_cos();
                    // d cos = -sin * 2 pi x ; d sin = cos * 2 pi x (w.r.t. c)
                    let common = -u[base + t] * sin_t + u[base + k + t] * cos_t;
                    dc.set(j, t, dc.get(j, t) + common * 2.0 * PI * xi[j]);
                    dxj += common * 2.0 * PI * c;
                }
                dx.set(i, j, dxj);
            }
        }
        Ok((dc, dx))
    }
}

/// A layer of the sequential container.
#[derive(Debug, Clone)]
pub enum Layer {
    Affine(Affine),
    BlockAffine(BlockAffine),
    Relu,
    Dropout(f64),
    Periodic(Periodic),
    /// Averages the k branch-major row blocks: (k*b) x w -> b x w.
    MeanOverBranches { branches: usize },
}

/// Activations saved by a forward call, consumed by the matching backward.
#[derive(Debug, Clone)]
pub enum Saved {
    Affine { input: Matrix },
    BlockAffine { input: Matrix },
    Relu { input: Matrix },
    Dropout { mask: Option<Matrix> },
    Periodic { input: Matrix },
    MeanOverBranches { in_rows: usize },
}

/// Gradients produced by one layer: local parameter grads plus input grad.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    /// (local parameter key, gradient), e.g. ("w", dW).
    pub params: Vec<(String, Matrix)>,
    pub input: Matrix,
}

/// Runs one layer forward, returning the output and saved activations.
///
/// Dropout in train mode draws its mask from `rng`; in eval mode it is the
/// identity and consumes no randomness. A rate of zero also consumes none.
pub fn forward_layer(
    layer: &Layer,
    input: &Matrix,
    mode: Mode,
    rng: Option<&mut StreamRng>,
) -> Result<(Matrix, Saved)> {
    match layer {
        Layer::Affine(a) => {
            let out = a.forward(input)?;
            Ok((out, Saved::Affine { input: input.clone() }))
        }
        Layer::BlockAffine(a) => {
            let out = a.forward(input)?;
            Ok((out, Saved::BlockAffine { input: input.clone() }))
        }
        Layer::Relu => {
            let out = input.map(|v| if v > 0.0 { v } else { 0.0 });
            Ok((out, Saved::Relu { input: input.clone() }))
        }
        Layer::Dropout(rate) => {
            if mode == Mode::Eval || *rate == 0.0 {
                return Ok((input.clone(), Saved::Dropout { mask: None }));
            }
            let rng = rng.ok_or_else(|| {
                Error::Usage("dropout in train mode needs an rng stream".into())
            })?;
            let keep = 1.0 - rate;
            let mut mask = Matrix::zeros(input.rows(), input.cols());
            for v in mask.data_mut() {
                *v = if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 };
            }
            let out = input.hadamard(&mask)?;
            Ok((out, Saved::Dropout { mask: Some(mask) }))
        }
        Layer::Periodic(p) => {
            let out = p.forward(input)?;
            Ok((out, Saved::Periodic { input: input.clone() }))
        }
        Layer::MeanOverBranches { branches } => {
            let k = *branches;
            if input.rows() % k != 0 {
                return Err(Error::Shape {
                    op: "mean over branches",
                    left: input.shape(),
                    right: (k, 0),
                });
            }
            let b = input.rows() / k;
            let mut out = Matrix::zeros(b, input.cols());
            for br in 0..k {
                for i in 0..b {
                    let src = input.row(br * b + i);
                    let dst = out.row_mut(i);
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v / k as f64;
                    }
                }
            }
            Ok((out, Saved::MeanOverBranches { in_rows: input.rows() }))
        }
    }
}

/// Runs one layer backward from saved activations.
pub fn backward_layer(layer: &Layer, saved: &Saved, upstream: &Matrix) -> Result<LayerGrad> {
    match (layer, saved) {
        (Layer::Affine(a), Saved::Affine { input }) => {
            let (dw, db, dx) = a.backward(input, upstream)?;
            Ok(LayerGrad {
                params: vec![("w".into(), dw), ("b".into(), db)],
                input: dx,
            })
        }
        (Layer::BlockAffine(a), Saved::BlockAffine { input }) => {
            let (per_block, dx) = a.backward(input, upstream)?;
            let mut params = Vec::with_capacity(per_block.len() * 2);
            for (i, (dw, db)) in per_block.into_iter().enumerate() {
                params.push((format!("f{i}.w"), dw));
                params.push((format!("f{i}.b"), db));
            }
            Ok(LayerGrad { params, input: dx })
        }
        (Layer::Relu, Saved::Relu { input }) => {
            let mut dx = upstream.clone();
            for (g, &v) in dx.data_mut().iter_mut().zip(input.data()) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
            Ok(LayerGrad { params: vec![], input: dx })
        }
        (Layer::Dropout(_), Saved::Dropout { mask }) => {
            let dx = match mask {
                Some(m) => upstream.hadamard(m)?,
                None => upstream.clone(),
            };
            Ok(LayerGrad { params: vec![], input: dx })
        }
        (Layer::Periodic(p), Saved::Periodic { input }) => {
            let (dc, dx) = p.backward(input, upstream)?;
            Ok(LayerGrad {
                params: vec![("c".into(), dc)],
                input: dx,
            })
        }
        (Layer::MeanOverBranches { branches }, Saved::MeanOverBranches { in_rows }) => {
            let k = *branches;
            let b = in_rows / k;
            if upstream.rows() != b {
                return Err(Error::Shape {
                    op: "mean over branches backward",
                    left: upstream.shape(),
                    right: (b, upstream.cols()),
                });
            }
            let mut dx = Matrix::zeros(*in_rows, upstream.cols());
            for br in 0..k {
                for i in 0..b {
                    let src = upstream.row(i);
                    let dst = dx.row_mut(br * b + i);
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = v / k as f64;
                    }
                }
            }
            Ok(LayerGrad { params: vec![], input: dx })
        }
        _ => Err(Error::Usage(
            "saved activations do not match the layer they were produced by".into(),
        )),
    }
}

/// A plain sequential chain of layers with stable parameter ids `l<i>.<key>`.
#[derive(Debug, Clone)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Saved activations plus output of a sequential forward pass.
#[derive(Debug, Clone)]
pub struct SeqTrace {
    pub saved: Vec<Saved>,
    pub output: Matrix,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(
        &self,
        x: &Matrix,
        mode: Mode,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<SeqTrace> {
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (out, s) = forward_layer(layer, &cur, mode, rng.as_deref_mut())?;
            saved.push(s);
            cur = out;
        }
        Ok(SeqTrace { saved, output: cur })
    }

    /// Backpropagates `upstream` through the chain, accumulating parameter
    /// gradients under `prefix` and returning the input gradient.
    pub fn backward(
        &self,
        trace: &SeqTrace,
        upstream: &Matrix,
        prefix: &str,
        grads: &mut Gradients,
    ) -> Result<Matrix> {
        if trace.saved.len() != self.layers.len() {
            return Err(Error::Usage("trace does not match this chain".into()));
        }
        let mut up = upstream.clone();
        for (i, (layer, saved)) in self.layers.iter().zip(&trace.saved).enumerate().rev() {
            let lg = backward_layer(layer, saved, &up)?;
            for (key, g) in lg.params {
                grads.accumulate(&format!("{prefix}l{i}.{key}"), g);
            }
            up = lg.input;
        }
        Ok(up)
    }

    pub fn visit_params(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut Matrix),
    ) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Affine(a) => {
                    f(&format!("{prefix}l{i}.w"), &mut a.w);
                    f(&format!("{prefix}l{i}.b"), &mut a.b);
                }
                Layer::BlockAffine(ba) => {
                    for (j, blk) in ba.blocks.iter_mut().enumerate() {
                        f(&format!("{prefix}l{i}.f{j}.w"), &mut blk.w);
                        f(&format!("{prefix}l{i}.f{j}.b"), &mut blk.b);
                    }
                }
                Layer::Periodic(p) => f(&format!("{prefix}l{i}.c"), &mut p.coeff),
                Layer::Relu | Layer::Dropout(_) | Layer::MeanOverBranches { .. } => {}
            }
        }
    }

    /// Output width of the chain for a given input width, when static.
    pub fn out_width(&self, mut w: usize) -> usize {
        for layer in &self.layers {
            w = match layer {
                Layer::Affine(a) => a.out_dim(),
                Layer::BlockAffine(b) => b.out_dim(),
                Layer::Periodic(p) => p.out_dim(),
                Layer::Relu | Layer::Dropout(_) | Layer::MeanOverBranches { .. } => w,
            };
        }
        w
    }
}
