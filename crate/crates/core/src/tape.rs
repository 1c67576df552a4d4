//! Reverse-mode gradient tape over dense row-major matrices.
//!
//! Every op needed by the Point-BEV denoiser is a node on the tape: linear
//! layers, SiLU, residual adds, column concat, scatter-max into a BEV grid,
//! 3x3 same-padding convolution and bilinear gather. Parameters live outside
//! the tape in a [`ParamStore`]; `backward` accumulates into a matching
//! [`ParamGrads`].
//!
//! Row-parallel kernels split work into fixed-size blocks and reduce partial
//! sums in block order, so results do not depend on the number of threads.

use std::sync::Arc;

use rayon::prelude::*;

/// Rows per parallel work block.
const BLOCK_ROWS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = a * b` (+ `c` when `accumulate`), all row-major.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a * b^T` with `a: m x k`, `b: n x k`.
fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a^T * b` with `a: m x k`, `b: m x n`, `c: k x n`.
fn gemm_at_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-blocked `x * w`; each block is independent.
fn matmul_rows(x: &Tensor, w: &Tensor) -> Tensor {
    assert_eq!(x.cols, w.rows, "matmul inner dimension");
    let mut out = Tensor::zeros(x.rows, w.cols);
    let (k, n) = (x.cols, w.cols);
    out.data
        .par_chunks_mut(BLOCK_ROWS * n)
        .zip(x.data.par_chunks(BLOCK_ROWS * k))
        .for_each(|(o, xb)| gemm(xb.len() / k.max(1), k, n, xb, &w.data, o, false));
    out
}

/// Row-blocked `x * w^T`.
fn matmul_rows_bt(x: &Tensor, w: &Tensor) -> Tensor {
    assert_eq!(x.cols, w.cols, "matmul_bt inner dimension");
    let mut out = Tensor::zeros(x.rows, w.rows);
    let (k, n) = (x.cols, w.rows);
    out.data
        .par_chunks_mut(BLOCK_ROWS * n)
        .zip(x.data.par_chunks(BLOCK_ROWS * k))
        .for_each(|(o, xb)| gemm_bt(xb.len() / k.max(1), k, n, xb, &w.data, o));
    out
}

/// `x^T * g`, reduced over fixed row blocks in order.
fn matmul_at(x: &Tensor, g: &Tensor) -> Tensor {
    assert_eq!(x.rows, g.rows, "matmul_at outer dimension");
    let (k, n) = (x.cols, g.cols);
    let partials: Vec<Vec<f64>> = x
        .data
        .par_chunks(BLOCK_ROWS * k.max(1))
        .zip(g.data.par_chunks(BLOCK_ROWS * n.max(1)))
        .map(|(xb, gb)| {
            let mut c = vec![0.0; k * n];
            gemm_at_acc(xb.len() / k.max(1), k, n, xb, gb, &mut c);
            c
        })
        .collect();
    let mut out = Tensor::zeros(k, n);
    for p in partials {
        for (o, v) in out.data.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Trainable tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamGrads {
        ParamGrads {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Tensor>,
}

impl ParamGrads {
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Bilinear taps for one query: up to four (cell, weight) pairs.
pub type GatherTaps = Vec<(u32, f64)>;

#[derive(Debug)]
enum Op {
    Input,
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Silu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    ScatterMax {
        x: NodeId,
        /// Winning source row per (cell, channel); `u32::MAX` for empty cells.
        argmax: Vec<u32>,
    },
    Conv3x3 {
        x: NodeId,
        k: ParamId,
        b: ParamId,
        side: usize,
        /// im2col buffer kept for the kernel gradient.
        cols: Tensor,
    },
    Gather {
        grid: NodeId,
        taps: Arc<Vec<GatherTaps>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    /// `x W + b` with `W: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, params: &ParamStore, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let wt = &params.tensors[w.0];
        let bt = &params.tensors[b.0];
        let mut y = matmul_rows(self.value(x), wt);
        for r in 0..y.rows {
            for (v, bias) in y.data[r * y.cols..(r + 1) * y.cols].iter_mut().zip(&bt.data) {
                *v += bias;
            }
        }
        self.push(Op::Linear { x, w, b }, y)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let y = Tensor::from_vec(v.rows, v.cols, v.data.iter().map(|&a| silu(a)).collect());
        self.push(Op::Silu { x }, y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shapes");
        let y = Tensor::from_vec(va.rows, va.cols, va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect());
        self.push(Op::Add { a, b }, y)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut y = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let v = self.value(*p);
                assert_eq!(v.rows, rows, "concat rows");
                y.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
                off += v.cols;
            }
        }
        self.push(Op::Concat { parts: parts.to_vec() }, y)
    }

    /// Elementwise max of row features per cell; empty cells are zero.
    /// `cells[i] = None` drops row `i`. Ties keep the lowest row index.
    pub fn scatter_max(&mut self, x: NodeId, cells: &[Option<u32>], n_cells: usize) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.rows, cells.len(), "one cell slot per row");
        let c = v.cols;
        let mut out = Tensor::zeros(n_cells, c);
        let mut argmax = vec![u32::MAX; n_cells * c];
        for (i, cell) in cells.iter().enumerate() {
            let Some(cell) = cell else { continue };
            let base = *cell as usize * c;
            for (ch, &val) in v.row(i).iter().enumerate() {
                let slot = base + ch;
                if argmax[slot] == u32::MAX || val > out.data[slot] {
                    out.data[slot] = val;
                    argmax[slot] = i as u32;
                }
            }
        }
        self.push(Op::ScatterMax { x, argmax }, out)
    }

    /// 3x3 convolution, stride 1, zero padding, over a `side x side` grid
    /// stored as `(side*side) x c_in` with cell index `y * side + x`.
    /// Kernel `k` is `(9 * c_in) x c_out`, tap-major with tap `(dy+1)*3 + (dx+1)`.
    pub fn conv3x3(&mut self, params: &ParamStore, x: NodeId, k: ParamId, b: ParamId, side: usize) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.rows, side * side, "grid rows");
        let cin = v.cols;
        let cols = im2col(v, side);
        let kt = &params.tensors[k.0];
        assert_eq!(kt.rows, 9 * cin, "kernel rows");
        let mut y = matmul_rows(&cols, kt);
        let bt = &params.tensors[b.0];
        for r in 0..y.rows {
            for (val, bias) in y.data[r * y.cols..(r + 1) * y.cols].iter_mut().zip(&bt.data) {
                *val += bias;
            }
        }
        self.push(Op::Conv3x3 { x, k, b, side, cols }, y)
    }

    /// Weighted sum of grid rows per query.
    pub fn gather(&mut self, grid: NodeId, taps: Arc<Vec<GatherTaps>>) -> NodeId {
        let g = self.value(grid);
        let c = g.cols;
        let mut out = Tensor::zeros(taps.len(), c);
        out.data.par_chunks_mut(c.max(1)).zip(taps.par_iter()).for_each(|(o, t)| {
            for &(cell, w) in t {
                for (dst, src) in o.iter_mut().zip(g.row(cell as usize)) {
                    *dst += w * src;
                }
            }
        });
        self.push(Op::Gather { grid, taps }, out)
    }

    /// Propagates `seeds` (gradients of the scalar objective with respect to
    /// the given nodes) back through the tape.
    pub fn backward(&self, params: &ParamStore, seeds: Vec<(NodeId, Tensor)>) -> ParamGrads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            accumulate(&mut grads, id, g);
        }
        let mut pgrads = params.zeros_like();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    pgrads.tensors[w.0].add_assign(&matmul_at(xv, &g));
                    pgrads.tensors[b.0].add_assign(&column_sums(&g));
                    let dx = matmul_rows_bt(&g, &params.tensors[w.0]);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Silu { x } => {
                    let xv = self.value(*x);
                    let dx = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&xv.data).map(|(gv, a)| gv * silu_grad(*a)).collect(),
                    );
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        let mut dp = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            dp.data[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::ScatterMax { x, argmax } => {
                    let xv = self.value(*x);
                    let c = xv.cols;
                    let mut dx = Tensor::zeros(xv.rows, c);
                    for (slot, &src) in argmax.iter().enumerate() {
                        if src != u32::MAX {
                            dx.data[src as usize * c + slot % c] += g.data[slot];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Conv3x3 { x, k, b, side, cols } => {
                    pgrads.tensors[k.0].add_assign(&matmul_at(cols, &g));
                    pgrads.tensors[b.0].add_assign(&column_sums(&g));
                    let dcols = matmul_rows_bt(&g, &params.tensors[k.0]);
                    let cin = self.value(*x).cols;
                    accumulate(&mut grads, *x, col2im(&dcols, *side, cin));
                }
                Op::Gather { grid, taps } => {
                    let gv = self.value(*grid);
                    let c = gv.cols;
                    let mut dg = Tensor::zeros(gv.rows, c);
                    for (q, t) in taps.iter().enumerate() {
                        let src = g.row(q);
                        for &(cell, w) in t {
                            let dst = &mut dg.data[cell as usize * c..(cell as usize + 1) * c];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += w * s;
                            }
                        }
                    }
                    accumulate(&mut grads, *grid, dg);
                }
            }
        }
        pgrads
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn im2col(v: &Tensor, side: usize) -> Tensor {
    let cin = v.cols;
    let mut cols = Tensor::zeros(side * side, 9 * cin);
    cols.data.par_chunks_mut(9 * cin * side).enumerate().for_each(|(y, row_block)| {
        for x in 0..side {
            let dst_row = &mut row_block[x * 9 * cin..(x + 1) * 9 * cin];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= side as i64 || ny >= side as i64 {
                        continue;
                    }
                    let tap = ((dy + 1) * 3 + (dx + 1)) as usize;
                    let src = v.row(ny as usize * side + nx as usize);
                    dst_row[tap * cin..(tap + 1) * cin].copy_from_slice(src);
                }
            }
        }
    });
    cols
}

fn col2im(dcols: &Tensor, side: usize, cin: usize) -> Tensor {
    let mut dx = Tensor::zeros(side * side, cin);
    // gather form: each input cell sums the taps that read it
    dx.data.par_chunks_mut(cin * side).enumerate().for_each(|(y, row_block)| {
        for x in 0..side {
            let dst = &mut row_block[x * cin..(x + 1) * cin];
            for dy in -1i64..=1 {
                for dxo in -1i64..=1 {
                    // output cell (ox, oy) read input (x, y) through tap (-dxo, -dy)
                    let (ox, oy) = (x as i64 - dxo, y as i64 - dy);
                    if ox < 0 || oy < 0 || ox >= side as i64 || oy >= side as i64 {
                        continue;
                    }
                    let tap = ((dy + 1) * 3 + (dxo + 1)) as usize;
                    let src = &dcols.row(oy as usize * side + ox as usize)[tap * cin..(tap + 1) * cin];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    });
    dx
}
