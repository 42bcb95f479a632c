//! Wengert-style gradient tape: reverse-mode differentiation for the fixed
//! networks in this crate.
//!
//! Operations are recorded in forward order and executed eagerly through the
//! same kernels the eager [`Tensor`](crate::tensor::Tensor) API uses, so a
//! taped forward pass is bit-identical to the eager one. Backward replays the
//! op list in reverse, accumulating exactly one gradient per buffer. A tape is
//! single-owner; buffers are SSA (each written by exactly one op), which lets
//! backward move gradients instead of cloning them.
//!
//! Leaves can be overwritten with [`GradTape::set_leaf`] and the whole graph
//! recomputed with [`GradTape::replay`]; replay reproduces recorded outputs
//! bit-exactly for unchanged leaves. This is how per-timestep tuning reruns
//! the same graph under updated parameters without re-recording it.

use crate::error::{Error, Result};
use crate::tensor::{
    matmul_kernel, matmul_nt_kernel, matmul_nt_slice, matmul_slice, matmul_tn_kernel,
    matmul_tn_slice, mse_kernel, sigmoid, silu_kernel, softmax_rows_kernel, Real, Tensor,
    PAR_FLOPS,
};
use std::sync::Arc;

/// Run `f(i, chunk_i)` over disjoint `chunk`-sized windows of `out`, in
/// parallel when the total work justifies it. Each window is written by one
/// task only, so the result is schedule-independent.
fn for_each_batch<T: Real>(
    out: &mut [T],
    chunk: usize,
    work_per_item: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    let bt = out.len() / chunk;
    if bt > 1 && bt * work_per_item >= PAR_FLOPS {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

fn bat_matmul_data<T: Real>(a: &[T], b: &[T], bt: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; bt * m * n];
    for_each_batch(&mut out, m * n, m * k * n, |i, c| {
        matmul_slice(&a[i * m * k..(i + 1) * m * k], &b[i * k * n..(i + 1) * k * n], m, k, n, c)
    });
    out
}

fn bat_matmul_nt_data<T: Real>(a: &[T], b: &[T], bt: usize, m: usize, d: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; bt * m * n];
    for_each_batch(&mut out, m * n, m * d * n, |i, c| {
        matmul_nt_slice(&a[i * m * d..(i + 1) * m * d], &b[i * n * d..(i + 1) * n * d], m, d, n, c)
    });
    out
}

pub type BufId = usize;

const LN_EPS: f64 = 1e-5;

struct Buf<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    leaf: bool,
}

#[derive(Clone)]
enum Op<T> {
    /// `[m,k] @ [k,n]`; any leading batch folded into `m` by the caller.
    Matmul { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    /// Per-batch `[b,m,k] @ [b,k,n]`.
    BatMatmul { a: BufId, b: BufId, out: BufId, bt: usize, m: usize, k: usize, n: usize },
    /// Per-batch `[b,m,d] @ [b,n,d]ᵀ`.
    BatMatmulNT { a: BufId, b: BufId, out: BufId, bt: usize, m: usize, d: usize, n: usize },
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    ScaleConst { x: BufId, c: T, out: BufId },
    /// `out = s * x` where `s` is a `[1]` buffer (a trainable scalar).
    MulScalar { x: BufId, s: BufId, out: BufId },
    /// `x: [rows,n] + bias: [n]` broadcast over rows.
    AddBiasRow { x: BufId, bias: BufId, out: BufId, rows: usize, n: usize },
    /// `x: [b,m,n] + rows: [b,n]`, one row vector per batch element.
    AddPerBatchRow { x: BufId, rows: BufId, out: BufId, bt: usize, m: usize, n: usize },
    /// `x: [b,m,n] + y: [m,n]` broadcast over the batch dim.
    AddBroadcast0 { x: BufId, y: BufId, out: BufId, bt: usize, chunk: usize },
    SoftmaxRows { x: BufId, out: BufId, rows: usize, n: usize },
    LayerNorm { x: BufId, gamma: BufId, beta: BufId, out: BufId, rows: usize, n: usize, aux: usize },
    Silu { x: BufId, out: BufId },
    /// Row lookup into a `[vocab,d]` table; backward scatter-adds.
    GatherRows { table: BufId, idx: Arc<Vec<usize>>, out: BufId, d: usize },
    /// Bijective per-batch index map: `out[b*chunk_out+i] = x[b*chunk_in+map[i]]`.
    Permute { x: BufId, map: Arc<Vec<usize>>, out: BufId, bt: usize, chunk_in: usize, chunk_out: usize },
    /// Column slice of a row-folded `[rows,n]` view.
    SliceCols { x: BufId, out: BufId, rows: usize, n: usize, start: usize, len: usize },
    /// Column concatenation of row-folded parts with widths `widths`.
    ConcatCols { parts: Vec<BufId>, out: BufId, rows: usize, widths: Vec<usize> },
    Mse { a: BufId, b: BufId, out: BufId },
    Sum { x: BufId, out: BufId },
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a buffer; zeros if the loss never touched it.
    pub fn get(&self, id: BufId) -> Vec<T> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![T::ZERO; self.sizes[id]],
        }
    }

    pub fn get_scalar(&self, id: BufId) -> T {
        self.grads[id].as_ref().map_or(T::ZERO, |g| g[0])
    }
}

/// Recorded operation graph over tensors plus the trainable-parameter set.
pub struct GradTape<T: Real> {
    bufs: Vec<Buf<T>>,
    ops: Vec<Op<T>>,
    aux: Vec<Vec<T>>,
    trainable: Vec<BufId>,
}

impl<T: Real> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        Self { bufs: Vec::new(), ops: Vec::new(), aux: Vec::new(), trainable: Vec::new() }
    }

    fn alloc(&mut self, data: Vec<T>, shape: Vec<usize>, leaf: bool) -> BufId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = self.bufs.len();
        self.bufs.push(Buf { data, shape, leaf });
        id
    }

    /// Register a trainable leaf (its gradient is produced by backward).
    pub fn param(&mut self, t: &Tensor<T>) -> BufId {
        let id = self.alloc(t.data().to_vec(), t.shape().to_vec(), true);
        self.trainable.push(id);
        id
    }

    /// Register a frozen leaf.
    pub fn constant(&mut self, t: &Tensor<T>) -> BufId {
        self.alloc(t.data().to_vec(), t.shape().to_vec(), true)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<T>) -> BufId {
        self.alloc(data, shape, true)
    }

    pub fn trainables(&self) -> &[BufId] {
        &self.trainable
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn data(&self, id: BufId) -> &[T] {
        &self.bufs[id].data
    }

    pub fn value(&self, id: BufId) -> Tensor<T> {
        Tensor::new(self.bufs[id].shape.clone(), self.bufs[id].data.clone())
            .expect("tape buffer is a valid tensor")
    }

    pub fn scalar_value(&self, id: BufId) -> T {
        self.bufs[id].data[0]
    }

    /// Overwrite a leaf buffer in place (same length), for replay.
    pub fn set_leaf(&mut self, id: BufId, data: &[T]) {
        assert!(self.bufs[id].leaf, "set_leaf on a non-leaf buffer");
        assert_eq!(self.bufs[id].data.len(), data.len(), "set_leaf length mismatch");
        self.bufs[id].data.copy_from_slice(data);
    }

    // ── Recording ────────────────────────────────────────────────

    fn rows_cols(&self, id: BufId) -> (usize, usize) {
        let s = &self.bufs[id].shape;
        let n = *s.last().expect("non-scalar shape");
        (self.bufs[id].data.len() / n, n)
    }

    pub fn matmul(&mut self, a: BufId, b: BufId) -> BufId {
        let (m, k) = self.rows_cols(a);
        let bs = &self.bufs[b].shape;
        assert_eq!(bs.len(), 2, "matmul rhs must be 2-D");
        let (k2, n) = (bs[0], bs[1]);
        assert_eq!(k, k2, "matmul inner extents");
        let data = matmul_kernel(&self.bufs[a].data, &self.bufs[b].data, m, k, n);
        let mut shape = self.bufs[a].shape.clone();
        *shape.last_mut().unwrap() = n;
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        out
    }

    pub fn bat_matmul(&mut self, a: BufId, b: BufId) -> BufId {
        let (sa, sb) = (&self.bufs[a].shape, &self.bufs[b].shape);
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1]);
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let data = bat_matmul_data(&self.bufs[a].data, &self.bufs[b].data, bt, m, k, n);
        let out = self.alloc(data, vec![bt, m, n], false);
        self.ops.push(Op::BatMatmul { a, b, out, bt, m, k, n });
        out
    }

    pub fn bat_matmul_nt(&mut self, a: BufId, b: BufId) -> BufId {
        let (sa, sb) = (&self.bufs[a].shape, &self.bufs[b].shape);
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2]);
        let (bt, m, d, n) = (sa[0], sa[1], sa[2], sb[1]);
        let data = bat_matmul_nt_data(&self.bufs[a].data, &self.bufs[b].data, bt, m, d, n);
        let out = self.alloc(data, vec![bt, m, n], false);
        self.ops.push(Op::BatMatmulNT { a, b, out, bt, m, d, n });
        out
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.bufs[a].shape, self.bufs[b].shape, "add shape mismatch");
        let data: Vec<T> =
            self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(&x, &y)| x + y).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.bufs[a].shape, self.bufs[b].shape, "sub shape mismatch");
        let data: Vec<T> =
            self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(&x, &y)| x - y).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::Sub { a, b, out });
        out
    }

    pub fn scale_const(&mut self, x: BufId, c: T) -> BufId {
        let data: Vec<T> = self.bufs[x].data.iter().map(|&v| v * c).collect();
        let shape = self.bufs[x].shape.clone();
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::ScaleConst { x, c, out });
        out
    }

    pub fn mul_scalar(&mut self, x: BufId, s: BufId) -> BufId {
        assert_eq!(self.bufs[s].data.len(), 1, "mul_scalar expects a [1] scalar buffer");
        let sv = self.bufs[s].data[0];
        let data: Vec<T> = self.bufs[x].data.iter().map(|&v| sv * v).collect();
        let shape = self.bufs[x].shape.clone();
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::MulScalar { x, s, out });
        out
    }

    pub fn add_bias_row(&mut self, x: BufId, bias: BufId) -> BufId {
        let (rows, n) = self.rows_cols(x);
        assert_eq!(self.bufs[bias].data.len(), n, "bias width");
        let mut data = self.bufs[x].data.clone();
        for r in 0..rows {
            for (v, &b) in data[r * n..(r + 1) * n].iter_mut().zip(&self.bufs[bias].data) {
                *v += b;
            }
        }
        let shape = self.bufs[x].shape.clone();
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::AddBiasRow { x, bias, out, rows, n });
        out
    }

    pub fn add_per_batch_row(&mut self, x: BufId, rows_buf: BufId) -> BufId {
        let s = self.bufs[x].shape.clone();
        assert_eq!(s.len(), 3);
        let (bt, m, n) = (s[0], s[1], s[2]);
        assert_eq!(self.bufs[rows_buf].data.len(), bt * n, "per-batch row size");
        let mut data = self.bufs[x].data.clone();
        for b in 0..bt {
            let row = &self.bufs[rows_buf].data[b * n..(b + 1) * n];
            for i in 0..m {
                let base = (b * m + i) * n;
                for (v, &rv) in data[base..base + n].iter_mut().zip(row) {
                    *v += rv;
                }
            }
        }
        let out = self.alloc(data, s, false);
        self.ops.push(Op::AddPerBatchRow { x, rows: rows_buf, out, bt, m, n });
        out
    }

    pub fn add_broadcast0(&mut self, x: BufId, y: BufId) -> BufId {
        let s = self.bufs[x].shape.clone();
        let chunk: usize = s[1..].iter().product();
        assert_eq!(self.bufs[y].data.len(), chunk, "broadcast operand size");
        let bt = s[0];
        let mut data = self.bufs[x].data.clone();
        for b in 0..bt {
            for (v, &yv) in data[b * chunk..(b + 1) * chunk].iter_mut().zip(&self.bufs[y].data) {
                *v += yv;
            }
        }
        let out = self.alloc(data, s, false);
        self.ops.push(Op::AddBroadcast0 { x, y, out, bt, chunk });
        out
    }

    pub fn softmax_rows(&mut self, x: BufId) -> BufId {
        let (rows, n) = self.rows_cols(x);
        let mut data = self.bufs[x].data.clone();
        softmax_rows_kernel(&mut data, rows, n);
        let shape = self.bufs[x].shape.clone();
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::SoftmaxRows { x, out, rows, n });
        out
    }

    pub fn layer_norm(&mut self, x: BufId, gamma: BufId, beta: BufId) -> BufId {
        let (rows, n) = self.rows_cols(x);
        assert_eq!(self.bufs[gamma].data.len(), n);
        assert_eq!(self.bufs[beta].data.len(), n);
        let aux_idx = self.aux.len();
        self.aux.push(Vec::new());
        let data = layer_norm_forward(
            &self.bufs[x].data,
            &self.bufs[gamma].data,
            &self.bufs[beta].data,
            rows,
            n,
            &mut self.aux[aux_idx],
        );
        let shape = self.bufs[x].shape.clone();
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::LayerNorm { x, gamma, beta, out, rows, n, aux: aux_idx });
        out
    }

    pub fn silu(&mut self, x: BufId) -> BufId {
        let data = crate::tensor::map_kernel(&self.bufs[x].data, silu_kernel);
        let shape = self.bufs[x].shape.clone();
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::Silu { x, out });
        out
    }

    pub fn gather_rows(&mut self, table: BufId, idx: Arc<Vec<usize>>, out_shape: Vec<usize>) -> BufId {
        let d = *self.bufs[table].shape.last().unwrap();
        let vocab = self.bufs[table].data.len() / d;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            assert!(i < vocab, "gather index out of vocab");
            data.extend_from_slice(&self.bufs[table].data[i * d..(i + 1) * d]);
        }
        debug_assert_eq!(out_shape.iter().product::<usize>(), data.len());
        let out = self.alloc(data, out_shape, false);
        self.ops.push(Op::GatherRows { table, idx, out, d });
        out
    }

    pub fn permute(&mut self, x: BufId, map: Arc<Vec<usize>>, out_chunk_shape: &[usize]) -> BufId {
        let s = &self.bufs[x].shape;
        let bt = s[0];
        let chunk_in: usize = s[1..].iter().product();
        let chunk_out: usize = out_chunk_shape.iter().product();
        assert_eq!(map.len(), chunk_out, "permute map length");
        let mut data = Vec::with_capacity(bt * chunk_out);
        for b in 0..bt {
            let src = &self.bufs[x].data[b * chunk_in..(b + 1) * chunk_in];
            data.extend(map.iter().map(|&i| src[i]));
        }
        let mut shape = vec![bt];
        shape.extend_from_slice(out_chunk_shape);
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::Permute { x, map, out, bt, chunk_in, chunk_out });
        out
    }

    pub fn slice_cols(&mut self, x: BufId, start: usize, len: usize) -> BufId {
        let (rows, n) = self.rows_cols(x);
        assert!(start + len <= n, "column slice out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.bufs[x].data[r * n + start..r * n + start + len]);
        }
        let mut shape = self.bufs[x].shape.clone();
        *shape.last_mut().unwrap() = len;
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::SliceCols { x, out, rows, n, start, len });
        out
    }

    pub fn concat_cols(&mut self, parts: &[BufId]) -> BufId {
        assert!(!parts.is_empty());
        let rows = self.rows_cols(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
        for &p in parts {
            assert_eq!(self.rows_cols(p).0, rows, "concat_cols row mismatch");
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * n);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.bufs[p].data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = self.bufs[parts[0]].shape.clone();
        *shape.last_mut().unwrap() = n;
        let out = self.alloc(data, shape, false);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out, rows, widths });
        out
    }

    pub fn mse(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.bufs[a].shape, self.bufs[b].shape, "mse shape mismatch");
        let v = mse_kernel(&self.bufs[a].data, &self.bufs[b].data);
        let out = self.alloc(vec![v], vec![1], false);
        self.ops.push(Op::Mse { a, b, out });
        out
    }

    pub fn sum(&mut self, x: BufId) -> BufId {
        let mut acc = T::ZERO;
        for &v in &self.bufs[x].data {
            acc += v;
        }
        let out = self.alloc(vec![acc], vec![1], false);
        self.ops.push(Op::Sum { x, out });
        out
    }

    // ── Replay ───────────────────────────────────────────────────

    /// Recompute every non-leaf buffer from the recorded ops, in order.
    pub fn replay(&mut self) {
        for i in 0..self.ops.len() {
            let op = self.ops[i].clone();
            self.execute(&op);
        }
    }

    fn execute(&mut self, op: &Op<T>) {
        match *op {
            Op::Matmul { a, b, out, m, k, n } => {
                self.bufs[out].data = matmul_kernel(&self.bufs[a].data, &self.bufs[b].data, m, k, n);
            }
            Op::BatMatmul { a, b, out, bt, m, k, n } => {
                self.bufs[out].data = bat_matmul_data(&self.bufs[a].data, &self.bufs[b].data, bt, m, k, n);
            }
            Op::BatMatmulNT { a, b, out, bt, m, d, n } => {
                self.bufs[out].data = bat_matmul_nt_data(&self.bufs[a].data, &self.bufs[b].data, bt, m, d, n);
            }
            Op::Add { a, b, out } => {
                self.bufs[out].data =
                    self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(&x, &y)| x + y).collect();
            }
            Op::Sub { a, b, out } => {
                self.bufs[out].data =
                    self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(&x, &y)| x - y).collect();
            }
            Op::ScaleConst { x, c, out } => {
                self.bufs[out].data = self.bufs[x].data.iter().map(|&v| v * c).collect();
            }
            Op::MulScalar { x, s, out } => {
                let sv = self.bufs[s].data[0];
                self.bufs[out].data = self.bufs[x].data.iter().map(|&v| sv * v).collect();
            }
            Op::AddBiasRow { x, bias, out, rows, n } => {
                let mut data = self.bufs[x].data.clone();
                for r in 0..rows {
                    for (v, &b) in data[r * n..(r + 1) * n].iter_mut().zip(&self.bufs[bias].data) {
                        *v += b;
                    }
                }
                self.bufs[out].data = data;
            }
            Op::AddPerBatchRow { x, rows, out, bt, m, n } => {
                let mut data = self.bufs[x].data.clone();
                for b in 0..bt {
                    let row = &self.bufs[rows].data[b * n..(b + 1) * n];
                    for i in 0..m {
                        let base = (b * m + i) * n;
                        for (v, &rv) in data[base..base + n].iter_mut().zip(row) {
                            *v += rv;
                        }
                    }
                }
                self.bufs[out].data = data;
            }
            Op::AddBroadcast0 { x, y, out, bt, chunk } => {
                let mut data = self.bufs[x].data.clone();
                for b in 0..bt {
                    for (v, &yv) in
                        data[b * chunk..(b + 1) * chunk].iter_mut().zip(&self.bufs[y].data)
                    {
                        *v += yv;
                    }
                }
                self.bufs[out].data = data;
            }
            Op::SoftmaxRows { x, out, rows, n } => {
                let mut data = self.bufs[x].data.clone();
                softmax_rows_kernel(&mut data, rows, n);
                self.bufs[out].data = data;
            }
            Op::LayerNorm { x, gamma, beta, out, rows, n, aux } => {
                let mut aux_vec = std::mem::take(&mut self.aux[aux]);
                self.bufs[out].data = layer_norm_forward(
                    &self.bufs[x].data,
                    &self.bufs[gamma].data,
                    &self.bufs[beta].data,
                    rows,
                    n,
                    &mut aux_vec,
                );
                self.aux[aux] = aux_vec;
            }
            Op::Silu { x, out } => {
                self.bufs[out].data = crate::tensor::map_kernel(&self.bufs[x].data, silu_kernel);
            }
            Op::GatherRows { table, ref idx, out, d } => {
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx.iter() {
                    data.extend_from_slice(&self.bufs[table].data[i * d..(i + 1) * d]);
                }
                self.bufs[out].data = data;
            }
            Op::Permute { x, ref map, out, bt, chunk_in, chunk_out } => {
                let mut data = Vec::with_capacity(bt * chunk_out);
                for b in 0..bt {
                    let src = &self.bufs[x].data[b * chunk_in..(b + 1) * chunk_in];
                    data.extend(map.iter().map(|&i| src[i]));
                }
                self.bufs[out].data = data;
            }
            Op::SliceCols { x, out, rows, n, start, len } => {
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&self.bufs[x].data[r * n + start..r * n + start + len]);
                }
                self.bufs[out].data = data;
            }
            Op::ConcatCols { ref parts, out, rows, ref widths } => {
                let n: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * n);
                for r in 0..rows {
                    for (&p, &w) in parts.iter().zip(widths) {
                        data.extend_from_slice(&self.bufs[p].data[r * w..(r + 1) * w]);
                    }
                }
                self.bufs[out].data = data;
            }
            Op::Mse { a, b, out } => {
                self.bufs[out].data = vec![mse_kernel(&self.bufs[a].data, &self.bufs[b].data)];
            }
            Op::Sum { x, out } => {
                let mut acc = T::ZERO;
                for &v in &self.bufs[x].data {
                    acc += v;
                }
                self.bufs[out].data = vec![acc];
            }
        }
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss w.r.t. every buffer that
    /// feeds it. Trainables the loss never touched get zeros on readout.
    pub fn backward(&self, loss: BufId) -> Result<Gradients<T>> {
        if loss >= self.bufs.len() {
            return Err(Error::Tape(format!("loss handle {loss} is not on this tape")));
        }
        if self.bufs[loss].data.len() != 1 {
            return Err(Error::Tape("loss must be a scalar output".into()));
        }
        if self.bufs[loss].leaf {
            return Err(Error::Tape("loss is a leaf, not a recorded output".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.bufs.len()).map(|_| None).collect();
        grads[loss] = Some(vec![T::ONE]);

        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        let sizes = self.bufs.iter().map(|b| b.data.len()).collect();
        Ok(Gradients { grads, sizes })
    }

    fn accum(grads: &mut [Option<Vec<T>>], id: BufId, contrib: impl Iterator<Item = T>) {
        match &mut grads[id] {
            Some(g) => {
                for (slot, c) in g.iter_mut().zip(contrib) {
                    *slot += c;
                }
            }
            None => unreachable!("accumulator must be sized before use"),
        }
    }

    fn ensure(&self, grads: &mut [Option<Vec<T>>], id: BufId) {
        if grads[id].is_none() {
            grads[id] = Some(vec![T::ZERO; self.bufs[id].data.len()]);
        }
    }

    fn backward_op(&self, op: &Op<T>, grads: &mut [Option<Vec<T>>]) {
        // Output gradients are final by the time their producing op is
        // visited (reverse order + SSA), so they can be moved out.
        match *op {
            Op::Matmul { a, b, out, m, k, n } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, a);
                self.ensure(grads, b);
                let da = matmul_nt_kernel(&go, &self.bufs[b].data, m, n, k);
                Self::accum(grads, a, da.into_iter());
                let db = matmul_tn_kernel(&self.bufs[a].data, &go, m, k, n);
                Self::accum(grads, b, db.into_iter());
            }
            Op::BatMatmul { a, b, out, bt, m, k, n } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, a);
                self.ensure(grads, b);
                // da[i] = go_i · b_iᵀ ; db[i] = a_iᵀ · go_i
                let bd = &self.bufs[b].data;
                let mut da = vec![T::ZERO; bt * m * k];
                for_each_batch(&mut da, m * k, m * n * k, |i, c| {
                    matmul_nt_slice(&go[i * m * n..(i + 1) * m * n], &bd[i * k * n..(i + 1) * k * n], m, n, k, c)
                });
                Self::accum(grads, a, da.into_iter());
                let ad = &self.bufs[a].data;
                let mut db = vec![T::ZERO; bt * k * n];
                for_each_batch(&mut db, k * n, m * k * n, |i, c| {
                    matmul_tn_slice(&ad[i * m * k..(i + 1) * m * k], &go[i * m * n..(i + 1) * m * n], m, k, n, c)
                });
                Self::accum(grads, b, db.into_iter());
            }
            Op::BatMatmulNT { a, b, out, bt, m, d, n } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, a);
                self.ensure(grads, b);
                // out = a·bᵀ ⇒ da[i] = go_i·b_i ; db[i] = go_iᵀ·a_i
                let bd = &self.bufs[b].data;
                let mut da = vec![T::ZERO; bt * m * d];
                for_each_batch(&mut da, m * d, m * n * d, |i, c| {
                    matmul_slice(&go[i * m * n..(i + 1) * m * n], &bd[i * n * d..(i + 1) * n * d], m, n, d, c)
                });
                Self::accum(grads, a, da.into_iter());
                let ad = &self.bufs[a].data;
                let mut db = vec![T::ZERO; bt * n * d];
                for_each_batch(&mut db, n * d, m * n * d, |i, c| {
                    matmul_tn_slice(&go[i * m * n..(i + 1) * m * n], &ad[i * m * d..(i + 1) * m * d], m, n, d, c)
                });
                Self::accum(grads, b, db.into_iter());
            }
            Op::Add { a, b, out } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, a);
                self.ensure(grads, b);
                Self::accum(grads, a, go.iter().copied());
                Self::accum(grads, b, go.into_iter());
            }
            Op::Sub { a, b, out } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, a);
                self.ensure(grads, b);
                Self::accum(grads, a, go.iter().copied());
                Self::accum(grads, b, go.into_iter().map(|g| -g));
            }
            Op::ScaleConst { x, c, out } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, x);
                Self::accum(grads, x, go.into_iter().map(|g| g * c));
            }
            Op::MulScalar { x, s, out } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, x);
                self.ensure(grads, s);
                let sv = self.bufs[s].data[0];
                let mut ds = T::ZERO;
                for (&g, &xv) in go.iter().zip(&self.bufs[x].data) {
                    ds += g * xv;
                }
                Self::accum(grads, s, std::iter::once(ds));
                Self::accum(grads, x, go.into_iter().map(|g| g * sv));
            }
            Op::AddBiasRow { x, bias, out, rows, n } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, x);
                self.ensure(grads, bias);
                {
                    let gb = grads[bias].as_mut().unwrap();
                    for r in 0..rows {
                        for (slot, &g) in gb.iter_mut().zip(&go[r * n..(r + 1) * n]) {
                            *slot += g;
                        }
                    }
                }
                Self::accum(grads, x, go.into_iter());
            }
            Op::AddPerBatchRow { x, rows: rv, out, bt, m, n } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, x);
                self.ensure(grads, rv);
                {
                    let gr = grads[rv].as_mut().unwrap();
                    for b in 0..bt {
                        for i in 0..m {
                            let base = (b * m + i) * n;
                            for (slot, &g) in
                                gr[b * n..(b + 1) * n].iter_mut().zip(&go[base..base + n])
                            {
                                *slot += g;
                            }
                        }
                    }
                }
                Self::accum(grads, x, go.into_iter());
            }
            Op::AddBroadcast0 { x, y, out, bt, chunk } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, x);
                self.ensure(grads, y);
                {
                    let gy = grads[y].as_mut().unwrap();
                    for b in 0..bt {
                        for (slot, &g) in gy.iter_mut().zip(&go[b * chunk..(b + 1) * chunk]) {
                            *slot += g;
                        }
                    }
                }
                Self::accum(grads, x, go.into_iter());
            }
            Op::SoftmaxRows { x, out, rows, n } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, x);
                let y = &self.bufs[out].data;
                let gx = grads[x].as_mut().unwrap();
                let row_grad = |(gx_row, (yr, gr)): (&mut [T], (&[T], &[T]))| {
                    let mut dot = T::ZERO;
                    for (&g, &yv) in gr.iter().zip(yr) {
                        dot += g * yv;
                    }
                    for ((slot, &g), &yv) in gx_row.iter_mut().zip(gr).zip(yr) {
                        *slot += yv * (g - dot);
                    }
                };
                if rows > 1 && rows * n >= 1 << 15 {
                    use rayon::prelude::*;
                    gx.par_chunks_mut(n)
                        .zip(y.par_chunks(n).zip(go.par_chunks(n)))
                        .for_each(row_grad);
                } else {
                    for triple in gx.chunks_mut(n).zip(y.chunks(n).zip(go.chunks(n))) {
                        row_grad(triple);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, out, rows, n, aux } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, x);
                self.ensure(grads, gamma);
                self.ensure(grads, beta);
                let aux_vec = &self.aux[aux];
                let (mus, inv_stds) = aux_vec.split_at(rows);
                let xs = &self.bufs[x].data;
                let gam = &self.bufs[gamma].data;
                let inv_n = T::from_f64(1.0 / n as f64);
                // dβ and dγ reduce across rows: keep that sequential.
                {
                    let gb = grads[beta].as_mut().unwrap();
                    for gr in go.chunks(n) {
                        for (slot, &g) in gb.iter_mut().zip(gr) {
                            *slot += g;
                        }
                    }
                }
                {
                    let gg = grads[gamma].as_mut().unwrap();
                    for (r, gr) in go.chunks(n).enumerate() {
                        let (mu, inv_std) = (mus[r], inv_stds[r]);
                        let xr = &xs[r * n..(r + 1) * n];
                        for ((slot, &g), &xv) in gg.iter_mut().zip(gr).zip(xr) {
                            *slot += g * ((xv - mu) * inv_std);
                        }
                    }
                }
                // dx = inv_std · (h − mean(h) − x̂ · mean(h ⊙ x̂)), h = g ⊙ γ;
                // row-local, so rows can run in parallel.
                let gx = grads[x].as_mut().unwrap();
                let row_grad = |(r, (gx_row, gr)): (usize, (&mut [T], &[T]))| {
                    let (mu, inv_std) = (mus[r], inv_stds[r]);
                    let xr = &xs[r * n..(r + 1) * n];
                    let mut mean_h = T::ZERO;
                    let mut mean_hx = T::ZERO;
                    for ((&g, &gm), &xv) in gr.iter().zip(gam).zip(xr) {
                        let h = g * gm;
                        mean_h += h;
                        mean_hx += h * ((xv - mu) * inv_std);
                    }
                    mean_h = mean_h * inv_n;
                    mean_hx = mean_hx * inv_n;
                    for ((slot, (&g, &gm)), &xv) in
                        gx_row.iter_mut().zip(gr.iter().zip(gam)).zip(xr)
                    {
                        let xhat = (xv - mu) * inv_std;
                        *slot += inv_std * (g * gm - mean_h - xhat * mean_hx);
                    }
                };
                if rows > 1 && rows * n >= 1 << 15 {
                    use rayon::prelude::*;
                    gx.par_chunks_mut(n).zip(go.par_chunks(n)).enumerate().for_each(row_grad);
                } else {
                    for pair in gx.chunks_mut(n).zip(go.chunks(n)).enumerate() {
                        row_grad(pair);
                    }
                }
            }
            Op::Silu { x, out } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, x);
                let xs = &self.bufs[x].data;
                let d = |(&g, &xv): (&T, &T)| {
                    let s = sigmoid(xv);
                    g * (s * (T::ONE + xv * (T::ONE - s)))
                };
                let contrib: Vec<T> = if go.len() >= 1 << 15 {
                    use rayon::prelude::*;
                    go.par_iter().zip(xs).map(d).collect()
                } else {
                    go.iter().zip(xs).map(d).collect()
                };
                Self::accum(grads, x, contrib.into_iter());
            }
            Op::GatherRows { table, ref idx, out, d } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, table);
                let gt = grads[table].as_mut().unwrap();
                for (row, &i) in idx.iter().enumerate() {
                    for (slot, &g) in gt[i * d..(i + 1) * d].iter_mut().zip(&go[row * d..(row + 1) * d])
                    {
                        *slot += g;
                    }
                }
            }
            Op::Permute { x, ref map, out: out_id, bt, chunk_in, chunk_out } => {
                let Some(go) = grads[out_id].take() else { return };
                self.ensure(grads, x);
                let gx = grads[x].as_mut().unwrap();
                for b in 0..bt {
                    let dst = &mut gx[b * chunk_in..(b + 1) * chunk_in];
                    let src = &go[b * chunk_out..(b + 1) * chunk_out];
                    for (&m, &g) in map.iter().zip(src) {
                        dst[m] += g;
                    }
                }
            }
            Op::SliceCols { x, out, rows, n, start, len } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, x);
                let gx = grads[x].as_mut().unwrap();
                for r in 0..rows {
                    for (slot, &g) in gx[r * n + start..r * n + start + len]
                        .iter_mut()
                        .zip(&go[r * len..(r + 1) * len])
                    {
                        *slot += g;
                    }
                }
            }
            Op::ConcatCols { ref parts, out, rows, ref widths } => {
                let Some(go) = grads[out].take() else { return };
                let n: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    self.ensure(grads, p);
                    let gp = grads[p].as_mut().unwrap();
                    for r in 0..rows {
                        for (slot, &g) in
                            gp[r * w..(r + 1) * w].iter_mut().zip(&go[r * n + offset..r * n + offset + w])
                        {
                            *slot += g;
                        }
                    }
                    offset += w;
                }
            }
            Op::Mse { a, b, out } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, a);
                self.ensure(grads, b);
                let g = go[0];
                let scale = T::from_f64(2.0 / self.bufs[a].data.len() as f64) * g;
                let (xa, xb) = (&self.bufs[a].data, &self.bufs[b].data);
                Self::accum(grads, a, xa.iter().zip(xb).map(|(&x, &y)| scale * (x - y)));
                Self::accum(grads, b, xa.iter().zip(xb).map(|(&x, &y)| -(scale * (x - y))));
            }
            Op::Sum { x, out } => {
                let Some(go) = grads[out].take() else { return };
                self.ensure(grads, x);
                let g = go[0];
                Self::accum(grads, x, std::iter::repeat(g).take(self.bufs[x].data.len()));
            }
        }
    }
}

fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    n: usize,
    aux: &mut Vec<T>,
) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * n];
    let mut stats = vec![(T::ZERO, T::ZERO); rows];
    let inv_n = T::from_f64(1.0 / n as f64);
    let eps = T::from_f64(LN_EPS);
    let row_fwd = |(out_row, (xr, stat)): (&mut [T], (&[T], &mut (T, T)))| {
        let mut mu = T::ZERO;
        for &v in xr {
            mu += v;
        }
        mu = mu * inv_n;
        let mut var = T::ZERO;
        for &v in xr {
            let d = v - mu;
            var += d * d;
        }
        var = var * inv_n;
        let inv_std = T::ONE / (var + eps).sqrt();
        *stat = (mu, inv_std);
        for (((o, &v), &g), &b) in out_row.iter_mut().zip(xr).zip(gamma).zip(beta) {
            *o = (v - mu) * inv_std * g + b;
        }
    };
    if rows > 1 && rows * n >= 1 << 15 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .zip(x.par_chunks(n).zip(stats.par_iter_mut()))
            .for_each(row_fwd);
    } else {
        for triple in out.chunks_mut(n).zip(x.chunks(n).zip(stats.iter_mut())) {
            row_fwd(triple);
        }
    }
    aux.clear();
    aux.extend(stats.iter().map(|&(mu, _)| mu));
    aux.extend(stats.iter().map(|&(_, inv)| inv));
    out
}
