//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] records every executed operation in topological order. Forward
//! results are owned by graph nodes and addressed through [`TensorRef`]
//! handles. [`Graph::backward`] walks the record once in reverse and
//! populates the gradient slot of every `requires_grad` leaf; leaves that do
//! not influence the loss receive an exact zero gradient.
//!
//! The graph is rebuilt every training step. All arithmetic is f64 and
//! loop-deterministic: two identical executions produce bit-identical values.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, broadcast_strides, strides, Odometer, StrideWalker, Tensor};

/// True when `b_shape` right-aligns onto the trailing extents of
/// `out_shape`, i.e. the broadcast only tiles whole copies of `b`.
fn is_suffix_broadcast(b_shape: &[usize], out_shape: &[usize]) -> bool {
    b_shape.len() <= out_shape.len()
        && b_shape == &out_shape[out_shape.len() - b_shape.len()..]
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Identity forward, blocks gradient flow. The input ref is kept so the
    /// record stays a faithful trace even though backward never reads it.
    Detach {
        #[allow(dead_code)]
        x: TensorRef,
    },
    Add { a: TensorRef, b: TensorRef },
    Sub { a: TensorRef, b: TensorRef },
    Mul { a: TensorRef, b: TensorRef },
    Scale { x: TensorRef, c: f64 },
    MatMul { a: TensorRef, b: TensorRef },
    Affine { x: TensorRef, w: TensorRef, b: TensorRef },
    Permute { x: TensorRef, axes: Vec<usize> },
    Reshape { x: TensorRef },
    Concat { a: TensorRef, b: TensorRef, axis: usize },
    Narrow { x: TensorRef, axis: usize, start: usize },
    ExpandLead { x: TensorRef },
    ReplaceRows { tokens: TensorRef, fill: TensorRef, indices: Vec<usize> },
    ExtractPatches { image: TensorRef, patch: usize },
    BilinearUpsample { x: TensorRef },
    Softmax { x: TensorRef, axis: usize },
    LayerNorm { x: TensorRef, gain: TensorRef, bias: TensorRef, eps: f64 },
    Gelu { x: TensorRef },
    Sum { x: TensorRef },
    Mean { x: TensorRef },
    Mse { a: TensorRef, b: TensorRef },
    CrossEntropy { logits: TensorRef, labels: Vec<u32>, ignore_index: u32 },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether this node is (or depends on) a `requires_grad` leaf.
    track: bool,
}

/// Ordered record of executed operations with their output tensors.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// ---------------------------------------------------------------------------
// 2-D matmul kernels. `out` accumulates. Output columns are processed in
// register-resident tiles so each output element is loaded and stored once.

const MM_TILE: usize = 8;

/// out[m,n] = a[m,k] . w[k,n] + bias[n], overwriting `out`.
fn mm_nn_bias(out: &mut [f64], a: &[f64], w: &[f64], bias: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + MM_TILE <= n {
            let mut acc = [0.0f64; MM_TILE];
            acc.copy_from_slice(&bias[j..j + MM_TILE]);
            for (p, &av) in arow.iter().enumerate() {
                let wrow = &w[p * n + j..p * n + j + MM_TILE];
                for t in 0..MM_TILE {
                    acc[t] += av * wrow[t];
                }
            }
            orow[j..j + MM_TILE].copy_from_slice(&acc);
            j += MM_TILE;
        }
        while j < n {
            let mut acc = bias[j];
            for (p, &av) in arow.iter().enumerate() {
                acc += av * w[p * n + j];
            }
            orow[j] = acc;
            j += 1;
        }
    }
}

fn mm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + MM_TILE <= n {
            let mut acc = [0.0f64; MM_TILE];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n + j..p * n + j + MM_TILE];
                for t in 0..MM_TILE {
                    acc[t] += av * brow[t];
                }
            }
            for (o, v) in orow[j..j + MM_TILE].iter_mut().zip(acc.iter()) {
                *o += v;
            }
            j += MM_TILE;
        }
        while j < n {
            let mut acc = 0.0;
            for (p, &av) in arow.iter().enumerate() {
                acc += av * b[p * n + j];
            }
            orow[j] += acc;
            j += 1;
        }
    }
}

/// out[m,n] += a[m,k] . b[n,k]^T  (rows of `a` dotted with rows of `b`).
fn mm_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[m,n] += a[k,m]^T . b[k,n].
fn mm_tn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + MM_TILE <= n {
            let mut acc = [0.0f64; MM_TILE];
            for p in 0..k {
                let av = a[p * m + i];
                let brow = &b[p * n + j..p * n + j + MM_TILE];
                for t in 0..MM_TILE {
                    acc[t] += av * brow[t];
                }
            }
            for (o, v) in orow[j..j + MM_TILE].iter_mut().zip(acc.iter()) {
                *o += v;
            }
            j += MM_TILE;
        }
        while j < n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[p * m + i] * b[p * n + j];
            }
            orow[j] += acc;
            j += 1;
        }
    }
}

fn gelu_value(x: f64) -> f64 {
    // x * Phi(x) with the exact Gaussian CDF.
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * pdf
}

/// Splits a rank>=2 shape into (batch dims, rows, cols).
fn split_matmul_shape(shape: &[usize]) -> Result<(&[usize], usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!(
            "matmul operand must have rank >= 2, got shape {:?}",
            shape
        )));
    }
    let n = shape.len();
    Ok((&shape[..n - 2], shape[n - 2], shape[n - 1]))
}

/// Interpolation taps for 1-D bilinear resampling with half-pixel centers.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input tensor. Its `requires_grad` flag decides whether
    /// backward will populate its gradient slot.
    pub fn leaf(&mut self, t: Tensor) -> TensorRef {
        let track = t.requires_grad_flag();
        self.push(t, Op::Leaf, track)
    }

    /// Inserts a constant input (never receives gradient).
    pub fn constant(&mut self, t: Tensor) -> TensorRef {
        self.push(t.requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0].value
    }

    /// Gradient of a node after [`Graph::backward`], as a tensor.
    pub fn grad(&self, r: TensorRef) -> Option<Tensor> {
        let node = &self.nodes[r.0];
        node.value.grad().map(|g| {
            Tensor::from_vec(node.value.shape().to_vec(), g.to_vec())
                .expect("gradient buffer matches value shape")
        })
    }

    fn push(&mut self, value: Tensor, op: Op, track: bool) -> TensorRef {
        self.nodes.push(Node { value, op, track });
        TensorRef(self.nodes.len() - 1)
    }

    fn tracked(&self, refs: &[TensorRef]) -> bool {
        refs.iter().any(|r| self.nodes[r.0].track)
    }

    // -- elementwise ---------------------------------------------------------

    fn binary_elementwise(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorRef> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shapes(va.shape(), vb.shape())?;
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if va.shape() == out_shape.as_slice() && vb.shape() == out_shape.as_slice() {
            data.extend(va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)));
        } else if va.shape() == out_shape.as_slice()
            && is_suffix_broadcast(vb.shape(), &out_shape)
        {
            // The compute-heavy case in practice: a bias or positional table
            // tiled across leading batch axes.
            for chunk in va.data().chunks_exact(vb.numel()) {
                data.extend(chunk.iter().zip(vb.data()).map(|(&x, &y)| f(x, y)));
            }
        } else {
            let sa = broadcast_strides(va.shape(), &out_shape);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let mut walker = StrideWalker::new(&out_shape, vec![sa, sb]);
            for _ in 0..n {
                data.push(f(va.data()[walker.offset(0)], vb.data()[walker.offset(1)]));
                walker.advance();
            }
        }
        let track = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_vec_internal(out_shape, data), op, track))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: TensorRef, c: f64) -> Result<TensorRef> {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| e * c).collect();
        let t = Tensor::from_vec_internal(v.shape().to_vec(), data);
        let track = self.tracked(&[x]);
        Ok(self.push(t, Op::Scale { x, c }, track))
    }

    /// Identity forward that blocks gradient flow into `x`.
    pub fn detach(&mut self, x: TensorRef) -> TensorRef {
        let v = self.nodes[x.0].value.clone().requires_grad(false);
        self.push(v, Op::Detach { x }, false)
    }

    // -- matmul ---------------------------------------------------------------

    /// Batched matrix product `[.., M, K] x [.., K, P] -> [.., M, P]` with
    /// broadcast-from-1 batch extents.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ba, m, ka) = split_matmul_shape(va.shape())?;
        let (bb, kb, n) = split_matmul_shape(vb.shape())?;
        if ka != kb {
            return Err(Error::dim(format!(
                "matmul inner extents disagree: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let batch = broadcast_shapes(ba, bb)?;
        let sa = broadcast_strides(ba, &batch);
        let sb = broadcast_strides(bb, &batch);
        let blocks: usize = batch.iter().product();
        let mut data = vec![0.0; blocks * m * n];
        let mut odo = Odometer::new(&batch);
        for blk in 0..blocks {
            let ao = odo.offset(&sa) * m * ka;
            let bo = odo.offset(&sb) * ka * n;
            mm_nn(
                &mut data[blk * m * n..(blk + 1) * m * n],
                &va.data()[ao..ao + m * ka],
                &vb.data()[bo..bo + ka * n],
                m,
                ka,
                n,
            );
            odo.advance();
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        let track = self.tracked(&[a, b]);
        Ok(self.push(
            Tensor::from_vec_internal(out_shape, data),
            Op::MatMul { a, b },
            track,
        ))
    }

    /// Fused linear layer: `x [.., M, K] . w [K, N] + b [N]`, one kernel
    /// pass over the output.
    pub fn affine(&mut self, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (batch, m, k) = split_matmul_shape(vx.shape())?;
        if vw.rank() != 2 || vw.shape()[0] != k {
            return Err(Error::dim(format!(
                "affine weight {:?} does not match input {:?}",
                vw.shape(),
                vx.shape()
            )));
        }
        let n = vw.shape()[1];
        if vb.shape() != [n] {
            return Err(Error::dim(format!(
                "affine bias {:?} does not match weight {:?}",
                vb.shape(),
                vw.shape()
            )));
        }
        let blocks: usize = batch.iter().product();
        let mut data = vec![0.0; blocks * m * n];
        for blk in 0..blocks {
            mm_nn_bias(
                &mut data[blk * m * n..(blk + 1) * m * n],
                &vx.data()[blk * m * k..(blk + 1) * m * k],
                vw.data(),
                vb.data(),
                m,
                k,
                n,
            );
        }
        let mut out_shape = batch.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let track = self.tracked(&[x, w, b]);
        Ok(self.push(
            Tensor::from_vec_internal(out_shape, data),
            Op::Affine { x, w, b },
            track,
        ))
    }

    // -- shape manipulation ----------------------------------------------------

    pub fn permute(&mut self, x: TensorRef, axes: &[usize]) -> Result<TensorRef> {
        let v = &self.nodes[x.0].value;
        if axes.len() != v.rank() {
            return Err(Error::dim(format!(
                "permute axes {:?} do not match rank of shape {:?}",
                axes,
                v.shape()
            )));
        }
        let mut seen = vec![false; axes.len()];
        for &ax in axes {
            if ax >= axes.len() || seen[ax] {
                return Err(Error::dim(format!("invalid permutation {:?}", axes)));
            }
            seen[ax] = true;
        }
        let (shape, data) = permute_data(v.shape(), v.data(), axes);
        let track = self.tracked(&[x]);
        Ok(self.push(
            Tensor::from_vec_internal(shape, data),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            track,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: TensorRef) -> Result<TensorRef> {
        let rank = self.nodes[x.0].value.rank();
        if rank < 2 {
            return Err(Error::dim("transpose needs rank >= 2".to_string()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        let v = &self.nodes[x.0].value;
        let n: usize = shape.iter().product();
        if n != v.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                v.shape(),
                shape
            )));
        }
        let t = Tensor::from_vec_internal(shape, v.data().to_vec());
        let track = self.tracked(&[x]);
        Ok(self.push(t, Op::Reshape { x }, track))
    }

    pub fn concat(&mut self, a: TensorRef, b: TensorRef, axis: usize) -> Result<TensorRef> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != vb.rank() || axis >= va.rank() {
            return Err(Error::dim(format!(
                "concat axis {} invalid for shapes {:?} and {:?}",
                axis,
                va.shape(),
                vb.shape()
            )));
        }
        for d in 0..va.rank() {
            if d != axis && va.shape()[d] != vb.shape()[d] {
                return Err(Error::dim(format!(
                    "concat shapes {:?} and {:?} disagree off-axis",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        let mut shape = va.shape().to_vec();
        shape[axis] += vb.shape()[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (la, lb) = (va.shape()[axis], vb.shape()[axis]);
        let mut data = vec![0.0; shape.iter().product()];
        for o in 0..outer {
            let dst = o * (la + lb) * inner;
            data[dst..dst + la * inner]
                .copy_from_slice(&va.data()[o * la * inner..(o + 1) * la * inner]);
            data[dst + la * inner..dst + (la + lb) * inner]
                .copy_from_slice(&vb.data()[o * lb * inner..(o + 1) * lb * inner]);
        }
        let track = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_vec_internal(shape, data), Op::Concat { a, b, axis }, track))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(
        &mut self,
        x: TensorRef,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorRef> {
        let v = &self.nodes[x.0].value;
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(Error::dim(format!(
                "narrow axis {} range {}..{} invalid for shape {:?}",
                axis,
                start,
                start + len,
                v.shape()
            )));
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let full = v.shape()[axis];
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&v.data()[src..src + len * inner]);
        }
        let track = self.tracked(&[x]);
        Ok(self.push(
            Tensor::from_vec_internal(shape, data),
            Op::Narrow { x, axis, start },
            track,
        ))
    }

    /// Repeats a leading extent of 1 `copies` times: `[1, ..] -> [copies, ..]`.
    pub fn expand_lead(&mut self, x: TensorRef, copies: usize) -> Result<TensorRef> {
        let v = &self.nodes[x.0].value;
        if v.rank() == 0 || v.shape()[0] != 1 {
            return Err(Error::dim(format!(
                "expand_lead needs a leading extent of 1, got {:?}",
                v.shape()
            )));
        }
        let block = v.numel();
        let mut shape = v.shape().to_vec();
        shape[0] = copies;
        let mut data = vec![0.0; block * copies];
        for c in 0..copies {
            data[c * block..(c + 1) * block].copy_from_slice(v.data());
        }
        let track = self.tracked(&[x]);
        Ok(self.push(Tensor::from_vec_internal(shape, data), Op::ExpandLead { x }, track))
    }

    /// Replaces rows `indices` of `tokens [B, N, C]` with the vector
    /// `fill [C]` across the whole batch.
    pub fn replace_rows(
        &mut self,
        tokens: TensorRef,
        fill: TensorRef,
        indices: &[usize],
    ) -> Result<TensorRef> {
        let (vt, vf) = (&self.nodes[tokens.0].value, &self.nodes[fill.0].value);
        if vt.rank() != 3 {
            return Err(Error::dim(format!(
                "replace_rows expects [B, N, C] tokens, got {:?}",
                vt.shape()
            )));
        }
        let (b, n, c) = (vt.shape()[0], vt.shape()[1], vt.shape()[2]);
        if vf.shape() != [c] {
            return Err(Error::dim(format!(
                "fill shape {:?} does not match channel extent {}",
                vf.shape(),
                c
            )));
        }
        if indices.iter().any(|&i| i >= n) {
            return Err(Error::validation(format!(
                "replace_rows index out of range for {} rows",
                n
            )));
        }
        let mut data = vt.data().to_vec();
        for bi in 0..b {
            for &i in indices {
                let off = (bi * n + i) * c;
                data[off..off + c].copy_from_slice(vf.data());
            }
        }
        let track = self.tracked(&[tokens, fill]);
        Ok(self.push(
            Tensor::from_vec_internal(vt.shape().to_vec(), data),
            Op::ReplaceRows {
                tokens,
                fill,
                indices: indices.to_vec(),
            },
            track,
        ))
    }

    /// Rearranges `[B, C, H, W]` into non-overlapping patch vectors
    /// `[B, N, C*patch*patch]`, N = (H/patch)*(W/patch), row-major patch grid.
    pub fn extract_patches(&mut self, image: TensorRef, patch: usize) -> Result<TensorRef> {
        let v = &self.nodes[image.0].value;
        if v.rank() != 4 {
            return Err(Error::dim(format!(
                "extract_patches expects [B, C, H, W], got {:?}",
                v.shape()
            )));
        }
        let (b, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::dim(format!(
                "patch size {} does not divide image {}x{}",
                patch, h, w
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let dim = c * patch * patch;
        let mut data = vec![0.0; b * n * dim];
        for bi in 0..b {
            for gi in 0..gh {
                for gj in 0..gw {
                    let tok = gi * gw + gj;
                    for ci in 0..c {
                        for dy in 0..patch {
                            let src = ((bi * c + ci) * h + gi * patch + dy) * w + gj * patch;
                            let dst = (bi * n + tok) * dim + (ci * patch + dy) * patch;
                            data[dst..dst + patch].copy_from_slice(&v.data()[src..src + patch]);
                        }
                    }
                }
            }
        }
        let track = self.tracked(&[image]);
        Ok(self.push(
            Tensor::from_vec_internal(vec![b, n, dim], data),
            Op::ExtractPatches { image, patch },
            track,
        ))
    }

    /// Bilinear resampling of `[B, K, h, w]` to `[B, K, out_h, out_w]` with
    /// half-pixel centers.
    pub fn bilinear_upsample(
        &mut self,
        x: TensorRef,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorRef> {
        let v = &self.nodes[x.0].value;
        if v.rank() != 4 {
            return Err(Error::dim(format!(
                "bilinear_upsample expects [B, K, H, W], got {:?}",
                v.shape()
            )));
        }
        let (b, k, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let ytaps = bilinear_taps(h, out_h);
        let xtaps = bilinear_taps(w, out_w);
        let mut data = vec![0.0; b * k * out_h * out_w];
        for plane in 0..b * k {
            let src = &v.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy0, wy1)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in xtaps.iter().enumerate() {
                    dst[oy * out_w + ox] = wy0 * wx0 * src[y0 * w + x0]
                        + wy0 * wx1 * src[y0 * w + x1]
                        + wy1 * wx0 * src[y1 * w + x0]
                        + wy1 * wx1 * src[y1 * w + x1];
                }
            }
        }
        let track = self.tracked(&[x]);
        Ok(self.push(
            Tensor::from_vec_internal(vec![b, k, out_h, out_w], data),
            Op::BilinearUpsample { x },
            track,
        ))
    }

    // -- nonlinearities and losses ----------------------------------------------

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        let v = &self.nodes[x.0].value;
        if axis >= v.rank() {
            return Err(Error::dim(format!(
                "softmax axis {} invalid for shape {:?}",
                axis,
                v.shape()
            )));
        }
        let lane = v.shape()[axis];
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let outer: usize = v.shape()[..axis].iter().product();
        let mut data = vec![0.0; v.numel()];
        if inner == 1 {
            for (row, out) in v
                .data()
                .chunks_exact(lane)
                .zip(data.chunks_exact_mut(lane))
            {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &e) in out.iter_mut().zip(row.iter()) {
                    let x = (e - max).exp();
                    *o = x;
                    sum += x;
                }
                let inv = 1.0 / sum;
                for o in out.iter_mut() {
                    *o *= inv;
                }
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lane {
                        max = max.max(v.data()[base + j * inner]);
                    }
                    let mut sum = 0.0;
                    for j in 0..lane {
                        let e = (v.data()[base + j * inner] - max).exp();
                        data[base + j * inner] = e;
                        sum += e;
                    }
                    for j in 0..lane {
                        data[base + j * inner] /= sum;
                    }
                }
            }
        }
        let track = self.tracked(&[x]);
        Ok(self.push(
            Tensor::from_vec_internal(v.shape().to_vec(), data),
            Op::Softmax { x, axis },
            track,
        ))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f64,
    ) -> Result<TensorRef> {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        if vx.rank() == 0 {
            return Err(Error::dim("layer_norm needs rank >= 1".to_string()));
        }
        let c = *vx.shape().last().unwrap();
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::dim(format!(
                "layer_norm gain {:?} / bias {:?} do not match last extent {}",
                vg.shape(),
                vb.shape(),
                c
            )));
        }
        let lanes = vx.numel() / c;
        let mut data = vec![0.0; vx.numel()];
        for l in 0..lanes {
            let row = &vx.data()[l * c..(l + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[l * c + j] = (row[j] - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        let track = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_vec_internal(vx.shape().to_vec(), data),
            Op::LayerNorm { x, gain, bias, eps },
            track,
        ))
    }

    /// Exact Gaussian-error-function GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: TensorRef) -> Result<TensorRef> {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| gelu_value(e)).collect();
        let t = Tensor::from_vec_internal(v.shape().to_vec(), data);
        let track = self.tracked(&[x]);
        Ok(self.push(t, Op::Gelu { x }, track))
    }

    pub fn sum(&mut self, x: TensorRef) -> Result<TensorRef> {
        let v = &self.nodes[x.0].value;
        let t = Tensor::scalar(v.data().iter().sum());
        let track = self.tracked(&[x]);
        Ok(self.push(t, Op::Sum { x }, track))
    }

    pub fn mean(&mut self, x: TensorRef) -> Result<TensorRef> {
        let v = &self.nodes[x.0].value;
        if v.numel() == 0 {
            return Err(Error::dim("mean of empty tensor".to_string()));
        }
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        let track = self.tracked(&[x]);
        Ok(self.push(t, Op::Mean { x }, track))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "mse shapes disagree: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let n = va.numel() as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let t = Tensor::scalar(s / n);
        let track = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Mse { a, b }, track))
    }

    /// Mean negative log-softmax probability of the true class over positions
    /// whose label is not `ignore_index`. All-ignored input yields loss 0
    /// with zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: TensorRef,
        labels: &[u32],
        ignore_index: u32,
    ) -> Result<TensorRef> {
        let v = &self.nodes[logits.0].value;
        if v.rank() != 2 {
            return Err(Error::dim(format!(
                "cross_entropy expects [P, K] logits, got {:?}",
                v.shape()
            )));
        }
        let (p, k) = (v.shape()[0], v.shape()[1]);
        if labels.len() != p {
            return Err(Error::dim(format!(
                "{} labels for {} positions",
                labels.len(),
                p
            )));
        }
        for (i, &lab) in labels.iter().enumerate() {
            if lab != ignore_index && lab as usize >= k {
                return Err(Error::validation(format!(
                    "label {} at position {} out of range for {} classes",
                    lab, i, k
                )));
            }
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &lab) in labels.iter().enumerate() {
            if lab == ignore_index {
                continue;
            }
            let row = &v.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&e| (e - max).exp()).sum::<f64>().ln();
            total += lse - row[lab as usize];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let t = Tensor::scalar(loss);
        let track = self.tracked(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore_index,
            },
            track,
        ))
    }

    // -- backward -----------------------------------------------------------------

    /// Reverse traversal from a scalar loss. Visits each node at most once
    /// and fills the gradient slot of every `requires_grad` leaf (exact zeros
    /// for leaves that do not influence the loss).
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].track {
                grads[idx] = None;
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.accumulate_inputs(idx, &gout, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter()) {
            if node.value.requires_grad_flag() {
                let grad = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(Some(grad));
            }
        }
        Ok(())
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |r: TensorRef| &self.nodes[r.0].value;
        let wants = |r: TensorRef| self.nodes[r.0].track;
        macro_rules! slot {
            ($r:expr) => {
                grads[$r.0].get_or_insert_with(|| vec![0.0; self.nodes[$r.0].value.numel()])
            };
        }

        match &node.op {
            Op::Leaf | Op::Detach { .. } => {}
            Op::Add { a, b } => {
                for (r, _sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(r) {
                        accumulate_broadcast(slot!(r), val(r).shape(), gout, node.value.shape(), 1.0);
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    accumulate_broadcast(slot!(*a), val(*a).shape(), gout, node.value.shape(), 1.0);
                }
                if wants(*b) {
                    accumulate_broadcast(slot!(*b), val(*b).shape(), gout, node.value.shape(), -1.0);
                }
            }
            Op::Mul { a, b } => {
                let same = val(*a).shape() == node.value.shape()
                    && val(*b).shape() == node.value.shape();
                let (sa, sb) = (
                    broadcast_strides(val(*a).shape(), node.value.shape()),
                    broadcast_strides(val(*b).shape(), node.value.shape()),
                );
                if wants(*a) {
                    let g = slot!(*a);
                    if same {
                        for ((gi, &go), &bv) in g.iter_mut().zip(gout.iter()).zip(val(*b).data()) {
                            *gi += go * bv;
                        }
                    } else {
                        let mut walker =
                            StrideWalker::new(node.value.shape(), vec![sa.clone(), sb.clone()]);
                        for &go in gout.iter() {
                            g[walker.offset(0)] += go * val(*b).data()[walker.offset(1)];
                            walker.advance();
                        }
                    }
                }
                if wants(*b) {
                    let g = slot!(*b);
                    if same {
                        for ((gi, &go), &av) in g.iter_mut().zip(gout.iter()).zip(val(*a).data()) {
                            *gi += go * av;
                        }
                    } else {
                        let mut walker = StrideWalker::new(node.value.shape(), vec![sa, sb]);
                        for &go in gout.iter() {
                            g[walker.offset(1)] += go * val(*a).data()[walker.offset(0)];
                            walker.advance();
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if wants(*x) {
                    let g = slot!(*x);
                    for (gi, &go) in g.iter_mut().zip(gout.iter()) {
                        *gi += go * c;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (ba, m, k) = split_matmul_shape(val(*a).shape())?;
                let (bb, _, n) = split_matmul_shape(val(*b).shape())?;
                let batch = broadcast_shapes(ba, bb)?;
                let sa = broadcast_strides(ba, &batch);
                let sb = broadcast_strides(bb, &batch);
                let blocks: usize = batch.iter().product();
                let want_a = wants(*a);
                let want_b = wants(*b);
                if want_a {
                    slot!(*a);
                }
                if want_b {
                    slot!(*b);
                }
                let mut odo = Odometer::new(&batch);
                for blk in 0..blocks {
                    let ao = odo.offset(&sa) * m * k;
                    let bo = odo.offset(&sb) * k * n;
                    let gblk = &gout[blk * m * n..(blk + 1) * m * n];
                    if want_a {
                        let ga = grads[a.0].as_mut().unwrap();
                        mm_nt(
                            &mut ga[ao..ao + m * k],
                            gblk,
                            &val(*b).data()[bo..bo + k * n],
                            m,
                            n,
                            k,
                        );
                    }
                    if want_b {
                        let gb = grads[b.0].as_mut().unwrap();
                        mm_tn(
                            &mut gb[bo..bo + k * n],
                            &val(*a).data()[ao..ao + m * k],
                            gblk,
                            k,
                            m,
                            n,
                        );
                    }
                    odo.advance();
                }
            }
            Op::Affine { x, w, b } => {
                let (batch, m, k) = split_matmul_shape(val(*x).shape())?;
                let n = val(*w).shape()[1];
                let blocks: usize = batch.iter().product();
                if wants(*x) {
                    let gx = slot!(*x);
                    for blk in 0..blocks {
                        mm_nt(
                            &mut gx[blk * m * k..(blk + 1) * m * k],
                            &gout[blk * m * n..(blk + 1) * m * n],
                            val(*w).data(),
                            m,
                            n,
                            k,
                        );
                    }
                }
                if wants(*w) {
                    let gw = slot!(*w);
                    for blk in 0..blocks {
                        mm_tn(
                            gw,
                            &val(*x).data()[blk * m * k..(blk + 1) * m * k],
                            &gout[blk * m * n..(blk + 1) * m * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
                if wants(*b) {
                    let gb = slot!(*b);
                    for row in gout.chunks_exact(n) {
                        for (g, &go) in gb.iter_mut().zip(row) {
                            *g += go;
                        }
                    }
                }
            }
            Op::Permute { x, axes } => {
                if wants(*x) {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (_, gperm) = permute_data(node.value.shape(), gout, &inverse);
                    let g = slot!(*x);
                    for (gi, gv) in g.iter_mut().zip(gperm) {
                        *gi += gv;
                    }
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    let g = slot!(*x);
                    for (gi, &go) in g.iter_mut().zip(gout.iter()) {
                        *gi += go;
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let la = val(*a).shape()[*axis];
                let lb = val(*b).shape()[*axis];
                let inner: usize = node.value.shape()[axis + 1..].iter().product();
                let outer: usize = node.value.shape()[..*axis].iter().product();
                if wants(*a) {
                    let g = slot!(*a);
                    for o in 0..outer {
                        let src = o * (la + lb) * inner;
                        for t in 0..la * inner {
                            g[o * la * inner + t] += gout[src + t];
                        }
                    }
                }
                if wants(*b) {
                    let g = slot!(*b);
                    for o in 0..outer {
                        let src = o * (la + lb) * inner + la * inner;
                        for t in 0..lb * inner {
                            g[o * lb * inner + t] += gout[src + t];
                        }
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                if wants(*x) {
                    let full = val(*x).shape()[*axis];
                    let len = node.value.shape()[*axis];
                    let inner: usize = node.value.shape()[axis + 1..].iter().product();
                    let outer: usize = node.value.shape()[..*axis].iter().product();
                    let g = slot!(*x);
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        for t in 0..len * inner {
                            g[dst + t] += gout[o * len * inner + t];
                        }
                    }
                }
            }
            Op::ExpandLead { x } => {
                if wants(*x) {
                    let block = val(*x).numel();
                    let g = slot!(*x);
                    for (t, &go) in gout.iter().enumerate() {
                        g[t % block] += go;
                    }
                }
            }
            Op::ReplaceRows { tokens, fill, indices } => {
                let shape = node.value.shape();
                let (b, n, c) = (shape[0], shape[1], shape[2]);
                let mut masked = vec![false; n];
                for &i in indices {
                    masked[i] = true;
                }
                if wants(*tokens) {
                    let g = slot!(*tokens);
                    for bi in 0..b {
                        for row in 0..n {
                            if masked[row] {
                                continue;
                            }
                            let off = (bi * n + row) * c;
                            for j in 0..c {
                                g[off + j] += gout[off + j];
                            }
                        }
                    }
                }
                if wants(*fill) {
                    let g = slot!(*fill);
                    for bi in 0..b {
                        for &row in indices {
                            let off = (bi * n + row) * c;
                            for j in 0..c {
                                g[j] += gout[off + j];
                            }
                        }
                    }
                }
            }
            Op::ExtractPatches { image, patch } => {
                if wants(*image) {
                    let ishape = val(*image).shape();
                    let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let (gh, gw) = (h / patch, w / patch);
                    let n = gh * gw;
                    let dim = c * patch * patch;
                    let g = slot!(*image);
                    for bi in 0..b {
                        for gi in 0..gh {
                            for gj in 0..gw {
                                let tok = gi * gw + gj;
                                for ci in 0..c {
                                    for dy in 0..*patch {
                                        let dst =
                                            ((bi * c + ci) * h + gi * patch + dy) * w + gj * patch;
                                        let src = (bi * n + tok) * dim + (ci * patch + dy) * patch;
                                        for dx in 0..*patch {
                                            g[dst + dx] += gout[src + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BilinearUpsample { x } => {
                if wants(*x) {
                    let ishape = val(*x).shape();
                    let (b, k, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                    let ytaps = bilinear_taps(h, oh);
                    let xtaps = bilinear_taps(w, ow);
                    let g = slot!(*x);
                    for plane in 0..b * k {
                        let gsrc = &gout[plane * oh * ow..(plane + 1) * oh * ow];
                        let gdst = &mut g[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, wy0, wy1)) in ytaps.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in xtaps.iter().enumerate() {
                                let go = gsrc[oy * ow + ox];
                                gdst[y0 * w + x0] += wy0 * wx0 * go;
                                gdst[y0 * w + x1] += wy0 * wx1 * go;
                                gdst[y1 * w + x0] += wy1 * wx0 * go;
                                gdst[y1 * w + x1] += wy1 * wx1 * go;
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let y = node.value.data();
                    let shape = node.value.shape();
                    let lane = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let g = slot!(*x);
                    if inner == 1 {
                        for ((grow, yrow), gorow) in g
                            .chunks_exact_mut(lane)
                            .zip(y.chunks_exact(lane))
                            .zip(gout.chunks_exact(lane))
                        {
                            let mut dot = 0.0;
                            for (&yv, &go) in yrow.iter().zip(gorow.iter()) {
                                dot += yv * go;
                            }
                            for ((gv, &yv), &go) in
                                grow.iter_mut().zip(yrow.iter()).zip(gorow.iter())
                            {
                                *gv += yv * (go - dot);
                            }
                        }
                    } else {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * lane * inner + i;
                                let mut dot = 0.0;
                                for j in 0..lane {
                                    let t = base + j * inner;
                                    dot += gout[t] * y[t];
                                }
                                for j in 0..lane {
                                    let t = base + j * inner;
                                    g[t] += y[t] * (gout[t] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = val(*x);
                let c = *vx.shape().last().unwrap();
                let lanes = vx.numel() / c;
                let vg = val(*gain).data();
                let want_x = wants(*x);
                let want_g = wants(*gain);
                let want_b = wants(*bias);
                for l in 0..lanes {
                    let row = &vx.data()[l * c..(l + 1) * c];
                    let go = &gout[l * c..(l + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var =
                        row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    if want_x {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            let dyg = go[j] * vg[j];
                            m1 += dyg;
                            m2 += dyg * xhat;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let g = slot!(*x);
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            g[l * c + j] += inv * (go[j] * vg[j] - m1 - xhat * m2);
                        }
                    }
                    if want_g {
                        let g = slot!(*gain);
                        for j in 0..c {
                            g[j] += go[j] * (row[j] - mean) * inv;
                        }
                    }
                    if want_b {
                        let g = slot!(*bias);
                        for j in 0..c {
                            g[j] += go[j];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if wants(*x) {
                    let g = slot!(*x);
                    for ((gi, &go), &xv) in g.iter_mut().zip(gout.iter()).zip(val(*x).data()) {
                        *gi += go * gelu_derivative(xv);
                    }
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let g = slot!(*x);
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                }
            }
            Op::Mean { x } => {
                if wants(*x) {
                    let n = val(*x).numel() as f64;
                    let g = slot!(*x);
                    for gi in g.iter_mut() {
                        *gi += gout[0] / n;
                    }
                }
            }
            Op::Mse { a, b } => {
                let n = val(*a).numel() as f64;
                let scale = 2.0 * gout[0] / n;
                if wants(*a) {
                    let g = slot!(*a);
                    for ((gi, &x), &y) in g.iter_mut().zip(val(*a).data()).zip(val(*b).data()) {
                        *gi += scale * (x - y);
                    }
                }
                if wants(*b) {
                    let g = slot!(*b);
                    for ((gi, &x), &y) in g.iter_mut().zip(val(*a).data()).zip(val(*b).data()) {
                        *gi -= scale * (x - y);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore_index,
            } => {
                if wants(*logits) {
                    let v = val(*logits);
                    let k = v.shape()[1];
                    let count = labels.iter().filter(|&&l| l != *ignore_index).count();
                    if count > 0 {
                        let scale = gout[0] / count as f64;
                        let g = slot!(*logits);
                        for (i, &lab) in labels.iter().enumerate() {
                            if lab == *ignore_index {
                                continue;
                            }
                            let row = &v.data()[i * k..(i + 1) * k];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|&e| (e - max).exp()).sum();
                            for j in 0..k {
                                let p = (row[j] - max).exp() / sum;
                                let onehot = if j == lab as usize { 1.0 } else { 0.0 };
                                g[i * k + j] += scale * (p - onehot);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds `sign * gout` into `g`, reducing over axes where `g_shape` was
/// broadcast up to `out_shape`.
fn accumulate_broadcast(
    g: &mut [f64],
    g_shape: &[usize],
    gout: &[f64],
    out_shape: &[usize],
    sign: f64,
) {
    if g_shape == out_shape {
        for (gi, &go) in g.iter_mut().zip(gout.iter()) {
            *gi += sign * go;
        }
        return;
    }
    if is_suffix_broadcast(g_shape, out_shape) {
        for chunk in gout.chunks_exact(g.len()) {
            for (gi, &go) in g.iter_mut().zip(chunk) {
                *gi += sign * go;
            }
        }
        return;
    }
    let gs = broadcast_strides(g_shape, out_shape);
    let mut walker = StrideWalker::new(out_shape, vec![gs]);
    for &go in gout.iter() {
        g[walker.offset(0)] += sign * go;
        walker.advance();
    }
}

fn permute_data(shape: &[usize], data: &[f64], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if axes.last() == Some(&(shape.len() - 1)) && !shape.is_empty() {
        // Innermost axis untouched: copy contiguous rows.
        let row = shape[shape.len() - 1];
        let outer = &out_shape[..out_shape.len() - 1];
        let mut walker = StrideWalker::new(outer, vec![mapped[..mapped.len() - 1].to_vec()]);
        for _ in 0..data.len() / row.max(1) {
            let src = walker.offset(0);
            out.extend_from_slice(&data[src..src + row]);
            walker.advance();
        }
    } else {
        let mut walker = StrideWalker::new(&out_shape, vec![mapped]);
        for _ in 0..data.len() {
            out.push(data[walker.offset(0)]);
            walker.advance();
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = g.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Oracle: naive triple loop, independent of the mm kernels.
        let mut rng_state = 0x12345u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let a: Vec<f64> = (0..12).map(|_| next()).collect();
        let b: Vec<f64> = (0..8).map(|_| next()).collect();
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                expect[i * 2 + j] = s;
            }
        }
        let mut g = Graph::new();
        let ar = g.leaf(t(&[3, 4], &a));
        let br = g.leaf(t(&[4, 2], &b));
        let c = g.matmul(ar, br).unwrap();
        for (got, want) in g.value(c).data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_batch_from_one() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_singleton_axis_is_exactly_one() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3, 1], &[5.0, -2.0, 0.3]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_match_shifted_oracle() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1000.0, 1001.0]));
        let y = g.softmax(x, 0).unwrap();
        // Shifted-exponent oracle: e^0 and e^1 over their sum.
        let denom = 1.0 + 1f64.exp();
        let expect = [1.0 / denom, 1f64.exp() / denom];
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!(got.is_finite());
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.softmax(x, 2), Err(Error::Dim(_))));
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[2.5; 4]));
        let gain = g.leaf(Tensor::filled(vec![4], 1.0));
        let bias = g.leaf(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_element_closed_form() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, -1.0]));
        let gain = g.leaf(Tensor::filled(vec![2], 1.0));
        let bias = g.leaf(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        // mean 0, var 1: output is +-1/sqrt(1 + eps).
        let expect = 1.0 / (1.0 + 1e-6f64).sqrt();
        assert!((g.value(y).data()[0] - expect).abs() <= 1e-12);
        assert!((g.value(y).data()[1] + expect).abs() <= 1e-12);
    }

    #[test]
    fn layer_norm_zero_gain_yields_bias() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[0.3, -1.0, 2.0, 4.0, 5.0, -0.5]));
        let gain = g.leaf(Tensor::zeros(vec![3]));
        let bias = g.leaf(t(&[3], &[7.0, 8.0, 9.0]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn layer_norm_extent_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 3]));
        let gain = g.leaf(Tensor::zeros(vec![2]));
        let bias = g.leaf(Tensor::zeros(vec![3]));
        assert!(matches!(
            g.layer_norm(x, gain, bias, 1e-6),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn gelu_fixed_points() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.0, 30.0, 1.0]));
        let y = g.gelu(x).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 30.0).abs() <= 1e-12);
        // Quadrature oracle for Phi(1): Simpson integration of the normal pdf
        // over [0, 1] plus one half.
        let n = 4000;
        let h = 1.0 / n as f64;
        let pdf = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut integral = pdf(0.0) + pdf(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            integral += w * pdf(i as f64 * h);
        }
        integral *= h / 3.0;
        let phi1 = 0.5 + integral;
        assert!((out[2] - 1.0 * phi1).abs() <= 1e-10);
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[0.7, -0.2]));
        let same = g.leaf(t(&[2], &[0.7, -0.2]));
        assert_eq!(g.mse(a, same).unwrap().0, 2);
        let z = g.leaf(t(&[2], &[0.0, 0.0]));
        let o = g.leaf(t(&[2], &[1.0, 1.0]));
        let m = g.mse(z, o).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 1.0);

        let bad = g.leaf(Tensor::zeros(vec![3]));
        assert!(matches!(g.mse(a, bad), Err(Error::Dim(_))));
    }

    #[test]
    fn mse_matches_element_loop_oracle() {
        let a = [0.25, -1.5, 3.0, 0.125];
        let b = [1.0, 0.5, -2.0, 0.0];
        let mut expect = 0.0;
        for i in 0..4 {
            expect += (a[i] - b[i]) * (a[i] - b[i]);
        }
        expect /= 4.0;
        let mut g = Graph::new();
        let ar = g.leaf(t(&[2, 2], &a));
        let br = g.leaf(t(&[2, 2], &b));
        let m = g.mse(ar, br).unwrap();
        assert!((g.value(m).item().unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![2, 4]));
        let l = g.cross_entropy(logits, &[1, 3], 255).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_approaches_zero() {
        let mut g = Graph::new();
        let logits = g.leaf(t(&[1, 3], &[40.0, 0.0, 0.0]));
        let l = g.cross_entropy(logits, &[0], 255).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_position_oracle() {
        let logits: [f64; 9] = [0.3, -1.2, 0.8, 2.0, 0.1, -0.4, -0.9, 1.1, 0.0];
        let labels = [2u32, 0, 1];
        let mut expect = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            let row = &logits[i * 3..(i + 1) * 3];
            let denom: f64 = row.iter().map(|&v| v.exp()).sum();
            expect -= (row[lab as usize].exp() / denom).ln();
        }
        expect /= 3.0;
        let mut g = Graph::new();
        let lr = g.leaf(t(&[3, 3], &logits));
        let l = g.cross_entropy(lr, &labels, 255).unwrap();
        assert!((g.value(l).item().unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            g.cross_entropy(logits, &[3], 255),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let logits = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).requires_grad(true));
        let l = g.cross_entropy(logits, &[255, 255], 255).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(logits).unwrap().data(), &[0.0; 6]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).requires_grad(true));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_mse_closed_form() {
        let mut g = Graph::new();
        let xv = [0.5, -1.0, 2.0, 0.0];
        let x = g.leaf(t(&[4], &xv).requires_grad(true));
        let zero = g.constant(Tensor::zeros(vec![4]));
        let l = g.mse(x, zero).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap();
        for (got, want) in grad.data().iter().zip(xv.iter().map(|v| 2.0 * v / 4.0)) {
            assert!((got - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn uninvolved_leaf_gets_exact_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).requires_grad(true));
        let unused = g.leaf(t(&[3], &[9.0, 9.0, 9.0]).requires_grad(true));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).requires_grad(true));
        let d = g.detach(x);
        let y = g.mul(d, d).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_execution_is_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(
                t(&[2, 3], &[0.1, -0.7, 1.3, 2.1, -0.2, 0.5]).requires_grad(true),
            );
            let w = g.leaf(t(&[3, 2], &[0.3, 0.1, -0.4, 0.9, 1.1, -0.6]).requires_grad(true));
            let y = g.matmul(x, w).unwrap();
            let sm = g.softmax(y, 1).unwrap();
            let target = g.constant(Tensor::filled(vec![2, 2], 0.5));
            let l = g.mse(sm, target).unwrap();
            g.backward(l).unwrap();
            (
                g.value(l).item().unwrap(),
                g.grad(x).unwrap().data().to_vec(),
                g.grad(w).unwrap().data().to_vec(),
            )
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn concat_narrow_roundtrip_and_grads() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).requires_grad(true));
        let b = g.leaf(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let cat = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 3, 2]);
        let back = g.narrow(cat, 1, 0, 1).unwrap();
        assert_eq!(g.value(back).data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = g.sum(back).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.value(p).shape(), &[3, 2]);
        assert_eq!(g.value(p).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = g.permute(p, &[1, 0]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn expand_lead_sums_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[3.0, 4.0]).requires_grad(true));
        let e = g.expand_lead(x, 3).unwrap();
        assert_eq!(g.value(e).shape(), &[3, 2]);
        let s = g.sum(e).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn replace_rows_forward_and_grads() {
        let mut g = Graph::new();
        let tokens = g.leaf(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).requires_grad(true));
        let fill = g.leaf(t(&[2], &[-1.0, -2.0]).requires_grad(true));
        let out = g.replace_rows(tokens, fill, &[1]).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, -1.0, -2.0, 5.0, 6.0]);
        let s = g.sum(out).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(tokens).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.grad(fill).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn extract_patches_layout() {
        // 1x1x2x2 image, patch 1: four tokens in row-major grid order.
        let mut g = Graph::new();
        let img = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.extract_patches(img, 1).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 4, 1]);
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bilinear_upsample_constant_plane_stays_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(vec![1, 1, 2, 2], 3.25));
        let y = g.bilinear_upsample(x, 8, 8).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 3.25).abs() <= 1e-15);
        }
    }

    #[test]
    fn bilinear_upsample_matches_hand_oracle_2x2() {
        // 2x2 -> 4x4 with half-pixel centers; source coords are
        // (o + 0.5)/2 - 0.5 in {-0.25, 0.25, 0.75, 1.25} clamped to [0, 1].
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let y = g.bilinear_upsample(x, 4, 4).unwrap();
        let coord = [0.0f64, 0.25, 0.75, 1.0];
        let src = [[0.0, 1.0], [2.0, 3.0]];
        let mut expect = Vec::new();
        for &sy in &coord {
            for &sx in &coord {
                let y0 = sy.floor() as usize;
                let y1 = (y0 + 1).min(1);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(1);
                let wy = sy - y0 as f64;
                let wx = sx - x0 as f64;
                expect.push(
                    (1.0 - wy) * (1.0 - wx) * src[y0][x0]
                        + (1.0 - wy) * wx * src[y0][x1]
                        + wy * (1.0 - wx) * src[y1][x0]
                        + wy * wx * src[y1][x1],
                );
            }
        }
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }
}
