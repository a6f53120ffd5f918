//! Minimal reverse-mode tape over dense f64 tensors.
//!
//! Ops are coarse-grained (matmul, fused layer-norm, fused masked softmax) so
//! a training step builds a few hundred nodes, not millions. The tape also
//! carries a replay trace: stop-gradient values and quantizer index choices
//! recorded on a forward pass can be pinned while the smooth part of the
//! computation is re-evaluated at perturbed parameters. Reverse mode computes
//! the exact gradient of that pinned surrogate, which is what finite
//! differences must check.

use crate::tensor::Tensor;
use rayon::prelude::*;

pub type VarId = usize;

/// Serial/parallel cutover for matmul kernels (elements of work).
const PAR_THRESHOLD: usize = 128 * 1024;
/// Minimum per-task rows/batches when a kernel is parallelized; keeps rayon
/// from splitting tiny inner matmuls into per-row tasks.
const PAR_MIN_LEN: usize = 64;

#[derive(Debug, Clone, Default)]
pub struct TraceData {
    pub sg_values: Vec<Tensor>,
    pub indices: Vec<Vec<usize>>,
}

enum Mode {
    Record,
    Replay {
        data: TraceData,
        sg_cursor: usize,
        idx_cursor: usize,
    },
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Scale(VarId, f64),
    AddConst(VarId),
    MatMul(VarId, VarId),
    Bmm {
        a: VarId,
        b: VarId,
        trans_b: bool,
    },
    AddRowBroadcast(VarId, VarId),
    Gather {
        src: VarId,
        rows: Vec<usize>,
    },
    ScatterRows {
        src: VarId,
        positions: Vec<usize>,
    },
    ConcatCols(Vec<VarId>),
    Reshape(VarId),
    Permute {
        src: VarId,
        perm: Vec<usize>,
    },
    LayerNormRows {
        src: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(VarId),
    SoftmaxScaledMasked {
        src: VarId,
        scale: f64,
    },
    Relu(VarId),
    Sigmoid(VarId),
    MeanRowsGrouped {
        src: VarId,
        group: usize,
    },
    SumSq(VarId),
    BceWithLogitsMean {
        logits: VarId,
        targets: Vec<f64>,
    },
    StopGrad(#[allow(dead_code)] VarId),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    /// Temporary per-op-kind wall-time profile (name, nanos), enabled by
    /// SIF_PROFILE=1.
    pub profile: std::cell::RefCell<std::collections::BTreeMap<&'static str, u128>>,
    nodes: Vec<Node>,
    mode: Mode,
    recorded: TraceData,
    /// Count of quantizer index choices that would differ from the recorded
    /// trace at the current (perturbed) point. Replay mode only.
    pub index_flips: usize,
    /// Multiply-accumulate count over all matmul/bmm ops executed so far.
    pub macs: u64,
    /// MACs from batched (attention) matmuls only.
    pub bmm_macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            profile: Default::default(),
            nodes: Vec::new(),
            mode: Mode::Record,
            recorded: TraceData::default(),
            index_flips: 0,
            macs: 0,
            bmm_macs: 0,
        }
    }

    pub fn new_replay(trace: TraceData) -> Self {
        Graph {
            profile: Default::default(),
            nodes: Vec::new(),
            mode: Mode::Replay {
                data: trace,
                sg_cursor: 0,
                idx_cursor: 0,
            },
            recorded: TraceData::default(),
            index_flips: 0,
            macs: 0,
            bmm_macs: 0,
        }
    }

    pub fn take_trace(self) -> TraceData {
        self.recorded
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::Scale(a, c))
    }

    /// Adds a constant tensor (no gradient flows into it). Used for masks.
    pub fn add_const(&mut self, a: VarId, c: &Tensor) -> VarId {
        let va = &self.nodes[a].value;
        assert_eq!(va.shape(), c.shape(), "add_const shape mismatch");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::AddConst(a))
    }

    /// 2D matrix product: (n,k) @ (k,m). Leading dims of `a` are folded.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (n, k) = (va.rows2(), va.cols2());
        let (kb, m) = (vb.rows2(), vb.cols2());
        assert_eq!(k, kb, "matmul inner dim mismatch: {} vs {}", k, kb);
        let out = mm_nn(va, vb);
        self.macs += (n * k * m) as u64;
        let value = Tensor::from_vec(&[n, m], out);
        self.push(value, Op::MatMul(a, b))
    }

    /// Batched matmul over the leading dim: (B,n,k) @ (B,k,m), or
    /// (B,n,k) @ (B,m,k)ᵀ when `trans_b`.
    pub fn bmm(&mut self, a: VarId, b: VarId, trans_b: bool) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (va.shape(), vb.shape());
        assert_eq!(sa.len(), 3, "bmm lhs must be 3D");
        assert_eq!(sb.len(), 3, "bmm rhs must be 3D");
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        let (bt, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        if trans_b {
            assert_eq!(sb[2], k, "bmm inner dim mismatch");
        } else {
            assert_eq!(sb[1], k, "bmm inner dim mismatch");
        }
        let mut out = vec![0.0; bt * n * m];
        let a_sz = n * k;
        let b_sz = sb[1] * sb[2];
        let o_sz = n * m;
        let run = |(bi, ochunk): (usize, &mut [f64])| {
            let ab = &va.data()[bi * a_sz..(bi + 1) * a_sz];
            let bb = &vb.data()[bi * b_sz..(bi + 1) * b_sz];
            if trans_b {
                kernel_nt(ab, bb, ochunk, n, k, m);
            } else {
                kernel_nn(ab, bb, ochunk, n, k, m);
            }
        };
        if bt * n * k * m >= PAR_THRESHOLD {
            out.par_chunks_mut(o_sz)
                .with_min_len(PAR_MIN_LEN)
                .enumerate()
                .for_each(run);
        } else {
            out.chunks_mut(o_sz).enumerate().for_each(run);
        }
        let macs = (bt * n * k * m) as u64;
        self.macs += macs;
        self.bmm_macs += macs;
        let value = Tensor::from_vec(&[bt, n, m], out);
        self.push(value, Op::Bmm { a, b, trans_b })
    }

    /// (n,m) + (m,) broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: VarId, bias: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[bias].value);
        let m = va.cols2();
        assert_eq!(vb.numel(), m, "bias width mismatch");
        let bd = vb.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % m])
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::AddRowBroadcast(a, bias))
    }

    /// out row i = src row rows[i]. Backward scatter-adds.
    pub fn gather(&mut self, src: VarId, rows: Vec<usize>) -> VarId {
        let vs = &self.nodes[src].value;
        let m = vs.cols2();
        let n_src = vs.rows2();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in &rows {
            assert!(r < n_src, "gather row {} out of {}", r, n_src);
            data.extend_from_slice(vs.row(r));
        }
        let value = Tensor::from_vec(&[rows.len(), m], data);
        self.push(value, Op::Gather { src, rows })
    }

    /// out has n_out rows, all zero except out[positions[i]] = src row i.
    /// Positions must be distinct.
    pub fn scatter_rows(&mut self, src: VarId, positions: Vec<usize>, n_out: usize) -> VarId {
        let vs = &self.nodes[src].value;
        let m = vs.cols2();
        assert_eq!(vs.rows2(), positions.len(), "scatter count mismatch");
        let mut data = vec![0.0; n_out * m];
        for (i, &p) in positions.iter().enumerate() {
            debug_assert!(p < n_out);
            data[p * m..(p + 1) * m].copy_from_slice(vs.row(i));
        }
        let value = Tensor::from_vec(&[n_out, m], data);
        self.push(value, Op::ScatterRows { src, positions })
    }

    /// Column-wise concat of 2D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0]].value.rows2();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = &self.nodes[p].value;
                assert_eq!(v.rows2(), n, "concat_cols row mismatch");
                v.cols2()
            })
            .collect();
        let m: usize = widths.iter().sum();
        let mut data = vec![0.0; n * m];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = &self.nodes[p].value;
            for r in 0..n {
                data[r * m + off..r * m + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        let value = Tensor::from_vec(&[n, m], data);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let value = self.nodes[a].value.with_shape(shape);
        self.push(value, Op::Reshape(a))
    }

    /// Axis permutation (rank up to 4).
    pub fn permute(&mut self, a: VarId, perm: &[usize]) -> VarId {
        let value = permute_tensor(&self.nodes[a].value, perm);
        self.push(
            value,
            Op::Permute {
                src: a,
                perm: perm.to_vec(),
            },
        )
    }

    /// Layer norm over the last dim with learned gamma/beta, eps = 1e-5.
    pub fn layer_norm_rows(&mut self, src: VarId, gamma: VarId, beta: VarId) -> VarId {
        const EPS: f64 = 1e-5;
        let vs = &self.nodes[src].value;
        let d = vs.cols2();
        let n = vs.rows2();
        let g = self.nodes[gamma].value.data();
        let b = self.nodes[beta].value.data();
        assert_eq!(g.len(), d, "gamma width mismatch");
        assert_eq!(b.len(), d, "beta width mismatch");
        let mut mean = vec![0.0; n];
        let mut inv_std = vec![0.0; n];
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let x = vs.row(r);
            let mu = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            mean[r] = mu;
            inv_std[r] = is;
            let out = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = g[j] * (x[j] - mu) * is + b[j];
            }
        }
        let value = Tensor::from_vec(vs.shape(), data);
        self.push(
            value,
            Op::LayerNormRows {
                src,
                gamma,
                beta,
                mean,
                inv_std,
            },
        )
    }

    /// Fused softmax(scale * x + mask) over the last dim; the additive mask
    /// is a constant (no gradient) and may be omitted.
    pub fn softmax_scaled_masked(&mut self, a: VarId, scale: f64, mask: Option<&Tensor>) -> VarId {
        let va = &self.nodes[a].value;
        let m = va.cols2();
        let n = va.rows2();
        if let Some(mk) = mask {
            assert_eq!(mk.numel(), va.numel(), "mask shape mismatch");
        }
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let x = va.row(r);
            let out = &mut data[r * m..(r + 1) * m];
            match mask {
                Some(mk) => {
                    let mrow = &mk.data()[r * m..(r + 1) * m];
                    for j in 0..m {
                        out[j] = scale * x[j] + mrow[j];
                    }
                }
                None => {
                    for j in 0..m {
                        out[j] = scale * x[j];
                    }
                }
            }
            let mx = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in out.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in out.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::SoftmaxScaledMasked { src: a, scale })
    }

    /// Softmax over the last dim. Mask by adding large negatives beforehand.
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a].value;
        let m = va.cols2();
        let n = va.rows2();
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let x = va.row(r);
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * m..(r + 1) * m];
            let mut z = 0.0;
            for j in 0..m {
                let e = (x[j] - mx).exp();
                out[j] = e;
                z += e;
            }
            for v in out.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::Sigmoid(a))
    }

    /// Mean over consecutive row groups: (n*g, m) -> (n, m).
    pub fn mean_rows_grouped(&mut self, a: VarId, group: usize) -> VarId {
        let va = &self.nodes[a].value;
        let m = va.cols2();
        let n_in = va.rows2();
        assert_eq!(n_in % group, 0, "group does not divide rows");
        let n = n_in / group;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let out = &mut data[i * m..(i + 1) * m];
            for gi in 0..group {
                let r = va.row(i * group + gi);
                for j in 0..m {
                    out[j] += r[j];
                }
            }
            for v in out.iter_mut() {
                *v /= group as f64;
            }
        }
        let value = Tensor::from_vec(&[n, m], data);
        self.push(value, Op::MeanRowsGrouped { src: a, group })
    }

    /// Sum of squared entries -> scalar.
    pub fn sum_sq(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a].value;
        let s: f64 = va.data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSq(a))
    }

    /// Numerically stable mean binary cross-entropy from logits.
    pub fn bce_with_logits_mean(&mut self, logits: VarId, targets: Vec<f64>) -> VarId {
        let vl = &self.nodes[logits].value;
        assert_eq!(vl.numel(), targets.len(), "bce target count mismatch");
        let n = targets.len() as f64;
        let s: f64 = vl
            .data()
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        self.push(
            Tensor::scalar(s / n),
            Op::BceWithLogitsMean { logits, targets },
        )
    }

    /// Identity in value; blocks gradient. In replay mode the recorded value
    /// is substituted so finite differences see the same surrogate that the
    /// backward pass differentiates.
    pub fn stop_grad(&mut self, a: VarId) -> VarId {
        let value = match &mut self.mode {
            Mode::Record => {
                let v = self.nodes[a].value.clone();
                self.recorded.sg_values.push(v.clone());
                v
            }
            Mode::Replay { data, sg_cursor, .. } => {
                let v = data.sg_values[*sg_cursor].clone();
                *sg_cursor += 1;
                assert_eq!(
                    v.shape(),
                    self.nodes[a].value.shape(),
                    "replay sg shape drift"
                );
                v
            }
        };
        self.push(value, Op::StopGrad(a))
    }

    /// Routes quantizer index choices through the trace: recorded on the
    /// first pass, replayed (with flip detection) afterwards.
    pub fn trace_indices(&mut self, fresh: Vec<usize>) -> Vec<usize> {
        match &mut self.mode {
            Mode::Record => {
                self.recorded.indices.push(fresh.clone());
                fresh
            }
            Mode::Replay {
                data, idx_cursor, ..
            } => {
                let stored = data.indices[*idx_cursor].clone();
                *idx_cursor += 1;
                if stored != fresh {
                    self.index_flips += 1;
                }
                stored
            }
        }
    }

    /// Reverse pass from a scalar output. Returns per-node gradients
    /// (None where no gradient reached).
    pub fn backward(&self, out: VarId) -> Vec<Option<Tensor>> {
        assert_eq!(self.nodes[out].value.numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out] = Some(Tensor::scalar(1.0));
        for id in (0..=out).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn backprop_node(&self, id: VarId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.data(), g.shape());
                accum(grads, *b, g.data(), g.shape());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.data(), g.shape());
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                accum(grads, *b, &neg, g.shape());
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                accum(grads, *a, &d, self.nodes[*a].value.shape());
            }
            Op::AddConst(a) => {
                accum(grads, *a, g.data(), g.shape());
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k) = (va.rows2(), va.cols2());
                let m = vb.cols2();
                let da = mm_nt(g.data(), vb.data(), n, m, k);
                let db = mm_tn(va.data(), g.data(), n, k, m);
                accum(grads, *a, &da, va.shape());
                accum(grads, *b, &db, vb.shape());
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (bt, n, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let m = g.shape()[2];
                let a_sz = n * k;
                let b_sz = vb.shape()[1] * vb.shape()[2];
                let o_sz = n * m;
                let mut da = vec![0.0; bt * a_sz];
                let mut db = vec![0.0; bt * b_sz];
                let run = |(bi, (dab, dbb)): (usize, (&mut [f64], &mut [f64]))| {
                    let ab = &va.data()[bi * a_sz..(bi + 1) * a_sz];
                    let bb = &vb.data()[bi * b_sz..(bi + 1) * b_sz];
                    let gb = &g.data()[bi * o_sz..(bi + 1) * o_sz];
                    if *trans_b {
                        // out = a @ bᵀ, b is (m,k)
                        kernel_nn(gb, bb, dab, n, m, k);
                        kernel_tn(gb, ab, dbb, n, m, k);
                    } else {
                        kernel_nt(gb, bb, dab, n, m, k);
                        kernel_tn(ab, gb, dbb, n, k, m);
                    }
                };
                if bt * n * k * m >= PAR_THRESHOLD {
                    da.par_chunks_mut(a_sz)
                        .with_min_len(PAR_MIN_LEN)
                        .zip(db.par_chunks_mut(b_sz).with_min_len(PAR_MIN_LEN))
                        .enumerate()
                        .map(|(i, (x, y))| (i, (x, y)))
                        .for_each(run);
                } else {
                    da.chunks_mut(a_sz)
                        .zip(db.chunks_mut(b_sz))
                        .enumerate()
                        .map(|(i, (x, y))| (i, (x, y)))
                        .for_each(run);
                }
                accum(grads, *a, &da, va.shape());
                accum(grads, *b, &db, vb.shape());
            }
            Op::AddRowBroadcast(a, bias) => {
                accum(grads, *a, g.data(), g.shape());
                let m = self.nodes[*bias].value.numel();
                let mut dbias = vec![0.0; m];
                for (i, v) in g.data().iter().enumerate() {
                    dbias[i % m] += v;
                }
                accum(grads, *bias, &dbias, self.nodes[*bias].value.shape());
            }
            Op::Gather { src, rows } => {
                let vs = &self.nodes[*src].value;
                let m = vs.cols2();
                let mut d = vec![0.0; vs.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    let grow = &g.data()[i * m..(i + 1) * m];
                    let drow = &mut d[r * m..(r + 1) * m];
                    for j in 0..m {
                        drow[j] += grow[j];
                    }
                }
                accum(grads, *src, &d, vs.shape());
            }
            Op::ScatterRows { src, positions } => {
                let vs = &self.nodes[*src].value;
                let m = vs.cols2();
                let mut d = vec![0.0; vs.numel()];
                for (i, &p) in positions.iter().enumerate() {
                    d[i * m..(i + 1) * m].copy_from_slice(&g.data()[p * m..(p + 1) * m]);
                }
                accum(grads, *src, &d, vs.shape());
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[parts[0]].value.rows2();
                let m = g.cols2();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols2();
                    let mut d = vec![0.0; n * w];
                    for r in 0..n {
                        d[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * m + off..r * m + off + w]);
                    }
                    accum(grads, p, &d, self.nodes[p].value.shape());
                    off += w;
                }
            }
            Op::Reshape(a) => {
                let src_shape = self.nodes[*a].value.shape();
                if grads[*a].is_none() {
                    grads[*a] = Some(g.with_shape(src_shape));
                } else {
                    accum(grads, *a, g.data(), src_shape);
                }
            }
            Op::Permute { src, perm } => {
                let inv = invert_perm(perm);
                let back = permute_tensor(g, &inv);
                accum(grads, *src, back.data(), self.nodes[*src].value.shape());
            }
            Op::LayerNormRows {
                src,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let vs = &self.nodes[*src].value;
                let d = vs.cols2();
                let n = vs.rows2();
                let gm = self.nodes[*gamma].value.data();
                let mut dsrc = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..n {
                    let x = vs.row(r);
                    let go = &g.data()[r * d..(r + 1) * d];
                    let (mu, is) = (mean[r], inv_std[r]);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let xh = (x[j] - mu) * is;
                        let dxh = go[j] * gm[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dgamma[j] += go[j] * xh;
                        dbeta[j] += go[j];
                    }
                    let dn = d as f64;
                    let ds = &mut dsrc[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xh = (x[j] - mu) * is;
                        let dxh = go[j] * gm[j];
                        ds[j] = (is / dn) * (dn * dxh - sum_dxh - xh * sum_dxh_xh);
                    }
                }
                accum(grads, *src, &dsrc, vs.shape());
                accum(grads, *gamma, &dgamma, self.nodes[*gamma].value.shape());
                accum(grads, *beta, &dbeta, self.nodes[*beta].value.shape());
            }
            Op::SoftmaxScaledMasked { src, scale } => {
                let y = &node.value;
                let m = y.cols2();
                let n = y.rows2();
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    let yr = y.row(r);
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dr = &mut d[r * m..(r + 1) * m];
                    for j in 0..m {
                        dr[j] = scale * yr[j] * (gr[j] - dot);
                    }
                }
                accum(grads, *src, &d, self.nodes[*src].value.shape());
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let m = y.cols2();
                let n = y.rows2();
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    let yr = y.row(r);
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dr = &mut d[r * m..(r + 1) * m];
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accum(grads, *a, &d, self.nodes[*a].value.shape());
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accum(grads, *a, &d, self.nodes[*a].value.shape());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                accum(grads, *a, &d, self.nodes[*a].value.shape());
            }
            Op::MeanRowsGrouped { src, group } => {
                let vs = &self.nodes[*src].value;
                let m = vs.cols2();
                let n = g.rows2();
                let inv = 1.0 / *group as f64;
                let mut d = vec![0.0; vs.numel()];
                for i in 0..n {
                    let gr = &g.data()[i * m..(i + 1) * m];
                    for gi in 0..*group {
                        let dr = &mut d[(i * group + gi) * m..(i * group + gi + 1) * m];
                        for j in 0..m {
                            dr[j] = gr[j] * inv;
                        }
                    }
                }
                accum(grads, *src, &d, vs.shape());
            }
            Op::SumSq(a) => {
                let x = self.nodes[*a].value.data();
                let gv = g.item();
                let d: Vec<f64> = x.iter().map(|&v| 2.0 * v * gv).collect();
                accum(grads, *a, &d, self.nodes[*a].value.shape());
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let x = self.nodes[*logits].value.data();
                let gv = g.item();
                let n = targets.len() as f64;
                let d: Vec<f64> = x
                    .iter()
                    .zip(targets)
                    .map(|(&xv, &yv)| gv * (sigmoid(xv) - yv) / n)
                    .collect();
                accum(grads, *logits, &d, self.nodes[*logits].value.shape());
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accum(grads: &mut [Option<Tensor>], id: VarId, contribution: &[f64], shape: &[usize]) {
    match &mut grads[id] {
        Some(t) => {
            for (dst, src) in t.data_mut().iter_mut().zip(contribution) {
                *dst += src;
            }
        }
        None => {
            grads[id] = Some(Tensor::from_vec(shape, contribution.to_vec()));
        }
    }
}

// --- matmul kernels -------------------------------------------------------

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// out(n,m) += a(n,k) @ b(k,m); out must be zeroed.
fn kernel_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)).take(n) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(m)) {
            if av != 0.0 {
                axpy(av, brow, orow);
            }
        }
    }
}

/// out(n,m) += a(n,k) @ b(m,k)ᵀ.
fn kernel_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)).take(n) {
        for (ov, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
            *ov += dot(arow, brow);
        }
    }
    let _ = m;
}

/// out(k,m) += a(n,k)ᵀ @ c(n,m).
fn kernel_tn(a: &[f64], c: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact(m)).take(n) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(m)) {
            if av != 0.0 {
                axpy(av, crow, orow);
            }
        }
    }
    let _ = k;
}

fn mm_nn(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k) = (a.rows2(), a.cols2());
    let m = b.cols2();
    let mut out = vec![0.0; n * m];
    if n * k * m >= PAR_THRESHOLD && n > 1 {
        let bd = b.data();
        out.par_chunks_mut(m).with_min_len(PAR_MIN_LEN).enumerate().for_each(|(i, orow)| {
            let arow = a.row(i);
            for (&av, brow) in arow.iter().zip(bd.chunks_exact(m)) {
                if av != 0.0 {
                    axpy(av, brow, orow);
                }
            }
        });
    } else {
        kernel_nn(a.data(), b.data(), &mut out, n, k, m);
    }
    out
}

fn mm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    if n * k * m >= PAR_THRESHOLD && n > 1 {
        out.par_chunks_mut(m).with_min_len(PAR_MIN_LEN).enumerate().for_each(|(i, orow)| {
            let arow = &a[i * k..(i + 1) * k];
            for (ov, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
                *ov = dot(arow, brow);
            }
        });
    } else {
        kernel_nt(a, b, &mut out, n, k, m);
    }
    out
}

fn mm_tn(a: &[f64], c: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    if n * k * m >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(m).with_min_len(8).enumerate().for_each(|(kk, orow)| {
            for i in 0..n {
                let av = a[i * k + kk];
                if av != 0.0 {
                    axpy(av, &c[i * m..(i + 1) * m], orow);
                }
            }
        });
    } else {
        kernel_tn(a, c, &mut out, n, k, m);
    }
    out
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    assert_eq!(perm.len(), rank, "perm rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // the model's permutes all swap the middle axes of a 4D tensor with the
    // last axis contiguous; move whole chunks instead of single elements
    if rank == 4 && perm == [0, 2, 1, 3] {
        let (a, b, c, d) = (shape[0], shape[1], shape[2], shape[3]);
        let src = t.data();
        let mut data = vec![0.0; t.numel()];
        for ai in 0..a {
            for ci in 0..c {
                let dst = &mut data[(ai * c + ci) * b * d..(ai * c + ci + 1) * b * d];
                for bi in 0..b {
                    let s = ((ai * b + bi) * c + ci) * d;
                    dst[bi * d..(bi + 1) * d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        return Tensor::from_vec(&out_shape, data);
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let mut data = vec![0.0; t.numel()];
    let src = t.data();
    // walk output linearly, map back to input offset
    for (out_off, slot) in data.iter_mut().enumerate() {
        let mut rem = out_off;
        let mut in_off = 0;
        for d in 0..rank {
            let idx = rem / out_strides[d];
            rem %= out_strides[d];
            in_off += idx * in_strides[perm[d]];
        }
        *slot = src[in_off];
    }
    Tensor::from_vec(&out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of a scalar graph output against the tape
    /// gradients, for every entry of every leaf.
    fn fd_check<F>(build: F, leaves: &[Tensor], tol: f64)
    where
        F: Fn(&mut Graph, &[VarId]) -> VarId,
    {
        let eval = |inputs: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<VarId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &ids);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let ids: Vec<VarId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        let grads = g.backward(out);
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads[ids[li]]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(leaf.shape()));
            for e in 0..leaf.numel() {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[e] += h;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data()[e];
                let rel = (an - fd).abs() / (an.abs().max(fd.abs()) + 1e-4);
                assert!(
                    rel < tol,
                    "leaf {} elem {}: analytic {} vs fd {} (rel {})",
                    li,
                    e,
                    an,
                    fd,
                    rel
                );
            }
        }
    }

    fn rng_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rng_tensor(&[3, 4], &mut rng);
        let b = rng_tensor(&[4, 2], &mut rng);
        fd_check(
            |g, ids| {
                let p = g.matmul(ids[0], ids[1]);
                g.sum_sq(p)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn bmm_grad_both_orientations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rng_tensor(&[2, 3, 4], &mut rng);
        let b = rng_tensor(&[2, 4, 3], &mut rng);
        fd_check(
            |g, ids| {
                let p = g.bmm(ids[0], ids[1], false);
                g.sum_sq(p)
            },
            &[a.clone(), b.clone()],
            1e-6,
        );
        let bt = rng_tensor(&[2, 5, 4], &mut rng);
        fd_check(
            |g, ids| {
                let p = g.bmm(ids[0], ids[1], true);
                g.sum_sq(p)
            },
            &[a, bt],
            1e-6,
        );
    }

    #[test]
    fn layer_norm_softmax_relu_sigmoid_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rng_tensor(&[4, 6], &mut rng);
        let gamma = rng_tensor(&[6], &mut rng);
        let beta = rng_tensor(&[6], &mut rng);
        fd_check(
            |g, ids| {
                let ln = g.layer_norm_rows(ids[0], ids[1], ids[2]);
                let sm = g.softmax_rows(ln);
                let r = g.relu(sm);
                let s = g.sigmoid(r);
                g.sum_sq(s)
            },
            &[x, gamma, beta],
            1e-5,
        );
    }

    #[test]
    fn gather_scatter_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = rng_tensor(&[5, 3], &mut rng);
        let other = rng_tensor(&[4, 2], &mut rng);
        fd_check(
            |g, ids| {
                let ga = g.gather(ids[0], vec![0, 2, 2, 4]);
                let cc = g.concat_cols(&[ga, ids[1]]);
                let sc = g.scatter_rows(cc, vec![1, 3, 0, 5], 6);
                g.sum_sq(sc)
            },
            &[src, other],
            1e-6,
        );
    }

    #[test]
    fn permute_reshape_mean_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rng_tensor(&[2, 3, 4], &mut rng);
        fd_check(
            |g, ids| {
                let p = g.permute(ids[0], &[1, 0, 2]);
                let r = g.reshape(p, &[6, 4]);
                let m = g.mean_rows_grouped(r, 3);
                g.sum_sq(m)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn bce_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rng_tensor(&[4, 3], &mut rng);
        let b = rng_tensor(&[3], &mut rng);
        let w = rng_tensor(&[3, 1], &mut rng);
        fd_check(
            |g, ids| {
                let xb = g.add_row_broadcast(ids[0], ids[1]);
                let lo = g.matmul(xb, ids[2]);
                g.bce_with_logits_mean(lo, vec![1.0, 0.0, 1.0, 0.0])
            },
            &[x, b, w],
            1e-6,
        );
    }

    #[test]
    fn stop_grad_blocks() {
        let x = Tensor::from_vec(&[2], vec![0.3, -0.7]);
        let mut g = Graph::new();
        let xi = g.leaf(x);
        let sg = g.stop_grad(xi);
        let s = g.sum_sq(sg);
        let grads = g.backward(s);
        assert!(grads[xi].is_none() || grads[xi].as_ref().unwrap().max_abs() == 0.0);
    }

    #[test]
    fn replay_substitutes_sg_values() {
        let build = |g: &mut Graph, x: Tensor| -> (VarId, VarId) {
            let xi = g.leaf(x);
            let sg = g.stop_grad(xi);
            let d = g.sub(xi, sg);
            (xi, g.sum_sq(d))
        };
        let mut g = Graph::new();
        let (_, out) = build(&mut g, Tensor::from_vec(&[2], vec![1.0, 2.0]));
        assert_eq!(g.value(out).item(), 0.0);
        let trace = g.take_trace();
        // replay at a shifted point: sg keeps the recorded value
        let mut g2 = Graph::new_replay(trace);
        let (_, out2) = build(&mut g2, Tensor::from_vec(&[2], vec![1.5, 2.0]));
        assert!((g2.value(out2).item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rng_tensor(&[8, 5], &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(x);
        let sm = g.softmax_rows(xi);
        for r in 0..8 {
            let s: f64 = g.value(sm).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mac_counter_counts_matmuls() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[3, 4]));
        let b = g.leaf(Tensor::zeros(&[4, 5]));
        g.matmul(a, b);
        assert_eq!(g.macs, 60);
        let c = g.leaf(Tensor::zeros(&[2, 3, 4]));
        let d = g.leaf(Tensor::zeros(&[2, 4, 5]));
        g.bmm(c, d, false);
        assert_eq!(g.macs, 60 + 120);
        assert_eq!(g.bmm_macs, 120);
    }
}
