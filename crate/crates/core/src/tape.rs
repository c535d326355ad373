//! Define-by-run reverse-mode autodiff over dense f64 tensors.
//!
//! Every primitive's backward rule is expressed through the same primitives,
//! so `backward` appends ordinary nodes to the tape and its outputs can be
//! differentiated again. That closure property is what makes the gradient
//! penalty trainable: the norm of an input gradient is itself a tape value.
//!
//! Shapes follow the conventions `[n, c, h, w]` for image batches, `[n, f]`
//! for flattened features, `[n]` for per-sample values, and `[]` (rank 0)
//! for scalars. Shape mismatches are programming errors and panic.

use std::sync::Arc;

use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn};

use crate::conv::{conv2d, conv_kernel_grad, conv_transpose2d, Boundary};
use crate::physics::KnownLinearOperator;

pub type NodeId = usize;

#[derive(Clone)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        boundary: Boundary,
    },
    ConvTranspose2d {
        g: NodeId,
        w: NodeId,
        boundary: Boundary,
    },
    ConvKernelGrad {
        x: NodeId,
        g: NodeId,
        boundary: Boundary,
    },
    SumAll(NodeId),
    SumPerSample(NodeId),
    SumHw(NodeId),
    SumToBias(NodeId),
    SumRows(NodeId),
    BroadcastAll(NodeId),
    BroadcastPerSample(NodeId),
    BroadcastHw(NodeId),
    BroadcastBias(NodeId),
    BroadcastRows(NodeId),
    Reshape(NodeId),
    SliceChannels {
        x: NodeId,
        from: usize,
    },
    EmbedChannels {
        x: NodeId,
        at: usize,
    },
    SumPool2(NodeId),
    UpsampleNearest2(NodeId),
    LinearOp {
        x: NodeId,
        op: Arc<KnownLinearOperator>,
        adjoint: bool,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Growing computation graph; values are computed eagerly.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a rank-0 (or single-element) node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.len(), 1, "scalar_value on node of length {}", v.len());
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        // Keep every node in standard layout so raw-slice access always works
        // (a transposed owned array would otherwise stay Fortran-ordered).
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Differentiable input (parameters, data).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input (masks, interpolation weights).
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Copies a node's value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.constant(v)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "{what}: shapes differ"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "add");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "sub");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "mul");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.leaky_relu(a, 0.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let r = self.recip(b);
        self.mul(a, r)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be rank 2");
        let bv = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be rank 2");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let av = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose expects rank 2");
        let v = av.t().to_owned().into_dyn();
        self.push(v, Op::Transpose(a))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, boundary: Boundary) -> NodeId {
        let xv = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d input must be rank 4");
        let wv = self.nodes[w]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d kernel must be rank 4");
        let v = conv2d(xv, wv, boundary).into_dyn();
        self.push(v, Op::Conv2d { x, w, boundary })
    }

    pub fn conv_transpose2d(&mut self, g: NodeId, w: NodeId, boundary: Boundary) -> NodeId {
        let gv = self.nodes[g]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv_transpose2d input must be rank 4");
        let wv = self.nodes[w]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv_transpose2d kernel must be rank 4");
        let v = conv_transpose2d(gv, wv, boundary).into_dyn();
        self.push(v, Op::ConvTranspose2d { g, w, boundary })
    }

    pub fn conv_kernel_grad(
        &mut self,
        x: NodeId,
        g: NodeId,
        kh: usize,
        kw: usize,
        boundary: Boundary,
    ) -> NodeId {
        let xv = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv_kernel_grad x must be rank 4");
        let gv = self.nodes[g]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv_kernel_grad g must be rank 4");
        let v = conv_kernel_grad(xv, gv, kh, kw, boundary).into_dyn();
        self.push(v, Op::ConvKernelGrad { x, g, boundary })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// `[n, ...] -> [n]`, summing everything but the first axis.
    pub fn sum_per_sample(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let n = v.shape()[0];
        let span = v.len() / n;
        let src = v.as_slice().expect("standard layout");
        let mut out = ArrayD::zeros(IxDyn(&[n]));
        {
            let dst = out.as_slice_mut().unwrap();
            for (k, chunk) in src.chunks_exact(span).enumerate() {
                dst[k] = chunk.iter().sum();
            }
        }
        self.push(out, Op::SumPerSample(a))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn sum_hw(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].value.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let src = self.nodes[a].value.as_slice().expect("standard layout");
        let mut out = ArrayD::zeros(IxDyn(&[n, c]));
        {
            let dst = out.as_slice_mut().unwrap();
            for (k, chunk) in src.chunks_exact(h * w).enumerate() {
                dst[k] = chunk.iter().sum();
            }
        }
        self.push(out, Op::SumHw(a))
    }

    /// `[n, c, h, w] -> [c]`.
    pub fn sum_to_bias(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("sum_to_bias expects rank 4");
        let (n, c, h, w) = v.dim();
        let src = self.nodes[a].value.as_slice().expect("standard layout");
        let mut out = ArrayD::zeros(IxDyn(&[c]));
        {
            let dst = out.as_slice_mut().unwrap();
            for (k, chunk) in src.chunks_exact(h * w).enumerate() {
                dst[k % c] += chunk.iter().sum::<f64>();
            }
            let _ = n;
        }
        self.push(out, Op::SumToBias(a))
    }

    /// `[n, f] -> [f]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("sum_rows expects rank 2");
        let out = v.sum_axis(Axis(0)).into_dyn();
        self.push(out, Op::SumRows(a))
    }

    /// Scalar -> any shape.
    pub fn broadcast_all(&mut self, s: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[s].value.clone();
        assert_eq!(v.len(), 1, "broadcast_all expects a scalar");
        let out = ArrayD::from_elem(IxDyn(shape), *v.iter().next().unwrap());
        self.push(out, Op::BroadcastAll(s))
    }

    /// `[n] -> [n, ...]`, replicating each sample's value.
    pub fn broadcast_per_sample(&mut self, s: NodeId, shape: &[usize]) -> NodeId {
        let v = &self.nodes[s].value;
        assert_eq!(v.ndim(), 1, "broadcast_per_sample expects rank 1");
        assert_eq!(v.shape()[0], shape[0], "sample count mismatch");
        let vals: Vec<f64> = v.iter().copied().collect();
        let mut out = ArrayD::zeros(IxDyn(shape));
        {
            let span: usize = shape[1..].iter().product();
            let dst = out.as_slice_mut().unwrap();
            for (k, chunk) in dst.chunks_exact_mut(span).enumerate() {
                chunk.fill(vals[k]);
            }
        }
        self.push(out, Op::BroadcastPerSample(s))
    }

    /// `[n, c] -> [n, c, h, w]`.
    pub fn broadcast_hw(&mut self, s: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[s]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("broadcast_hw expects rank 2");
        assert_eq!(shape.len(), 4);
        assert_eq!(v.dim(), (shape[0], shape[1]), "broadcast_hw prefix mismatch");
        let vals: Vec<f64> = v.iter().copied().collect();
        let mut out = ArrayD::zeros(IxDyn(shape));
        {
            let dst = out.as_slice_mut().unwrap();
            let plane = shape[2] * shape[3];
            for (k, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.fill(vals[k]);
            }
        }
        self.push(out, Op::BroadcastHw(s))
    }

    /// `[c] -> [n, c, h, w]`.
    pub fn broadcast_bias(&mut self, s: NodeId, shape: &[usize]) -> NodeId {
        let v = &self.nodes[s].value;
        assert_eq!(v.ndim(), 1);
        assert_eq!(shape.len(), 4);
        assert_eq!(v.shape()[0], shape[1], "bias channel mismatch");
        let vals: Vec<f64> = v.iter().copied().collect();
        let mut out = ArrayD::zeros(IxDyn(shape));
        {
            let dst = out.as_slice_mut().unwrap();
            let plane = shape[2] * shape[3];
            let c = shape[1];
            for (k, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.fill(vals[k % c]);
            }
        }
        self.push(out, Op::BroadcastBias(s))
    }

    /// `[f] -> [n, f]`.
    pub fn broadcast_rows(&mut self, s: NodeId, n: usize) -> NodeId {
        let v = &self.nodes[s].value;
        assert_eq!(v.ndim(), 1);
        let f = v.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[n, f]));
        for i in 0..n {
            for j in 0..f {
                out[[i, j]] = v[[j]];
            }
        }
        self.push(out, Op::BroadcastRows(s))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape");
        self.push(v, Op::Reshape(a))
    }

    /// `[n, c, h, w] -> [n, to-from, h, w]`.
    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("slice_channels expects rank 4");
        let (n, c, h, w) = v.dim();
        assert!(from < to && to <= c, "slice_channels range out of bounds");
        let src = self.nodes[x].value.as_slice().expect("standard layout");
        let mut out = ndarray::Array4::zeros((n, to - from, h, w));
        {
            let dst = out.as_slice_mut().unwrap();
            let plane = h * w;
            let span = (to - from) * plane;
            for ni in 0..n {
                let sbase = (ni * c + from) * plane;
                dst[ni * span..(ni + 1) * span]
                    .copy_from_slice(&src[sbase..sbase + span]);
            }
        }
        self.push(out.into_dyn(), Op::SliceChannels { x, from })
    }

    /// Embeds `[n, c, h, w]` into `total` channels at offset `at`; the rest
    /// is zero.
    pub fn embed_channels(&mut self, x: NodeId, total: usize, at: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("embed_channels expects rank 4");
        let (n, c, h, w) = v.dim();
        assert!(at + c <= total, "embed_channels out of range");
        let src = self.nodes[x].value.as_slice().expect("standard layout");
        let mut out = ndarray::Array4::zeros((n, total, h, w));
        {
            let dst = out.as_slice_mut().unwrap();
            let plane = h * w;
            let span = c * plane;
            for ni in 0..n {
                let dbase = (ni * total + at) * plane;
                dst[dbase..dbase + span]
                    .copy_from_slice(&src[ni * span..(ni + 1) * span]);
            }
        }
        self.push(out.into_dyn(), Op::EmbedChannels { x, at })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let ca = self.nodes[a].value.shape()[1];
        let cb = self.nodes[b].value.shape()[1];
        let ea = self.embed_channels(a, ca + cb, 0);
        let eb = self.embed_channels(b, ca + cb, ca);
        self.add(ea, eb)
    }

    /// `[n, c, 2h, 2w] -> [n, c, h, w]`, summing each 2x2 block.
    pub fn sum_pool2(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("sum_pool2 expects rank 4");
        let (n, c, h, w) = v.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2 needs even spatial dims");
        let src = self.nodes[a].value.as_slice().expect("standard layout");
        let mut out = ndarray::Array4::zeros((n, c, h / 2, w / 2));
        {
            let dst = out.as_slice_mut().unwrap();
            let (oh, ow) = (h / 2, w / 2);
            for p in 0..n * c {
                let sp = &src[p * h * w..(p + 1) * h * w];
                let dp = &mut dst[p * oh * ow..(p + 1) * oh * ow];
                for i in 0..oh {
                    let r0 = &sp[2 * i * w..(2 * i + 1) * w];
                    let r1 = &sp[(2 * i + 1) * w..(2 * i + 2) * w];
                    let drow = &mut dp[i * ow..(i + 1) * ow];
                    for j in 0..ow {
                        drow[j] = r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::SumPool2(a))
    }

    pub fn avg_pool2(&mut self, a: NodeId) -> NodeId {
        let s = self.sum_pool2(a);
        self.mul_scalar(s, 0.25)
    }

    /// `[n, c, h, w] -> [n, c, 2h, 2w]` by pixel replication.
    pub fn upsample_nearest2(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("upsample expects rank 4");
        let (n, c, h, w) = v.dim();
        let src = self.nodes[a].value.as_slice().expect("standard layout");
        let mut out = ndarray::Array4::zeros((n, c, 2 * h, 2 * w));
        {
            let dst = out.as_slice_mut().unwrap();
            let (oh, ow) = (2 * h, 2 * w);
            for p in 0..n * c {
                let sp = &src[p * h * w..(p + 1) * h * w];
                let dp = &mut dst[p * oh * ow..(p + 1) * oh * ow];
                for i in 0..h {
                    let srow = &sp[i * w..(i + 1) * w];
                    let (d0, d1) = dp[2 * i * ow..(2 * i + 2) * ow].split_at_mut(ow);
                    for j in 0..w {
                        let val = srow[j];
                        d0[2 * j] = val;
                        d0[2 * j + 1] = val;
                        d1[2 * j] = val;
                        d1[2 * j + 1] = val;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::UpsampleNearest2(a))
    }

    /// Applies a known linear operator (or its adjoint); the backward rule is
    /// the opposite direction.
    pub fn linear_op(
        &mut self,
        x: NodeId,
        op: Arc<KnownLinearOperator>,
        adjoint: bool,
    ) -> NodeId {
        let xv = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("linear_op expects rank 4");
        let v = if adjoint {
            op.adjoint(xv).expect("linear operator adjoint")
        } else {
            op.apply(xv).expect("linear operator apply")
        };
        self.push(v.into_dyn(), Op::LinearOp { x, op, adjoint })
    }

    /// Mean absolute value over every element: the l1-type norm used by the
    /// training losses.
    pub fn mean_abs(&mut self, a: NodeId) -> NodeId {
        let ab = self.abs(a);
        self.mean_all(ab)
    }

    /// Reverse accumulation from `output`, returning one gradient node per
    /// `wrt` entry (`None` when no path connects it). The appended gradient
    /// nodes are themselves differentiable.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Vec<Option<NodeId>> {
        let limit = output;
        let mut adj: Vec<Option<NodeId>> = vec![None; limit + 1];
        let seed_shape = self.nodes[output].value.raw_dim();
        let seed = self.constant(ArrayD::ones(seed_shape));
        adj[output] = Some(seed);

        for i in (0..=limit).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let contribs: Vec<(NodeId, NodeId)> = match op {
                Op::Leaf | Op::Const => vec![],
                Op::Add(a, b) => vec![(a, g), (b, g)],
                Op::Sub(a, b) => {
                    let ng = self.neg(g);
                    vec![(a, g), (b, ng)]
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, b);
                    let gb = self.mul(g, a);
                    vec![(a, ga), (b, gb)]
                }
                Op::Neg(a) => {
                    let ng = self.neg(g);
                    vec![(a, ng)]
                }
                Op::Recip(a) => {
                    // d(1/a) = -y^2 with y the output node.
                    let y2 = self.mul(i, i);
                    let t = self.mul(g, y2);
                    let c = self.neg(t);
                    vec![(a, c)]
                }
                Op::Sqrt(a) => {
                    let inv = self.recip(i);
                    let half = self.mul_scalar(inv, 0.5);
                    let c = self.mul(g, half);
                    vec![(a, c)]
                }
                Op::Ln(a) => {
                    let inv = self.recip(a);
                    let c = self.mul(g, inv);
                    vec![(a, c)]
                }
                Op::Abs(a) => {
                    let sign = self.nodes[a].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    let sc = self.constant(sign);
                    let c = self.mul(g, sc);
                    vec![(a, c)]
                }
                Op::Sigmoid(a) => {
                    let one_minus = {
                        let n = self.neg(i);
                        self.add_scalar(n, 1.0)
                    };
                    let d = self.mul(i, one_minus);
                    let c = self.mul(g, d);
                    vec![(a, c)]
                }
                Op::LeakyRelu(a, slope) => {
                    let mask = self.nodes[a]
                        .value
                        .mapv(|x| if x > 0.0 { 1.0 } else { slope });
                    let mc = self.constant(mask);
                    let c = self.mul(g, mc);
                    vec![(a, c)]
                }
                Op::AddScalar(a) => vec![(a, g)],
                Op::MulScalar(a, c0) => {
                    let c = self.mul_scalar(g, c0);
                    vec![(a, c)]
                }
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b);
                    let ga = self.matmul(g, bt);
                    let at = self.transpose(a);
                    let gb = self.matmul(at, g);
                    vec![(a, ga), (b, gb)]
                }
                Op::Transpose(a) => {
                    let c = self.transpose(g);
                    vec![(a, c)]
                }
                Op::Conv2d { x, w, boundary } => {
                    let gx = self.conv_transpose2d(g, w, boundary);
                    let shape = self.nodes[w].value.shape().to_vec();
                    let gw = self.conv_kernel_grad(x, g, shape[2], shape[3], boundary);
                    vec![(x, gx), (w, gw)]
                }
                Op::ConvTranspose2d { g: g0, w, boundary } => {
                    let gg = self.conv2d(g, w, boundary);
                    let shape = self.nodes[w].value.shape().to_vec();
                    let gw = self.conv_kernel_grad(g, g0, shape[2], shape[3], boundary);
                    vec![(g0, gg), (w, gw)]
                }
                Op::ConvKernelGrad {
                    x,
                    g: g0,
                    boundary,
                    ..
                } => {
                    let gx = self.conv_transpose2d(g0, g, boundary);
                    let gg = self.conv2d(x, g, boundary);
                    vec![(x, gx), (g0, gg)]
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let c = self.broadcast_all(g, &shape);
                    vec![(a, c)]
                }
                Op::SumPerSample(a) => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let c = self.broadcast_per_sample(g, &shape);
                    vec![(a, c)]
                }
                Op::SumHw(a) => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let c = self.broadcast_hw(g, &shape);
                    vec![(a, c)]
                }
                Op::SumToBias(a) => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let c = self.broadcast_bias(g, &shape);
                    vec![(a, c)]
                }
                Op::SumRows(a) => {
                    let n = self.nodes[a].value.shape()[0];
                    let c = self.broadcast_rows(g, n);
                    vec![(a, c)]
                }
                Op::BroadcastAll(s) => {
                    let c = self.sum_all(g);
                    vec![(s, c)]
                }
                Op::BroadcastPerSample(s) => {
                    let c = self.sum_per_sample(g);
                    vec![(s, c)]
                }
                Op::BroadcastHw(s) => {
                    let c = self.sum_hw(g);
                    vec![(s, c)]
                }
                Op::BroadcastBias(s) => {
                    let c = self.sum_to_bias(g);
                    vec![(s, c)]
                }
                Op::BroadcastRows(s) => {
                    let c = self.sum_rows(g);
                    vec![(s, c)]
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let c = self.reshape(g, &shape);
                    vec![(a, c)]
                }
                Op::SliceChannels { x, from } => {
                    let total = self.nodes[x].value.shape()[1];
                    let c = self.embed_channels(g, total, from);
                    vec![(x, c)]
                }
                Op::EmbedChannels { x, at } => {
                    let c_x = self.nodes[x].value.shape()[1];
                    let c = self.slice_channels(g, at, at + c_x);
                    vec![(x, c)]
                }
                Op::SumPool2(a) => {
                    let c = self.upsample_nearest2(g);
                    vec![(a, c)]
                }
                Op::UpsampleNearest2(a) => {
                    let c = self.sum_pool2(g);
                    vec![(a, c)]
                }
                Op::LinearOp { x, op, adjoint } => {
                    let c = self.linear_op(g, op, !adjoint);
                    vec![(x, c)]
                }
            };
            for (parent, contrib) in contribs {
                adj[parent] = Some(match adj[parent] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                });
            }
        }

        wrt.iter()
            .map(|&w| {
                assert!(w <= limit, "wrt node created after the output");
                adj[w]
            })
            .collect()
    }

    /// Like `backward` but materializing zero arrays for disconnected inputs.
    pub fn gradients(&mut self, output: NodeId, wrt: &[NodeId]) -> Vec<ArrayD<f64>> {
        let ids = self.backward(output, wrt);
        ids.iter()
            .zip(wrt)
            .map(|(id, &w)| match id {
                Some(g) => self.nodes[*g].value.clone(),
                None => ArrayD::zeros(self.nodes[w].value.raw_dim()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(scalar f)/d(leaf) for every element.
    fn check_grad<F>(shape: &[usize], seed: u64, f: F)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(&mut rng, shape);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&mut tape, x);
        assert_eq!(tape.value(y).len(), 1, "loss must be scalar");
        let grads = tape.gradients(y, &[x]);
        let g = &grads[0];

        let eps = 1e-6;
        let mut flat = x0.clone();
        for idx in 0..flat.len() {
            let orig = flat.as_slice().unwrap()[idx];
            let eval = |v: f64, flat: &mut ArrayD<f64>| -> f64 {
                flat.as_slice_mut().unwrap()[idx] = v;
                let mut t = Tape::new();
                let xx = t.leaf(flat.clone());
                let yy = f(&mut t, xx);
                t.scalar_value(yy)
            };
            let fp = eval(orig + eps, &mut flat);
            let fm = eval(orig - eps, &mut flat);
            flat.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = g.as_slice().unwrap()[idx];
            let tol = 1e-6 + 1e-5 * fd.abs();
            assert!(
                (an - fd).abs() <= tol,
                "grad mismatch at {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        check_grad(&[3, 2], 1, |t, x| {
            let a = t.mul_scalar(x, 1.7);
            let b = t.add_scalar(a, 0.3);
            let c = t.sigmoid(b);
            let shifted = t.add_scalar(c, 0.5);
            let d = t.sqrt(shifted);
            let e = t.ln(d);
            t.mean_all(e)
        });
    }

    #[test]
    fn grad_mul_recip_leaky() {
        check_grad(&[4], 2, |t, x| {
            let l = t.leaky_relu(x, 0.2);
            let r = {
                let s = t.add_scalar(x, 3.0);
                t.recip(s)
            };
            let m = t.mul(l, r);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_matmul_transpose() {
        check_grad(&[3, 4], 3, |t, x| {
            let w0 = ArrayD::from_shape_fn(IxDyn(&[4, 2]), |ix| {
                0.3 * (ix[0] as f64 - 1.0) + 0.1 * ix[1] as f64 + 0.05
            });
            let w = t.constant(w0);
            let y = t.matmul(x, w);
            let yt = t.transpose(y);
            let s = t.mul(yt, yt);
            t.mean_all(s)
        });
    }

    #[test]
    fn grad_conv_both_args() {
        // Input gradient.
        check_grad(&[1, 2, 4, 4], 4, |t, x| {
            let w0 = ArrayD::from_shape_fn(IxDyn(&[3, 2, 3, 3]), |ix| {
                0.1 * (ix[0] as f64 + 1.0) - 0.07 * ix[2] as f64 + 0.02 * ix[3] as f64
            });
            let w = t.constant(w0);
            let y = t.conv2d(x, w, Boundary::Periodic);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        // Kernel gradient (leaf is the kernel).
        check_grad(&[2, 1, 3, 3], 5, |t, w| {
            let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 1, 5, 5]), |ix| {
                (ix[2] as f64 * 0.3 - ix[3] as f64 * 0.2).sin()
            });
            let x = t.constant(x0);
            let y = t.conv2d(x, w, Boundary::ZeroPad);
            let a = t.abs(y);
            t.mean_all(a)
        });
    }

    #[test]
    fn grad_pool_and_upsample() {
        check_grad(&[1, 1, 4, 4], 6, |t, x| {
            let p = t.avg_pool2(x);
            let u = t.upsample_nearest2(p);
            let d = t.sub(u, x);
            let sq = t.mul(d, d);
            t.mean_all(sq)
        });
    }

    #[test]
    fn grad_channel_ops_and_reductions() {
        check_grad(&[2, 3, 2, 2], 7, |t, x| {
            let a = t.slice_channels(x, 0, 2);
            let b = t.slice_channels(x, 1, 3);
            let c = t.concat_channels(a, b);
            let hw = t.sum_hw(c);
            let back = t.broadcast_hw(hw, &[2, 4, 2, 2]);
            let m = t.mul(back, c);
            let ps = t.sum_per_sample(m);
            let sq = t.mul(ps, ps);
            t.mean_all(sq)
        });
    }

    #[test]
    fn grad_through_linear_operator() {
        let mask = ndarray::Array2::from_shape_fn((4, 4), |(i, j)| (i + j) % 2 == 0);
        let op = Arc::new(KnownLinearOperator::FourierSubsample { mask });
        check_grad(&[1, 2, 4, 4], 8, move |t, x| {
            let y = t.linear_op(x, op.clone(), false);
            let d = t.sub(y, x);
            t.mean_abs(d)
        });
    }

    #[test]
    fn double_backprop_gradient_norm_penalty() {
        // f(x) = (||d phi/d x|| - 1)^2 with phi a tiny two-layer net; the
        // derivative of f with respect to the *parameters* requires
        // differentiating through the first backward pass.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = randn(&mut rng, &[2, 3]);
        let w0 = randn(&mut rng, &[3, 3]);
        let v0 = randn(&mut rng, &[3, 1]);

        let eval = |w_arr: &ArrayD<f64>, grad: bool| -> (f64, Option<ArrayD<f64>>) {
            let mut t = Tape::new();
            let x = t.constant(x0.clone());
            let w = t.leaf(w_arr.clone());
            let v = t.constant(v0.clone());
            let h = t.matmul(x, w);
            let h = t.sigmoid(h);
            let out = t.matmul(h, v);
            let s = t.sum_all(out);
            let gx = t.backward(s, &[x])[0].expect("x reachable");
            let gsq = t.mul(gx, gx);
            let norm = {
                let ss = t.sum_all(gsq);
                t.sqrt(ss)
            };
            let shifted = t.add_scalar(norm, -1.0);
            let pen = t.mul(shifted, shifted);
            let value = t.scalar_value(pen);
            if grad {
                let gw = t.gradients(pen, &[w]).remove(0);
                (value, Some(gw))
            } else {
                (value, None)
            }
        };

        let (_, gw) = eval(&w0, true);
        let gw = gw.unwrap();
        let eps = 1e-6;
        let mut w = w0.clone();
        for idx in 0..w.len() {
            let orig = w.as_slice().unwrap()[idx];
            w.as_slice_mut().unwrap()[idx] = orig + eps;
            let (fp, _) = eval(&w, false);
            w.as_slice_mut().unwrap()[idx] = orig - eps;
            let (fm, _) = eval(&w, false);
            w.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = gw.as_slice().unwrap()[idx];
            assert!(
                (an - fd).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "double-backprop mismatch at {idx}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.5));
        let d = t.detach(x);
        let s = t.sum_all(d);
        assert!(t.backward(s, &[x])[0].is_none());
    }
}
