//! Forward and backward rules for every tape op.

use std::str::FromStr;

use super::broadcast::{broadcast_shape, broadcast_strides, for_each2};
use super::kernels::{col2im, gemm, im2col, ConvGeom, Mat};
use super::{invalid, numel, strides, Result, TensorError};

/// The op inventory. Attributes live inside the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Batched `[.., m, k] @ [.., k, n]` with broadcasting over batch axes.
    MatMul,
    Conv1d {
        stride: usize,
        dilation: usize,
        groups: usize,
        padding: (usize, usize),
    },
    /// `(B, Cin, H, W)` or `(B, Cin, T)` with weights `(Cout, Cin)` or
    /// `(Cout, Cin, 1, 1)`.
    PointwiseConv2d,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Reshape(Vec<usize>),
    Transpose(Vec<usize>),
    Concat(usize),
    Select { axis: usize, indices: Vec<usize> },
    Softmax(usize),
    LogSoftmax(usize),
    Sigmoid,
    Relu,
    /// Slope per channel on axis 1 (or a single shared slope).
    Prelu,
    LayerNorm { axis: usize, eps: f64 },
    Mean,
    Sum,
    /// Scalar function with a precomputed local gradient.
    ScalarFn,
}

impl FromStr for OpKind {
    type Err = TensorError;

    /// Parses the attribute-free op names.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Self::MatMul,
            "pointwise_conv2d" => Self::PointwiseConv2d,
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "sigmoid" => Self::Sigmoid,
            "relu" => Self::Relu,
            "prelu" => Self::Prelu,
            "mean" => Self::Mean,
            "sum" => Self::Sum,
            other => return Err(TensorError::UnknownOp(other.to_string())),
        })
    }
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            Self::MatMul => "matmul",
            Self::Conv1d { .. } => "conv1d",
            Self::PointwiseConv2d => "pointwise_conv2d",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Scale(_) => "scale",
            Self::Reshape(_) => "reshape",
            Self::Transpose(_) => "transpose",
            Self::Concat(_) => "concat",
            Self::Select { .. } => "select",
            Self::Softmax(_) => "softmax",
            Self::LogSoftmax(_) => "log_softmax",
            Self::Sigmoid => "sigmoid",
            Self::Relu => "relu",
            Self::Prelu => "prelu",
            Self::LayerNorm { .. } => "layer_norm",
            Self::Mean => "mean",
            Self::Sum => "sum",
            Self::ScalarFn => "scalar_fn",
        }
    }
}

pub(crate) struct Input<'a> {
    pub shape: &'a [usize],
    pub data: &'a [f64],
    pub requires_grad: bool,
}

pub(crate) enum Saved {
    None,
    Vec(Vec<f64>),
    Norm { xhat: Vec<f64>, rstd: Vec<f64> },
}

type Forward = (Vec<usize>, Vec<f64>, Saved);

fn arity(kind: &OpKind, ins: &[Input<'_>], n: usize) -> Result<()> {
    if ins.len() != n {
        return Err(invalid(kind.name(), format!("expected {n} inputs, got {}", ins.len())));
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// `(outer, n, inner)` split around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn forward(kind: &OpKind, ins: &[Input<'_>]) -> Result<Forward> {
    match kind {
        OpKind::Concat(axis) => return concat_fwd(*axis, ins),
        OpKind::ScalarFn => return Err(invalid("scalar_fn", "use Tape::scalar_fn")),
        OpKind::MatMul
        | OpKind::Conv1d { .. }
        | OpKind::PointwiseConv2d
        | OpKind::Add
        | OpKind::Sub
        | OpKind::Mul
        | OpKind::Prelu => arity(kind, ins, 2)?,
        OpKind::LayerNorm { .. } => arity(kind, ins, 3)?,
        _ => arity(kind, ins, 1)?,
    }
    let x = &ins[0];
    match kind {
        OpKind::MatMul => matmul_fwd(x, &ins[1]),
        OpKind::Conv1d {
            stride,
            dilation,
            groups,
            padding,
        } => conv1d_fwd(x, &ins[1], *stride, *dilation, *groups, *padding),
        OpKind::PointwiseConv2d => pwconv_fwd(x, &ins[1]),
        OpKind::Add | OpKind::Sub | OpKind::Mul => binary_fwd(kind, x, &ins[1]),
        OpKind::Scale(f) => Ok((x.shape.to_vec(), x.data.iter().map(|v| v * f).collect(), Saved::None)),
        OpKind::Reshape(shape) => {
            if numel(shape) != x.data.len() {
                return Err(mismatch("reshape", x.shape, shape));
            }
            Ok((shape.clone(), x.data.to_vec(), Saved::None))
        }
        OpKind::Transpose(perm) => {
            let (shape, data) = permute(x.shape, x.data, perm)?;
            Ok((shape, data, Saved::None))
        }
        OpKind::Select { axis, indices } => select_fwd(x, *axis, indices),
        OpKind::Softmax(axis) | OpKind::LogSoftmax(axis) => {
            check_axis(kind.name(), x.shape, *axis)?;
            let log = matches!(kind, OpKind::LogSoftmax(_));
            Ok((x.shape.to_vec(), softmax(x.shape, x.data, *axis, log), Saved::None))
        }
        OpKind::Sigmoid => Ok((x.shape.to_vec(), x.data.iter().map(|&v| sigmoid(v)).collect(), Saved::None)),
        OpKind::Relu => Ok((x.shape.to_vec(), x.data.iter().map(|&v| v.max(0.0)).collect(), Saved::None)),
        OpKind::Prelu => prelu_fwd(x, &ins[1]),
        OpKind::LayerNorm { axis, eps } => layer_norm_fwd(x, &ins[1], &ins[2], *axis, *eps),
        OpKind::Sum => Ok((vec![], vec![x.data.iter().sum()], Saved::None)),
        OpKind::Mean => {
            if x.data.is_empty() {
                return Err(invalid("mean", "empty tensor"));
            }
            Ok((vec![], vec![x.data.iter().sum::<f64>() / x.data.len() as f64], Saved::None))
        }
        OpKind::Concat(_) | OpKind::ScalarFn => unreachable!(),
    }
}

/// Per-input gradient contributions (`None` for inputs without gradient).
pub(crate) fn backward(
    kind: &OpKind,
    ins: &[Input<'_>],
    out: &[f64],
    saved: &Saved,
    g: &[f64],
) -> Result<Vec<Option<Vec<f64>>>> {
    let need = |i: usize| ins[i].requires_grad;
    let x = &ins[0];
    Ok(match kind {
        OpKind::MatMul => matmul_bwd(x, &ins[1], g),
        OpKind::Conv1d {
            stride,
            dilation,
            groups,
            padding,
        } => conv1d_bwd(x, &ins[1], *stride, *dilation, *groups, *padding, g),
        OpKind::PointwiseConv2d => pwconv_bwd(x, &ins[1], g),
        OpKind::Add | OpKind::Sub | OpKind::Mul => binary_bwd(kind, x, &ins[1], g),
        OpKind::Scale(f) => vec![need(0).then(|| g.iter().map(|v| v * f).collect())],
        OpKind::Reshape(_) => vec![need(0).then(|| g.to_vec())],
        OpKind::Transpose(perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
            vec![need(0).then(|| permute(&out_shape, g, &inv).map(|(_, d)| d)).transpose()?]
        }
        OpKind::Concat(axis) => concat_bwd(*axis, ins, g),
        OpKind::Select { axis, indices } => {
            let (outer, n, inner) = split_axis(x.shape, *axis);
            vec![need(0).then(|| {
                let mut gx = vec![0.0; x.data.len()];
                let m = indices.len();
                for o in 0..outer {
                    for (j, &src) in indices.iter().enumerate() {
                        let go = &g[(o * m + j) * inner..(o * m + j + 1) * inner];
                        let dst = &mut gx[(o * n + src) * inner..(o * n + src + 1) * inner];
                        dst.iter_mut().zip(go).for_each(|(a, b)| *a += b);
                    }
                }
                gx
            })]
        }
        OpKind::Softmax(axis) | OpKind::LogSoftmax(axis) => {
            let log = matches!(kind, OpKind::LogSoftmax(_));
            vec![need(0).then(|| softmax_bwd(x.shape, out, g, *axis, log))]
        }
        OpKind::Sigmoid => vec![need(0).then(|| out.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect())],
        OpKind::Relu => vec![need(0).then(|| {
            x.data
                .iter()
                .zip(g)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect()
        })],
        OpKind::Prelu => prelu_bwd(x, &ins[1], g),
        OpKind::LayerNorm { axis, .. } => layer_norm_bwd(ins, *axis, saved, g),
        OpKind::Sum => vec![need(0).then(|| vec![g[0]; x.data.len()])],
        OpKind::Mean => vec![need(0).then(|| vec![g[0] / x.data.len() as f64; x.data.len()])],
        OpKind::ScalarFn => match saved {
            Saved::Vec(local) => vec![need(0).then(|| local.iter().map(|v| v * g[0]).collect())],
            _ => unreachable!("scalar_fn saves its gradient"),
        },
    })
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------- matmul

struct MatMulPlan {
    batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("matmul", format!("operands need rank >= 2, got {a:?} and {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ab, bb).ok_or_else(|| mismatch("matmul", a, b))?;
    let scale = |s: Vec<usize>, f: usize| s.into_iter().map(|v| v * f).collect();
    Ok(MatMulPlan {
        a_batch_strides: scale(broadcast_strides(ab, &batch), m * k),
        b_batch_strides: scale(broadcast_strides(bb, &batch), k * n),
        batch,
        m,
        k,
        n,
    })
}

fn matmul_fwd(a: &Input<'_>, b: &Input<'_>) -> Result<Forward> {
    let p = matmul_plan(a.shape, b.shape)?;
    let mut shape = p.batch.clone();
    shape.extend([p.m, p.n]);
    let mut out = vec![0.0; numel(&shape)];
    let mn = p.m * p.n;
    for_each2(&p.batch, &p.a_batch_strides, &p.b_batch_strides, |i, oa, ob| {
        gemm(
            p.m,
            p.k,
            p.n,
            1.0,
            a.data,
            Mat::rows(oa, p.k),
            b.data,
            Mat::rows(ob, p.n),
            0.0,
            &mut out,
            Mat::rows(i * mn, p.n),
        );
    });
    Ok((shape, out, Saved::None))
}

fn matmul_bwd(a: &Input<'_>, b: &Input<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let p = matmul_plan(a.shape, b.shape).expect("validated in forward");
    let mn = p.m * p.n;
    let ga = a.requires_grad.then(|| {
        let mut ga = vec![0.0; a.data.len()];
        for_each2(&p.batch, &p.a_batch_strides, &p.b_batch_strides, |i, oa, ob| {
            // dA = dC @ B^T
            gemm(
                p.m,
                p.n,
                p.k,
                1.0,
                g,
                Mat::rows(i * mn, p.n),
                b.data,
                Mat::rows_t(ob, p.n),
                1.0,
                &mut ga,
                Mat::rows(oa, p.k),
            );
        });
        ga
    });
    let gb = b.requires_grad.then(|| {
        let mut gb = vec![0.0; b.data.len()];
        for_each2(&p.batch, &p.a_batch_strides, &p.b_batch_strides, |i, oa, ob| {
            // dB = A^T @ dC
            gemm(
                p.k,
                p.m,
                p.n,
                1.0,
                a.data,
                Mat::rows_t(oa, p.k),
                g,
                Mat::rows(i * mn, p.n),
                1.0,
                &mut gb,
                Mat::rows(ob, p.n),
            );
        });
        gb
    });
    vec![ga, gb]
}

// ---------------------------------------------------------------- conv1d

struct ConvPlan {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    geom: ConvGeom,
}

impl ConvPlan {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

fn conv_plan(
    x: &[usize],
    w: &[usize],
    stride: usize,
    dilation: usize,
    groups: usize,
    padding: (usize, usize),
) -> Result<ConvPlan> {
    if x.len() != 3 || w.len() != 3 {
        return Err(invalid("conv1d", format!("expected (B,C,L) input and (Cout,Cin/g,K) weight, got {x:?} and {w:?}")));
    }
    if stride == 0 || dilation == 0 || groups == 0 {
        return Err(invalid("conv1d", "stride, dilation and groups must be positive"));
    }
    let (batch, cin, len) = (x[0], x[1], x[2]);
    let (cout, cin_g, kernel) = (w[0], w[1], w[2]);
    if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(mismatch("conv1d", x, w));
    }
    let padded = len + padding.0 + padding.1;
    let span = dilation * (kernel.max(1) - 1) + 1;
    if kernel == 0 || padded < span {
        return Err(invalid(
            "conv1d",
            format!("input length {len} (padded {padded}) shorter than receptive span {span}"),
        ));
    }
    Ok(ConvPlan {
        batch,
        cin,
        cout,
        groups,
        geom: ConvGeom {
            in_len: len,
            out_len: (padded - span) / stride + 1,
            kernel,
            stride,
            dilation,
            pad_left: padding.0,
        },
    })
}

fn conv1d_fwd(
    x: &Input<'_>,
    w: &Input<'_>,
    stride: usize,
    dilation: usize,
    groups: usize,
    padding: (usize, usize),
) -> Result<Forward> {
    let p = conv_plan(x.shape, w.shape, stride, dilation, groups, padding)?;
    let g = &p.geom;
    let (cin_g, cout_g, kk) = (p.cin_g(), p.cout_g(), g.kernel);
    let mut out = vec![0.0; p.batch * p.cout * g.out_len];
    let mut col = vec![0.0; cin_g * kk * g.out_len];
    for b in 0..p.batch {
        for grp in 0..p.groups {
            let xoff = (b * p.cin + grp * cin_g) * g.in_len;
            let xs = &x.data[xoff..xoff + cin_g * g.in_len];
            let ooff = (b * p.cout + grp * cout_g) * g.out_len;
            if cin_g == 1 && cout_g == 1 {
                let wk = &w.data[grp * kk..(grp + 1) * kk];
                let o = &mut out[ooff..ooff + g.out_len];
                for (t, slot) in o.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (k, &wv) in wk.iter().enumerate() {
                        if let Some(s) = g.src(t, k) {
                            acc += wv * xs[s];
                        }
                    }
                    *slot = acc;
                }
                continue;
            }
            im2col(xs, cin_g, g, &mut col);
            gemm(
                cout_g,
                cin_g * kk,
                g.out_len,
                1.0,
                w.data,
                Mat::rows(grp * cout_g * cin_g * kk, cin_g * kk),
                &col,
                Mat::rows(0, g.out_len),
                0.0,
                &mut out,
                Mat::rows(ooff, g.out_len),
            );
        }
    }
    Ok((vec![p.batch, p.cout, g.out_len], out, Saved::None))
}

fn conv1d_bwd(
    x: &Input<'_>,
    w: &Input<'_>,
    stride: usize,
    dilation: usize,
    groups: usize,
    padding: (usize, usize),
    gout: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let p = conv_plan(x.shape, w.shape, stride, dilation, groups, padding).expect("validated in forward");
    let g = &p.geom;
    let (cin_g, cout_g, kk) = (p.cin_g(), p.cout_g(), g.kernel);
    let mut gx = x.requires_grad.then(|| vec![0.0; x.data.len()]);
    let mut gw = w.requires_grad.then(|| vec![0.0; w.data.len()]);
    let mut col = vec![0.0; cin_g * kk * g.out_len];
    for b in 0..p.batch {
        for grp in 0..p.groups {
            let xoff = (b * p.cin + grp * cin_g) * g.in_len;
            let xs = &x.data[xoff..xoff + cin_g * g.in_len];
            let ooff = (b * p.cout + grp * cout_g) * g.out_len;
            let go = &gout[ooff..ooff + cout_g * g.out_len];
            if cin_g == 1 && cout_g == 1 {
                let wk = &w.data[grp * kk..(grp + 1) * kk];
                for (t, &gv) in go.iter().enumerate() {
                    for k in 0..kk {
                        if let Some(s) = g.src(t, k) {
                            if let Some(gw) = gw.as_mut() {
                                gw[grp * kk + k] += gv * xs[s];
                            }
                            if let Some(gx) = gx.as_mut() {
                                gx[xoff + s] += gv * wk[k];
                            }
                        }
                    }
                }
                continue;
            }
            let wm = Mat::rows(grp * cout_g * cin_g * kk, cin_g * kk);
            if let Some(gw) = gw.as_mut() {
                im2col(xs, cin_g, g, &mut col);
                // dW += dY @ col^T
                gemm(
                    cout_g,
                    g.out_len,
                    cin_g * kk,
                    1.0,
                    go,
                    Mat::rows(0, g.out_len),
                    &col,
                    Mat::rows_t(0, g.out_len),
                    1.0,
                    gw,
                    wm,
                );
            }
            if let Some(gx) = gx.as_mut() {
                // dcol = W^T @ dY
                gemm(
                    cin_g * kk,
                    cout_g,
                    g.out_len,
                    1.0,
                    w.data,
                    Mat::rows_t(grp * cout_g * cin_g * kk, cin_g * kk),
                    go,
                    Mat::rows(0, g.out_len),
                    0.0,
                    &mut col,
                    Mat::rows(0, g.out_len),
                );
                col2im(&col, cin_g, g, &mut gx[xoff..xoff + cin_g * g.in_len]);
            }
        }
    }
    vec![gx, gw]
}

// ------------------------------------------------------ pointwise conv2d

fn pwconv_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let ok_w = w.len() == 2 || (w.len() == 4 && w[2] == 1 && w[3] == 1);
    if !(x.len() == 3 || x.len() == 4) || !ok_w || w[1] != x[1] {
        return Err(mismatch("pointwise_conv2d", x, w));
    }
    Ok((x[0], x[1], w[0], x[2..].iter().product()))
}

fn pwconv_fwd(x: &Input<'_>, w: &Input<'_>) -> Result<Forward> {
    let (b, cin, cout, hw) = pwconv_dims(x.shape, w.shape)?;
    let mut out = vec![0.0; b * cout * hw];
    for i in 0..b {
        gemm(
            cout,
            cin,
            hw,
            1.0,
            w.data,
            Mat::rows(0, cin),
            x.data,
            Mat::rows(i * cin * hw, hw),
            0.0,
            &mut out,
            Mat::rows(i * cout * hw, hw),
        );
    }
    let mut shape = vec![b, cout];
    shape.extend_from_slice(&x.shape[2..]);
    Ok((shape, out, Saved::None))
}

fn pwconv_bwd(x: &Input<'_>, w: &Input<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (b, cin, cout, hw) = pwconv_dims(x.shape, w.shape).expect("validated in forward");
    let gx = x.requires_grad.then(|| {
        let mut gx = vec![0.0; x.data.len()];
        for i in 0..b {
            gemm(
                cin,
                cout,
                hw,
                1.0,
                w.data,
                Mat::rows_t(0, cin),
                g,
                Mat::rows(i * cout * hw, hw),
                0.0,
                &mut gx,
                Mat::rows(i * cin * hw, hw),
            );
        }
        gx
    });
    let gw = w.requires_grad.then(|| {
        let mut gw = vec![0.0; w.data.len()];
        for i in 0..b {
            gemm(
                cout,
                hw,
                cin,
                1.0,
                g,
                Mat::rows(i * cout * hw, hw),
                x.data,
                Mat::rows_t(i * cin * hw, hw),
                1.0,
                &mut gw,
                Mat::rows(0, cin),
            );
        }
        gw
    });
    vec![gx, gw]
}

// ----------------------------------------------------------- elementwise

fn binary_fwd(kind: &OpKind, a: &Input<'_>, b: &Input<'_>) -> Result<Forward> {
    let f: fn(f64, f64) -> f64 = match kind {
        OpKind::Add => |x, y| x + y,
        OpKind::Sub => |x, y| x - y,
        _ => |x, y| x * y,
    };
    if a.shape == b.shape {
        let out = a.data.iter().zip(b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok((a.shape.to_vec(), out, Saved::None));
    }
    let shape = broadcast_shape(a.shape, b.shape).ok_or_else(|| mismatch(kind.name(), a.shape, b.shape))?;
    let (sa, sb) = (broadcast_strides(a.shape, &shape), broadcast_strides(b.shape, &shape));
    let mut out = vec![0.0; numel(&shape)];
    for_each2(&shape, &sa, &sb, |o, ia, ib| out[o] = f(a.data[ia], b.data[ib]));
    Ok((shape, out, Saved::None))
}

fn binary_bwd(kind: &OpKind, a: &Input<'_>, b: &Input<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let shape = broadcast_shape(a.shape, b.shape).expect("validated in forward");
    let (sa, sb) = (broadcast_strides(a.shape, &shape), broadcast_strides(b.shape, &shape));
    let mut ga = a.requires_grad.then(|| vec![0.0; a.data.len()]);
    let mut gb = b.requires_grad.then(|| vec![0.0; b.data.len()]);
    for_each2(&shape, &sa, &sb, |o, ia, ib| {
        let (da, db) = match kind {
            OpKind::Add => (g[o], g[o]),
            OpKind::Sub => (g[o], -g[o]),
            _ => (g[o] * b.data[ib], g[o] * a.data[ia]),
        };
        if let Some(ga) = ga.as_mut() {
            ga[ia] += da;
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += db;
        }
    });
    vec![ga, gb]
}

fn prelu_layout(x: &[usize], slope: &[usize]) -> Result<(usize, usize, usize)> {
    let ns = numel(slope);
    if ns == 1 {
        return Ok((1, 1, numel(x)));
    }
    if x.len() < 2 || ns != x[1] {
        return Err(mismatch("prelu", x, slope));
    }
    Ok(split_axis(x, 1))
}

fn prelu_fwd(x: &Input<'_>, a: &Input<'_>) -> Result<Forward> {
    let (outer, c, inner) = prelu_layout(x.shape, a.shape)?;
    let mut out = x.data.to_vec();
    for o in 0..outer {
        for ch in 0..c {
            let s = a.data[ch];
            let base = (o * c + ch) * inner;
            for v in &mut out[base..base + inner] {
                if *v <= 0.0 {
                    *v *= s;
                }
            }
        }
    }
    Ok((x.shape.to_vec(), out, Saved::None))
}

fn prelu_bwd(x: &Input<'_>, a: &Input<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (outer, c, inner) = prelu_layout(x.shape, a.shape).expect("validated in forward");
    let mut gx = x.requires_grad.then(|| vec![0.0; x.data.len()]);
    let mut ga = a.requires_grad.then(|| vec![0.0; a.data.len()]);
    for o in 0..outer {
        for ch in 0..c {
            let s = a.data[ch];
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                let v = x.data[i];
                if v > 0.0 {
                    if let Some(gx) = gx.as_mut() {
                        gx[i] = g[i];
                    }
                } else {
                    if let Some(gx) = gx.as_mut() {
                        gx[i] = g[i] * s;
                    }
                    if let Some(ga) = ga.as_mut() {
                        ga[ch] += g[i] * v;
                    }
                }
            }
        }
    }
    vec![gx, ga]
}

// ----------------------------------------------------------- rearranging

pub(crate) fn permute(shape: &[usize], data: &[f64], perm: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(invalid("transpose", format!("{perm:?} is not a permutation of {} axes", shape.len())));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut out = vec![0.0; data.len()];
    for_each2(&out_shape, &src_strides, &zero, |o, s, _| out[o] = data[s]);
    Ok((out_shape, out))
}

fn concat_fwd(axis: usize, ins: &[Input<'_>]) -> Result<Forward> {
    let first = ins.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    check_axis("concat", first.shape, axis)?;
    let mut shape = first.shape.to_vec();
    shape[axis] = 0;
    for i in ins {
        let same_rank = i.shape.len() == first.shape.len();
        let agree = same_rank
            && i.shape
                .iter()
                .zip(first.shape)
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !agree {
            return Err(mismatch("concat", first.shape, i.shape));
        }
        shape[axis] += i.shape[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for i in ins {
            let chunk: usize = i.shape[axis..].iter().product();
            out.extend_from_slice(&i.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok((shape, out, Saved::None))
}

fn concat_bwd(axis: usize, ins: &[Input<'_>], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let outer: usize = ins[0].shape[..axis].iter().product();
    let mut grads: Vec<Option<Vec<f64>>> = ins
        .iter()
        .map(|i| i.requires_grad.then(|| Vec::with_capacity(i.data.len())))
        .collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (i, gi) in ins.iter().zip(grads.iter_mut()) {
            let chunk: usize = i.shape[axis..].iter().product();
            if let Some(gi) = gi {
                gi.extend_from_slice(&g[pos..pos + chunk]);
            }
            pos += chunk;
        }
    }
    grads
}

fn select_fwd(x: &Input<'_>, axis: usize, indices: &[usize]) -> Result<Forward> {
    check_axis("select", x.shape, axis)?;
    let (outer, n, inner) = split_axis(x.shape, axis);
    if let Some(bad) = indices.iter().find(|&&i| i >= n) {
        return Err(invalid("select", format!("index {bad} out of range for axis of size {n}")));
    }
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            out.extend_from_slice(&x.data[(o * n + i) * inner..(o * n + i + 1) * inner]);
        }
    }
    let mut shape = x.shape.to_vec();
    shape[axis] = indices.len();
    Ok((shape, out, Saved::None))
}

// --------------------------------------------------------------- softmax

fn softmax(shape: &[usize], x: &[f64], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n).map(|j| (x[idx(j)] - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..n {
                out[idx(j)] = if log {
                    x[idx(j)] - lse
                } else {
                    (x[idx(j)] - max).exp() / sum
                };
            }
        }
    }
    out
}

fn softmax_bwd(shape: &[usize], y: &[f64], g: &[f64], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            if log {
                let gsum: f64 = (0..n).map(|j| g[idx(j)]).sum();
                for j in 0..n {
                    gx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gsum;
                }
            } else {
                let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                for j in 0..n {
                    gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                }
            }
        }
    }
    gx
}

// ------------------------------------------------------------ layer norm

/// Maps each position within a normalization group to its affine index.
fn affine_index(norm_shape: &[usize], param: &[usize]) -> Result<Vec<usize>> {
    let bshape = broadcast_shape(norm_shape, param);
    if bshape.as_deref() != Some(norm_shape) {
        return Err(mismatch("layer_norm", norm_shape, param));
    }
    let ps = broadcast_strides(param, norm_shape);
    let zero = vec![0; norm_shape.len()];
    let mut map = vec![0; numel(norm_shape)];
    for_each2(norm_shape, &ps, &zero, |o, p, _| map[o] = p);
    Ok(map)
}

fn layer_norm_fwd(x: &Input<'_>, gamma: &Input<'_>, beta: &Input<'_>, axis: usize, eps: f64) -> Result<Forward> {
    check_axis("layer_norm", x.shape, axis)?;
    let norm_shape = &x.shape[axis..];
    let gi = affine_index(norm_shape, gamma.shape)?;
    let bi = affine_index(norm_shape, beta.shape)?;
    let n = numel(norm_shape);
    let groups = x.data.len() / n.max(1);
    let mut out = vec![0.0; x.data.len()];
    let mut xhat = vec![0.0; x.data.len()];
    let mut rstd = vec![0.0; groups];
    for grp in 0..groups {
        let xs = &x.data[grp * n..(grp + 1) * n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[grp] = r;
        for j in 0..n {
            let h = (xs[j] - mean) * r;
            xhat[grp * n + j] = h;
            out[grp * n + j] = h * gamma.data[gi[j]] + beta.data[bi[j]];
        }
    }
    Ok((x.shape.to_vec(), out, Saved::Norm { xhat, rstd }))
}

fn layer_norm_bwd(ins: &[Input<'_>], axis: usize, saved: &Saved, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let Saved::Norm { xhat, rstd } = saved else {
        unreachable!("layer_norm saves its statistics")
    };
    let (x, gamma, beta) = (&ins[0], &ins[1], &ins[2]);
    let norm_shape = &x.shape[axis..];
    let gi = affine_index(norm_shape, gamma.shape).expect("validated in forward");
    let bi = affine_index(norm_shape, beta.shape).expect("validated in forward");
    let n = numel(norm_shape);
    let mut gx = x.requires_grad.then(|| vec![0.0; x.data.len()]);
    let mut gg = gamma.requires_grad.then(|| vec![0.0; gamma.data.len()]);
    let mut gb = beta.requires_grad.then(|| vec![0.0; beta.data.len()]);
    let mut gh = vec![0.0; n];
    for (grp, &r) in rstd.iter().enumerate() {
        let base = grp * n;
        for j in 0..n {
            let gv = g[base + j];
            gh[j] = gv * gamma.data[gi[j]];
            if let Some(gg) = gg.as_mut() {
                gg[gi[j]] += gv * xhat[base + j];
            }
            if let Some(gb) = gb.as_mut() {
                gb[bi[j]] += gv;
            }
        }
        if let Some(gx) = gx.as_mut() {
            let mean_gh = gh.iter().sum::<f64>() / n as f64;
            let mean_ghx = gh.iter().zip(&xhat[base..base + n]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            for j in 0..n {
                gx[base + j] = r * (gh[j] - mean_gh - xhat[base + j] * mean_ghx);
            }
        }
    }
    vec![gx, gg, gb]
}
