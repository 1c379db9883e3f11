//! Forward and adjoint kernels shared by the graph ops.

use crate::scalar::{gemm, MatRef, Real};
use crate::tensor::{contiguous_strides, numel, Tensor};

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` when viewed through the broadcast `out` shape.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visit `shape` as contiguous runs. For each run `f(offsets, len, strides)`
/// receives the starting offset and inner stride of each of the `N` operands.
fn walk<const N: usize>(
    shape: &[usize],
    strides: [&[usize]; N],
    mut f: impl FnMut([usize; N], usize, [usize; N]),
) {
    // Drop unit dims and merge neighbours that are jointly contiguous.
    let mut dims: Vec<(usize, [usize; N])> = Vec::new();
    for (i, &size) in shape.iter().enumerate() {
        if size == 1 {
            continue;
        }
        let st: [usize; N] = std::array::from_fn(|k| strides[k][i]);
        if let Some(last) = dims.last_mut() {
            if (0..N).all(|k| last.1[k] == st[k] * size) {
                last.0 *= size;
                last.1 = st;
                continue;
            }
        }
        dims.push((size, st));
    }
    if numel(shape) == 0 {
        return;
    }
    let Some(&(inner_len, inner_st)) = dims.last() else {
        f([0; N], 1, [0; N]);
        return;
    };
    let outer = &dims[..dims.len() - 1];
    let mut idx = vec![0usize; outer.len()];
    let mut base = [0usize; N];
    loop {
        f(base, inner_len, inner_st);
        // odometer increment
        let mut d = outer.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for k in 0..N {
                base[k] += outer[d].1[k];
            }
            if idx[d] < outer[d].0 {
                break;
            }
            for k in 0..N {
                base[k] -= outer[d].1[k] * outer[d].0;
            }
            idx[d] = 0;
        }
    }
}

pub fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let so = contiguous_strides(&out_shape);
    let mut out = vec![T::zero(); numel(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    walk(
        &out_shape,
        [&so, &sa, &sb],
        |[o, ia, ib], len, [so, sa, sb]| {
            for i in 0..len {
                out[o + i * so] = f(ad[ia + i * sa], bd[ib + i * sb]);
            }
        },
    );
    Tensor::new(out_shape, out)
}

/// Sum `t` down to a shape it was broadcast from.
pub fn sum_to_shape<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let st = broadcast_strides(shape, t.shape());
    let sg = contiguous_strides(t.shape());
    let mut out = vec![T::zero(); numel(shape)];
    let gd = t.data();
    walk(t.shape(), [&sg, &st], |[ig, it], len, [sg, st]| {
        if st == 0 {
            let mut acc = T::zero();
            for i in 0..len {
                acc += gd[ig + i * sg];
            }
            out[it] += acc;
        } else {
            for i in 0..len {
                out[it + i * st] += gd[ig + i * sg];
            }
        }
    });
    Tensor::new(shape.to_vec(), out)
}

/// Shape of `shape` with `axes` collapsed to one.
pub fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    for &a in axes {
        s[a] = 1;
    }
    s
}

/// im2col for stride-1 convolution with zero padding.
/// Result is `[ci*kh*kw, b*ho*wo]` row-major.
pub fn im2col<T: Real>(x: &Tensor<T>, kh: usize, kw: usize, pad: usize) -> (Vec<T>, usize, usize) {
    let (b, c, h, w) = x.dims4();
    let ho = h + 2 * pad + 1 - kh;
    let wo = w + 2 * pad + 1 - kw;
    let ncol = b * ho * wo;
    let xd = x.data();
    if kh == 1 && kw == 1 && pad == 0 {
        let mut cols = vec![T::zero(); c * ncol];
        for bi in 0..b {
            for ci in 0..c {
                let src = &xd[(bi * c + ci) * h * w..][..h * w];
                cols[ci * ncol + bi * h * w..][..h * w].copy_from_slice(src);
            }
        }
        return (cols, ho, wo);
    }
    let mut cols = vec![T::zero(); c * kh * kw * ncol];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst_row = &mut cols[row * ncol..(row + 1) * ncol];
                for bi in 0..b {
                    let src = &xd[(bi * c + ci) * h * w..][..h * w];
                    let dst = &mut dst_row[bi * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..][..w];
                        let drow = &mut dst[oy * wo..][..wo];
                        let x0 = pad.saturating_sub(kx);
                        let x1 = (w + pad - kx).min(wo);
                        for ox in x0..x1 {
                            drow[ox] = srow[ox + kx - pad];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Tensor<T> {
    let ho = h + 2 * pad + 1 - kh;
    let wo = w + 2 * pad + 1 - kw;
    let ncol = b * ho * wo;
    let mut x = vec![T::zero(); b * c * h * w];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src_row = &cols[row * ncol..(row + 1) * ncol];
                for bi in 0..b {
                    let src = &src_row[bi * ho * wo..][..ho * wo];
                    let dst = &mut x[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..][..w];
                        let srow = &src[oy * wo..][..wo];
                        let x0 = pad.saturating_sub(kx);
                        let x1 = (w + pad - kx).min(wo);
                        for ox in x0..x1 {
                            drow[ox + kx - pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], x)
}

/// `[co, b*hw]` → `[b, co, h, w]`.
pub fn cols_to_nchw<T: Real>(y: &[T], b: usize, co: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); b * co * hw];
    for o in 0..co {
        for bi in 0..b {
            out[(bi * co + o) * hw..][..hw].copy_from_slice(&y[o * b * hw + bi * hw..][..hw]);
        }
    }
    Tensor::new(vec![b, co, h, w], out)
}

/// `[b, co, h, w]` → `[co, b*hw]`.
pub fn nchw_to_cols<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let (b, co, h, w) = t.dims4();
    let hw = h * w;
    let mut out = vec![T::zero(); b * co * hw];
    let td = t.data();
    for o in 0..co {
        for bi in 0..b {
            out[o * b * hw + bi * hw..][..hw].copy_from_slice(&td[(bi * co + o) * hw..][..hw]);
        }
    }
    out
}

/// Stride-1 zero-padded cross-correlation. Returns the output and the im2col buffer.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, pad: usize) -> (Tensor<T>, Vec<T>) {
    let (b, ci, _, _) = x.dims4();
    let (co, wci, kh, kw) = weight.dims4();
    assert_eq!(ci, wci, "conv2d channel mismatch: input {ci}, kernel {wci}");
    let (cols, ho, wo) = im2col(x, kh, kw, pad);
    let k = ci * kh * kw;
    let n = b * ho * wo;
    let mut y = vec![T::zero(); co * n];
    gemm(
        T::one(),
        MatRef::new(weight.data(), co, k),
        MatRef::new(&cols, k, n),
        T::zero(),
        &mut y,
    );
    (cols_to_nchw(&y, b, co, ho, wo), cols)
}

/// Gradients of [`conv2d`] w.r.t. input and kernel.
pub fn conv2d_backward<T: Real>(
    grad: &Tensor<T>,
    x_shape: &[usize],
    weight: &Tensor<T>,
    cols: &[T],
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (b, ci, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (co, _, kh, kw) = weight.dims4();
    let (_, _, ho, wo) = grad.dims4();
    let k = ci * kh * kw;
    let n = b * ho * wo;
    let gy = nchw_to_cols(grad);
    let gw = need_w.then(|| {
        let mut gw = vec![T::zero(); co * k];
        gemm(
            T::one(),
            MatRef::new(&gy, co, n),
            MatRef::new(cols, k, n).t(),
            T::zero(),
            &mut gw,
        );
        Tensor::new(weight.shape().to_vec(), gw)
    });
    let gx = need_x.then(|| {
        let mut gcols = vec![T::zero(); k * n];
        gemm(
            T::one(),
            MatRef::new(weight.data(), co, k).t(),
            MatRef::new(&gy, co, n),
            T::zero(),
            &mut gcols,
        );
        col2im(&gcols, b, ci, h, w, kh, kw, pad)
    });
    (gx, gw)
}

pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "avg_pool2 needs even spatial dims"
    );
    let (ho, wo) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * ho * wo];
    for p in 0..b * c {
        let src = &xd[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = q * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn avg_pool2_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (b, c, ho, wo) = g.dims4();
    let (h, w) = (2 * ho, 2 * wo);
    let q = T::lit(0.25);
    let gd = g.data();
    let mut out = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        let src = &gd[p * ho * wo..][..ho * wo];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let v = q * src[y * wo + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * ho * wo];
    for p in 0..b * c {
        let src = &xd[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn upsample2_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (b, c, ho, wo) = g.dims4();
    let (h, w) = (ho / 2, wo / 2);
    let gd = g.data();
    let mut out = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        let src = &gd[p * ho * wo..][..ho * wo];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

/// (outer, axis, inner) extents of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let first = parts[0].shape();
    let mut shape = first.to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    for p in parts {
        for (d, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
            assert!(
                d == axis || a == b,
                "concat shape mismatch {:?} vs {:?}",
                p.shape(),
                first
            );
        }
    }
    let (outer, total, inner) = split_at_axis(&shape, axis);
    let mut out = vec![T::zero(); outer * total * inner];
    let mut offset = 0;
    for p in parts {
        let (_, len, _) = split_at_axis(p.shape(), axis);
        let pd = p.data();
        for o in 0..outer {
            out[(o * total + offset) * inner..][..len * inner]
                .copy_from_slice(&pd[o * len * inner..][..len * inner]);
        }
        offset += len;
    }
    Tensor::new(shape, out)
}

pub fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, total, inner) = split_at_axis(x.shape(), axis);
    assert!(start + len <= total, "narrow out of range");
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&xd[(o * total + start) * inner..][..len * inner]);
    }
    Tensor::new(shape, out)
}

/// Adjoint of [`narrow`]: embed `g` into zeros of `full_shape`.
pub fn narrow_backward<T: Real>(
    g: &Tensor<T>,
    full_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<T> {
    let (outer, total, inner) = split_at_axis(full_shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![T::zero(); outer * total * inner];
    let gd = g.data();
    for o in 0..outer {
        out[(o * total + start) * inner..][..len * inner]
            .copy_from_slice(&gd[o * len * inner..][..len * inner]);
    }
    Tensor::new(full_shape.to_vec(), out)
}

/// Log-softmax over the last axis.
pub fn log_softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("log_softmax on scalar");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    assert_eq!(perm.len(), x.rank(), "permute rank mismatch");
    let in_strides = contiguous_strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let dst_strides = contiguous_strides(&out_shape);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    walk(
        &out_shape,
        [&dst_strides, &src_strides],
        |[o, s], len, [so, ss]| {
            for i in 0..len {
                out[o + i * so] = xd[s + i * ss];
            }
        },
    );
    Tensor::new(out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Broadcast `t` up to `shape`.
pub fn expand<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let st = broadcast_strides(t.shape(), shape);
    let so = contiguous_strides(shape);
    let mut out = vec![T::zero(); numel(shape)];
    let td = t.data();
    walk(shape, [&so, &st], |[o, i], len, [so, si]| {
        for k in 0..len {
            out[o + k * so] = td[i + k * si];
        }
    });
    Tensor::new(shape.to_vec(), out)
}
