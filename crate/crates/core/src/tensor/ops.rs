//! Differentiable operations.
//!
//! Every op computes its value eagerly and, when an input is tracked, pushes
//! one backward rule onto the tape. Conventions:
//!
//! * sequence tensors are `[B, C, T]` (batch, channel, frame),
//! * row tensors are `[B, D]`,
//! * masked reductions take a [`Select`] and visit selected frames in
//!   ascending time order — the same order as the unmasked path, so an
//!   all-true selection is bitwise-identical to [`Select::All`],
//! * gradient accumulation across the batch is per-sample partials combined
//!   in sample order, so results do not depend on thread count.

use std::sync::Arc;

use rayon::prelude::*;

use super::{NodeId, Select, Tape, Tensor, TensorError};

/// Selection snapshot owned by backward closures.
enum SelOwned {
    All,
    Rows(Vec<Vec<bool>>),
}

impl SelOwned {
    fn of(sel: Select) -> Arc<Self> {
        Arc::new(match sel {
            Select::All => SelOwned::All,
            Select::Rows(rows) => SelOwned::Rows(rows.to_vec()),
        })
    }

    #[inline]
    fn selected(&self, b: usize, t: usize) -> bool {
        match self {
            SelOwned::All => true,
            SelOwned::Rows(rows) => rows[b][t],
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Invalid {
            op,
            what: format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn dims3(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    x.expect_rank(op, 3)?;
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

fn dims2(op: &'static str, x: &Tensor) -> Result<(usize, usize), TensorError> {
    x.expect_rank(op, 2)?;
    Ok((x.shape()[0], x.shape()[1]))
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_shape("add", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let mut t = Tensor::from_vec(a.shape().to_vec(), out)?;
    if a.is_tracked() || b.is_tracked() {
        let (an, bn) = (a.node(), b.node());
        let id = tape.push(t.numel(), move |g, sink| {
            if let Some(i) = an {
                sink.add(i, g);
            }
            if let Some(i) = bn {
                sink.add(i, g);
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

pub fn sub(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_shape("sub", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let mut t = Tensor::from_vec(a.shape().to_vec(), out)?;
    if a.is_tracked() || b.is_tracked() {
        let (an, bn) = (a.node(), b.node());
        let id = tape.push(t.numel(), move |g, sink| {
            if let Some(i) = an {
                sink.add(i, g);
            }
            if let Some(i) = bn {
                sink.with_slot(i, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si -= gi;
                    }
                });
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

pub fn mul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_shape("mul", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let mut t = Tensor::from_vec(a.shape().to_vec(), out)?;
    if a.is_tracked() || b.is_tracked() {
        let (an, bn) = (a.node(), b.node());
        let (ad, bd) = (a.storage(), b.storage());
        let id = tape.push(t.numel(), move |g, sink| {
            if let Some(i) = an {
                sink.add_mul(i, g, &bd);
            }
            if let Some(i) = bn {
                sink.add_mul(i, g, &ad);
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

pub fn scale(tape: &mut Tape, a: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|x| c * x).collect();
    let mut t = Tensor::from_vec(a.shape().to_vec(), out).expect("same shape");
    if let Some(an) = a.node() {
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(an, |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += c * gi;
                }
            });
        });
        t = t.tracked(id);
    }
    t
}

pub fn relu(tape: &mut Tape, a: &Tensor) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|x| x.max(0.0)).collect();
    let mut t = Tensor::from_vec(a.shape().to_vec(), out).expect("same shape");
    if let Some(an) = a.node() {
        let ad = a.storage();
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(an, |s| {
                for i in 0..s.len() {
                    if ad[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        });
        t = t.tracked(id);
    }
    t
}

pub fn sigmoid(tape: &mut Tape, a: &Tensor) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
    let mut t = Tensor::from_vec(a.shape().to_vec(), out).expect("same shape");
    if let Some(an) = a.node() {
        let yd = t.storage();
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(an, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * yd[i] * (1.0 - yd[i]);
                }
            });
        });
        t = t.tracked(id);
    }
    t
}

pub fn tanh(tape: &mut Tape, a: &Tensor) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|x| x.tanh()).collect();
    let mut t = Tensor::from_vec(a.shape().to_vec(), out).expect("same shape");
    if let Some(an) = a.node() {
        let yd = t.storage();
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(an, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - yd[i] * yd[i]);
                }
            });
        });
        t = t.tracked(id);
    }
    t
}

/// `sqrt(max(x, 0))`, with zero subgradient at and below zero.
pub fn sqrt_floor(tape: &mut Tape, a: &Tensor) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|x| x.max(0.0).sqrt()).collect();
    let mut t = Tensor::from_vec(a.shape().to_vec(), out).expect("same shape");
    if let Some(an) = a.node() {
        let ad = a.storage();
        let yd = t.storage();
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(an, |s| {
                for i in 0..s.len() {
                    if ad[i] > 0.0 && yd[i] > 0.0 {
                        s[i] += g[i] * 0.5 / yd[i];
                    }
                }
            });
        });
        t = t.tracked(id);
    }
    t
}

pub fn sum_all(tape: &mut Tape, a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    let mut t = Tensor::scalar(s);
    if let Some(an) = a.node() {
        let n = a.numel();
        let id = tape.push(1, move |g, sink| {
            let g0 = g[0];
            sink.with_slot(an, |s| {
                debug_assert_eq!(s.len(), n);
                for si in s.iter_mut() {
                    *si += g0;
                }
            });
        });
        t = t.tracked(id);
    }
    t
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

/// 1-D convolution over `[B, C_in, T]` with "same" zero padding.
///
/// `kernel` is `[C_out, C_in/groups, K]`; output frame `t` reads input frames
/// `t + (k - K/2) * dilation`, with zeros outside the sequence, so the frame
/// count is preserved and mask alignment carries through unchanged.
pub fn conv1d(
    tape: &mut Tape,
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    groups: usize,
    dilation: usize,
) -> Result<Tensor, TensorError> {
    let (b_n, c_in, t_n) = dims3("conv1d", x)?;
    kernel.expect_rank("conv1d", 3)?;
    let (c_out, c_ing, kk) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(TensorError::Invalid {
            op: "conv1d",
            what: format!("groups {groups} must divide C_in {c_in} and C_out {c_out}"),
        });
    }
    if c_ing != c_in / groups {
        return Err(TensorError::ShapeMismatch {
            op: "conv1d",
            axis: "kernel input-channel axis",
            expected: c_in / groups,
            got: c_ing,
        });
    }
    if dilation == 0 {
        return Err(TensorError::Invalid {
            op: "conv1d",
            what: "dilation must be at least 1".into(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                axis: "bias channel axis",
                expected: c_out,
                got: b.numel(),
            });
        }
    }

    let xd = x.storage();
    let kd = kernel.storage();
    let bd = bias.map(|b| b.storage());
    let half = (kk / 2) as isize;
    let co_per_g = c_out / groups;

    let fill_sample = |b: usize, ob: &mut [f64]| {
        for co in 0..c_out {
            let group = co / co_per_g;
            let orow = &mut ob[co * t_n..(co + 1) * t_n];
            if let Some(bd) = &bd {
                orow.fill(bd[co]);
            } else {
                orow.fill(0.0);
            }
            for cig in 0..c_ing {
                let ci = group * c_ing + cig;
                let xrow = &xd[(b * c_in + ci) * t_n..(b * c_in + ci + 1) * t_n];
                for k in 0..kk {
                    let w = kd[(co * c_ing + cig) * kk + k];
                    let off = (k as isize - half) * dilation as isize;
                    let t_lo = (-off).max(0) as usize;
                    let t_hi = ((t_n as isize - off).max(0) as usize).min(t_n);
                    for t in t_lo..t_hi {
                        orow[t] += w * xrow[(t as isize + off) as usize];
                    }
                }
            }
        }
    };

    let mut out = vec![0.0; b_n * c_out * t_n];
    let big = b_n > 1 && c_out * t_n * c_ing * kk >= 1 << 14;
    if big {
        out.par_chunks_mut(c_out * t_n)
            .enumerate()
            .for_each(|(b, ob)| fill_sample(b, ob));
    } else {
        for (b, ob) in out.chunks_mut(c_out * t_n).enumerate() {
            fill_sample(b, ob);
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, c_out, t_n], out)?;

    if x.is_tracked() || kernel.is_tracked() || bias.is_some_and(|b| b.is_tracked()) {
        let (xn, kn, bn) = (x.node(), kernel.node(), bias.and_then(|b| b.node()));
        let xd = x.storage();
        let kd = kernel.storage();
        let id = tape.push(t.numel(), move |g, sink| {
            if let Some(xi) = xn {
                sink.with_slot(xi, |dx| {
                    let back_sample = |b: usize, dxb: &mut [f64]| {
                        for co in 0..c_out {
                            let group = co / co_per_g;
                            let grow = &g[(b * c_out + co) * t_n..(b * c_out + co + 1) * t_n];
                            for cig in 0..c_ing {
                                let ci = group * c_ing + cig;
                                let dxrow = &mut dxb[ci * t_n..(ci + 1) * t_n];
                                for k in 0..kk {
                                    let w = kd[(co * c_ing + cig) * kk + k];
                                    let off = (k as isize - half) * dilation as isize;
                                    let t_lo = (-off).max(0) as usize;
                                    let t_hi = ((t_n as isize - off).max(0) as usize).min(t_n);
                                    for t in t_lo..t_hi {
                                        dxrow[(t as isize + off) as usize] += w * grow[t];
                                    }
                                }
                            }
                        }
                    };
                    if big {
                        dx.par_chunks_mut(c_in * t_n)
                            .enumerate()
                            .for_each(|(b, dxb)| back_sample(b, dxb));
                    } else {
                        for (b, dxb) in dx.chunks_mut(c_in * t_n).enumerate() {
                            back_sample(b, dxb);
                        }
                    }
                });
            }
            if kn.is_some() || bn.is_some() {
                // Per-sample partials combined in sample order keep the
                // accumulation independent of thread count.
                let partial = |b: usize| {
                    let mut dk = vec![0.0; c_out * c_ing * kk];
                    let mut db = vec![0.0; c_out];
                    for co in 0..c_out {
                        let group = co / co_per_g;
                        let grow = &g[(b * c_out + co) * t_n..(b * c_out + co + 1) * t_n];
                        db[co] += grow.iter().sum::<f64>();
                        for cig in 0..c_ing {
                            let ci = group * c_ing + cig;
                            let xrow = &xd[(b * c_in + ci) * t_n..(b * c_in + ci + 1) * t_n];
                            for k in 0..kk {
                                let off = (k as isize - half) * dilation as isize;
                                let t_lo = (-off).max(0) as usize;
                                let t_hi = ((t_n as isize - off).max(0) as usize).min(t_n);
                                let mut acc = 0.0;
                                for t in t_lo..t_hi {
                                    acc += grow[t] * xrow[(t as isize + off) as usize];
                                }
                                dk[(co * c_ing + cig) * kk + k] += acc;
                            }
                        }
                    }
                    (dk, db)
                };
                let partials: Vec<(Vec<f64>, Vec<f64>)> = if big {
                    (0..b_n).into_par_iter().map(partial).collect()
                } else {
                    (0..b_n).map(partial).collect()
                };
                if let Some(ki) = kn {
                    sink.with_slot(ki, |dk| {
                        for (p, _) in &partials {
                            for (d, v) in dk.iter_mut().zip(p) {
                                *d += v;
                            }
                        }
                    });
                }
                if let Some(bi) = bn {
                    sink.with_slot(bi, |db| {
                        for (_, p) in &partials {
                            for (d, v) in db.iter_mut().zip(p) {
                                *d += v;
                            }
                        }
                    });
                }
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// row (vector-batch) ops
// ---------------------------------------------------------------------------

/// `y = x W^T + b` for row batches: `[B, D] x [E, D] -> [B, E]`.
pub fn affine_rows(
    tape: &mut Tape,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor, TensorError> {
    let (b_n, d_n) = dims2("affine_rows", x)?;
    let (e_n, wd_n) = dims2("affine_rows", w)?;
    if wd_n != d_n {
        return Err(TensorError::ShapeMismatch {
            op: "affine_rows",
            axis: "weight input axis",
            expected: d_n,
            got: wd_n,
        });
    }
    if b.shape() != [e_n] {
        return Err(TensorError::ShapeMismatch {
            op: "affine_rows",
            axis: "bias axis",
            expected: e_n,
            got: b.numel(),
        });
    }
    let xd = x.storage();
    let wd = w.storage();
    let bd = b.storage();
    let mut out = vec![0.0; b_n * e_n];
    for bi in 0..b_n {
        let xrow = &xd[bi * d_n..(bi + 1) * d_n];
        for e in 0..e_n {
            let wrow = &wd[e * d_n..(e + 1) * d_n];
            let mut acc = bd[e];
            for d in 0..d_n {
                acc += wrow[d] * xrow[d];
            }
            out[bi * e_n + e] = acc;
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, e_n], out)?;
    if x.is_tracked() || w.is_tracked() || b.is_tracked() {
        let (xn, wn, bn) = (x.node(), w.node(), b.node());
        let id = tape.push(t.numel(), move |g, sink| {
            if let Some(xi) = xn {
                sink.with_slot(xi, |dx| {
                    for bi in 0..b_n {
                        for e in 0..e_n {
                            let ge = g[bi * e_n + e];
                            let wrow = &wd[e * d_n..(e + 1) * d_n];
                            let dxrow = &mut dx[bi * d_n..(bi + 1) * d_n];
                            for d in 0..d_n {
                                dxrow[d] += ge * wrow[d];
                            }
                        }
                    }
                });
            }
            if let Some(wi) = wn {
                sink.with_slot(wi, |dw| {
                    for bi in 0..b_n {
                        let xrow = &xd[bi * d_n..(bi + 1) * d_n];
                        for e in 0..e_n {
                            let ge = g[bi * e_n + e];
                            let dwrow = &mut dw[e * d_n..(e + 1) * d_n];
                            for d in 0..d_n {
                                dwrow[d] += ge * xrow[d];
                            }
                        }
                    }
                });
            }
            if let Some(bi2) = bn {
                sink.with_slot(bi2, |db| {
                    for bi in 0..b_n {
                        for e in 0..e_n {
                            db[e] += g[bi * e_n + e];
                        }
                    }
                });
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

/// `[B, D] x [C, D] -> [B, C]` (second operand transposed, no bias).
pub fn matmul_nt(tape: &mut Tape, a: &Tensor, w: &Tensor) -> Result<Tensor, TensorError> {
    let (b_n, d_n) = dims2("matmul_nt", a)?;
    let (c_n, wd_n) = dims2("matmul_nt", w)?;
    if wd_n != d_n {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            axis: "inner axis",
            expected: d_n,
            got: wd_n,
        });
    }
    let ad = a.storage();
    let wd = w.storage();
    let mut out = vec![0.0; b_n * c_n];
    for bi in 0..b_n {
        let arow = &ad[bi * d_n..(bi + 1) * d_n];
        for c in 0..c_n {
            let wrow = &wd[c * d_n..(c + 1) * d_n];
            let mut acc = 0.0;
            for d in 0..d_n {
                acc += arow[d] * wrow[d];
            }
            out[bi * c_n + c] = acc;
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, c_n], out)?;
    if a.is_tracked() || w.is_tracked() {
        let (an, wn) = (a.node(), w.node());
        let id = tape.push(t.numel(), move |g, sink| {
            if let Some(ai) = an {
                sink.with_slot(ai, |da| {
                    for bi in 0..b_n {
                        for c in 0..c_n {
                            let gc = g[bi * c_n + c];
                            let wrow = &wd[c * d_n..(c + 1) * d_n];
                            let darow = &mut da[bi * d_n..(bi + 1) * d_n];
                            for d in 0..d_n {
                                darow[d] += gc * wrow[d];
                            }
                        }
                    }
                });
            }
            if let Some(wi) = wn {
                sink.with_slot(wi, |dw| {
                    for bi in 0..b_n {
                        let arow = &ad[bi * d_n..(bi + 1) * d_n];
                        for c in 0..c_n {
                            let gc = g[bi * c_n + c];
                            let dwrow = &mut dw[c * d_n..(c + 1) * d_n];
                            for d in 0..d_n {
                                dwrow[d] += gc * arow[d];
                            }
                        }
                    }
                });
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

/// Rows scaled to unit L2 norm. Zero rows are an error.
pub fn l2_normalize_rows(tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
    let (b_n, d_n) = dims2("l2_normalize_rows", x)?;
    let xd = x.storage();
    let mut norms = vec![0.0; b_n];
    let mut out = vec![0.0; b_n * d_n];
    for bi in 0..b_n {
        let row = &xd[bi * d_n..(bi + 1) * d_n];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= 0.0 {
            return Err(TensorError::Invalid {
                op: "l2_normalize_rows",
                what: format!("row {bi} has zero norm"),
            });
        }
        norms[bi] = n;
        for d in 0..d_n {
            out[bi * d_n + d] = row[d] / n;
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, d_n], out)?;
    if let Some(xn) = x.node() {
        let yd = t.storage();
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(xn, |dx| {
                for bi in 0..b_n {
                    let yrow = &yd[bi * d_n..(bi + 1) * d_n];
                    let grow = &g[bi * d_n..(bi + 1) * d_n];
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gg)| y * gg).sum();
                    let inv = 1.0 / norms[bi];
                    let dxrow = &mut dx[bi * d_n..(bi + 1) * d_n];
                    for d in 0..d_n {
                        dxrow[d] += (grow[d] - yrow[d] * dot) * inv;
                    }
                }
            });
        });
        t = t.tracked(id);
    }
    Ok(t)
}

/// Concatenates row tensors along the feature axis: `[B, D1] ++ [B, D2]`.
pub fn concat_rows(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (b_n, d_a) = dims2("concat_rows", a)?;
    let (b_nb, d_b) = dims2("concat_rows", b)?;
    if b_nb != b_n {
        return Err(TensorError::ShapeMismatch {
            op: "concat_rows",
            axis: "batch axis",
            expected: b_n,
            got: b_nb,
        });
    }
    let d_n = d_a + d_b;
    let mut out = vec![0.0; b_n * d_n];
    for bi in 0..b_n {
        out[bi * d_n..bi * d_n + d_a].copy_from_slice(&a.data()[bi * d_a..(bi + 1) * d_a]);
        out[bi * d_n + d_a..(bi + 1) * d_n].copy_from_slice(&b.data()[bi * d_b..(bi + 1) * d_b]);
    }
    let mut t = Tensor::from_vec(vec![b_n, d_n], out)?;
    if a.is_tracked() || b.is_tracked() {
        let (an, bn) = (a.node(), b.node());
        let id = tape.push(t.numel(), move |g, sink| {
            if let Some(ai) = an {
                sink.with_slot(ai, |da| {
                    for bi in 0..b_n {
                        for d in 0..d_a {
                            da[bi * d_a + d] += g[bi * d_n + d];
                        }
                    }
                });
            }
            if let Some(bi2) = bn {
                sink.with_slot(bi2, |db| {
                    for bi in 0..b_n {
                        for d in 0..d_b {
                            db[bi * d_b + d] += g[bi * d_n + d_a + d];
                        }
                    }
                });
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// sequence (time-axis) ops
// ---------------------------------------------------------------------------

/// Concatenates `[B, C_i, T]` tensors along the channel axis.
pub fn concat_channels(tape: &mut Tape, xs: &[&Tensor]) -> Result<Tensor, TensorError> {
    if xs.is_empty() {
        return Err(TensorError::Invalid {
            op: "concat_channels",
            what: "needs at least one operand".into(),
        });
    }
    let (b_n, _, t_n) = dims3("concat_channels", xs[0])?;
    let mut c_total = 0;
    for x in xs {
        let (bb, cc, tt) = dims3("concat_channels", x)?;
        if bb != b_n || tt != t_n {
            return Err(TensorError::Invalid {
                op: "concat_channels",
                what: format!("batch/frame axes differ: {:?} vs {:?}", xs[0].shape(), x.shape()),
            });
        }
        c_total += cc;
    }
    let mut out = vec![0.0; b_n * c_total * t_n];
    let mut offsets = Vec::with_capacity(xs.len());
    let mut off = 0;
    for x in xs {
        let c = x.shape()[1];
        offsets.push((off, c));
        for b in 0..b_n {
            let src = &x.data()[b * c * t_n..(b + 1) * c * t_n];
            let dst = &mut out[(b * c_total + off) * t_n..(b * c_total + off + c) * t_n];
            dst.copy_from_slice(src);
        }
        off += c;
    }
    let mut t = Tensor::from_vec(vec![b_n, c_total, t_n], out)?;
    if xs.iter().any(|x| x.is_tracked()) {
        let nodes: Vec<Option<NodeId>> = xs.iter().map(|x| x.node()).collect();
        let id = tape.push(t.numel(), move |g, sink| {
            for (j, node) in nodes.iter().enumerate() {
                if let Some(xi) = node {
                    let (off, c) = offsets[j];
                    sink.with_slot(*xi, |dx| {
                        for b in 0..b_n {
                            let src = &g[(b * c_total + off) * t_n..(b * c_total + off + c) * t_n];
                            let dst = &mut dx[b * c * t_n..(b + 1) * c * t_n];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                }
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

/// Broadcasts a row tensor `[B, D]` to `[B, D, T]`.
pub fn tile_time(tape: &mut Tape, v: &Tensor, t_n: usize) -> Result<Tensor, TensorError> {
    let (b_n, d_n) = dims2("tile_time", v)?;
    let mut out = vec![0.0; b_n * d_n * t_n];
    for bd in 0..b_n * d_n {
        out[bd * t_n..(bd + 1) * t_n].fill(v.data()[bd]);
    }
    let mut t = Tensor::from_vec(vec![b_n, d_n, t_n], out)?;
    if let Some(vn) = v.node() {
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(vn, |dv| {
                for bd in 0..b_n * d_n {
                    dv[bd] += g[bd * t_n..(bd + 1) * t_n].iter().sum::<f64>();
                }
            });
        });
        t = t.tracked(id);
    }
    Ok(t)
}

/// Mean over selected frames, per sample and channel: `[B, D, T] -> [B, D]`.
pub fn masked_mean_time(tape: &mut Tape, x: &Tensor, sel: Select) -> Result<Tensor, TensorError> {
    let (b_n, d_n, t_n) = dims3("masked_mean_time", x)?;
    sel.validate("masked_mean_time", b_n, t_n)?;
    let mut counts = vec![0usize; b_n];
    for (b, c) in counts.iter_mut().enumerate() {
        *c = sel.count(b, t_n);
        if *c == 0 {
            return Err(TensorError::EmptySelection {
                op: "masked_mean_time",
                sample: b,
            });
        }
    }
    let xd = x.storage();
    let so = SelOwned::of(sel);
    let mut out = vec![0.0; b_n * d_n];
    for b in 0..b_n {
        let inv = 1.0 / counts[b] as f64;
        for d in 0..d_n {
            let row = &xd[(b * d_n + d) * t_n..(b * d_n + d + 1) * t_n];
            let mut acc = 0.0;
            for (t, v) in row.iter().enumerate() {
                if so.selected(b, t) {
                    acc += v;
                }
            }
            out[b * d_n + d] = acc * inv;
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, d_n], out)?;
    if let Some(xn) = x.node() {
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(xn, |dx| {
                for b in 0..b_n {
                    let inv = 1.0 / counts[b] as f64;
                    for d in 0..d_n {
                        let gv = g[b * d_n + d] * inv;
                        let dxrow = &mut dx[(b * d_n + d) * t_n..(b * d_n + d + 1) * t_n];
                        for (t, dv) in dxrow.iter_mut().enumerate() {
                            if so.selected(b, t) {
                                *dv += gv;
                            }
                        }
                    }
                }
            });
        });
        t = t.tracked(id);
    }
    Ok(t)
}

/// Sum over selected frames, per sample and channel: `[B, D, T] -> [B, D]`.
pub fn masked_sum_time(tape: &mut Tape, x: &Tensor, sel: Select) -> Result<Tensor, TensorError> {
    let (b_n, d_n, t_n) = dims3("masked_sum_time", x)?;
    sel.validate("masked_sum_time", b_n, t_n)?;
    let xd = x.storage();
    let so = SelOwned::of(sel);
    let mut out = vec![0.0; b_n * d_n];
    for b in 0..b_n {
        for d in 0..d_n {
            let row = &xd[(b * d_n + d) * t_n..(b * d_n + d + 1) * t_n];
            let mut acc = 0.0;
            for (t, v) in row.iter().enumerate() {
                if so.selected(b, t) {
                    acc += v;
                }
            }
            out[b * d_n + d] = acc;
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, d_n], out)?;
    if let Some(xn) = x.node() {
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(xn, |dx| {
                for b in 0..b_n {
                    for d in 0..d_n {
                        let gv = g[b * d_n + d];
                        let dxrow = &mut dx[(b * d_n + d) * t_n..(b * d_n + d + 1) * t_n];
                        for (t, dv) in dxrow.iter_mut().enumerate() {
                            if so.selected(b, t) {
                                *dv += gv;
                            }
                        }
                    }
                }
            });
        });
        t = t.tracked(id);
    }
    Ok(t)
}

/// Per-channel softmax over selected frames; unselected frames get weight 0
/// (the usual "-inf logit" convention, without materializing infinities).
pub fn masked_softmax_time(
    tape: &mut Tape,
    x: &Tensor,
    sel: Select,
) -> Result<Tensor, TensorError> {
    let (b_n, d_n, t_n) = dims3("masked_softmax_time", x)?;
    sel.validate("masked_softmax_time", b_n, t_n)?;
    for b in 0..b_n {
        if sel.count(b, t_n) == 0 {
            return Err(TensorError::EmptySelection {
                op: "masked_softmax_time",
                sample: b,
            });
        }
    }
    let xd = x.storage();
    let so = SelOwned::of(sel);
    let mut out = vec![0.0; b_n * d_n * t_n];
    for b in 0..b_n {
        for d in 0..d_n {
            let row = &xd[(b * d_n + d) * t_n..(b * d_n + d + 1) * t_n];
            let orow = &mut out[(b * d_n + d) * t_n..(b * d_n + d + 1) * t_n];
            let mut m = f64::NEG_INFINITY;
            for (t, v) in row.iter().enumerate() {
                if so.selected(b, t) && *v > m {
                    m = *v;
                }
            }
            let mut z = 0.0;
            for (t, v) in row.iter().enumerate() {
                if so.selected(b, t) {
                    let e = (v - m).exp();
                    orow[t] = e;
                    z += e;
                }
            }
            let inv = 1.0 / z;
            for (t, o) in orow.iter_mut().enumerate() {
                if so.selected(b, t) {
                    *o *= inv;
                }
            }
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, d_n, t_n], out)?;
    if let Some(xn) = x.node() {
        let yd = t.storage();
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(xn, |dx| {
                for b in 0..b_n {
                    for d in 0..d_n {
                        let base = (b * d_n + d) * t_n;
                        let yrow = &yd[base..base + t_n];
                        let grow = &g[base..base + t_n];
                        let mut dot = 0.0;
                        for t in 0..t_n {
                            if so.selected(b, t) {
                                dot += grow[t] * yrow[t];
                            }
                        }
                        let dxrow = &mut dx[base..base + t_n];
                        for t in 0..t_n {
                            if so.selected(b, t) {
                                dxrow[t] += yrow[t] * (grow[t] - dot);
                            }
                        }
                    }
                }
            });
        });
        t = t.tracked(id);
    }
    Ok(t)
}

/// Per-sample, per-channel scaling: `out[b,d,t] = x[b,d,t] * s[b,d]`.
pub fn channel_scale(tape: &mut Tape, x: &Tensor, s: &Tensor) -> Result<Tensor, TensorError> {
    let (b_n, d_n, t_n) = dims3("channel_scale", x)?;
    let (sb, sd) = dims2("channel_scale", s)?;
    if sb != b_n || sd != d_n {
        return Err(TensorError::Invalid {
            op: "channel_scale",
            what: format!("scale shape {:?} does not match input {:?}", s.shape(), x.shape()),
        });
    }
    let xd = x.storage();
    let sd_v = s.storage();
    let mut out = vec![0.0; b_n * d_n * t_n];
    for bd in 0..b_n * d_n {
        let sv = sd_v[bd];
        let row = &xd[bd * t_n..(bd + 1) * t_n];
        let orow = &mut out[bd * t_n..(bd + 1) * t_n];
        for t in 0..t_n {
            orow[t] = row[t] * sv;
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, d_n, t_n], out)?;
    if x.is_tracked() || s.is_tracked() {
        let (xn, sn) = (x.node(), s.node());
        let id = tape.push(t.numel(), move |g, sink| {
            if let Some(xi) = xn {
                sink.with_slot(xi, |dx| {
                    for bd in 0..b_n * d_n {
                        let sv = sd_v[bd];
                        let grow = &g[bd * t_n..(bd + 1) * t_n];
                        let dxrow = &mut dx[bd * t_n..(bd + 1) * t_n];
                        for t in 0..t_n {
                            dxrow[t] += grow[t] * sv;
                        }
                    }
                });
            }
            if let Some(si) = sn {
                sink.with_slot(si, |ds| {
                    for bd in 0..b_n * d_n {
                        let grow = &g[bd * t_n..(bd + 1) * t_n];
                        let xrow = &xd[bd * t_n..(bd + 1) * t_n];
                        let mut acc = 0.0;
                        for t in 0..t_n {
                            acc += grow[t] * xrow[t];
                        }
                        ds[bd] += acc;
                    }
                });
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

/// Segment-wise channel scaling. `bounds` has K+1 ascending entries from 0 to
/// T; segment k covers frames `bounds[k]..bounds[k+1]` and is scaled by
/// `scales[k]`, a `[B, D]` tensor.
pub fn segment_scale(
    tape: &mut Tape,
    x: &Tensor,
    scales: &[Tensor],
    bounds: &[usize],
) -> Result<Tensor, TensorError> {
    let (b_n, d_n, t_n) = dims3("segment_scale", x)?;
    if bounds.len() != scales.len() + 1
        || bounds.first() != Some(&0)
        || bounds.last() != Some(&t_n)
        || bounds.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(TensorError::Invalid {
            op: "segment_scale",
            what: format!("bounds {:?} do not partition 0..{}", bounds, t_n),
        });
    }
    for s in scales {
        let (sb, sd) = dims2("segment_scale", s)?;
        if sb != b_n || sd != d_n {
            return Err(TensorError::Invalid {
                op: "segment_scale",
                what: format!("scale shape {:?} does not match input {:?}", s.shape(), x.shape()),
            });
        }
    }
    let xd = x.storage();
    let svs: Vec<Arc<Vec<f64>>> = scales.iter().map(|s| s.storage()).collect();
    let bounds = bounds.to_vec();
    let mut out = vec![0.0; b_n * d_n * t_n];
    for b in 0..b_n {
        for d in 0..d_n {
            let base = (b * d_n + d) * t_n;
            for (k, sv) in svs.iter().enumerate() {
                let s = sv[b * d_n + d];
                for t in bounds[k]..bounds[k + 1] {
                    out[base + t] = xd[base + t] * s;
                }
            }
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, d_n, t_n], out)?;
    if x.is_tracked() || scales.iter().any(|s| s.is_tracked()) {
        let xn = x.node();
        let snodes: Vec<Option<NodeId>> = scales.iter().map(|s| s.node()).collect();
        let id = tape.push(t.numel(), move |g, sink| {
            if let Some(xi) = xn {
                sink.with_slot(xi, |dx| {
                    for b in 0..b_n {
                        for d in 0..d_n {
                            let base = (b * d_n + d) * t_n;
                            for (k, sv) in svs.iter().enumerate() {
                                let s = sv[b * d_n + d];
                                for t in bounds[k]..bounds[k + 1] {
                                    dx[base + t] += g[base + t] * s;
                                }
                            }
                        }
                    }
                });
            }
            for (k, node) in snodes.iter().enumerate() {
                if let Some(si) = node {
                    sink.with_slot(*si, |ds| {
                        for b in 0..b_n {
                            for d in 0..d_n {
                                let base = (b * d_n + d) * t_n;
                                let mut acc = 0.0;
                                for t in bounds[k]..bounds[k + 1] {
                                    acc += g[base + t] * xd[base + t];
                                }
                                ds[b * d_n + d] += acc;
                            }
                        }
                    });
                }
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Training-mode batch normalization over `[B, D, T]`.
///
/// Per channel, mean and population variance are computed over the *selected*
/// frames of the whole batch, and every frame (selected or not) is normalized
/// with those statistics. Returns the output plus the per-channel batch
/// statistics so the caller can update running estimates.
pub fn batchnorm_train(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    sel: Select,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>), TensorError> {
    let (b_n, d_n, t_n) = dims3("batchnorm_train", x)?;
    sel.validate("batchnorm_train", b_n, t_n)?;
    if gamma.shape() != [d_n] || beta.shape() != [d_n] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm_train",
            axis: "channel axis",
            expected: d_n,
            got: gamma.numel(),
        });
    }
    let n_sel = sel.total(b_n, t_n);
    if n_sel < 2 {
        return Err(TensorError::TooFewSelected {
            op: "batchnorm_train",
            needed: 2,
            got: n_sel,
        });
    }
    let xd = x.storage();
    let so = SelOwned::of(sel);
    let inv_n = 1.0 / n_sel as f64;

    let mut mean = vec![0.0; d_n];
    let mut var = vec![0.0; d_n];
    for d in 0..d_n {
        let mut acc = 0.0;
        for b in 0..b_n {
            let row = &xd[(b * d_n + d) * t_n..(b * d_n + d + 1) * t_n];
            for (t, v) in row.iter().enumerate() {
                if so.selected(b, t) {
                    acc += v;
                }
            }
        }
        let mu = acc * inv_n;
        let mut acc2 = 0.0;
        for b in 0..b_n {
            let row = &xd[(b * d_n + d) * t_n..(b * d_n + d + 1) * t_n];
            for (t, v) in row.iter().enumerate() {
                if so.selected(b, t) {
                    let c = v - mu;
                    acc2 += c * c;
                }
            }
        }
        mean[d] = mu;
        var[d] = acc2 * inv_n;
    }

    let gd = gamma.storage();
    let bd = beta.storage();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; b_n * d_n * t_n];
    for b in 0..b_n {
        for d in 0..d_n {
            let base = (b * d_n + d) * t_n;
            let (mu, is, ga, be) = (mean[d], inv_std[d], gd[d], bd[d]);
            for t in 0..t_n {
                out[base + t] = ga * (xd[base + t] - mu) * is + be;
            }
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, d_n, t_n], out)?;

    if x.is_tracked() || gamma.is_tracked() || beta.is_tracked() {
        let (xn, gn, bn) = (x.node(), gamma.node(), beta.node());
        let mean_c = mean.clone();
        let inv_std_c = inv_std.clone();
        let id = tape.push(t.numel(), move |g, sink| {
            // Per channel: g1 = sum of upstream grads over all frames,
            // g2 = sum of upstream grads weighted by the centered input.
            // Selected frames feel the extra mean/variance terms.
            let mut g1 = vec![0.0; d_n];
            let mut g2 = vec![0.0; d_n];
            for d in 0..d_n {
                let (mut a1, mut a2) = (0.0, 0.0);
                for b in 0..b_n {
                    let base = (b * d_n + d) * t_n;
                    for t in 0..t_n {
                        let gv = g[base + t];
                        a1 += gv;
                        a2 += gv * (xd[base + t] - mean_c[d]);
                    }
                }
                g1[d] = a1;
                g2[d] = a2;
            }
            if let Some(xi) = xn {
                sink.with_slot(xi, |dx| {
                    for b in 0..b_n {
                        for d in 0..d_n {
                            let base = (b * d_n + d) * t_n;
                            let ga = gd[d];
                            let is = inv_std_c[d];
                            let direct = ga * is;
                            let mean_term = ga * is * inv_n * g1[d];
                            let var_coeff = ga * is * is * is * inv_n * g2[d];
                            for t in 0..t_n {
                                let mut acc = direct * g[base + t];
                                if so.selected(b, t) {
                                    acc -= mean_term;
                                    acc -= (xd[base + t] - mean_c[d]) * var_coeff;
                                }
                                dx[base + t] += acc;
                            }
                        }
                    }
                });
            }
            if let Some(gi) = gn {
                sink.with_slot(gi, |dg| {
                    for d in 0..d_n {
                        dg[d] += g2[d] * inv_std_c[d];
                    }
                });
            }
            if let Some(bi) = bn {
                sink.with_slot(bi, |db| {
                    for d in 0..d_n {
                        db[d] += g1[d];
                    }
                });
            }
        });
        t = t.tracked(id);
    }
    Ok((t, mean, var))
}

/// Inference-mode batch normalization: every frame is normalized with the
/// provided running statistics; masks play no role here.
pub fn batchnorm_infer(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor, TensorError> {
    let (b_n, d_n, t_n) = dims3("batchnorm_infer", x)?;
    if gamma.shape() != [d_n] || beta.shape() != [d_n] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm_infer",
            axis: "channel axis",
            expected: d_n,
            got: gamma.numel(),
        });
    }
    if running_mean.len() != d_n || running_var.len() != d_n {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm_infer",
            axis: "running-statistics axis",
            expected: d_n,
            got: running_mean.len(),
        });
    }
    let xd = x.storage();
    let gd = gamma.storage();
    let bd = beta.storage();
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mean = running_mean.to_vec();
    let mut out = vec![0.0; b_n * d_n * t_n];
    for b in 0..b_n {
        for d in 0..d_n {
            let base = (b * d_n + d) * t_n;
            let (mu, is, ga, be) = (mean[d], inv_std[d], gd[d], bd[d]);
            for t in 0..t_n {
                out[base + t] = ga * (xd[base + t] - mu) * is + be;
            }
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, d_n, t_n], out)?;
    if x.is_tracked() || gamma.is_tracked() || beta.is_tracked() {
        let (xn, gn, bn) = (x.node(), gamma.node(), beta.node());
        let id = tape.push(t.numel(), move |g, sink| {
            if let Some(xi) = xn {
                sink.with_slot(xi, |dx| {
                    for b in 0..b_n {
                        for d in 0..d_n {
                            let base = (b * d_n + d) * t_n;
                            let w = gd[d] * inv_std[d];
                            for t in 0..t_n {
                                dx[base + t] += g[base + t] * w;
                            }
                        }
                    }
                });
            }
            if let Some(gi) = gn {
                sink.with_slot(gi, |dg| {
                    for b in 0..b_n {
                        for d in 0..d_n {
                            let base = (b * d_n + d) * t_n;
                            let mut acc = 0.0;
                            for t in 0..t_n {
                                acc += g[base + t] * (xd[base + t] - mean[d]) * inv_std[d];
                            }
                            dg[d] += acc;
                        }
                    }
                });
            }
            if let Some(bi) = bn {
                sink.with_slot(bi, |db| {
                    for b in 0..b_n {
                        for d in 0..d_n {
                            let base = (b * d_n + d) * t_n;
                            db[d] += g[base..base + t_n].iter().sum::<f64>();
                        }
                    }
                });
            }
        });
        t = t.tracked(id);
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// classification head ops
// ---------------------------------------------------------------------------

/// Additive angular margin on the target logits of a cosine matrix.
///
/// For each row `b`, entry `labels[b]` holding `cos θ` becomes
/// `cos(θ + margin)`; when `θ + margin` would exceed π the standard
/// monotonic fallback `cos θ − margin · sin(margin)` is used instead. All
/// other entries pass through unchanged.
pub fn margin_adjust(
    tape: &mut Tape,
    cos: &Tensor,
    labels: &[usize],
    margin: f64,
) -> Result<Tensor, TensorError> {
    let (b_n, c_n) = dims2("margin_adjust", cos)?;
    if labels.len() != b_n {
        return Err(TensorError::ShapeMismatch {
            op: "margin_adjust",
            axis: "label axis",
            expected: b_n,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c_n) {
        return Err(TensorError::Invalid {
            op: "margin_adjust",
            what: format!("label {bad} out of range for {c_n} classes"),
        });
    }
    let (cos_m, sin_m) = (margin.cos(), margin.sin());
    let threshold = (std::f64::consts::PI - margin).cos();
    let cd = cos.storage();
    let mut out = cd.as_ref().clone();
    let mut steep = vec![false; b_n];
    for (b, &lab) in labels.iter().enumerate() {
        let c = cd[b * c_n + lab].clamp(-1.0, 1.0);
        if c > threshold {
            let s = (1.0 - c * c).max(0.0).sqrt();
            out[b * c_n + lab] = c * cos_m - s * sin_m;
            steep[b] = true;
        } else {
            out[b * c_n + lab] = c - margin * sin_m;
        }
    }
    let mut t = Tensor::from_vec(vec![b_n, c_n], out)?;
    if let Some(cn) = cos.node() {
        let labels = labels.to_vec();
        let id = tape.push(t.numel(), move |g, sink| {
            sink.with_slot(cn, |dc| {
                for (d, gv) in dc.iter_mut().zip(g) {
                    *d += gv;
                }
                for (b, &lab) in labels.iter().enumerate() {
                    let i = b * c_n + lab;
                    // Replace the pass-through contribution with the branch
                    // derivative for the adjusted entry.
                    let c = cd[i].clamp(-1.0, 1.0);
                    let deriv = if steep[b] {
                        let s2 = (1.0 - c * c).max(1e-12);
                        cos_m + c * sin_m / s2.sqrt()
                    } else {
                        1.0
                    };
                    dc[i] += g[i] * (deriv - 1.0);
                }
            });
        });
        t = t.tracked(id);
    }
    Ok(t)
}

/// Mean softmax cross-entropy over rows: `[B, C]` + labels -> scalar.
pub fn cross_entropy_mean(
    tape: &mut Tape,
    logits: &Tensor,
    labels: &[usize],
) -> Result<Tensor, TensorError> {
    let (b_n, c_n) = dims2("cross_entropy_mean", logits)?;
    if labels.len() != b_n {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy_mean",
            axis: "label axis",
            expected: b_n,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c_n) {
        return Err(TensorError::Invalid {
            op: "cross_entropy_mean",
            what: format!("label {bad} out of range for {c_n} classes"),
        });
    }
    let xd = logits.storage();
    let mut total = 0.0;
    for (b, &lab) in labels.iter().enumerate() {
        let row = &xd[b * c_n..(b + 1) * c_n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += m + z.ln() - row[lab];
    }
    let mut t = Tensor::scalar(total / b_n as f64);
    if let Some(xn) = logits.node() {
        let labels = labels.to_vec();
        let id = tape.push(1, move |g, sink| {
            let g0 = g[0] / b_n as f64;
            sink.with_slot(xn, |dx| {
                for (b, &lab) in labels.iter().enumerate() {
                    let row = &xd[b * c_n..(b + 1) * c_n];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    let drow = &mut dx[b * c_n..(b + 1) * c_n];
                    for c in 0..c_n {
                        let p = (row[c] - m).exp() / z;
                        drow[c] += g0 * (p - if c == lab { 1.0 } else { 0.0 });
                    }
                }
            });
        });
        t = t.tracked(id);
    }
    Ok(t)
}
