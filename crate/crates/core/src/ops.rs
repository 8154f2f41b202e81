//! The fixed set of differentiable operations used by both models.
//!
//! Each forward has a matching backward taking the forward inputs (and the
//! forward output where the activation needs it) plus the upstream gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// `out[B, N] = a[B, K] · b[K, N]`, accumulated in i-k-j order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for i in 0..rows {
        let out_row = &mut out[i * cols..(i + 1) * cols];
        for k in 0..inner {
            let aik = a[i * inner + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * cols..(k + 1) * cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `y = act(x W + b)`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, activation: Activation) -> Result<Tensor> {
    x.expect_rank("dense_forward", 2)?;
    w.expect_rank("dense_forward", 2)?;
    let (batch, fan_in) = (x.rows(), x.cols());
    let fan_out = w.cols();
    if w.rows() != fan_in {
        return Err(Error::dim(
            "dense_forward",
            format!("input width {} vs weight rows {}", fan_in, w.rows()),
        ));
    }
    b.expect_shape("dense_forward", &[fan_out])?;
    let mut out = Tensor::zeros(&[batch, fan_out]);
    for r in 0..batch {
        out.row_mut(r).copy_from_slice(b.data());
    }
    matmul_into(x.data(), w.data(), out.data_mut(), batch, fan_in, fan_out);
    if activation != Activation::Identity {
        out.data_mut().iter_mut().for_each(|v| *v = activation.apply(*v));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

/// Gradients of [`dense_forward`]. `output` is the forward result, used for
/// the relu mask.
pub fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    output: &Tensor,
    activation: Activation,
    upstream: &Tensor,
) -> Result<DenseGrads> {
    let (batch, fan_in) = (x.rows(), x.cols());
    let fan_out = w.cols();
    upstream.expect_shape("dense_backward", &[batch, fan_out])?;
    output.expect_shape("dense_backward", &[batch, fan_out])?;
    if w.rows() != fan_in {
        return Err(Error::dim("dense_backward", "weight rows differ from input width"));
    }

    let mut delta = upstream.clone();
    if activation == Activation::Relu {
        for (d, &y) in delta.data_mut().iter_mut().zip(output.data()) {
            if y <= 0.0 {
                *d = 0.0;
            }
        }
    }

    let mut gb = Tensor::zeros(&[fan_out]);
    for r in 0..batch {
        for (g, &d) in gb.data_mut().iter_mut().zip(delta.row(r)) {
            *g += d;
        }
    }

    // gW = xᵀ δ
    let mut gw = Tensor::zeros(&[fan_in, fan_out]);
    for r in 0..batch {
        let xr = x.row(r);
        let dr = delta.row(r);
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (g, &d) in gw.row_mut(k).iter_mut().zip(dr) {
                *g += xv * d;
            }
        }
    }

    // gx = δ Wᵀ
    let mut gx = Tensor::zeros(&[batch, fan_in]);
    for r in 0..batch {
        let dr = delta.row(r);
        let gxr = gx.row_mut(r);
        for (k, g) in gxr.iter_mut().enumerate() {
            *g = crate::tensor::dot(w.row(k), dr);
        }
    }

    Ok(DenseGrads { x: gx, w: gw, b: gb })
}

/// Gathers rows of `table` in the order of `ids`.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    table.expect_rank("embedding_lookup", 2)?;
    let (vocab, dim) = (table.rows(), table.cols());
    let mut out = Tensor::zeros(&[ids.len(), dim]);
    for (r, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::Index {
                what: "embedding table",
                index: id,
                size: vocab,
            });
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatter-adds `upstream` rows into `grad_table`; repeated ids accumulate.
pub fn embedding_backward(grad_table: &mut Tensor, ids: &[usize], upstream: &Tensor) -> Result<()> {
    let dim = grad_table.cols();
    upstream.expect_shape("embedding_backward", &[ids.len(), dim])?;
    for (r, &id) in ids.iter().enumerate() {
        if id >= grad_table.rows() {
            return Err(Error::Index {
                what: "embedding table",
                index: id,
                size: grad_table.rows(),
            });
        }
        let src = upstream.row(r);
        for (g, &u) in grad_table.row_mut(id).iter_mut().zip(src) {
            *g += u;
        }
    }
    Ok(())
}

fn conv_dims(seq: &Tensor, filters: &Tensor) -> Result<(usize, usize, usize, usize)> {
    seq.expect_rank("conv1d", 2)?;
    filters.expect_rank("conv1d", 3)?;
    let (len, dim) = (seq.rows(), seq.cols());
    let (width, fdim, nfilt) = (filters.shape()[0], filters.shape()[1], filters.shape()[2]);
    if fdim != dim {
        return Err(Error::dim(
            "conv1d",
            format!("embedding dim {} vs filter dim {}", dim, fdim),
        ));
    }
    if len < width {
        return Err(Error::SequenceTooShort { len, width });
    }
    Ok((len, dim, width, nfilt))
}

/// Valid (unpadded) 1-D correlation over positions followed by relu.
/// Output has `len - width + 1` rows.
pub fn conv1d_forward(seq: &Tensor, filters: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (len, dim, width, nfilt) = conv_dims(seq, filters)?;
    bias.expect_shape("conv1d_forward", &[nfilt])?;
    let positions = len - width + 1;
    let mut out = Tensor::zeros(&[positions, nfilt]);
    for p in 0..positions {
        out.row_mut(p).copy_from_slice(bias.data());
        // The window seq[p..p+width] is contiguous, as is the filter bank
        // flattened to [width*dim, nfilt].
        let window = &seq.data()[p * dim..(p + width) * dim];
        matmul_into(window, filters.data(), out.row_mut(p), 1, width * dim, nfilt);
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub seq: Tensor,
    pub filters: Tensor,
    pub bias: Tensor,
}

pub fn conv1d_backward(seq: &Tensor, filters: &Tensor, output: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    let (len, dim, width, nfilt) = conv_dims(seq, filters)?;
    let positions = len - width + 1;
    upstream.expect_shape("conv1d_backward", &[positions, nfilt])?;
    output.expect_shape("conv1d_backward", &[positions, nfilt])?;

    let mut gseq = Tensor::zeros(&[len, dim]);
    let mut gfilt = Tensor::zeros(filters.shape());
    let mut gbias = Tensor::zeros(&[nfilt]);
    let span = width * dim;
    for p in 0..positions {
        let mut delta: Vec<f64> = upstream.row(p).to_vec();
        for (d, &y) in delta.iter_mut().zip(output.row(p)) {
            if y <= 0.0 {
                *d = 0.0;
            }
        }
        if delta.iter().all(|&d| d == 0.0) {
            continue;
        }
        for (g, &d) in gbias.data_mut().iter_mut().zip(&delta) {
            *g += d;
        }
        let window = &seq.data()[p * dim..p * dim + span];
        let gwin = &mut gseq.data_mut()[p * dim..p * dim + span];
        for k in 0..span {
            let frow = &filters.data()[k * nfilt..(k + 1) * nfilt];
            gwin[k] += crate::tensor::dot(frow, &delta);
            let xv = window[k];
            if xv != 0.0 {
                let grow = &mut gfilt.data_mut()[k * nfilt..(k + 1) * nfilt];
                for (g, &d) in grow.iter_mut().zip(&delta) {
                    *g += xv * d;
                }
            }
        }
    }
    Ok(ConvGrads {
        seq: gseq,
        filters: gfilt,
        bias: gbias,
    })
}

/// Per-column maximum over positions. Ties go to the lowest position.
pub fn max_over_time(features: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    features.expect_rank("max_over_time", 2)?;
    let (positions, nfilt) = (features.rows(), features.cols());
    if positions == 0 {
        return Err(Error::Empty("max_over_time needs at least one position".into()));
    }
    let mut values = features.row(0).to_vec();
    let mut argmax = vec![0usize; nfilt];
    for p in 1..positions {
        for (f, &v) in features.row(p).iter().enumerate() {
            if v > values[f] {
                values[f] = v;
                argmax[f] = p;
            }
        }
    }
    Ok((Tensor::vector(values), argmax))
}

/// Routes `upstream[f]` to `(argmax[f], f)`; every other position gets zero.
pub fn max_over_time_backward(positions: usize, argmax: &[usize], upstream: &[f64]) -> Result<Tensor> {
    if argmax.len() != upstream.len() {
        return Err(Error::dim("max_over_time_backward", "argmax and upstream lengths differ"));
    }
    let nfilt = argmax.len();
    let mut g = Tensor::zeros(&[positions, nfilt]);
    for (f, (&p, &u)) in argmax.iter().zip(upstream).enumerate() {
        if p >= positions {
            return Err(Error::Index {
                what: "pooling positions",
                index: p,
                size: positions,
            });
        }
        g.data_mut()[p * nfilt + f] = u;
    }
    Ok(g)
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Class-weighted softmax cross-entropy averaged over the batch:
/// `mean_b w[y_b] · (−log softmax(logits_b)[y_b])`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize], class_weights: &Tensor) -> Result<(f64, Tensor)> {
    logits.expect_rank("softmax_cross_entropy", 2)?;
    let (batch, classes) = (logits.rows(), logits.cols());
    if labels.len() != batch {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{} labels for batch of {}", labels.len(), batch),
        ));
    }
    class_weights.expect_shape("softmax_cross_entropy", &[classes])?;
    if batch == 0 {
        return Err(Error::Empty("softmax_cross_entropy batch".into()));
    }
    let inv_b = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[batch, classes]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index {
                what: "class labels",
                index: y,
                size: classes,
            });
        }
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
        let log_z = m + z.ln();
        let w = class_weights.data()[y];
        loss += w * (log_z - row[y]);
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gv = w * inv_b * (p - if c == y { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * inv_b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn random(shape: &[usize], rng: &mut RngState) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_identity_weights() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        let y = dense_forward(&x, &w, &b, Activation::Identity).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_relu_clips_zero() {
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let y = dense_forward(&x, &w, &Tensor::vector(vec![0.0]), Activation::Relu).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn dense_matches_triple_loop() {
        let mut rng = RngState::new(1);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let y = dense_forward(&x, &w, &b, Activation::Identity).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = b.data()[j];
                for k in 0..4 {
                    s += x.get(i, k) * w.get(k, j);
                }
                assert!((y.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_shape_mismatch() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            dense_forward(&x, &w, &b, Activation::Relu),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dense_backward_bias_and_zero_upstream() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![0.5, -0.3, 0.2, 0.1]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = dense_forward(&x, &w, &b, Activation::Identity).unwrap();
        let ones = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let g = dense_backward(&x, &w, &y, Activation::Identity, &ones).unwrap();
        assert_eq!(g.b.data(), &[1.0, 1.0]);

        let zero = Tensor::zeros(&[1, 2]);
        let g = dense_backward(&x, &w, &y, Activation::Identity, &zero).unwrap();
        assert!(g.x.data().iter().chain(g.w.data()).chain(g.b.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_gathers_rows() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = embedding_lookup(&t, &[1, 0]).unwrap();
        assert_eq!(e.data(), &[3.0, 4.0, 1.0, 2.0]);
        let empty = embedding_lookup(&t, &[]).unwrap();
        assert_eq!(empty.shape(), &[0, 2]);
        assert!(matches!(embedding_lookup(&t, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn embedding_backward_accumulates_repeats() {
        let mut g = Tensor::zeros(&[3, 1]);
        let up = Tensor::new(vec![3, 1], vec![1.0, 2.0, 4.0]).unwrap();
        embedding_backward(&mut g, &[2, 0, 2], &up).unwrap();
        assert_eq!(g.data(), &[2.0, 0.0, 5.0]);
    }

    #[test]
    fn conv_width_one_unit_filter_selects_coordinate() {
        let seq = Tensor::new(vec![3, 2], vec![1.0, -2.0, 3.0, 4.0, -5.0, 6.0]).unwrap();
        let filt = Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap();
        let out = conv1d_forward(&seq, &filt, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.data(), &[0.0, 4.0, 6.0]);
    }

    #[test]
    fn conv_zero_sequence_gives_relu_bias() {
        let seq = Tensor::zeros(&[5, 3]);
        let mut rng = RngState::new(2);
        let filt = random(&[2, 3, 4], &mut rng);
        let bias = Tensor::vector(vec![0.5, -0.5, 0.0, 2.0]);
        let out = conv1d_forward(&seq, &filt, &bias).unwrap();
        assert_eq!(out.shape(), &[4, 4]);
        for p in 0..4 {
            assert_eq!(out.row(p), &[0.5, 0.0, 0.0, 2.0]);
        }
    }

    #[test]
    fn conv_matches_nested_loop() {
        let mut rng = RngState::new(3);
        let (len, dim, width, nf) = (7, 3, 3, 5);
        let seq = random(&[len, dim], &mut rng);
        let filt = random(&[width, dim, nf], &mut rng);
        let bias = random(&[nf], &mut rng);
        let out = conv1d_forward(&seq, &filt, &bias).unwrap();
        for p in 0..len - width + 1 {
            for f in 0..nf {
                let mut s = bias.data()[f];
                for o in 0..width {
                    for d in 0..dim {
                        s += seq.get(p + o, d) * filt.data()[(o * dim + d) * nf + f];
                    }
                }
                assert!((out.get(p, f) - s.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_short_sequence() {
        let seq = Tensor::zeros(&[2, 3]);
        let filt = Tensor::zeros(&[3, 3, 1]);
        assert!(matches!(
            conv1d_forward(&seq, &filt, &Tensor::zeros(&[1])),
            Err(Error::SequenceTooShort { len: 2, width: 3 })
        ));
    }

    #[test]
    fn max_over_time_records_argmax() {
        let f = Tensor::new(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (v, a) = max_over_time(&f).unwrap();
        assert_eq!(v.data(), &[3.0, 5.0]);
        assert_eq!(a, vec![1, 0]);

        let single = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(max_over_time(&single).unwrap().0.data(), single.data());

        let ties = Tensor::new(vec![3, 1], vec![2.0, 2.0, 2.0]).unwrap();
        assert_eq!(max_over_time(&ties).unwrap().1, vec![0]);

        assert!(max_over_time(&Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn max_backward_is_sparse() {
        let g = max_over_time_backward(3, &[2, 0], &[1.5, -1.0]).unwrap();
        assert_eq!(g.data(), &[0.0, -1.0, 0.0, 0.0, 1.5, 0.0]);
    }

    #[test]
    fn cross_entropy_known_values() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (l, _) = softmax_cross_entropy(&logits, &[0], &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) = softmax_cross_entropy(&logits, &[0], &Tensor::vector(vec![2.0, 1.0])).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let mut rng = RngState::new(4);
        let logits = random(&[3, 4], &mut rng);
        let mut shifted = logits.clone();
        for r in 0..3 {
            let c = rng.uniform(-50.0, 50.0);
            shifted.row_mut(r).iter_mut().for_each(|v| *v += c);
        }
        let w = Tensor::vector(vec![1.0, 2.0, 0.5, 1.5]);
        let (a, ga) = softmax_cross_entropy(&logits, &[0, 3, 1], &w).unwrap();
        let (b, gb) = softmax_cross_entropy(&shifted, &[0, 3, 1], &w).unwrap();
        assert!((a - b).abs() < 1e-9);
        for (x, y) in ga.data().iter().zip(gb.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }
}
