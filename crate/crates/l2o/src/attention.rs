//! Non-causal grouped-query attention over all spots.
//!
//! Heads are packed along columns: query head `h` occupies columns
//! `h·d .. (h+1)·d` of a `[N, n_heads·d]` matrix, and likewise for keys and
//! values with `n_kv_heads`. Query head `h` reads kv head `h / (n_heads /
//! n_kv_heads)`.
//!
//! The tiled kernel streams key blocks with an online softmax and keeps only
//! the per-row log-sum-exp, so memory is `O(N·d)` instead of `O(N²)`. Its
//! backward pass recomputes the probabilities block by block.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{L2oError, Result};

pub const DEFAULT_BLOCK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn new(n_heads: usize, n_kv_heads: usize, head_dim: usize) -> Result<Self> {
        if n_heads == 0 || n_kv_heads == 0 || head_dim == 0 || n_heads % n_kv_heads != 0 {
            return Err(L2oError::Config(format!(
                "{n_heads} query heads cannot be grouped over {n_kv_heads} kv heads"
            )));
        }
        Ok(Self { n_heads, n_kv_heads, head_dim })
    }

    pub fn group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    fn check(&self, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
        let n = q.nrows();
        let ok = q.ncols() == self.n_heads * self.head_dim
            && k.ncols() == self.n_kv_heads * self.head_dim
            && v.ncols() == self.n_kv_heads * self.head_dim
            && k.nrows() == n
            && v.nrows() == n;
        if ok {
            Ok(())
        } else {
            Err(L2oError::Shape(format!(
                "attention inputs q {:?}, k {:?}, v {:?} do not match {self:?}",
                q.dim(),
                k.dim(),
                v.dim()
            )))
        }
    }

    fn cols(&self, head: usize) -> std::ops::Range<usize> {
        head * self.head_dim..(head + 1) * self.head_dim
    }
}

/// Plain softmax attention with each kv head explicitly repeated `group`
/// times. Materialises the full `[N, N]` score matrix per head.
pub fn reference_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, layout: HeadLayout) -> Result<Array2<f64>> {
    layout.check(q, k, v)?;
    let n = q.nrows();
    let d = layout.head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut k_rep = Array2::zeros((n, layout.n_heads * d));
    let mut v_rep = Array2::zeros((n, layout.n_heads * d));
    for h in 0..layout.n_heads {
        let src = layout.cols(h / layout.group());
        k_rep.slice_mut(s![.., layout.cols(h)]).assign(&k.slice(s![.., src.clone()]));
        v_rep.slice_mut(s![.., layout.cols(h)]).assign(&v.slice(s![.., src]));
    }
    let mut out = Array2::zeros((n, layout.n_heads * d));
    for h in 0..layout.n_heads {
        let c = layout.cols(h);
        let mut scores = q.slice(s![.., c.clone()]).dot(&k_rep.slice(s![.., c.clone()]).t()) * scale;
        for mut row in scores.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        out.slice_mut(s![.., c.clone()]).assign(&scores.dot(&v_rep.slice(s![.., c])));
    }
    Ok(out)
}

/// Tiled forward pass. Returns the output and the log-sum-exp of the scaled
/// scores, `[N, n_heads]`.
pub fn attention_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    layout: HeadLayout,
    block: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    layout.check(q, k, v)?;
    let n = q.nrows();
    let d = layout.head_dim;
    let block = block.max(1);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array2::zeros((n, layout.n_heads * d));
    let mut lse = Array2::zeros((n, layout.n_heads));
    for h in 0..layout.n_heads {
        let kv = layout.cols(h / layout.group());
        let qh = q.slice(s![.., layout.cols(h)]);
        let kh = k.slice(s![.., kv.clone()]);
        let vh = v.slice(s![.., kv]);
        for q0 in (0..n).step_by(block) {
            let q1 = (q0 + block).min(n);
            let qi = qh.slice(s![q0..q1, ..]);
            let rows = q1 - q0;
            let mut m = Array1::from_elem(rows, f64::NEG_INFINITY);
            let mut l = Array1::<f64>::zeros(rows);
            let mut acc = Array2::<f64>::zeros((rows, d));
            for k0 in (0..n).step_by(block) {
                let k1 = (k0 + block).min(n);
                let mut sblk = qi.dot(&kh.slice(s![k0..k1, ..]).t()) * scale;
                for (r, mut srow) in sblk.rows_mut().into_iter().enumerate() {
                    let bmax = srow.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let m_new = m[r].max(bmax);
                    let corr = (m[r] - m_new).exp();
                    srow.mapv_inplace(|x| (x - m_new).exp());
                    l[r] = l[r] * corr + srow.sum();
                    acc.row_mut(r).mapv_inplace(|x| x * corr);
                    m[r] = m_new;
                }
                acc += &sblk.dot(&vh.slice(s![k0..k1, ..]));
            }
            for r in 0..rows {
                acc.row_mut(r).mapv_inplace(|x| x / l[r]);
                lse[[q0 + r, h]] = m[r] + l[r].ln();
            }
            out.slice_mut(s![q0..q1, layout.cols(h)]).assign(&acc);
        }
    }
    Ok((out, lse))
}

/// Gradients `(dq, dk, dv)` of the tiled attention given the forward output,
/// its log-sum-exp and the upstream gradient.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    out: &Array2<f64>,
    lse: &Array2<f64>,
    dout: &Array2<f64>,
    layout: HeadLayout,
    block: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n = q.nrows();
    let d = layout.head_dim;
    let block = block.max(1);
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for h in 0..layout.n_heads {
        let qc = layout.cols(h);
        let kv = layout.cols(h / layout.group());
        let qh = q.slice(s![.., qc.clone()]);
        let kh = k.slice(s![.., kv.clone()]);
        let vh = v.slice(s![.., kv.clone()]);
        let doh = dout.slice(s![.., qc.clone()]);
        let delta: Array1<f64> = (&doh * &out.slice(s![.., qc.clone()])).sum_axis(Axis(1));
        for q0 in (0..n).step_by(block) {
            let q1 = (q0 + block).min(n);
            let qi = qh.slice(s![q0..q1, ..]);
            let doi = doh.slice(s![q0..q1, ..]);
            let mut dqi = Array2::<f64>::zeros((q1 - q0, d));
            for k0 in (0..n).step_by(block) {
                let k1 = (k0 + block).min(n);
                let kj = kh.slice(s![k0..k1, ..]);
                let vj = vh.slice(s![k0..k1, ..]);
                let mut p = qi.dot(&kj.t()) * scale;
                for (r, mut prow) in p.rows_mut().into_iter().enumerate() {
                    let shift = lse[[q0 + r, h]];
                    prow.mapv_inplace(|x| (x - shift).exp());
                }
                let dvj = p.t().dot(&doi);
                let mut ds = doi.dot(&vj.t());
                for (r, (mut dsrow, prow)) in ds.rows_mut().into_iter().zip(p.rows()).enumerate() {
                    let dl = delta[q0 + r];
                    dsrow.zip_mut_with(&prow, |a, &pv| *a = pv * (*a - dl) * scale);
                }
                dqi += &ds.dot(&kj);
                let dkj = ds.t().dot(&qi);
                let mut dk_blk = dk.slice_mut(s![k0..k1, kv.clone()]);
                dk_blk += &dkj;
                let mut dv_blk = dv.slice_mut(s![k0..k1, kv.clone()]);
                dv_blk += &dvj;
            }
            let mut dq_blk = dq.slice_mut(s![q0..q1, qc.clone()]);
            dq_blk += &dqi;
        }
    }
    (dq, dk, dv)
}

/// Grouped-query attention through the tiled kernel.
pub fn gqa_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, layout: HeadLayout) -> Result<Array2<f64>> {
    Ok(attention_forward(q, k, v, layout, DEFAULT_BLOCK)?.0)
}

/// Rotates consecutive column pairs `(2i, 2i+1)` of every head by
/// `position·base^(-2i/d)`. `sign = -1` applies the inverse rotation.
pub fn rope_apply(x: &Array2<f64>, positions: &[f64], head_dim: usize, base: f64, sign: f64) -> Result<Array2<f64>> {
    if head_dim % 2 != 0 {
        return Err(L2oError::Config(format!("rotary embedding needs an even head dim, got {head_dim}")));
    }
    if x.ncols() % head_dim != 0 || positions.len() != x.nrows() {
        return Err(L2oError::Shape(format!(
            "rotary input {:?} incompatible with head dim {head_dim} and {} positions",
            x.dim(),
            positions.len()
        )));
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / head_dim as f64)).collect();
    let mut out = x.clone();
    for (mut row, &p) in out.rows_mut().into_iter().zip(positions) {
        let rot: Vec<(f64, f64)> = freqs.iter().map(|f| (sign * p * f).sin_cos()).collect();
        for head in row.as_slice_mut().expect("standard layout").chunks_exact_mut(head_dim) {
            for (i, &(sin, cos)) in rot.iter().enumerate() {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}

/// Scaled attention logits `q_h · k_h / √d` between two rows of one head.
pub fn logit(q: ArrayView2<f64>, k: ArrayView2<f64>, i: usize, j: usize, head: usize, head_dim: usize) -> f64 {
    let c = head * head_dim..(head + 1) * head_dim;
    q.slice(s![i, c.clone()]).dot(&k.slice(s![j, c])) / (head_dim as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_token_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = HeadLayout::new(8, 4, 4).unwrap();
        let (q, k, v) = (random(&mut rng, 1, 32), random(&mut rng, 1, 16), random(&mut rng, 1, 16));
        let out = gqa_attention(&q, &k, &v, layout).unwrap();
        for h in 0..8 {
            let kv = h / 2;
            for c in 0..4 {
                assert!((out[[0, h * 4 + c]] - v[[0, kv * 4 + c]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(HeadLayout::new(8, 3, 32).is_err());
        assert!(rope_apply(&Array2::zeros((1, 6)), &[0.0], 3, 10.0, 1.0).is_err());
    }

    #[test]
    fn tiled_matches_reference_with_ragged_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = HeadLayout::new(4, 2, 8).unwrap();
        let n = 37;
        let (q, k, v) = (random(&mut rng, n, 32), random(&mut rng, n, 16), random(&mut rng, n, 16));
        let reference = reference_attention(&q, &k, &v, layout).unwrap();
        let (tiled, _) = attention_forward(&q, &k, &v, layout, 8).unwrap();
        let diff = (&reference - &tiled).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = HeadLayout::new(2, 1, 4).unwrap();
        let n = 5;
        let (q, k, v) = (random(&mut rng, n, 8), random(&mut rng, n, 4), random(&mut rng, n, 4));
        let w = random(&mut rng, n, 8);
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            (&attention_forward(q, k, v, layout, 2).unwrap().0 * &w).sum()
        };
        let (out, lse) = attention_forward(&q, &k, &v, layout, 2).unwrap();
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &out, &lse, &w, layout, 3);
        let h = 1e-6;
        for (which, analytic) in [(0, &dq), (1, &dk), (2, &dv)] {
            let base = [&q, &k, &v][which];
            for idx in [(0, 0), (2, 1), (4, 3)] {
                let mut plus = base.clone();
                plus[idx] += h;
                let mut minus = base.clone();
                minus[idx] -= h;
                let pick = |m: Array2<f64>| match which {
                    0 => loss(&m, &k, &v),
                    1 => loss(&q, &m, &v),
                    _ => loss(&q, &k, &m),
                };
                let fd = (pick(plus) - pick(minus)) / (2.0 * h);
                assert!((fd - analytic[idx]).abs() < 1e-7, "input {which} {idx:?}: {fd} vs {}", analytic[idx]);
            }
        }
    }

    #[test]
    fn rope_position_zero_is_identity_and_inverse_undoes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 3, 16);
        let zero = rope_apply(&x, &[0.0; 3], 8, 500_000.0, 1.0).unwrap();
        assert_eq!(zero, x);
        let pos = [1.0, 7.0, 300.0];
        let back = rope_apply(&rope_apply(&x, &pos, 8, 500_000.0, 1.0).unwrap(), &pos, 8, 500_000.0, -1.0).unwrap();
        assert!((&back - &x).mapv(f64::abs).sum() < 1e-12);
    }
}
