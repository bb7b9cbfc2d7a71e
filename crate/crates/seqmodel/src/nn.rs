//! Layer primitives with hand-written backward passes.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use crate::scalar::Scalar;
use crate::weights::AttentionWeights;

const NORM_EPS: f64 = 1e-6;

/// Bucket of a relative offset `rel = key_pos - query_pos`: exact for small
/// offsets, logarithmic up to `max_distance`, clamped beyond.
///
/// Unidirectional bucketing maps every non-negative offset (the query itself
/// and anything later) to bucket 0.
pub fn relative_bucket(rel: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut nb = num_buckets as i64;
    let mut base = 0;
    let n = if bidirectional {
        nb /= 2;
        if rel > 0 {
            base = nb;
        }
        rel.abs()
    } else {
        (-rel).max(0)
    };
    let max_exact = nb / 2;
    if n < max_exact {
        return (base + n) as usize;
    }
    let log_ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (log_ratio * (nb - max_exact) as f64) as i64;
    (base + large.min(nb - 1)) as usize
}

pub(crate) fn bucket_matrix(q_pos: &[i64], k_pos: &[i64], bidirectional: bool, nb: usize, max_dist: usize) -> Array2<usize> {
    Array2::from_shape_fn((q_pos.len(), k_pos.len()), |(i, j)| {
        relative_bucket(k_pos[j] - q_pos[i], bidirectional, nb, max_dist)
    })
}

/// Cross-attention buckets; encoder positions without a time share bucket `nb`.
pub(crate) fn cross_bucket_matrix(q_pos: &[i64], k_times: &[Option<i64>], nb: usize, max_dist: usize) -> Array2<usize> {
    Array2::from_shape_fn((q_pos.len(), k_times.len()), |(i, j)| match k_times[j] {
        Some(t) => relative_bucket(t - q_pos[i], true, nb, max_dist),
        None => nb,
    })
}

pub(crate) struct NormCache<F> {
    x: Array2<F>,
    inv_rms: Array1<F>,
}

/// Scale-only RMS normalisation of each row.
pub(crate) fn rms_norm<F: Scalar>(x: &Array2<F>, gain: &Array1<F>) -> (Array2<F>, NormCache<F>) {
    let d = F::of(x.ncols() as f64);
    let inv_rms = x.map_axis(Axis(1), |row| {
        let ms = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / d;
        F::one() / (ms + F::of(NORM_EPS)).sqrt()
    });
    let y = x * &inv_rms.view().insert_axis(Axis(1)) * gain;
    (
        y,
        NormCache {
            x: x.clone(),
            inv_rms,
        },
    )
}

pub(crate) fn rms_norm_row<F: Scalar>(x: ArrayView1<'_, F>, gain: &Array1<F>) -> Array1<F> {
    let d = F::of(x.len() as f64);
    let ms = x.iter().fold(F::zero(), |acc, &v| acc + v * v) / d;
    let s = F::one() / (ms + F::of(NORM_EPS)).sqrt();
    Zip::from(&x).and(gain).map_collect(|&v, &g| v * s * g)
}

pub(crate) fn rms_norm_backward<F: Scalar>(
    cache: &NormCache<F>,
    gain: &Array1<F>,
    dy: &Array2<F>,
    dgain: &mut Array1<F>,
) -> Array2<F> {
    let d = F::of(cache.x.ncols() as f64);
    let mut dx = Array2::zeros(cache.x.raw_dim());
    for (i, ((x, dyr), mut dxr)) in cache
        .x
        .outer_iter()
        .zip(dy.outer_iter())
        .zip(dx.outer_iter_mut())
        .enumerate()
    {
        let s = cache.inv_rms[i];
        let mut dot = F::zero();
        for j in 0..x.len() {
            dgain[j] += dyr[j] * x[j] * s;
            dot += dyr[j] * gain[j] * x[j];
        }
        let c = s * s * s * dot / d;
        for j in 0..x.len() {
            dxr[j] = s * dyr[j] * gain[j] - x[j] * c;
        }
    }
    dx
}

/// Softmax of one score row restricted to the first `valid` entries; the
/// rest are set to exactly zero.
pub(crate) fn softmax_prefix<F: Scalar>(row: &mut [F], valid: usize) {
    let max = row[..valid].iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for v in row[..valid].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row[..valid].iter_mut() {
        *v /= sum;
    }
    for v in row[valid..].iter_mut() {
        *v = F::zero();
    }
}

pub(crate) struct AttnCache<F> {
    xq: Array2<F>,
    xkv: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    o: Array2<F>,
    probs: Vec<Array2<F>>,
}

/// Multi-head attention of `xq` over `xkv`. `bias` pairs a bucket index per
/// score with a `buckets x heads` table. With `causal`, query `i` sees keys `0..=i`.
pub(crate) fn attention<F: Scalar>(
    w: &AttentionWeights<F>,
    xq: &Array2<F>,
    xkv: &Array2<F>,
    n_heads: usize,
    bias: Option<(&Array2<usize>, &Array2<F>)>,
    causal: bool,
) -> (Array2<F>, AttnCache<F>) {
    let q = xq.dot(&w.q);
    let k = xkv.dot(&w.k);
    let v = xkv.dot(&w.v);
    let (tq, d) = q.dim();
    let tk = k.nrows();
    let dh = d / n_heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut o = Array2::zeros((tq, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|x| x * scale);
        if let Some((idx, table)) = bias {
            Zip::from(&mut scores).and(idx).for_each(|s, &b| *s += table[[b, h]]);
        }
        for (i, mut row) in scores.outer_iter_mut().enumerate() {
            let valid = if causal { i + 1 } else { tk };
            softmax_prefix(row.as_slice_mut().unwrap(), valid);
        }
        o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let out = o.dot(&w.o);
    (
        out,
        AttnCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            o,
            probs,
        },
    )
}

/// Returns `(d xq, d xkv)` and accumulates weight and bias-table gradients.
pub(crate) fn attention_backward<F: Scalar>(
    w: &AttentionWeights<F>,
    cache: &AttnCache<F>,
    dout: &Array2<F>,
    n_heads: usize,
    bias: Option<(&Array2<usize>, &mut Array2<F>)>,
    gw: &mut AttentionWeights<F>,
) -> (Array2<F>, Array2<F>) {
    let d = cache.q.ncols();
    let dh = d / n_heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    gw.o += &cache.o.t().dot(dout);
    let d_o = dout.dot(&w.o.t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    let mut bias = bias;
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let doh = d_o.slice(cols);
        let mut ds = doh.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        for (mut dsr, pr) in ds.outer_iter_mut().zip(p.outer_iter()) {
            let r = dsr.iter().zip(pr.iter()).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
            dsr.zip_mut_with(&pr, |x, &pv| *x = pv * (*x - r));
        }
        if let Some((idx, table)) = bias.as_mut() {
            Zip::from(&ds).and(*idx).for_each(|&g, &b| table[[b, h]] += g);
        }
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    gw.q += &cache.xq.t().dot(&dq);
    gw.k += &cache.xkv.t().dot(&dk);
    gw.v += &cache.xkv.t().dot(&dv);
    let dxq = dq.dot(&w.q.t());
    let dxkv = dk.dot(&w.k.t()) + dv.dot(&w.v.t());
    (dxq, dxkv)
}

/// Teacher-forced cross-entropy: returns the summed loss over positions
/// `loss_from..`, their count, and `scale * d loss / d logits` (rows before
/// `loss_from` are exactly zero).
pub fn masked_cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    targets: &[u32],
    loss_from: usize,
    scale: f64,
) -> (f64, usize, Array2<F>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    let mut count = 0;
    for (i, row) in logits.outer_iter().enumerate().skip(loss_from) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
        let exps: Vec<f64> = row.iter().map(|&v| (v.f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let t = targets[i] as usize;
        total += sum.ln() - (row[t].f64() - max);
        count += 1;
        let mut g = grad.row_mut(i);
        for (j, e) in exps.iter().enumerate() {
            let p = e / sum - if j == t { 1.0 } else { 0.0 };
            g[j] = F::of(p * scale);
        }
    }
    (total, count, grad)
}
