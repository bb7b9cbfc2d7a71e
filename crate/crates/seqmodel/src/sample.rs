//! Incremental decoding with cached keys and values, and temperature sampling.

use std::ops::Range;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidtune_core::{CoreError, Result};

use crate::model::EncoderInput;
use crate::nn::{relative_bucket, rms_norm_row, softmax_prefix};
use crate::scalar::Scalar;
use crate::weights::{AttentionWeights, ModelWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// 0 selects the argmax.
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(CoreError::Domain(format!(
                "temperature must be a finite non-negative number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Draws an index from `softmax(logits / temperature)`; temperature 0 picks
/// the first maximum.
pub fn sample_logits(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> Result<usize> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(CoreError::Domain(format!("temperature must be non-negative, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(CoreError::Domain("cannot sample from an empty distribution".into()));
    }
    let (argmax, max) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    if temperature == 0.0 {
        return Ok(argmax);
    }
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i);
        }
        u -= w;
    }
    // Rounding left `u` just past the last bucket.
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap_or(argmax))
}

struct LayerCache<F> {
    k: Array2<F>,
    v: Array2<F>,
    cross_k: Option<Array2<F>>,
    cross_v: Option<Array2<F>>,
}

/// Decoder state after consuming a prefix of slots.
pub struct DecodeState<'w, F> {
    weights: &'w ModelWeights<F>,
    positions: Vec<i64>,
    enc_times: Vec<Option<i64>>,
    layers: Vec<LayerCache<F>>,
    len: usize,
}

impl<'w, F: Scalar> DecodeState<'w, F> {
    /// `positions` stamps every slot that will be decoded.
    pub fn new(weights: &'w ModelWeights<F>, encoder: Option<&EncoderInput>, positions: Vec<i64>) -> Result<Self> {
        weights.check_encoder(encoder)?;
        let c = &weights.config;
        if positions.len() > c.max_len {
            return Err(CoreError::Domain(format!(
                "{} decoding slots exceed max_len {}",
                positions.len(),
                c.max_len
            )));
        }
        let states = encoder.map(|e| weights.encode(e));
        let layers = weights
            .decoder
            .blocks
            .iter()
            .map(|b| {
                let (cross_k, cross_v) = match (&states, &b.cross_attn) {
                    (Some(m), Some(ca)) => (Some(m.dot(&ca.k)), Some(m.dot(&ca.v))),
                    _ => (None, None),
                };
                LayerCache {
                    k: Array2::zeros((positions.len(), c.d_model)),
                    v: Array2::zeros((positions.len(), c.d_model)),
                    cross_k,
                    cross_v,
                }
            })
            .collect();
        Ok(Self {
            weights,
            positions,
            enc_times: encoder.map(|e| e.times.clone()).unwrap_or_default(),
            layers,
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds the input id of the next slot and returns that slot's logits.
    pub fn step(&mut self, input_id: usize) -> Result<Array1<F>> {
        let w = self.weights;
        let c = &w.config;
        let i = self.len;
        if i >= self.positions.len() {
            return Err(CoreError::Domain("decoding past the declared slot count".into()));
        }
        if input_id > c.vocab_size {
            return Err(CoreError::Domain(format!("input id {input_id} outside the embedding table")));
        }
        let nb = c.relative_position_buckets;
        let md = c.relative_max_distance;
        let pos_i = self.positions[i];
        let self_bias: Vec<usize> = self.positions[..=i]
            .iter()
            .map(|&p| relative_bucket(p - pos_i, c.decoder_bidirectional, nb, md))
            .collect();
        let cross_bias: Vec<usize> = self
            .enc_times
            .iter()
            .map(|t| t.map_or(nb, |t| relative_bucket(t - pos_i, true, nb, md)))
            .collect();
        let mut x = w.token_embedding.row(input_id).to_owned();
        for (b, cache) in w.decoder.blocks.iter().zip(self.layers.iter_mut()) {
            let h = rms_norm_row(x.view(), &b.norm_self);
            cache.k.row_mut(i).assign(&h.dot(&b.self_attn.k));
            cache.v.row_mut(i).assign(&h.dot(&b.self_attn.v));
            let k = cache.k.slice(s![..=i, ..]);
            let v = cache.v.slice(s![..=i, ..]);
            x += &attend_row(&b.self_attn, &h, k, v, c.n_heads, &self_bias, &w.decoder.rel_bias);
            if let (Some(ca), Some(nc), Some(ck), Some(cv)) = (&b.cross_attn, &b.norm_cross, &cache.cross_k, &cache.cross_v) {
                let h = rms_norm_row(x.view(), nc);
                let table = w.decoder.cross_bias.as_ref().unwrap();
                x += &attend_row(ca, &h, ck.view(), cv.view(), c.n_heads, &cross_bias, table);
            }
            let h = rms_norm_row(x.view(), &b.norm_ff);
            let a = h.dot(&b.ff_in).mapv(|v| v.max(F::zero()));
            x += &a.dot(&b.ff_out);
        }
        self.len += 1;
        let y = rms_norm_row(x.view(), &w.decoder.final_norm);
        Ok(y.dot(&w.output))
    }
}

fn attend_row<F: Scalar>(
    w: &AttentionWeights<F>,
    h: &Array1<F>,
    k_rows: ndarray::ArrayView2<'_, F>,
    v_rows: ndarray::ArrayView2<'_, F>,
    n_heads: usize,
    buckets: &[usize],
    table: &Array2<F>,
) -> Array1<F> {
    let q = h.dot(&w.q);
    let d = q.len();
    let dh = d / n_heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut o = Array1::zeros(d);
    for head in 0..n_heads {
        let cols = head * dh..(head + 1) * dh;
        let kh = k_rows.slice(s![.., cols.clone()]);
        let mut scores = kh.dot(&q.slice(s![cols.clone()]));
        for (j, sc) in scores.iter_mut().enumerate() {
            *sc = *sc * scale + table[[buckets[j], head]];
        }
        let n = scores.len();
        softmax_prefix(scores.as_slice_mut().unwrap(), n);
        o.slice_mut(s![cols.clone()]).assign(&v_rows.slice(s![.., cols]).t().dot(&scores));
    }
    o.dot(&w.o)
}

impl<F: Scalar> ModelWeights<F> {
    /// Autoregressively extends `prefix` by `params.max_new_tokens` tokens and
    /// returns only the new ones. `positions` stamps all `prefix + new` slots;
    /// `allowed(slot)` optionally restricts the id range drawn at each slot.
    pub fn sample(
        &self,
        encoder: Option<&EncoderInput>,
        prefix: &[u32],
        positions: Option<&[i64]>,
        params: &SamplingParams,
        allowed: Option<&dyn Fn(usize) -> Range<u32>>,
    ) -> Result<Vec<u32>> {
        params.validate()?;
        let c = &self.config;
        let total = prefix.len() + params.max_new_tokens;
        if total > c.max_len {
            return Err(CoreError::Domain(format!(
                "prefix {} + {} new tokens exceeds max_len {}",
                prefix.len(),
                params.max_new_tokens,
                c.max_len
            )));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(CoreError::Domain(format!("prefix token {t} outside vocabulary")));
        }
        let positions = match positions {
            Some(p) if p.len() != total => {
                return Err(CoreError::Shape(format!("{} positions for {total} slots", p.len())));
            }
            Some(p) => p.to_vec(),
            None => (0..total as i64).collect(),
        };
        let mut state = DecodeState::new(self, encoder, positions)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut seq: Vec<u32> = prefix.to_vec();
        for slot in 0..total {
            let input = if slot == 0 { c.bos_id() } else { seq[slot - 1] as usize };
            let logits = state.step(input)?;
            if slot < prefix.len() {
                continue;
            }
            let range = match allowed {
                Some(f) => {
                    let r = f(slot);
                    if r.start >= r.end || r.end as usize > c.vocab_size {
                        return Err(CoreError::Domain(format!("invalid token range {r:?} at slot {slot}")));
                    }
                    r
                }
                None => 0..c.vocab_size as u32,
            };
            let sub: Vec<f64> = logits
                .slice(s![range.start as usize..range.end as usize])
                .iter()
                .map(|v| v.f64())
                .collect();
            let pick = sample_logits(&sub, params.temperature, &mut rng)?;
            seq.push(range.start + pick as u32);
        }
        Ok(seq.split_off(prefix.len()))
    }
}
