//! Forward pass, teacher-forced loss and its gradient.

use ndarray::{s, Array2, Axis};
use vidtune_core::conditioning::StreamLayout;
use vidtune_core::{CoreError, Result};

use crate::nn::{
    attention, attention_backward, bucket_matrix, cross_bucket_matrix, masked_cross_entropy, rms_norm,
    rms_norm_backward, AttnCache, NormCache,
};
use crate::scalar::Scalar;
use crate::weights::{ModelWeights, StackWeights};

/// Encoder stream: raw feature tracks, each projected by its adaptor, plus an
/// optional time stamp per position used by the cross-attention bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub layout: StreamLayout,
    pub times: Vec<Option<i64>>,
}

impl EncoderInput {
    pub fn untimed(layout: StreamLayout) -> Self {
        let times = vec![None; layout.len];
        Self { layout, times }
    }

    /// A single dense track under adaptor `name`.
    pub fn dense(name: &str, rows: Array2<f32>) -> Self {
        let mut layout = StreamLayout {
            len: 0,
            tracks: Vec::new(),
        };
        layout.push_back(name, rows);
        Self::untimed(layout)
    }

    pub fn len(&self) -> usize {
        self.layout.len
    }

    pub fn is_empty(&self) -> bool {
        self.layout.len == 0
    }
}

/// One teacher-forcing example. `tokens[t]` is predicted from BOS and
/// `tokens[..t]`; only positions `loss_from..` contribute to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub encoder: Option<EncoderInput>,
    pub tokens: Vec<u32>,
    /// Position stamp of each target slot; `0..len` when absent.
    pub positions: Option<Vec<i64>>,
    pub loss_from: usize,
}

impl Example {
    pub fn new(encoder: Option<EncoderInput>, tokens: Vec<u32>) -> Self {
        Self {
            encoder,
            tokens,
            positions: None,
            loss_from: 0,
        }
    }

    pub fn n_loss_tokens(&self) -> usize {
        self.tokens.len().saturating_sub(self.loss_from)
    }
}

struct BlockCache<F> {
    n_self: NormCache<F>,
    self_attn: AttnCache<F>,
    n_cross: Option<NormCache<F>>,
    cross_attn: Option<AttnCache<F>>,
    n_ff: NormCache<F>,
    ff_x: Array2<F>,
    ff_pre: Array2<F>,
    ff_act: Array2<F>,
}

struct StackCache<F> {
    blocks: Vec<BlockCache<F>>,
    final_norm: NormCache<F>,
}

struct Memory<'a, F> {
    states: &'a Array2<F>,
    buckets: &'a Array2<usize>,
}

fn stack_forward<F: Scalar>(
    s: &StackWeights<F>,
    mut x: Array2<F>,
    n_heads: usize,
    self_buckets: &Array2<usize>,
    causal: bool,
    memory: Option<&Memory<'_, F>>,
) -> (Array2<F>, StackCache<F>) {
    let mut blocks = Vec::with_capacity(s.blocks.len());
    for b in &s.blocks {
        let (h, n_self) = rms_norm(&x, &b.norm_self);
        let (a, self_attn) = attention(&b.self_attn, &h, &h, n_heads, Some((self_buckets, &s.rel_bias)), causal);
        x += &a;
        let (mut n_cross, mut cross_attn) = (None, None);
        if let (Some(mem), Some(nc), Some(ca)) = (memory, &b.norm_cross, &b.cross_attn) {
            let (h, nc_cache) = rms_norm(&x, nc);
            let table = s.cross_bias.as_ref().expect("cross-attention blocks carry a cross bias");
            let (a, ca_cache) = attention(ca, &h, mem.states, n_heads, Some((mem.buckets, table)), false);
            x += &a;
            n_cross = Some(nc_cache);
            cross_attn = Some(ca_cache);
        }
        let (ff_x, n_ff) = rms_norm(&x, &b.norm_ff);
        let ff_pre = ff_x.dot(&b.ff_in);
        let ff_act = ff_pre.mapv(|v| v.max(F::zero()));
        x += &ff_act.dot(&b.ff_out);
        blocks.push(BlockCache {
            n_self,
            self_attn,
            n_cross,
            cross_attn,
            n_ff,
            ff_x,
            ff_pre,
            ff_act,
        });
    }
    let (y, final_norm) = rms_norm(&x, &s.final_norm);
    (y, StackCache { blocks, final_norm })
}

/// Returns the gradient w.r.t. the stack input and, for cross-attending
/// stacks, w.r.t. the memory states.
fn stack_backward<F: Scalar>(
    s: &StackWeights<F>,
    cache: &StackCache<F>,
    dy: &Array2<F>,
    n_heads: usize,
    self_buckets: &Array2<usize>,
    memory: Option<(&Memory<'_, F>, &mut Array2<F>)>,
    g: &mut StackWeights<F>,
) -> Array2<F> {
    let StackWeights {
        blocks: g_blocks,
        rel_bias: g_rel,
        cross_bias: g_cross,
        final_norm: g_final,
    } = g;
    let mut dx = rms_norm_backward(&cache.final_norm, &s.final_norm, dy, g_final);
    let mut memory = memory;
    for ((b, c), gb) in s.blocks.iter().zip(&cache.blocks).zip(g_blocks.iter_mut()).rev() {
        gb.ff_out += &c.ff_act.t().dot(&dx);
        let mut dpre = dx.dot(&b.ff_out.t());
        dpre.zip_mut_with(&c.ff_pre, |d, &p| {
            if p <= F::zero() {
                *d = F::zero();
            }
        });
        gb.ff_in += &c.ff_x.t().dot(&dpre);
        let dh = dpre.dot(&b.ff_in.t());
        dx += &rms_norm_backward(&c.n_ff, &b.norm_ff, &dh, &mut gb.norm_ff);

        if let (Some((mem, dmem)), Some(ca_cache), Some(nc_cache)) = (memory.as_mut(), &c.cross_attn, &c.n_cross) {
            let ca = b.cross_attn.as_ref().unwrap();
            let gca = gb.cross_attn.as_mut().unwrap();
            let table = g_cross.as_mut().unwrap();
            let (dh, dm) = attention_backward(ca, ca_cache, &dx, n_heads, Some((mem.buckets, table)), gca);
            **dmem += &dm;
            let gnc = gb.norm_cross.as_mut().unwrap();
            dx += &rms_norm_backward(nc_cache, b.norm_cross.as_ref().unwrap(), &dh, gnc);
        }

        let (dq, dkv) = attention_backward(&b.self_attn, &c.self_attn, &dx, n_heads, Some((self_buckets, &mut *g_rel)), &mut gb.self_attn);
        let dh = dq + dkv;
        dx += &rms_norm_backward(&c.n_self, &b.norm_self, &dh, &mut gb.norm_self);
    }
    dx
}

struct EncoderPass<F> {
    rows: Vec<Array2<F>>,
    buckets: Array2<usize>,
    cache: StackCache<F>,
    states: Array2<F>,
}

struct ForwardPass<F> {
    encoder: Option<EncoderPass<F>>,
    cross_buckets: Option<Array2<usize>>,
    input_ids: Vec<usize>,
    dec_buckets: Array2<usize>,
    dec_cache: StackCache<F>,
    dec_out: Array2<F>,
    logits: Array2<F>,
}

impl<F: Scalar> ModelWeights<F> {
    fn check_inputs(&self, encoder: Option<&EncoderInput>, tokens: &[u32], positions: Option<&[i64]>) -> Result<()> {
        let c = &self.config;
        if tokens.len() > c.max_len {
            return Err(CoreError::Domain(format!(
                "decoder length {} exceeds max_len {}",
                tokens.len(),
                c.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(CoreError::Domain(format!("token {t} outside vocabulary of {}", c.vocab_size)));
        }
        if let Some(p) = positions {
            if p.len() != tokens.len() {
                return Err(CoreError::Shape(format!(
                    "{} positions for {} tokens",
                    p.len(),
                    tokens.len()
                )));
            }
        }
        self.check_encoder(encoder)
    }

    pub(crate) fn check_encoder(&self, encoder: Option<&EncoderInput>) -> Result<()> {
        let c = &self.config;
        match (c.is_encoder_decoder(), encoder) {
            (true, None) => Err(CoreError::Domain("encoder-decoder model needs an encoder input".into())),
            (false, Some(_)) => Err(CoreError::Domain("decoder-only model takes no encoder input".into())),
            (false, None) => Ok(()),
            (true, Some(e)) => {
                if e.len() == 0 || e.len() > c.max_encoder_len {
                    return Err(CoreError::Domain(format!(
                        "encoder length {} outside 1..={}",
                        e.len(),
                        c.max_encoder_len
                    )));
                }
                if e.times.len() != e.len() {
                    return Err(CoreError::Shape(format!(
                        "{} encoder times for {} positions",
                        e.times.len(),
                        e.len()
                    )));
                }
                for t in &e.layout.tracks {
                    let a = self.adaptors.get(&t.adaptor).ok_or_else(|| {
                        CoreError::Config(format!("model has no adaptor for '{}' features", t.adaptor))
                    })?;
                    if a.weight.nrows() != t.rows.ncols() {
                        return Err(CoreError::Shape(format!(
                            "adaptor '{}' expects {}-d rows, got {}-d",
                            t.adaptor,
                            a.weight.nrows(),
                            t.rows.ncols()
                        )));
                    }
                    if t.offset + t.rows.nrows() > e.len() {
                        return Err(CoreError::Shape(format!("track '{}' runs past the stream end", t.adaptor)));
                    }
                }
                Ok(())
            }
        }
    }

    pub(crate) fn embed_encoder(&self, e: &EncoderInput) -> (Array2<F>, Vec<Array2<F>>) {
        let mut x = Array2::zeros((e.len(), self.config.d_model));
        let mut rows = Vec::with_capacity(e.layout.tracks.len());
        for t in &e.layout.tracks {
            let a = &self.adaptors[&t.adaptor];
            let r = t.rows.mapv(|v| F::of(v as f64));
            let proj = r.dot(&a.weight) + &a.bias;
            x.slice_mut(s![t.offset..t.offset + r.nrows(), ..]).scaled_add(F::one(), &proj);
            rows.push(r);
        }
        (x, rows)
    }

    /// Encoder output states for `e`.
    pub fn encoder_states(&self, e: &EncoderInput) -> Result<Array2<F>> {
        self.check_encoder(Some(e))?;
        Ok(self.encode(e))
    }

    pub(crate) fn encode(&self, e: &EncoderInput) -> Array2<F> {
        let c = &self.config;
        let (x, _) = self.embed_encoder(e);
        let pos: Vec<i64> = (0..e.len() as i64).collect();
        let buckets = bucket_matrix(&pos, &pos, true, c.relative_position_buckets, c.relative_max_distance);
        let enc = self.encoder.as_ref().expect("encoder-decoder weights");
        stack_forward(enc, x, c.n_heads, &buckets, false, None).0
    }

    fn run(&self, encoder: Option<&EncoderInput>, tokens: &[u32], positions: Option<&[i64]>) -> Result<ForwardPass<F>> {
        self.check_inputs(encoder, tokens, positions)?;
        let c = &self.config;
        let default_pos: Vec<i64>;
        let pos = match positions {
            Some(p) => p,
            None => {
                default_pos = (0..tokens.len() as i64).collect();
                &default_pos
            }
        };
        let encoder_in = encoder;
        let encoder = encoder.map(|e| {
            let (x, rows) = self.embed_encoder(e);
            let epos: Vec<i64> = (0..e.len() as i64).collect();
            let buckets = bucket_matrix(&epos, &epos, true, c.relative_position_buckets, c.relative_max_distance);
            let enc = self.encoder.as_ref().expect("encoder-decoder weights");
            let (states, cache) = stack_forward(enc, x, c.n_heads, &buckets, false, None);
            EncoderPass {
                rows,
                buckets,
                cache,
                states,
            }
        });
        let cross_buckets = encoder_in.map(|e| {
            cross_bucket_matrix(pos, &e.times, c.relative_position_buckets, c.relative_max_distance)
        });
        let mut input_ids = Vec::with_capacity(tokens.len());
        input_ids.push(c.bos_id());
        input_ids.extend(tokens.iter().take(tokens.len().saturating_sub(1)).map(|&t| t as usize));
        input_ids.truncate(tokens.len());
        let mut x = Array2::zeros((tokens.len(), c.d_model));
        for (mut row, &id) in x.outer_iter_mut().zip(&input_ids) {
            row.assign(&self.token_embedding.row(id));
        }
        let dec_buckets = bucket_matrix(pos, pos, c.decoder_bidirectional, c.relative_position_buckets, c.relative_max_distance);
        let memory = match (&encoder, &cross_buckets) {
            (Some(e), Some(b)) => Some(Memory {
                states: &e.states,
                buckets: b,
            }),
            _ => None,
        };
        let (dec_out, dec_cache) = stack_forward(&self.decoder, x, c.n_heads, &dec_buckets, true, memory.as_ref());
        let logits = dec_out.dot(&self.output);
        Ok(ForwardPass {
            encoder,
            cross_buckets,
            input_ids,
            dec_buckets,
            dec_cache,
            dec_out,
            logits,
        })
    }

    /// Logits, one row per decoder position, over the output vocabulary.
    pub fn forward(&self, encoder: Option<&EncoderInput>, tokens: &[u32], positions: Option<&[i64]>) -> Result<Array2<F>> {
        Ok(self.run(encoder, tokens, positions)?.logits)
    }

    /// Summed cross-entropy over the loss span and the number of positions in it.
    pub fn loss(&self, example: &Example) -> Result<(f64, usize)> {
        let logits = self.forward(example.encoder.as_ref(), &example.tokens, example.positions.as_deref())?;
        let (loss, n, _) = masked_cross_entropy(&logits, &example.tokens, example.loss_from, 0.0);
        Ok((loss, n))
    }

    /// Accumulates `scale * d(summed loss)` into `grads` and returns the summed
    /// loss and its position count.
    pub fn loss_and_grad(&self, example: &Example, scale: f64, grads: &mut ModelWeights<F>) -> Result<(f64, usize)> {
        let c = &self.config;
        let pass = self.run(example.encoder.as_ref(), &example.tokens, example.positions.as_deref())?;
        let (loss, n, dlogits) = masked_cross_entropy(&pass.logits, &example.tokens, example.loss_from, scale);
        grads.output += &pass.dec_out.t().dot(&dlogits);
        let dy = dlogits.dot(&self.output.t());

        let mut dmem = pass.encoder.as_ref().map(|e| Array2::<F>::zeros(e.states.raw_dim()));
        let memory = match (&pass.encoder, &pass.cross_buckets) {
            (Some(e), Some(b)) => Some(Memory {
                states: &e.states,
                buckets: b,
            }),
            _ => None,
        };
        let mem_arg = match (memory.as_ref(), dmem.as_mut()) {
            (Some(m), Some(d)) => Some((m, d)),
            _ => None,
        };
        let dx = stack_backward(&self.decoder, &pass.dec_cache, &dy, c.n_heads, &pass.dec_buckets, mem_arg, &mut grads.decoder);
        for (row, &id) in dx.outer_iter().zip(&pass.input_ids) {
            let mut g = grads.token_embedding.row_mut(id);
            g += &row;
        }

        if let (Some(enc), Some(dmem), Some(input)) = (&pass.encoder, dmem, example.encoder.as_ref()) {
            let genc = grads.encoder.as_mut().expect("encoder-decoder gradients");
            let weights = self.encoder.as_ref().unwrap();
            let dx = stack_backward(weights, &enc.cache, &dmem, c.n_heads, &enc.buckets, None, genc);
            for (track, rows) in input.layout.tracks.iter().zip(&enc.rows) {
                let d = dx.slice(s![track.offset..track.offset + rows.nrows(), ..]);
                let ga = grads.adaptors.get_mut(&track.adaptor).unwrap();
                ga.weight += &rows.t().dot(&d);
                ga.bias += &d.sum_axis(Axis(0));
            }
        }
        Ok((loss, n))
    }
}
