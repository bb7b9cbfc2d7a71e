//! Parameter tensors and their deterministic names.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vidtune_core::Result;

use crate::config::TransformerConfig;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    pub o: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<F> {
    pub norm_self: Array1<F>,
    pub self_attn: AttentionWeights<F>,
    pub norm_cross: Option<Array1<F>>,
    pub cross_attn: Option<AttentionWeights<F>>,
    pub norm_ff: Array1<F>,
    pub ff_in: Array2<F>,
    pub ff_out: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackWeights<F> {
    pub blocks: Vec<BlockWeights<F>>,
    /// `buckets x heads`.
    pub rel_bias: Array2<F>,
    /// `(buckets + 1) x heads`; the last row scores encoder positions without a time.
    pub cross_bias: Option<Array2<F>>,
    pub final_norm: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorWeights<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<F> {
    pub config: TransformerConfig,
    /// `(vocab + 1) x d_model`, the last row is BOS.
    pub token_embedding: Array2<F>,
    pub adaptors: BTreeMap<String, AdaptorWeights<F>>,
    pub encoder: Option<StackWeights<F>>,
    pub decoder: StackWeights<F>,
    /// `d_model x vocab`.
    pub output: Array2<F>,
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn normal<F: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<F> {
        let dist = Normal::new(0.0, std).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || F::of(dist.sample(self.rng)))
    }

    fn attention<F: Scalar>(&mut self, d: usize) -> AttentionWeights<F> {
        let s = 1.0 / (d as f64).sqrt();
        AttentionWeights {
            q: self.normal(d, d, s),
            k: self.normal(d, d, s),
            v: self.normal(d, d, s),
            o: self.normal(d, d, s),
        }
    }

    fn stack<F: Scalar>(&mut self, c: &TransformerConfig, cross: bool) -> StackWeights<F> {
        let d = c.d_model;
        let blocks = (0..c.n_layers)
            .map(|_| BlockWeights {
                norm_self: Array1::ones(d),
                self_attn: self.attention(d),
                norm_cross: cross.then(|| Array1::ones(d)),
                cross_attn: cross.then(|| self.attention(d)),
                norm_ff: Array1::ones(d),
                ff_in: self.normal(d, c.d_ff, 1.0 / (d as f64).sqrt()),
                ff_out: self.normal(c.d_ff, d, 1.0 / (c.d_ff as f64).sqrt()),
            })
            .collect();
        StackWeights {
            blocks,
            rel_bias: Array2::zeros((c.relative_position_buckets, c.n_heads)),
            cross_bias: cross.then(|| Array2::zeros((c.relative_position_buckets + 1, c.n_heads))),
            final_norm: Array1::ones(d),
        }
    }
}

impl<F: Scalar> ModelWeights<F> {
    /// Random initialisation. Projections use std `1/sqrt(fan_in)`; the output
    /// layer uses `1/d_model` so initial predictions are close to uniform.
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let d = config.d_model;
        let token_embedding = init.normal(config.vocab_size + 1, d, 1.0);
        let encoder_decoder = config.is_encoder_decoder();
        let mut adaptors = BTreeMap::new();
        let mut encoder = None;
        if encoder_decoder {
            for spec in &config.encoder_inputs {
                adaptors.insert(
                    spec.name.clone(),
                    AdaptorWeights {
                        weight: init.normal(spec.dim, d, 1.0 / (spec.dim as f64).sqrt()),
                        bias: Array1::zeros(d),
                    },
                );
            }
            encoder = Some(init.stack(config, false));
        }
        let decoder = init.stack(config, encoder_decoder);
        let output = init.normal(d, config.vocab_size, 1.0 / d as f64);
        Ok(Self {
            config: config.clone(),
            token_embedding,
            adaptors,
            encoder,
            decoder,
            output,
        })
    }

    /// Same structure, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, mut t| t.fill(F::zero()));
        z
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        out.push(("embed.tokens".to_string(), self.token_embedding.view().into_dyn()));
        for (name, a) in &self.adaptors {
            out.push((format!("adaptor.{name}.weight"), a.weight.view().into_dyn()));
            out.push((format!("adaptor.{name}.bias"), a.bias.view().into_dyn()));
        }
        if let Some(enc) = &self.encoder {
            stack_views("encoder", enc, &mut out);
        }
        stack_views("decoder", &self.decoder, &mut out);
        out.push(("output".to_string(), self.output.view().into_dyn()));
        out
    }

    /// Visits every tensor mutably in the order of [`Self::tensors`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ArrayViewMutD<'_, F>)) {
        f("embed.tokens", self.token_embedding.view_mut().into_dyn());
        for (name, a) in self.adaptors.iter_mut() {
            f(&format!("adaptor.{name}.weight"), a.weight.view_mut().into_dyn());
            f(&format!("adaptor.{name}.bias"), a.bias.view_mut().into_dyn());
        }
        if let Some(enc) = self.encoder.as_mut() {
            stack_views_mut("encoder", enc, &mut f);
        }
        stack_views_mut("decoder", &mut self.decoder, &mut f);
        f("output", self.output.view_mut().into_dyn());
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        let others = other.tensors();
        let mut i = 0;
        self.for_each_mut(|_, mut t| {
            t += &others[i].1;
            i += 1;
        });
    }

    pub fn scale(&mut self, s: F) {
        self.for_each_mut(|_, mut t| t.mapv_inplace(|v| v * s));
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|v| v.f64() * v.f64()).collect::<Vec<_>>())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Converts to another element type.
    pub fn cast<G: Scalar>(&self) -> ModelWeights<G> {
        let mut out = ModelWeights::<G>::init_shape(self);
        let src = self.tensors();
        let mut i = 0;
        out.for_each_mut(|_, mut t| {
            t.zip_mut_with(&src[i].1, |d, s| *d = G::of(s.f64()));
            i += 1;
        });
        out
    }

    fn init_shape<G: Scalar>(other: &ModelWeights<G>) -> Self {
        let conv2 = |a: &Array2<G>| Array2::<F>::zeros(a.raw_dim());
        let conv1 = |a: &Array1<G>| Array1::<F>::zeros(a.raw_dim());
        let attn = |a: &AttentionWeights<G>| AttentionWeights {
            q: conv2(&a.q),
            k: conv2(&a.k),
            v: conv2(&a.v),
            o: conv2(&a.o),
        };
        let stack = |s: &StackWeights<G>| StackWeights {
            blocks: s
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    norm_self: conv1(&b.norm_self),
                    self_attn: attn(&b.self_attn),
                    norm_cross: b.norm_cross.as_ref().map(conv1),
                    cross_attn: b.cross_attn.as_ref().map(attn),
                    norm_ff: conv1(&b.norm_ff),
                    ff_in: conv2(&b.ff_in),
                    ff_out: conv2(&b.ff_out),
                })
                .collect(),
            rel_bias: conv2(&s.rel_bias),
            cross_bias: s.cross_bias.as_ref().map(conv2),
            final_norm: conv1(&s.final_norm),
        };
        ModelWeights {
            config: other.config.clone(),
            token_embedding: conv2(&other.token_embedding),
            adaptors: other
                .adaptors
                .iter()
                .map(|(k, a)| {
                    (
                        k.clone(),
                        AdaptorWeights {
                            weight: conv2(&a.weight),
                            bias: conv1(&a.bias),
                        },
                    )
                })
                .collect(),
            encoder: other.encoder.as_ref().map(stack),
            decoder: stack(&other.decoder),
            output: conv2(&other.output),
        }
    }
}

fn attn_names(prefix: &str) -> [String; 4] {
    ["q", "k", "v", "o"].map(|p| format!("{prefix}.{p}"))
}

fn stack_views<'a, F: Scalar>(name: &str, s: &'a StackWeights<F>, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
    out.push((format!("{name}.rel_bias"), s.rel_bias.view().into_dyn()));
    if let Some(cb) = &s.cross_bias {
        out.push((format!("{name}.cross_bias"), cb.view().into_dyn()));
    }
    for (i, b) in s.blocks.iter().enumerate() {
        let p = format!("{name}.block{i}");
        out.push((format!("{p}.norm_self"), b.norm_self.view().into_dyn()));
        let sa = &b.self_attn;
        for (n, t) in attn_names(&format!("{p}.self_attn")).into_iter().zip([&sa.q, &sa.k, &sa.v, &sa.o]) {
            out.push((n, t.view().into_dyn()));
        }
        if let (Some(nc), Some(ca)) = (&b.norm_cross, &b.cross_attn) {
            out.push((format!("{p}.norm_cross"), nc.view().into_dyn()));
            for (n, t) in attn_names(&format!("{p}.cross_attn")).into_iter().zip([&ca.q, &ca.k, &ca.v, &ca.o]) {
                out.push((n, t.view().into_dyn()));
            }
        }
        out.push((format!("{p}.norm_ff"), b.norm_ff.view().into_dyn()));
        out.push((format!("{p}.ff_in"), b.ff_in.view().into_dyn()));
        out.push((format!("{p}.ff_out"), b.ff_out.view().into_dyn()));
    }
    out.push((format!("{name}.final_norm"), s.final_norm.view().into_dyn()));
}

fn stack_views_mut<F: Scalar>(name: &str, s: &mut StackWeights<F>, f: &mut impl FnMut(&str, ArrayViewMutD<'_, F>)) {
    f(&format!("{name}.rel_bias"), s.rel_bias.view_mut().into_dyn());
    if let Some(cb) = s.cross_bias.as_mut() {
        f(&format!("{name}.cross_bias"), cb.view_mut().into_dyn());
    }
    for (i, b) in s.blocks.iter_mut().enumerate() {
        let p = format!("{name}.block{i}");
        f(&format!("{p}.norm_self"), b.norm_self.view_mut().into_dyn());
        let sa = &mut b.self_attn;
        for (n, t) in attn_names(&format!("{p}.self_attn")).iter().zip([&mut sa.q, &mut sa.k, &mut sa.v, &mut sa.o]) {
            f(n, t.view_mut().into_dyn());
        }
        if let (Some(nc), Some(ca)) = (b.norm_cross.as_mut(), b.cross_attn.as_mut()) {
            f(&format!("{p}.norm_cross"), nc.view_mut().into_dyn());
            for (n, t) in attn_names(&format!("{p}.cross_attn")).iter().zip([&mut ca.q, &mut ca.k, &mut ca.v, &mut ca.o]) {
                f(n, t.view_mut().into_dyn());
            }
        }
        f(&format!("{p}.norm_ff"), b.norm_ff.view_mut().into_dyn());
        f(&format!("{p}.ff_in"), b.ff_in.view_mut().into_dyn());
        f(&format!("{p}.ff_out"), b.ff_out.view_mut().into_dyn());
    }
    f(&format!("{name}.final_norm"), s.final_norm.view_mut().into_dyn());
}
