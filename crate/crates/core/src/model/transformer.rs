use super::config::{
    embedding_init_std, Architecture, InitScheme, ModelConfig, Positional, StackConfig,
};
use super::ops::{
    cross_entropy, dropout, dropout_backward, mask_rows, sinusoidal_embedding, Activation,
    AttentionCache, KeyMask, LayerNorm, LayerNormCache, Linear, LinearCache, MultiHeadAttention,
};
use super::params::{Init, ParamId, ParamStore};
use super::ModelError;
use crate::dataset::Batch;
use crate::generators::RngStream;
use crate::scalar::Scalar;

type Rng<'a, 'b> = &'a mut Option<&'b mut RngStream>;

fn embedding_bound(dim: usize) -> f64 {
    embedding_init_std(dim) * 3f64.sqrt()
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut RngStream,
    init: InitScheme,
}

impl<T: Scalar> Builder<'_, T> {
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let (wb, bias) = match self.init {
            InitScheme::KaimingUniform => {
                let b = 1.0 / (d_in as f64).sqrt();
                (b, Init::Uniform(b))
            }
            InitScheme::Xavier => ((6.0 / (d_in + d_out) as f64).sqrt(), Init::Const(0.0)),
        };
        let w = self.store.add(
            format!("{name}.weight"),
            &[d_in, d_out],
            Init::Uniform(wb),
            self.rng,
        );
        let b = self
            .store
            .add(format!("{name}.bias"), &[d_out], bias, self.rng);
        Linear {
            w,
            b: Some(b),
            d_in,
            d_out,
            transposed: false,
        }
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        let gamma = self
            .store
            .add(format!("{name}.weight"), &[dim], Init::Const(1.0), self.rng);
        let beta = self
            .store
            .add(format!("{name}.bias"), &[dim], Init::Const(0.0), self.rng);
        LayerNorm { gamma, beta, dim }
    }

    fn attention(&mut self, name: &str, dim: usize, n_heads: usize) -> MultiHeadAttention {
        MultiHeadAttention {
            q: self.linear(&format!("{name}.q_lin"), dim, dim),
            k: self.linear(&format!("{name}.k_lin"), dim, dim),
            v: self.linear(&format!("{name}.v_lin"), dim, dim),
            o: self.linear(&format!("{name}.out_lin"), dim, dim),
            n_heads,
            dim,
        }
    }
}

struct Block {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross: Option<(MultiHeadAttention, LayerNorm)>,
    ffn: Vec<Linear>,
    ln2: LayerNorm,
}

struct BlockCache<T> {
    attn: AttentionCache<T>,
    attn_drop: Option<Vec<T>>,
    ln1: LayerNormCache<T>,
    cross: Option<(AttentionCache<T>, Option<Vec<T>>, LayerNormCache<T>)>,
    ffn: Vec<LinearCache<T>>,
    pre_act: Vec<Vec<T>>,
    ffn_drop: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
}

/// Source side for cross-attention: activations, width and true lengths.
#[derive(Clone, Copy)]
struct Context<'a, T> {
    x: &'a [T],
    width: usize,
    lengths: &'a [usize],
}

struct Stack {
    dim: usize,
    tok: ParamId,
    pos: Option<ParamId>,
    sinusoid: Option<Vec<f64>>,
    ln_emb: LayerNorm,
    blocks: Vec<Block>,
    schedule: Vec<usize>,
    causal: bool,
}

struct StackCache<T> {
    ids: Vec<u32>,
    width: usize,
    lengths: Vec<usize>,
    batch: usize,
    ln_emb: LayerNormCache<T>,
    emb_drop: Option<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
}

struct Rates {
    dropout: f64,
    attention: f64,
    activation: Activation,
    vocab: usize,
    max_positions: usize,
}

impl Stack {
    fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cfg: &StackConfig,
        vocab: usize,
        max_positions: usize,
        is_decoder: bool,
    ) -> Self {
        let dim = cfg.emb_dim;
        let tok = b.store.add(
            format!("{name}.embeddings.weight"),
            &[vocab, dim],
            Init::Uniform(embedding_bound(dim)),
            b.rng,
        );
        let pos = match cfg.positional {
            Positional::Learned => Some(b.store.add(
                format!("{name}.position_embeddings.weight"),
                &[max_positions, dim],
                Init::Uniform(embedding_bound(dim)),
                b.rng,
            )),
            _ => None,
        };
        let sinusoid = (cfg.positional == Positional::Sinusoidal).then(|| {
            (0..max_positions)
                .flat_map(|p| sinusoidal_embedding(p, dim))
                .collect()
        });
        let ln_emb = b.layer_norm(&format!("{name}.layer_norm_emb"), dim);
        let hidden = cfg.hidden_dim();
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                let attn = b.attention(&format!("{p}.attention"), dim, cfg.n_heads);
                let ln1 = b.layer_norm(&format!("{p}.layer_norm1"), dim);
                let cross = is_decoder.then(|| {
                    (
                        b.attention(&format!("{p}.encoder_attn"), dim, cfg.n_heads),
                        b.layer_norm(&format!("{p}.layer_norm15"), dim),
                    )
                });
                let mut ffn = vec![b.linear(&format!("{p}.ffn.lin1"), dim, hidden)];
                for j in 1..cfg.n_hidden_layers {
                    ffn.push(b.linear(&format!("{p}.ffn.midlin.{j}"), hidden, hidden));
                }
                ffn.push(b.linear(&format!("{p}.ffn.lin2"), hidden, dim));
                let ln2 = b.layer_norm(&format!("{p}.layer_norm2"), dim);
                Block {
                    attn,
                    ln1,
                    cross,
                    ffn,
                    ln2,
                }
            })
            .collect();
        Stack {
            dim,
            tok,
            pos,
            sinusoid,
            ln_emb,
            blocks,
            schedule: cfg.schedule(),
            causal: is_decoder,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Scalar>(
        &self,
        vals: &[Vec<T>],
        ids: &[u32],
        batch: usize,
        width: usize,
        lengths: &[usize],
        ctx: Option<Context<'_, T>>,
        r: &Rates,
        rng: Rng<'_, '_>,
    ) -> Result<(Vec<T>, StackCache<T>), ModelError> {
        let d = self.dim;
        if width > r.max_positions {
            return Err(ModelError::PositionOverflow {
                position: width - 1,
                max_positions: r.max_positions,
            });
        }
        let tok = &vals[self.tok.0];
        let mut x = vec![T::zero(); batch * width * d];
        for (row, &id) in ids.iter().enumerate() {
            if id as usize >= r.vocab {
                return Err(ModelError::TokenOutOfRange(id));
            }
            let t = row % width;
            let out = &mut x[row * d..(row + 1) * d];
            out.copy_from_slice(&tok[id as usize * d..(id as usize + 1) * d]);
            if let Some(pos) = self.pos {
                for (o, &p) in out.iter_mut().zip(&vals[pos.0][t * d..(t + 1) * d]) {
                    *o += p;
                }
            } else if let Some(table) = &self.sinusoid {
                for (o, &p) in out.iter_mut().zip(&table[t * d..(t + 1) * d]) {
                    *o += T::lit(p);
                }
            }
        }
        let (mut x, ln_emb) = self.ln_emb.forward(vals, &x);
        let emb_drop = dropout(&mut x, r.dropout, rng.as_deref_mut());
        mask_rows(&mut x, lengths, width, d);

        let mask = if self.causal {
            KeyMask::Causal
        } else {
            KeyMask::Padding(lengths)
        };
        let rows = batch * width;
        let mut caches = Vec::with_capacity(self.schedule.len());
        for &li in &self.schedule {
            let blk = &self.blocks[li];
            let (mut a, attn) = blk.attn.forward(
                vals,
                &x,
                &x,
                batch,
                width,
                width,
                mask,
                r.attention,
                rng.as_deref_mut(),
            );
            let attn_drop = dropout(&mut a, r.dropout, rng.as_deref_mut());
            add_into(&mut a, &x);
            let (mut x1, ln1) = blk.ln1.forward(vals, &a);
            let cross = match (&blk.cross, ctx) {
                (Some((ca, cln)), Some(c)) => {
                    let (mut h, cc) = ca.forward(
                        vals,
                        &x1,
                        c.x,
                        batch,
                        width,
                        c.width,
                        KeyMask::Padding(c.lengths),
                        r.attention,
                        rng.as_deref_mut(),
                    );
                    let cd = dropout(&mut h, r.dropout, rng.as_deref_mut());
                    add_into(&mut h, &x1);
                    let (y, lc) = cln.forward(vals, &h);
                    x1 = y;
                    Some((cc, cd, lc))
                }
                _ => None,
            };
            let n = blk.ffn.len();
            let mut ffn = Vec::with_capacity(n);
            let mut pre_act = Vec::with_capacity(n - 1);
            let mut cur = x1.clone();
            for (i, lin) in blk.ffn.iter().enumerate() {
                let (z, lc) = lin.forward(vals, &cur, rows);
                ffn.push(lc);
                if i + 1 < n {
                    cur = r.activation.forward(&z);
                    pre_act.push(z);
                } else {
                    cur = z;
                }
            }
            let ffn_drop = dropout(&mut cur, r.dropout, rng.as_deref_mut());
            add_into(&mut cur, &x1);
            let (mut y, ln2) = blk.ln2.forward(vals, &cur);
            mask_rows(&mut y, lengths, width, d);
            x = y;
            caches.push(BlockCache {
                attn,
                attn_drop,
                ln1,
                cross,
                ffn,
                pre_act,
                ffn_drop,
                ln2,
            });
        }
        let cache = StackCache {
            ids: ids.to_vec(),
            width,
            lengths: lengths.to_vec(),
            batch,
            ln_emb,
            emb_drop,
            blocks: caches,
        };
        Ok((x, cache))
    }

    /// Backpropagates `dy` through the stack. Returns the gradient with
    /// respect to the cross-attention context, if any.
    fn backward<T: Scalar>(
        &self,
        vals: &[Vec<T>],
        grads: &mut [Vec<T>],
        cache: &StackCache<T>,
        mut dy: Vec<T>,
        activation: Activation,
        ctx_len: usize,
    ) -> Option<Vec<T>> {
        let d = self.dim;
        let (width, lengths) = (cache.width, &cache.lengths);
        let mut dctx: Option<Vec<T>> = (ctx_len > 0).then(|| vec![T::zero(); ctx_len]);
        for (&li, bc) in self.schedule.iter().zip(&cache.blocks).rev() {
            let blk = &self.blocks[li];
            mask_rows(&mut dy, lengths, width, d);
            let dh = blk.ln2.backward(vals, grads, &bc.ln2, &dy);
            let mut df = dh.clone();
            dropout_backward(&mut df, &bc.ffn_drop);
            let n = blk.ffn.len();
            for i in (0..n).rev() {
                if i + 1 < n {
                    df = activation.backward(&bc.pre_act[i], &df);
                }
                df = blk.ffn[i].backward(vals, grads, &bc.ffn[i], &df, width);
            }
            let mut dx1 = dh;
            add_into(&mut dx1, &df);
            if let (Some((ca, cln)), Some((cc, cd, lc))) = (&blk.cross, &bc.cross) {
                let dhc = cln.backward(vals, grads, lc, &dx1);
                let mut dc = dhc.clone();
                dropout_backward(&mut dc, cd);
                let (dq, dkv) = ca.backward(vals, grads, cc, &dc);
                dx1 = dhc;
                add_into(&mut dx1, &dq);
                if let Some(acc) = dctx.as_mut() {
                    add_into(acc, &dkv);
                }
            }
            let dh1 = blk.ln1.backward(vals, grads, &bc.ln1, &dx1);
            let mut da = dh1.clone();
            dropout_backward(&mut da, &bc.attn_drop);
            let (dq, dkv) = blk.attn.backward(vals, grads, &bc.attn, &da);
            dy = dh1;
            add_into(&mut dy, &dq);
            add_into(&mut dy, &dkv);
        }
        mask_rows(&mut dy, lengths, width, d);
        dropout_backward(&mut dy, &cache.emb_drop);
        let de = self.ln_emb.backward(vals, grads, &cache.ln_emb, &dy);
        for (row, &id) in cache.ids.iter().enumerate() {
            let g = &de[row * d..(row + 1) * d];
            let tg = &mut grads[self.tok.0][id as usize * d..(id as usize + 1) * d];
            add_into(tg, g);
            if let Some(pos) = self.pos {
                let t = row % width;
                add_into(&mut grads[pos.0][t * d..(t + 1) * d], g);
            }
        }
        debug_assert_eq!(cache.ids.len(), cache.batch * width);
        dctx
    }
}

impl Stack {
    fn embed_at<T: Scalar>(
        &self,
        vals: &[Vec<T>],
        ids: &[u32],
        t: usize,
        r: &Rates,
    ) -> Result<Vec<T>, ModelError> {
        let d = self.dim;
        let tok = &vals[self.tok.0];
        let mut x = vec![T::zero(); ids.len() * d];
        for (row, &id) in ids.iter().enumerate() {
            if id as usize >= r.vocab {
                return Err(ModelError::TokenOutOfRange(id));
            }
            let out = &mut x[row * d..(row + 1) * d];
            out.copy_from_slice(&tok[id as usize * d..(id as usize + 1) * d]);
            if let Some(pos) = self.pos {
                for (o, &p) in out.iter_mut().zip(&vals[pos.0][t * d..(t + 1) * d]) {
                    *o += p;
                }
            } else if let Some(table) = &self.sinusoid {
                for (o, &p) in out.iter_mut().zip(&table[t * d..(t + 1) * d]) {
                    *o += T::lit(p);
                }
            }
        }
        Ok(self.ln_emb.forward(vals, &x).0)
    }

    /// Feeds one token per row at position `state.len`, returning the top
    /// activations `[n, dim]`.
    fn step<T: Scalar>(
        &self,
        vals: &[Vec<T>],
        st: &mut DecodeState<T>,
        ids: &[u32],
        r: &Rates,
    ) -> Result<Vec<T>, ModelError> {
        let d = self.dim;
        let n = ids.len();
        let t = st.len;
        if t >= r.max_positions {
            return Err(ModelError::PositionOverflow {
                position: t,
                max_positions: r.max_positions,
            });
        }
        let mut x = self.embed_at(vals, ids, t, r)?;
        for (s, &li) in self.schedule.iter().enumerate() {
            let blk = &self.blocks[li];
            let k = blk.attn.k.apply(vals, &x, n);
            let v = blk.attn.v.apply(vals, &x, n);
            for b in 0..n {
                st.keys[b][s].extend_from_slice(&k[b * d..(b + 1) * d]);
                st.values[b][s].extend_from_slice(&v[b * d..(b + 1) * d]);
            }
            let keys: Vec<&[T]> = st.keys.iter().map(|row| row[s].as_slice()).collect();
            let values: Vec<&[T]> = st.values.iter().map(|row| row[s].as_slice()).collect();
            let mut a = blk.attn.attend(vals, &x, &keys, &values, &vec![t + 1; n]);
            add_into(&mut a, &x);
            let mut x1 = blk.ln1.forward(vals, &a).0;
            if let Some((ca, cln)) = &blk.cross {
                let keys: Vec<&[T]> = st.cross_keys.iter().map(|row| row[s].as_slice()).collect();
                let values: Vec<&[T]> = st
                    .cross_values
                    .iter()
                    .map(|row| row[s].as_slice())
                    .collect();
                let mut h = ca.attend(vals, &x1, &keys, &values, &st.src_visible);
                add_into(&mut h, &x1);
                x1 = cln.forward(vals, &h).0;
            }
            let last = blk.ffn.len() - 1;
            let mut cur = x1.clone();
            for (i, lin) in blk.ffn.iter().enumerate() {
                let z = lin.apply(vals, &cur, n);
                cur = if i < last {
                    r.activation.forward(&z)
                } else {
                    z
                };
            }
            add_into(&mut cur, &x1);
            x = blk.ln2.forward(vals, &cur).0;
        }
        Ok(x)
    }
}

/// Keys and values cached for incremental decoding, per row and per
/// scheduled layer application.
#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    len: usize,
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
    cross_keys: Vec<Vec<Vec<T>>>,
    cross_values: Vec<Vec<Vec<T>>>,
    src_visible: Vec<usize>,
}

impl<T: Clone> DecodeState<T> {
    /// Number of tokens fed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rows(&self) -> usize {
        self.keys.len()
    }

    /// Rows `rows` (repeats allowed) as a new state.
    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<Vec<T>>>| rows.iter().map(|&r| v[r].clone()).collect();
        DecodeState {
            len: self.len,
            keys: pick(&self.keys),
            values: pick(&self.values),
            cross_keys: pick(&self.cross_keys),
            cross_values: pick(&self.cross_values),
            src_visible: rows.iter().map(|&r| self.src_visible[r]).collect(),
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Summed token loss and the number of tokens it covers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss_sum: f64,
    pub tokens: usize,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.loss_sum / self.tokens as f64
        }
    }

    pub fn add(&mut self, other: LossStats) {
        self.loss_sum += other.loss_sum;
        self.tokens += other.tokens;
    }
}

/// Encoder output kept for decoding.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub states: Vec<T>,
    pub batch: usize,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub dim: usize,
}

impl<T: Scalar> Encoded<T> {
    /// Rows `rows` of the batch as a new, smaller context.
    pub fn select(&self, rows: &[usize]) -> Encoded<T> {
        let stride = self.width * self.dim;
        let mut states = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            states.extend_from_slice(&self.states[r * stride..(r + 1) * stride]);
        }
        Encoded {
            states,
            batch: rows.len(),
            width: self.width,
            lengths: rows.iter().map(|&r| self.lengths[r]).collect(),
            dim: self.dim,
        }
    }
}

/// Teacher-forced targets derived from a batch.
struct Targets {
    dec_ids: Vec<u32>,
    dec_width: usize,
    dec_lengths: Vec<usize>,
    targets: Vec<u32>,
    valid: Vec<bool>,
}

/// Sequence-to-sequence transformer (or a single encoder stack with a
/// vocabulary head) over a flat [`ParamStore`].
pub struct Transformer<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    encoder: Stack,
    decoder: Option<Stack>,
    head: Linear,
    /// Partial gradient of a shared output projection, kept apart from the
    /// embedding's own so that summation order does not depend on how an
    /// accumulation window is split into batches.
    head_grad: Vec<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let v = config.vocab_size;
        let mut b = Builder {
            store: &mut store,
            rng,
            init: config.init,
        };
        let encoder = Stack::build(
            &mut b,
            "encoder",
            &config.encoder,
            v,
            config.max_positions,
            false,
        );
        let decoder = (config.architecture == Architecture::EncoderDecoder).then(|| {
            Stack::build(
                &mut b,
                "decoder",
                &config.decoder,
                v,
                config.max_positions,
                true,
            )
        });
        let out_dim = decoder.as_ref().map_or(encoder.dim, |s| s.dim);
        let head = match &decoder {
            Some(dec) if config.share_inout_emb => {
                let bias = b.store.add(
                    "decoder.pred_layer.proj.bias",
                    &[v],
                    Init::Const(0.0),
                    b.rng,
                );
                Linear {
                    w: dec.tok,
                    b: Some(bias),
                    d_in: out_dim,
                    d_out: v,
                    transposed: true,
                }
            }
            _ => {
                let name = if decoder.is_some() {
                    "decoder.pred_layer.proj"
                } else {
                    "encoder.proj"
                };
                let w = b.store.add(
                    format!("{name}.weight"),
                    &[out_dim, v],
                    Init::Uniform(embedding_bound(out_dim)),
                    b.rng,
                );
                let bias = b
                    .store
                    .add(format!("{name}.bias"), &[v], Init::Const(0.0), b.rng);
                Linear {
                    w,
                    b: Some(bias),
                    d_in: out_dim,
                    d_out: v,
                    transposed: false,
                }
            }
        };
        let head_grad = if head.transposed {
            vec![T::zero(); v * out_dim]
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            params: store,
            encoder,
            decoder,
            head,
            head_grad,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Storage backing the output projection weight.
    pub fn output_weight(&self) -> ParamId {
        self.head.w
    }

    /// Storage of the decoder token embedding (encoder's for encoder-only).
    pub fn output_embedding(&self) -> ParamId {
        self.decoder.as_ref().unwrap_or(&self.encoder).tok
    }

    fn rates(&self) -> Rates {
        Rates {
            dropout: self.config.dropout,
            attention: self.config.attention_dropout,
            activation: self.config.activation,
            vocab: self.config.vocab_size,
            max_positions: self.config.max_positions,
        }
    }

    fn no_dropout(&self) -> Rates {
        Rates {
            dropout: 0.0,
            attention: 0.0,
            ..self.rates()
        }
    }

    fn targets(&self, batch: &Batch) -> Result<Targets, ModelError> {
        let b = batch.size;
        match self.config.architecture {
            Architecture::EncoderDecoder => {
                let w = batch.output_width - 1;
                let mut dec_ids = Vec::with_capacity(b * w);
                let mut targets = Vec::with_capacity(b * w);
                let mut valid = Vec::with_capacity(b * w);
                for r in 0..b {
                    let row = batch.output_row(r);
                    dec_ids.extend_from_slice(&row[..w]);
                    targets.extend_from_slice(&row[1..]);
                    valid.extend((0..w).map(|t| t + 1 < batch.output_lengths[r]));
                }
                let dec_lengths = batch.output_lengths.iter().map(|l| l - 1).collect();
                Ok(Targets {
                    dec_ids,
                    dec_width: w,
                    dec_lengths,
                    targets,
                    valid,
                })
            }
            Architecture::EncoderOnly => {
                let w = batch.input_width;
                let mut targets = vec![batch.pad_id; b * w];
                let mut valid = vec![false; b * w];
                for r in 0..b {
                    let out = batch.output_row(r);
                    let n = batch.output_lengths[r] - 1;
                    if n > batch.input_lengths[r] {
                        return Err(ModelError::OutputTooLong {
                            output: n,
                            input: batch.input_lengths[r],
                        });
                    }
                    for t in 0..n {
                        targets[r * w + t] = out[t + 1];
                        valid[r * w + t] = true;
                    }
                }
                Ok(Targets {
                    dec_ids: Vec::new(),
                    dec_width: w,
                    dec_lengths: Vec::new(),
                    targets,
                    valid,
                })
            }
        }
    }

    /// Teacher-forced forward. With `grad_scale`, accumulates
    /// `grad_scale · ∂(summed loss)` into the gradient buffers.
    fn run(
        &mut self,
        batch: &Batch,
        grad_scale: Option<T>,
        rates: Rates,
        rng: Rng<'_, '_>,
    ) -> Result<LossStats, ModelError> {
        let tg = self.targets(batch)?;
        let v = self.config.vocab_size;
        let vals = &self.params.values;
        let (enc, ecache) = self.encoder.forward(
            vals,
            &batch.input_ids,
            batch.size,
            batch.input_width,
            &batch.input_lengths,
            None,
            &rates,
            rng,
        )?;
        let (top, dcache) = match &self.decoder {
            Some(dec) => {
                let ctx = Context {
                    x: &enc,
                    width: batch.input_width,
                    lengths: &batch.input_lengths,
                };
                let (y, c) = dec.forward(
                    vals,
                    &tg.dec_ids,
                    batch.size,
                    tg.dec_width,
                    &tg.dec_lengths,
                    Some(ctx),
                    &rates,
                    rng,
                )?;
                (y, Some(c))
            }
            None => (enc.clone(), None),
        };
        let rows = batch.size * tg.dec_width;
        let (logits, hcache) = self.head.forward(vals, &top, rows);
        let scale = grad_scale.unwrap_or_else(T::one);
        let (loss_sum, tokens, dlogits) =
            cross_entropy(&logits, &tg.targets, &tg.valid, v, Some(scale));
        let stats = LossStats { loss_sum, tokens };
        if grad_scale.is_none() {
            return Ok(stats);
        }
        let grads = &mut self.params.grads;
        let shared = self.head.transposed;
        if shared {
            std::mem::swap(&mut grads[self.head.w.0], &mut self.head_grad);
        }
        let dtop = self
            .head
            .backward(vals, grads, &hcache, &dlogits, tg.dec_width);
        if shared {
            std::mem::swap(&mut grads[self.head.w.0], &mut self.head_grad);
        }
        let denc = match (&self.decoder, &dcache) {
            (Some(dec), Some(dc)) => dec
                .backward(vals, grads, dc, dtop, rates.activation, enc.len())
                .expect("decoder has a context"),
            _ => dtop,
        };
        self.encoder
            .backward(vals, grads, &ecache, denc, rates.activation, 0);
        Ok(stats)
    }

    /// Forward and backward on one batch, accumulating
    /// `scale · ∂(summed token loss)/∂θ` into the gradient buffers. With
    /// `scale = 1/N` over all target tokens of an accumulation window the
    /// buffers hold the gradient of the window's mean loss once
    /// [`Transformer::finish_gradients`] has run.
    pub fn accumulate_gradients(
        &mut self,
        batch: &Batch,
        scale: T,
        dropout_rng: Option<&mut RngStream>,
    ) -> Result<LossStats, ModelError> {
        let rates = if dropout_rng.is_some() {
            self.rates()
        } else {
            self.no_dropout()
        };
        let mut rng = dropout_rng;
        self.run(batch, Some(scale), rates, &mut rng)
    }

    /// Folds pending partial gradients into the parameter gradients. Call
    /// once per accumulation window, before reading or applying them.
    pub fn finish_gradients(&mut self) {
        if self.head_grad.is_empty() {
            return;
        }
        let g = &mut self.params.grads[self.head.w.0];
        for (a, b) in g.iter_mut().zip(self.head_grad.iter_mut()) {
            *a += *b;
            *b = T::zero();
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
        self.head_grad.iter_mut().for_each(|x| *x = T::zero());
    }

    /// Teacher-forced loss without dropout or gradients.
    pub fn loss(&mut self, batch: &Batch) -> Result<LossStats, ModelError> {
        let rates = self.no_dropout();
        self.run(batch, None, rates, &mut None)
    }

    /// Teacher-forced logits, `[batch, width, vocab]`, and the width.
    pub fn logits(&self, batch: &Batch) -> Result<(Vec<T>, usize), ModelError> {
        let tg = self.targets(batch)?;
        let rates = self.no_dropout();
        let vals = &self.params.values;
        let mut none = None;
        let (enc, _) = self.encoder.forward(
            vals,
            &batch.input_ids,
            batch.size,
            batch.input_width,
            &batch.input_lengths,
            None,
            &rates,
            &mut none,
        )?;
        let top = match &self.decoder {
            Some(dec) => {
                let ctx = Context {
                    x: &enc,
                    width: batch.input_width,
                    lengths: &batch.input_lengths,
                };
                dec.forward(
                    vals,
                    &tg.dec_ids,
                    batch.size,
                    tg.dec_width,
                    &tg.dec_lengths,
                    Some(ctx),
                    &rates,
                    &mut none,
                )?
                .0
            }
            None => enc,
        };
        Ok((
            self.head.apply(vals, &top, batch.size * tg.dec_width),
            tg.dec_width,
        ))
    }

    /// Runs the encoder on padded ids.
    pub fn encode(
        &self,
        ids: &[u32],
        batch: usize,
        width: usize,
        lengths: &[usize],
    ) -> Result<Encoded<T>, ModelError> {
        let rates = self.no_dropout();
        let (states, _) = self.encoder.forward(
            &self.params.values,
            ids,
            batch,
            width,
            lengths,
            None,
            &rates,
            &mut None,
        )?;
        Ok(Encoded {
            states,
            batch,
            width,
            lengths: lengths.to_vec(),
            dim: self.encoder.dim,
        })
    }

    /// Vocabulary logits of the encoder-only head at every input position.
    pub fn encoder_logits(&self, enc: &Encoded<T>) -> Vec<T> {
        self.head
            .apply(&self.params.values, &enc.states, enc.batch * enc.width)
    }

    /// Starts incremental decoding against the encoder output `ctx`.
    pub fn start_decoding(&self, ctx: &Encoded<T>) -> Result<DecodeState<T>, ModelError> {
        let dec = self.decoder()?;
        let vals = &self.params.values;
        let n = ctx.batch;
        let stride = ctx.width * ctx.dim;
        let mut cross_keys = vec![Vec::with_capacity(dec.schedule.len()); n];
        let mut cross_values = vec![Vec::with_capacity(dec.schedule.len()); n];
        for &li in &dec.schedule {
            let (ca, _) = dec.blocks[li]
                .cross
                .as_ref()
                .expect("decoder layers attend to the encoder");
            let k = ca.k.apply(vals, &ctx.states, n * ctx.width);
            let v = ca.v.apply(vals, &ctx.states, n * ctx.width);
            for b in 0..n {
                cross_keys[b].push(k[b * stride..(b + 1) * stride].to_vec());
                cross_values[b].push(v[b * stride..(b + 1) * stride].to_vec());
            }
        }
        let layers = dec.schedule.len();
        Ok(DecodeState {
            len: 0,
            keys: vec![vec![Vec::new(); layers]; n],
            values: vec![vec![Vec::new(); layers]; n],
            cross_keys,
            cross_values,
            src_visible: ctx.lengths.iter().map(|&l| l.min(ctx.width)).collect(),
        })
    }

    /// Feeds `tokens` (one per row) and returns next-token logits `[n, vocab]`.
    /// Equivalent to [`Transformer::next_logits`] on the full prefixes.
    pub fn decode_step(
        &self,
        state: &mut DecodeState<T>,
        tokens: &[u32],
    ) -> Result<Vec<T>, ModelError> {
        debug_assert_eq!(tokens.len(), state.rows());
        let dec = self.decoder()?;
        let rates = self.no_dropout();
        let y = dec.step(&self.params.values, state, tokens, &rates)?;
        state.len += 1;
        Ok(self.head.apply(&self.params.values, &y, tokens.len()))
    }

    fn decoder(&self) -> Result<&Stack, ModelError> {
        self.decoder.as_ref().ok_or_else(|| {
            ModelError::Unsupported("autoregressive decoding needs a decoder".into())
        })
    }

    /// Next-token logits after the prefixes `prefixes` (`[n, len]`, all of
    /// equal length), where prefix `i` reads encoder row `i` of `ctx`.
    pub fn next_logits(
        &self,
        ctx: &Encoded<T>,
        prefixes: &[u32],
        len: usize,
    ) -> Result<Vec<T>, ModelError> {
        let dec = self.decoder()?;
        let n = ctx.batch;
        debug_assert_eq!(prefixes.len(), n * len);
        let rates = self.no_dropout();
        let vals = &self.params.values;
        let lengths = vec![len; n];
        let c = Context {
            x: &ctx.states,
            width: ctx.width,
            lengths: &ctx.lengths,
        };
        let (y, _) = dec.forward(vals, prefixes, n, len, &lengths, Some(c), &rates, &mut None)?;
        let d = dec.dim;
        let mut last = Vec::with_capacity(n * d);
        for i in 0..n {
            last.extend_from_slice(&y[((i + 1) * len - 1) * d..(i + 1) * len * d]);
        }
        Ok(self.head.apply(vals, &last, n))
    }
}
