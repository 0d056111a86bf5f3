use rand::Rng;

use super::ops::{self, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, LayerNormCache, Scalar};
use super::{BlockParams, Gradients, Model};
use crate::rng;
use crate::tokenizer::TokenId;
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    attn_norm: LayerNormCache<T>,
    normed: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads × n × n`, zero on masked keys.
    probs: Vec<T>,
    context: Vec<T>,
    ffn_norm: LayerNormCache<T>,
    ffn_normed: Vec<T>,
    ffn_pre: Vec<T>,
    ffn_act: Vec<T>,
}

/// Everything the backward pass needs from one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    ids: Vec<TokenId>,
    mask: Vec<u8>,
    embedded: Vec<T>,
    blocks: Vec<BlockTrace<T>>,
    final_norm: LayerNormCache<T>,
    /// Final hidden vectors, `n × hidden`.
    pub output: Vec<T>,
}

impl<T: Scalar> EncoderTrace<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Attention probabilities of one layer and head, `n × n` row-major.
    pub fn attention(&self, layer: usize, head: usize) -> &[T] {
        let n = self.len();
        &self.blocks[layer].probs[head * n * n..(head + 1) * n * n]
    }
}

#[derive(Debug, Clone)]
pub struct MlmTrace<T> {
    positions: Vec<usize>,
    gathered: Vec<T>,
    pre: Vec<T>,
    norm: LayerNormCache<T>,
    normed: Vec<T>,
    /// `positions × vocab`
    pub logits: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct DiscTrace<T> {
    pre: Vec<T>,
    act: Vec<T>,
    /// One replaced-vs-original logit per position.
    pub logits: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ClsTrace<T> {
    dropped: Vec<T>,
    keep_scale: Vec<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Scalar> Model<T> {
    fn check_input(&self, ids: &[TokenId], mask: &[u8]) -> Result<()> {
        if ids.len() != mask.len() {
            return Err(Error::Invalid(format!(
                "ids ({}) and mask ({}) differ in length",
                ids.len(),
                mask.len()
            )));
        }
        if ids.len() > self.config().max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence of {} exceeds max_seq_len {}",
                ids.len(),
                self.config().max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config().vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config().vocab_size
            )));
        }
        Ok(())
    }

    /// Per-position final hidden vectors, `ids.len() × hidden`.
    pub fn encode_sequence(&self, ids: &[TokenId], mask: &[u8]) -> Result<Vec<T>> {
        Ok(self.forward(ids, mask)?.output)
    }

    pub fn forward(&self, ids: &[TokenId], mask: &[u8]) -> Result<EncoderTrace<T>> {
        self.check_input(ids, mask)?;
        let c = self.config();
        let (n, e, h) = (ids.len(), c.embedding_size, c.hidden_size);
        let layout = self.layout();

        let word = self.p(layout.word_embeddings);
        let pos = self.p(layout.position_embeddings);
        let mut embedded = vec![T::zero(); n * e];
        for (t, (&id, row)) in ids.iter().zip(embedded.chunks_exact_mut(e)).enumerate() {
            let w = &word[id as usize * e..(id as usize + 1) * e];
            let p = &pos[t * e..(t + 1) * e];
            for ((r, &a), &b) in row.iter_mut().zip(w).zip(p) {
                *r = a + b;
            }
        }
        let mut hidden = match layout.projection {
            Some((w, b)) => linear(&embedded, n, e, self.p(w), Some(self.p(b)), h),
            None => embedded.clone(),
        };

        let mut blocks = Vec::with_capacity(layout.blocks.len());
        for bp in &layout.blocks {
            let (out, trace) = self.block_forward(bp, hidden, mask);
            blocks.push(trace);
            hidden = out;
        }
        let (gain, bias) = layout.final_norm;
        let (output, final_norm) = layer_norm(&hidden, h, self.p(gain), self.p(bias));
        Ok(EncoderTrace {
            ids: ids.to_vec(),
            mask: mask.to_vec(),
            embedded,
            blocks,
            final_norm,
            output,
        })
    }

    fn block_forward(&self, bp: &BlockParams, input: Vec<T>, mask: &[u8]) -> (Vec<T>, BlockTrace<T>) {
        let c = self.config();
        let (n, h, f, heads, dh) = (mask.len(), c.hidden_size, c.ff_size, c.num_heads, c.head_dim());
        let (normed, attn_norm) = layer_norm(&input, h, self.p(bp.attn_norm_gain), self.p(bp.attn_norm_bias));
        let q = linear(&normed, n, h, self.p(bp.query_weight), Some(self.p(bp.query_bias)), h);
        let k = linear(&normed, n, h, self.p(bp.key_weight), Some(self.p(bp.key_bias)), h);
        let v = linear(&normed, n, h, self.p(bp.value_weight), Some(self.p(bp.value_bias)), h);

        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * n * n];
        let mut context = vec![T::zero(); n * h];
        let keys: Vec<usize> = (0..n).filter(|&j| mask[j] != 0).collect();
        let mut scores = Vec::with_capacity(keys.len());
        for head in 0..heads {
            let off = head * dh;
            for i in 0..n {
                let qi = &q[i * h + off..i * h + off + dh];
                scores.clear();
                for &j in &keys {
                    let kj = &k[j * h + off..j * h + off + dh];
                    scores.push(qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale);
                }
                if scores.is_empty() {
                    continue;
                }
                ops::softmax_in_place(&mut scores);
                let prow = &mut probs[(head * n + i) * n..(head * n + i + 1) * n];
                let ctx = &mut context[i * h + off..i * h + off + dh];
                for (&j, &p) in keys.iter().zip(&scores) {
                    prow[j] = p;
                    for (c, &vv) in ctx.iter_mut().zip(&v[j * h + off..j * h + off + dh]) {
                        *c += p * vv;
                    }
                }
            }
        }
        let attn_out = linear(&context, n, h, self.p(bp.attn_out_weight), Some(self.p(bp.attn_out_bias)), h);
        let mid: Vec<T> = input.iter().zip(&attn_out).map(|(&a, &b)| a + b).collect();

        let (ffn_normed, ffn_norm) = layer_norm(&mid, h, self.p(bp.ffn_norm_gain), self.p(bp.ffn_norm_bias));
        let ffn_pre = linear(&ffn_normed, n, h, self.p(bp.ffn_in_weight), Some(self.p(bp.ffn_in_bias)), f);
        let ffn_act: Vec<T> = ffn_pre.iter().map(|&x| gelu(x)).collect();
        let ffn_out = linear(&ffn_act, n, f, self.p(bp.ffn_out_weight), Some(self.p(bp.ffn_out_bias)), h);
        let out: Vec<T> = mid.iter().zip(&ffn_out).map(|(&a, &b)| a + b).collect();

        let trace = BlockTrace {
            attn_norm,
            normed,
            q,
            k,
            v,
            probs,
            context,
            ffn_norm,
            ffn_normed,
            ffn_pre,
            ffn_act,
        };
        (out, trace)
    }

    /// Accumulates parameter gradients given `d_output` (`n × hidden`).
    pub fn backward(&self, trace: &EncoderTrace<T>, d_output: &[T], grads: &mut Gradients<T>) {
        let c = self.config();
        let (n, e, h) = (trace.len(), c.embedding_size, c.hidden_size);
        let layout = self.layout();

        let (gain, bias) = layout.final_norm;
        let (dg, db) = grads.pair(gain, bias);
        let mut d_hidden = layer_norm_backward(&trace.final_norm, h, self.p(gain), d_output, dg, db);

        for (bp, bt) in layout.blocks.iter().zip(&trace.blocks).rev() {
            d_hidden = self.block_backward(bp, bt, &trace.mask, d_hidden, grads);
        }

        let d_embedded = match layout.projection {
            Some((w, b)) => {
                let (dw, db) = grads.pair(w, b);
                linear_backward(&trace.embedded, n, e, self.p(w), h, &d_hidden, dw, Some(db))
            }
            None => d_hidden,
        };
        let dword = grads.g(layout.word_embeddings);
        for (&id, row) in trace.ids.iter().zip(d_embedded.chunks_exact(e)) {
            let id = id as usize;
            for (d, &g) in dword[id * e..(id + 1) * e].iter_mut().zip(row) {
                *d += g;
            }
        }
        let dpos = grads.g(layout.position_embeddings);
        for (d, &g) in dpos.iter_mut().zip(&d_embedded) {
            *d += g;
        }
    }

    fn block_backward(
        &self,
        bp: &BlockParams,
        bt: &BlockTrace<T>,
        mask: &[u8],
        d_out: Vec<T>,
        grads: &mut Gradients<T>,
    ) -> Vec<T> {
        let c = self.config();
        let (n, h, f, heads, dh) = (mask.len(), c.hidden_size, c.ff_size, c.num_heads, c.head_dim());

        // Feed-forward sublayer.
        let (dw, db) = grads.pair(bp.ffn_out_weight, bp.ffn_out_bias);
        let d_act = linear_backward(&bt.ffn_act, n, f, self.p(bp.ffn_out_weight), h, &d_out, dw, Some(db));
        let d_pre: Vec<T> = d_act.iter().zip(&bt.ffn_pre).map(|(&g, &x)| g * gelu_grad(x)).collect();
        let (dw, db) = grads.pair(bp.ffn_in_weight, bp.ffn_in_bias);
        let d_ffn_normed = linear_backward(&bt.ffn_normed, n, h, self.p(bp.ffn_in_weight), f, &d_pre, dw, Some(db));
        let (dg, db) = grads.pair(bp.ffn_norm_gain, bp.ffn_norm_bias);
        let d_mid_ln = layer_norm_backward(&bt.ffn_norm, h, self.p(bp.ffn_norm_gain), &d_ffn_normed, dg, db);
        let d_mid: Vec<T> = d_out.iter().zip(&d_mid_ln).map(|(&a, &b)| a + b).collect();

        // Attention sublayer.
        let (dw, db) = grads.pair(bp.attn_out_weight, bp.attn_out_bias);
        let d_context = linear_backward(&bt.context, n, h, self.p(bp.attn_out_weight), h, &d_mid, dw, Some(db));
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); n * h];
        let mut dk = vec![T::zero(); n * h];
        let mut dv = vec![T::zero(); n * h];
        let mut d_probs = vec![T::zero(); n];
        for head in 0..heads {
            let off = head * dh;
            for i in 0..n {
                let prow = &bt.probs[(head * n + i) * n..(head * n + i + 1) * n];
                let dctx = &d_context[i * h + off..i * h + off + dh];
                let mut weighted = T::zero();
                for j in 0..n {
                    if mask[j] == 0 {
                        d_probs[j] = T::zero();
                        continue;
                    }
                    let vj = &bt.v[j * h + off..j * h + off + dh];
                    d_probs[j] = dctx.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                    weighted += d_probs[j] * prow[j];
                    for (d, &g) in dv[j * h + off..j * h + off + dh].iter_mut().zip(dctx) {
                        *d += prow[j] * g;
                    }
                }
                for j in 0..n {
                    if mask[j] == 0 {
                        continue;
                    }
                    let ds = prow[j] * (d_probs[j] - weighted) * scale;
                    for t in 0..dh {
                        dq[i * h + off + t] += ds * bt.k[j * h + off + t];
                        dk[j * h + off + t] += ds * bt.q[i * h + off + t];
                    }
                }
            }
        }
        let mut d_normed = vec![T::zero(); n * h];
        for (d, w, b) in [
            (&dq, bp.query_weight, bp.query_bias),
            (&dk, bp.key_weight, bp.key_bias),
            (&dv, bp.value_weight, bp.value_bias),
        ] {
            let (dw, db) = grads.pair(w, b);
            let part = linear_backward(&bt.normed, n, h, self.p(w), h, d, dw, Some(db));
            for (a, b) in d_normed.iter_mut().zip(part) {
                *a += b;
            }
        }
        let (dg, db) = grads.pair(bp.attn_norm_gain, bp.attn_norm_bias);
        let d_in_ln = layer_norm_backward(&bt.attn_norm, h, self.p(bp.attn_norm_gain), &d_normed, dg, db);
        d_mid.iter().zip(&d_in_ln).map(|(&a, &b)| a + b).collect()
    }

    /// Masked-LM logits at `positions`: transform, GELU, layer norm, then the
    /// transposed word embeddings plus an output bias.
    pub fn mlm_forward(&self, hidden: &[T], positions: &[usize]) -> MlmTrace<T> {
        let c = self.config();
        let (h, e, v) = (c.hidden_size, c.embedding_size, c.vocab_size);
        let layout = self.layout();
        let mut gathered = Vec::with_capacity(positions.len() * h);
        for &p in positions {
            gathered.extend_from_slice(&hidden[p * h..(p + 1) * h]);
        }
        let m = positions.len();
        let (tw, tb) = layout.mlm_transform;
        let pre = linear(&gathered, m, h, self.p(tw), Some(self.p(tb)), e);
        let act: Vec<T> = pre.iter().map(|&x| gelu(x)).collect();
        let (ng, nb) = layout.mlm_norm;
        let (normed, norm) = layer_norm(&act, e, self.p(ng), self.p(nb));
        let word = self.p(layout.word_embeddings);
        let out_bias = self.p(layout.mlm_output_bias);
        let mut logits = vec![T::zero(); m * v];
        for (row, lrow) in normed.chunks_exact(e).zip(logits.chunks_exact_mut(v)) {
            for ((l, wrow), &b) in lrow.iter_mut().zip(word.chunks_exact(e)).zip(out_bias) {
                *l = row.iter().zip(wrow).map(|(&a, &w)| a * w).sum::<T>() + b;
            }
        }
        MlmTrace {
            positions: positions.to_vec(),
            gathered,
            pre,
            norm,
            normed,
            logits,
        }
    }

    /// Returns the gradient with respect to the full `n × hidden` input.
    pub fn mlm_backward(&self, trace: &MlmTrace<T>, n: usize, d_logits: &[T], grads: &mut Gradients<T>) -> Vec<T> {
        let c = self.config();
        let (h, e, v) = (c.hidden_size, c.embedding_size, c.vocab_size);
        let layout = self.layout();
        let m = trace.positions.len();
        let word = self.p(layout.word_embeddings);
        let mut d_normed = vec![T::zero(); m * e];
        {
            let (dword, dbias) = grads.pair(layout.word_embeddings, layout.mlm_output_bias);
            for ((dl, row), dn) in d_logits
                .chunks_exact(v)
                .zip(trace.normed.chunks_exact(e))
                .zip(d_normed.chunks_exact_mut(e))
            {
                for (vi, &g) in dl.iter().enumerate() {
                    dbias[vi] += g;
                    let wrow = &word[vi * e..(vi + 1) * e];
                    let dwrow = &mut dword[vi * e..(vi + 1) * e];
                    for t in 0..e {
                        dn[t] += g * wrow[t];
                        dwrow[t] += g * row[t];
                    }
                }
            }
        }
        let (ng, nb) = layout.mlm_norm;
        let (dg, db) = grads.pair(ng, nb);
        let d_act = layer_norm_backward(&trace.norm, e, self.p(ng), &d_normed, dg, db);
        let d_pre: Vec<T> = d_act.iter().zip(&trace.pre).map(|(&g, &x)| g * gelu_grad(x)).collect();
        let (tw, tb) = layout.mlm_transform;
        let (dw, db) = grads.pair(tw, tb);
        let d_gathered = linear_backward(&trace.gathered, m, h, self.p(tw), e, &d_pre, dw, Some(db));
        let mut d_hidden = vec![T::zero(); n * h];
        for (&p, row) in trace.positions.iter().zip(d_gathered.chunks_exact(h)) {
            for (d, &g) in d_hidden[p * h..(p + 1) * h].iter_mut().zip(row) {
                *d += g;
            }
        }
        d_hidden
    }

    pub fn disc_forward(&self, hidden: &[T]) -> DiscTrace<T> {
        let h = self.config().hidden_size;
        let n = hidden.len() / h;
        let layout = self.layout();
        let (dw, db) = layout.disc_dense;
        let pre = linear(hidden, n, h, self.p(dw), Some(self.p(db)), h);
        let act: Vec<T> = pre.iter().map(|&x| gelu(x)).collect();
        let (ow, ob) = layout.disc_output;
        let logits = linear(&act, n, h, self.p(ow), Some(self.p(ob)), 1);
        DiscTrace { pre, act, logits }
    }

    pub fn disc_backward(&self, hidden: &[T], trace: &DiscTrace<T>, d_logits: &[T], grads: &mut Gradients<T>) -> Vec<T> {
        let h = self.config().hidden_size;
        let n = hidden.len() / h;
        let layout = self.layout();
        let (ow, ob) = layout.disc_output;
        let (dw_out, db_out) = grads.pair(ow, ob);
        let d_act = linear_backward(&trace.act, n, h, self.p(ow), 1, d_logits, dw_out, Some(db_out));
        let d_pre: Vec<T> = d_act.iter().zip(&trace.pre).map(|(&g, &x)| g * gelu_grad(x)).collect();
        let (dw, db) = layout.disc_dense;
        let (gw, gb) = grads.pair(dw, db);
        linear_backward(hidden, n, h, self.p(dw), h, &d_pre, gw, Some(gb))
    }

    /// Sentiment head on the position-0 vector. With `dropout_seed` set the
    /// configured dropout rate is applied (inverted dropout).
    pub fn cls_forward(&self, hidden: &[T], dropout_seed: Option<u64>) -> ClsTrace<T> {
        let c = self.config();
        let h = c.hidden_size;
        let rate = c.dropout;
        let keep_scale: Vec<T> = match dropout_seed {
            Some(seed) if rate > 0.0 => {
                let mut rng = rng::seeded(seed);
                let kept = T::of(1.0 / (1.0 - rate));
                (0..h)
                    .map(|_| if rng.random::<f64>() < rate { T::zero() } else { kept })
                    .collect()
            }
            _ => vec![T::one(); h],
        };
        let dropped: Vec<T> = hidden[..h].iter().zip(&keep_scale).map(|(&x, &s)| x * s).collect();
        let (w, b) = self.layout().classifier;
        let logits = linear(&dropped, 1, h, self.p(w), Some(self.p(b)), c.num_classes);
        let mut probs = logits.clone();
        ops::softmax_in_place(&mut probs);
        ClsTrace {
            dropped,
            keep_scale,
            logits,
            probs,
        }
    }

    pub fn cls_backward(&self, trace: &ClsTrace<T>, n: usize, d_logits: &[T], grads: &mut Gradients<T>) -> Vec<T> {
        let c = self.config();
        let h = c.hidden_size;
        let (w, b) = self.layout().classifier;
        let (dw, db) = grads.pair(w, b);
        let d_dropped = linear_backward(&trace.dropped, 1, h, self.p(w), c.num_classes, d_logits, dw, Some(db));
        let mut d_hidden = vec![T::zero(); n * h];
        for ((d, &g), &s) in d_hidden[..h].iter_mut().zip(&d_dropped).zip(&trace.keep_scale) {
            *d = g * s;
        }
        d_hidden
    }

    /// Class probabilities for an encoded sequence's hidden vectors.
    pub fn classify_cls(&self, hidden: &[T], training: bool, seed: u64) -> [T; 3] {
        let trace = self.cls_forward(hidden, training.then_some(seed));
        [trace.probs[0], trace.probs[1], trace.probs[2]]
    }

    pub fn mlm_logits(&self, hidden: &[T], positions: &[usize]) -> Vec<T> {
        self.mlm_forward(hidden, positions).logits
    }

    pub fn discriminator_logits(&self, hidden: &[T]) -> Vec<T> {
        self.disc_forward(hidden).logits
    }
}
