use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy, dot, softmax, Gru, GruCache, GruGrad, Matrix, Objective, ParamStore,
};

use super::slot::*;
use super::Dims;

/// Read-only view of model tensors in layout order.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    dims: Dims,
    t: &'a [Matrix],
}

/// Annotated topic: `states[i] = [forward_i; backward_i]`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: Vec<Vec<f64>>,
    /// `B·h_i` for each state, reused by every attention step.
    pub keys: Vec<Vec<f64>>,
    pub fwd_final: Vec<f64>,
    pub bwd_final: Vec<f64>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub context: Vec<f64>,
    pub weights: Vec<f64>,
    /// `tanh(A·s + B·h_i)` per position.
    act: Vec<Vec<f64>>,
}

struct EncoderCache {
    fwd: Vec<GruCache>,
    bwd: Vec<GruCache>,
}

struct StepCache {
    s_prev: Vec<f64>,
    attn: AttentionOutput,
    gru: GruCache,
    probs: Vec<f64>,
    y_prev: Token,
    target: Token,
}

impl<'a> Net<'a> {
    pub(crate) fn new(dims: Dims, t: &'a [Matrix]) -> Self {
        Net { dims, t }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    fn gru(&self, base: usize) -> Gru<'a> {
        Gru {
            w: &self.t[base],
            u: &self.t[base + 1],
            b: &self.t[base + 2],
        }
    }

    fn embedding(&self, id: Token) -> &'a [f64] {
        self.t[EMBED].row(id)
    }

    fn check_token(&self, id: Token) -> Result<()> {
        if id >= self.dims.vocab {
            return Err(Error::usage(format!(
                "token {id} outside vocabulary of {}",
                self.dims.vocab
            )));
        }
        Ok(())
    }

    /// Runs the bidirectional encoder over the topic characters.
    pub fn encode(&self, topic: &[Token]) -> Result<EncoderOutput> {
        Ok(self.encode_cached(topic)?.0)
    }

    fn encode_cached(&self, topic: &[Token]) -> Result<(EncoderOutput, EncoderCache)> {
        if topic.is_empty() {
            return Err(Error::usage("empty topic"));
        }
        if topic.len() > self.dims.max_topic {
            return Err(Error::usage(format!(
                "topic of {} characters exceeds the maximum {}",
                topic.len(),
                self.dims.max_topic
            )));
        }
        for &id in topic {
            self.check_token(id)?;
        }
        let h = self.dims.enc_hidden;
        let n = topic.len();
        let (fwd_gru, bwd_gru) = (self.gru(ENC_FWD), self.gru(ENC_BWD));

        let mut fwd = Vec::with_capacity(n);
        let mut state = vec![0.0; h];
        for &id in topic {
            let c = fwd_gru.step_cached(self.embedding(id), &state);
            state = c.h.clone();
            fwd.push(c);
        }
        // bwd[i] holds the backward-direction step that produced state i.
        let mut bwd: Vec<Option<GruCache>> = vec![None; n];
        let mut state = vec![0.0; h];
        for i in (0..n).rev() {
            let c = bwd_gru.step_cached(self.embedding(topic[i]), &state);
            state = c.h.clone();
            bwd[i] = Some(c);
        }
        let bwd: Vec<GruCache> = bwd.into_iter().map(|c| c.expect("filled")).collect();

        let states: Vec<Vec<f64>> = (0..n)
            .map(|i| [fwd[i].h.as_slice(), bwd[i].h.as_slice()].concat())
            .collect();
        let keys = states.iter().map(|s| self.t[ATTN_B].matvec(s)).collect();
        let out = EncoderOutput {
            fwd_final: fwd[n - 1].h.clone(),
            bwd_final: bwd[0].h.clone(),
            states,
            keys,
        };
        Ok((out, EncoderCache { fwd, bwd }))
    }

    /// `s₀ = tanh(W_b·[forward_N; backward_1] + b_b)`.
    pub fn initial_state(&self, enc: &EncoderOutput) -> Vec<f64> {
        let joined = [enc.fwd_final.as_slice(), enc.bwd_final.as_slice()].concat();
        let mut pre = self.t[BRIDGE_B].as_slice().to_vec();
        self.t[BRIDGE_W].matvec_rows_into(0..self.dims.dec_hidden, &joined, &mut pre);
        pre.iter().map(|x| x.tanh()).collect()
    }

    /// Additive attention: `e_i = uᵀ tanh(A·s_prev + B·h_i)`, `α = softmax(e)`,
    /// `context = Σ α_i h_i`.
    pub fn attend(&self, s_prev: &[f64], enc: &EncoderOutput) -> AttentionOutput {
        let q = self.t[ATTN_A].matvec(s_prev);
        let u = self.t[ATTN_U].as_slice();
        let act: Vec<Vec<f64>> = enc
            .keys
            .iter()
            .map(|k| k.iter().zip(&q).map(|(k, q)| (k + q).tanh()).collect())
            .collect();
        let scores: Vec<f64> = act.iter().map(|a| dot(u, a)).collect();
        let weights = softmax(&scores).expect("encoder output is non-empty");
        let mut context = vec![0.0; self.dims.context()];
        for (w, h) in weights.iter().zip(&enc.states) {
            for (c, hv) in context.iter_mut().zip(h) {
                *c += w * hv;
            }
        }
        AttentionOutput {
            context,
            weights,
            act,
        }
    }

    fn decoder_input(&self, y_prev: Token, context: &[f64]) -> Vec<f64> {
        [self.embedding(y_prev), context].concat()
    }

    /// `s_t = GRU([E[y_prev]; context], s_prev)`.
    pub fn decoder_step(&self, y_prev: Token, s_prev: &[f64], context: &[f64]) -> Result<Vec<f64>> {
        self.check_token(y_prev)?;
        if context.len() != self.dims.context() {
            return Err(Error::usage(format!(
                "context has width {}, expected {}",
                context.len(),
                self.dims.context()
            )));
        }
        let x = self.decoder_input(y_prev, context);
        self.gru(DEC).step(&x, s_prev)
    }

    /// The decoder step with the encoder contribution set to zero.
    pub fn zero_context_step(&self, y_prev: Token, s_prev: &[f64]) -> Result<Vec<f64>> {
        self.decoder_step(y_prev, s_prev, &vec![0.0; self.dims.context()])
    }

    /// `s_t · W`: unnormalized scores over the vocabulary.
    pub fn project(&self, s: &[f64]) -> Vec<f64> {
        self.t[PROJ].t_matvec(s)
    }

    /// Teacher-forced negative log-likelihood of `tokens[1..=steps]` given the topic,
    /// summed over steps. `steps` defaults to the whole sequence.
    pub fn sequence_nll(
        &self,
        topic: &[Token],
        tokens: &[Token],
        steps: Option<usize>,
    ) -> Result<(f64, usize)> {
        let steps = self.check_steps(tokens, steps)?;
        let enc = self.encode(topic)?;
        let mut s = self.initial_state(&enc);
        let mut total = 0.0;
        for t in 1..=steps {
            let att = self.attend(&s, &enc);
            s = self.decoder_step(tokens[t - 1], &s, &att.context)?;
            let p = softmax(&self.project(&s))?;
            total += cross_entropy(&p, tokens[t])?;
        }
        Ok((total, steps))
    }

    fn check_steps(&self, tokens: &[Token], steps: Option<usize>) -> Result<usize> {
        if tokens.len() < 2 {
            return Err(Error::usage("sequence needs at least two tokens"));
        }
        for &id in tokens {
            self.check_token(id)?;
        }
        let steps = steps.unwrap_or(tokens.len() - 1);
        if steps == 0 || steps > tokens.len() - 1 {
            return Err(Error::usage(format!(
                "{steps} steps requested for a sequence of {}",
                tokens.len()
            )));
        }
        Ok(steps)
    }

    /// Mean per-step cross-entropy over `tokens[1..=steps]`, with its gradient
    /// accumulated into `grads` (layout order).
    pub fn loss_and_grad(
        &self,
        topic: &[Token],
        tokens: &[Token],
        steps: Option<usize>,
        grads: &mut [Matrix],
    ) -> Result<f64> {
        let steps = self.check_steps(tokens, steps)?;
        let (d_e, d_h, d_s) = (self.dims.embed, self.dims.enc_hidden, self.dims.dec_hidden);

        // Forward.
        let (enc, enc_cache) = self.encode_cached(topic)?;
        let s0 = self.initial_state(&enc);
        let mut s = s0.clone();
        let mut caches = Vec::with_capacity(steps);
        let mut loss = 0.0;
        for t in 1..=steps {
            let attn = self.attend(&s, &enc);
            let x = self.decoder_input(tokens[t - 1], &attn.context);
            let gru = self.gru(DEC).step_cached(&x, &s);
            let probs = softmax(&self.project(&gru.h))?;
            loss += cross_entropy(&probs, tokens[t])?;
            let s_prev = std::mem::replace(&mut s, gru.h.clone());
            caches.push(StepCache {
                s_prev,
                attn,
                gru,
                probs,
                y_prev: tokens[t - 1],
                target: tokens[t],
            });
        }
        let scale = 1.0 / steps as f64;

        // Backward through the decoder.
        let n = enc.len();
        let mut d_states = vec![vec![0.0; self.dims.context()]; n];
        let mut ds_next = vec![0.0; d_s];
        let dec = self.gru(DEC);
        for c in caches.iter().rev() {
            let mut dlogits: Vec<f64> = c.probs.iter().map(|p| p * scale).collect();
            dlogits[c.target] -= scale;
            grads[PROJ].add_outer(&c.gru.h, &dlogits);
            let mut ds = self.t[PROJ].matvec(&dlogits);
            ds.iter_mut().zip(&ds_next).for_each(|(a, b)| *a += b);

            let (dx, mut ds_prev) = {
                let [w, u, b] = grads
                    .get_disjoint_mut([DEC, DEC + 1, DEC + 2])
                    .expect("distinct slots");
                dec.backward(&c.gru, &ds, &mut GruGrad { w, u, b })
            };
            grads[EMBED]
                .row_mut(c.y_prev)
                .iter_mut()
                .zip(&dx[..d_e])
                .for_each(|(g, d)| *g += d);
            let dctx = &dx[d_e..];

            // Attention.
            let a = &c.attn;
            let d_alpha: Vec<f64> = enc.states.iter().map(|h| dot(dctx, h)).collect();
            let mean: f64 = a.weights.iter().zip(&d_alpha).map(|(w, d)| w * d).sum();
            let mut d_pre_sum = vec![0.0; self.dims.attn];
            for i in 0..n {
                let w = a.weights[i];
                for (dh, dc) in d_states[i].iter_mut().zip(dctx) {
                    *dh += w * dc;
                }
                let de = w * (d_alpha[i] - mean);
                if de == 0.0 {
                    continue;
                }
                let u = self.t[ATTN_U].as_slice();
                let d_pre: Vec<f64> = (0..self.dims.attn)
                    .map(|k| de * u[k] * (1.0 - a.act[i][k] * a.act[i][k]))
                    .collect();
                grads[ATTN_U]
                    .as_mut_slice()
                    .iter_mut()
                    .zip(&a.act[i])
                    .for_each(|(g, act)| *g += de * act);
                grads[ATTN_B].add_outer(&d_pre, &enc.states[i]);
                self.t[ATTN_B].t_matvec_rows_into(0..self.dims.attn, &d_pre, &mut d_states[i]);
                d_pre_sum.iter_mut().zip(&d_pre).for_each(|(s, d)| *s += d);
            }
            grads[ATTN_A].add_outer(&d_pre_sum, &c.s_prev);
            self.t[ATTN_A].t_matvec_rows_into(0..self.dims.attn, &d_pre_sum, &mut ds_prev);
            ds_next = ds_prev;
        }

        // Bridge.
        let joined = [enc.fwd_final.as_slice(), enc.bwd_final.as_slice()].concat();
        let d_pre: Vec<f64> = ds_next
            .iter()
            .zip(&s0)
            .map(|(d, s)| d * (1.0 - s * s))
            .collect();
        grads[BRIDGE_W].add_outer(&d_pre, &joined);
        grads[BRIDGE_B]
            .as_mut_slice()
            .iter_mut()
            .zip(&d_pre)
            .for_each(|(g, d)| *g += d);
        let d_joined = self.t[BRIDGE_W].t_matvec(&d_pre);

        // Encoder, forward direction: states 0..n, final state at n−1.
        let fwd = self.gru(ENC_FWD);
        let mut carry = d_joined[..d_h].to_vec();
        for i in (0..n).rev() {
            let dh: Vec<f64> = d_states[i][..d_h]
                .iter()
                .zip(&carry)
                .map(|(a, b)| a + b)
                .collect();
            let [w, u, b] = grads
                .get_disjoint_mut([ENC_FWD, ENC_FWD + 1, ENC_FWD + 2])
                .expect("distinct slots");
            let (dx, dh_prev) = fwd.backward(&enc_cache.fwd[i], &dh, &mut GruGrad { w, u, b });
            add_row(&mut grads[EMBED], topic[i], &dx);
            carry = dh_prev;
        }
        // Backward direction: processed n−1..0, final state at 0.
        let bwd = self.gru(ENC_BWD);
        let mut carry = d_joined[d_h..].to_vec();
        for i in 0..n {
            let dh: Vec<f64> = d_states[i][d_h..]
                .iter()
                .zip(&carry)
                .map(|(a, b)| a + b)
                .collect();
            let [w, u, b] = grads
                .get_disjoint_mut([ENC_BWD, ENC_BWD + 1, ENC_BWD + 2])
                .expect("distinct slots");
            let (dx, dh_prev) = bwd.backward(&enc_cache.bwd[i], &dh, &mut GruGrad { w, u, b });
            add_row(&mut grads[EMBED], topic[i], &dx);
            carry = dh_prev;
        }

        Ok(loss * scale)
    }
}

fn add_row(m: &mut Matrix, row: usize, v: &[f64]) {
    m.row_mut(row).iter_mut().zip(v).for_each(|(g, d)| *g += d);
}

/// Mean teacher-forced cross-entropy of one sequence, as an [`Objective`] over a
/// model's [`ParamStore`]. `steps = Some(1)` gives the one-step loss.
#[derive(Clone, Debug)]
pub struct SequenceObjective {
    pub dims: Dims,
    pub topic: Vec<Token>,
    pub tokens: Vec<Token>,
    pub steps: Option<usize>,
}

impl Objective for SequenceObjective {
    fn loss(&self, store: &ParamStore) -> Result<f64> {
        let net = Net::new(self.dims, store.values());
        let (nll, n) = net.sequence_nll(&self.topic, &self.tokens, self.steps)?;
        Ok(nll / n as f64)
    }

    fn loss_and_grad(&self, store: &mut ParamStore) -> Result<f64> {
        let (values, grads) = store.split_mut();
        Net::new(self.dims, values).loss_and_grad(&self.topic, &self.tokens, self.steps, grads)
    }
}
