//! Small causal transformer over the closed vocabulary, with exact
//! hand-written reverse-mode gradients in f64.
//!
//! Parameters live in one flat vector with a named-segment layout, which
//! keeps finite-difference checking and checkpointing trivial. Sampling and
//! scoring share the same position-by-position forward routine, so a
//! rollout's recorded log-probabilities re-score bit-identically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 {
            return Err(Error::Config("model dimensions must be nonzero".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    g1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    g2: usize,
    w1: usize,
    w2: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    gf: usize,
    unembed: usize,
    pub total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Layout {
        let (v, d, ff, l) = (c.vocab_size, c.d_model, c.d_ff, c.context_len);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let tok_emb = take(v * d);
        let pos_emb = take(l * d);
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            layers.push(LayerOffsets {
                g1: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                g2: take(d),
                w1: take(ff * d),
                w2: take(d * ff),
            });
        }
        let gf = take(d);
        let unembed = take(v * d);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            gf,
            unembed,
            total: off,
        }
    }

    /// Named parameter segments in layout order.
    pub fn named_segments(&self, c: &ModelConfig) -> Vec<(String, std::ops::Range<usize>)> {
        let (v, d, ff) = (c.vocab_size, c.d_model, c.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb..self.tok_emb + v * d),
            (
                "pos_emb".to_string(),
                self.pos_emb..self.pos_emb + c.context_len * d,
            ),
        ];
        for (i, lo) in self.layers.iter().enumerate() {
            for (name, start, len) in [
                ("norm1_gain", lo.g1, d),
                ("attn_wq", lo.wq, d * d),
                ("attn_wk", lo.wk, d * d),
                ("attn_wv", lo.wv, d * d),
                ("attn_wo", lo.wo, d * d),
                ("norm2_gain", lo.g2, d),
                ("mlp_w1", lo.w1, ff * d),
                ("mlp_w2", lo.w2, d * ff),
            ] {
                out.push((format!("layer{i}.{name}"), start..start + len));
            }
        }
        out.push(("final_gain".to_string(), self.gf..self.gf + d));
        out.push((
            "unembed".to_string(),
            self.unembed..self.unembed + v * d,
        ));
        out
    }
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub cfg: ModelConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Argmax decoding (temperature ignored, no randomness).
    pub greedy: bool,
    pub eos: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt_ids: Vec<u32>,
    pub generated_ids: Vec<u32>,
    /// log pi(token | prefix) at temperature 1, aligned to `generated_ids`.
    pub per_token_logprob: Vec<f64>,
    pub temperature: f64,
}

impl Rollout {
    pub fn sequence_logprob(&self) -> f64 {
        self.per_token_logprob.iter().sum()
    }
}

// ---------------------------------------------------------------------------
// linear algebra helpers (row-major w: [out x in])
// ---------------------------------------------------------------------------

fn matvec(w: &[f64], x: &[f64], out: usize, inp: usize, y: &mut [f64]) {
    for o in 0..out {
        let row = &w[o * inp..(o + 1) * inp];
        let mut s = 0.0;
        for i in 0..inp {
            s += row[i] * x[i];
        }
        y[o] = s;
    }
}

fn matvec_t(w: &[f64], dy: &[f64], out: usize, inp: usize, dx: &mut [f64]) {
    for o in 0..out {
        let row = &w[o * inp..(o + 1) * inp];
        let g = dy[o];
        for i in 0..inp {
            dx[i] += g * row[i];
        }
    }
}

fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64], out: usize, inp: usize) {
    for o in 0..out {
        let row = &mut dw[o * inp..(o + 1) * inp];
        let g = dy[o];
        for i in 0..inp {
            row[i] += g * x[i];
        }
    }
}

/// Returns (normed_with_gain, inverse_rms).
fn rmsnorm(x: &[f64], gain: &[f64]) -> (Vec<f64>, f64) {
    let d = x.len();
    let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let ri = 1.0 / (ms + NORM_EPS).sqrt();
    let y = (0..d).map(|i| gain[i] * x[i] * ri).collect();
    (y, ri)
}

/// Backward of rmsnorm: accumulates dgain, returns dx.
fn rmsnorm_bwd(dy: &[f64], x: &[f64], ri: f64, gain: &[f64], dgain: &mut [f64]) -> Vec<f64> {
    let d = x.len();
    let mut dn = vec![0.0; d];
    for i in 0..d {
        dgain[i] += dy[i] * x[i] * ri;
        dn[i] = dy[i] * gain[i];
    }
    let dot: f64 = dn.iter().zip(x).map(|(a, b)| a * b).sum();
    let c = ri * ri * ri / d as f64;
    (0..d).map(|i| ri * dn[i] - c * dot * x[i]).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Draws from softmax(logits / temperature).
pub fn sample_from_logits(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = logits.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut dart = rng.gen::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// forward runner
// ---------------------------------------------------------------------------

/// Per-layer state accumulated across positions.
struct LayerState {
    keys: Vec<f64>,   // T x d
    vals: Vec<f64>,   // T x d
    // recorded for backward
    x_in: Vec<f64>,   // T x d, residual-stream input to the layer
    ri1: Vec<f64>,    // T
    queries: Vec<f64>, // T x d
    probs: Vec<Vec<f64>>, // per position: n_heads x (t+1), flattened
    ctx: Vec<f64>,    // T x d
    x_mid: Vec<f64>,  // T x d, after attention residual
    ri2: Vec<f64>,    // T
    hidden: Vec<f64>, // T x d_ff, post-relu
}

struct Runner<'m> {
    m: &'m PolicyModel,
    record: bool,
    pos: usize,
    layers: Vec<LayerState>,
    x_final: Vec<f64>, // T x d, output of last layer (input to final norm)
    rif: Vec<f64>,     // T
    f_out: Vec<f64>,   // T x d, post final norm (only recorded positions kept)
}

impl<'m> Runner<'m> {
    fn new(m: &'m PolicyModel, record: bool) -> Runner<'m> {
        let layers = (0..m.cfg.n_layers)
            .map(|_| LayerState {
                keys: Vec::new(),
                vals: Vec::new(),
                x_in: Vec::new(),
                ri1: Vec::new(),
                queries: Vec::new(),
                probs: Vec::new(),
                ctx: Vec::new(),
                x_mid: Vec::new(),
                ri2: Vec::new(),
                hidden: Vec::new(),
            })
            .collect();
        Runner {
            m,
            record,
            pos: 0,
            layers,
            x_final: Vec::new(),
            rif: Vec::new(),
            f_out: Vec::new(),
        }
    }

    /// Processes one token; returns the final normed hidden state for this
    /// position (ready for the unembedding projection).
    fn step(&mut self, tok: u32) -> Result<Vec<f64>> {
        let c = &self.m.cfg;
        let (d, h, dh, ff) = (c.d_model, c.n_heads, c.d_model / c.n_heads, c.d_ff);
        if self.pos >= c.context_len {
            return Err(Error::Input(format!(
                "sequence exceeds context length {}",
                c.context_len
            )));
        }
        if tok as usize >= c.vocab_size {
            return Err(Error::Input(format!("token id {tok} out of vocabulary")));
        }
        let t = self.pos;
        let p = &self.m.params;
        let lay = &self.m.layout;

        let mut x: Vec<f64> = (0..d)
            .map(|i| p[lay.tok_emb + tok as usize * d + i] + p[lay.pos_emb + t * d + i])
            .collect();

        for (li, lo) in lay.layers.iter().enumerate() {
            let st = &mut self.layers[li];
            if self.record {
                st.x_in.extend_from_slice(&x);
            }
            let (a, ri1) = rmsnorm(&x, &p[lo.g1..lo.g1 + d]);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            matvec(&p[lo.wq..lo.wq + d * d], &a, d, d, &mut q);
            matvec(&p[lo.wk..lo.wk + d * d], &a, d, d, &mut k);
            matvec(&p[lo.wv..lo.wv + d * d], &a, d, d, &mut v);
            st.keys.extend_from_slice(&k);
            st.vals.extend_from_slice(&v);

            let scale = 1.0 / (dh as f64).sqrt();
            let mut ctx = vec![0.0; d];
            let mut probs_flat = if self.record {
                Vec::with_capacity(h * (t + 1))
            } else {
                Vec::new()
            };
            for head in 0..h {
                let qh = &q[head * dh..(head + 1) * dh];
                let mut scores = Vec::with_capacity(t + 1);
                for j in 0..=t {
                    let kh = &st.keys[j * d + head * dh..j * d + (head + 1) * dh];
                    let mut s = 0.0;
                    for i in 0..dh {
                        s += qh[i] * kh[i];
                    }
                    scores.push(s * scale);
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut tot = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    tot += *s;
                }
                for s in scores.iter_mut() {
                    *s /= tot;
                }
                for j in 0..=t {
                    let vh = &st.vals[j * d + head * dh..j * d + (head + 1) * dh];
                    let pj = scores[j];
                    for i in 0..dh {
                        ctx[head * dh + i] += pj * vh[i];
                    }
                }
                if self.record {
                    probs_flat.extend_from_slice(&scores);
                }
            }
            let mut o = vec![0.0; d];
            matvec(&p[lo.wo..lo.wo + d * d], &ctx, d, d, &mut o);
            let x_mid: Vec<f64> = (0..d).map(|i| x[i] + o[i]).collect();

            let (b, ri2) = rmsnorm(&x_mid, &p[lo.g2..lo.g2 + d]);
            let mut hid = vec![0.0; ff];
            matvec(&p[lo.w1..lo.w1 + ff * d], &b, ff, d, &mut hid);
            for v in hid.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let mut mlp = vec![0.0; d];
            matvec(&p[lo.w2..lo.w2 + d * ff], &hid, d, ff, &mut mlp);
            let x_out: Vec<f64> = (0..d).map(|i| x_mid[i] + mlp[i]).collect();

            if self.record {
                st.ri1.push(ri1);
                st.queries.extend_from_slice(&q);
                st.probs.push(probs_flat);
                st.ctx.extend_from_slice(&ctx);
                st.x_mid.extend_from_slice(&x_mid);
                st.ri2.push(ri2);
                st.hidden.extend_from_slice(&hid);
            }
            x = x_out;
        }

        let (f, rif) = rmsnorm(&x, &p[lay.gf..lay.gf + d]);
        if self.record {
            self.x_final.extend_from_slice(&x);
            self.rif.push(rif);
            self.f_out.extend_from_slice(&f);
        }
        self.pos += 1;
        Ok(f)
    }

    fn logits(&self, f: &[f64]) -> Vec<f64> {
        let c = &self.m.cfg;
        let mut logits = vec![0.0; c.vocab_size];
        matvec(
            &self.m.params[self.m.layout.unembed..self.m.layout.unembed + c.vocab_size * c.d_model],
            f,
            c.vocab_size,
            c.d_model,
            &mut logits,
        );
        logits
    }
}

/// A recorded forward pass over `prompt ++ generated`, holding everything
/// needed for an exact backward pass.
pub struct Recorded {
    cfg: ModelConfig,
    params: Vec<f64>,
    layout: Layout,
    ids: Vec<u32>,
    prompt_len: usize,
    per_token_logprob: Vec<f64>,
    /// softmax probabilities at each scored position (predicting generated
    /// token i from position prompt_len-1+i)
    probs: Vec<Vec<f64>>,
    layers: Vec<LayerState>,
    x_final: Vec<f64>,
    rif: Vec<f64>,
    f_out: Vec<f64>,
}

impl Recorded {
    pub fn per_token_logprob(&self) -> &[f64] {
        &self.per_token_logprob
    }

    pub fn sequence_logprob(&self) -> f64 {
        self.per_token_logprob.iter().sum()
    }

    /// Backpropagates a loss whose derivative with respect to the i-th
    /// generated token's log-probability is `d_logp[i]`. Returns the
    /// gradient aligned with the flat parameter vector.
    pub fn backward(&self, d_logp: &[f64]) -> Result<Vec<f64>> {
        let c = &self.cfg;
        let (d, h, dh, ff, v) = (
            c.d_model,
            c.n_heads,
            c.d_model / c.n_heads,
            c.d_ff,
            c.vocab_size,
        );
        let gen_len = self.ids.len() - self.prompt_len;
        if d_logp.len() != gen_len {
            return Err(Error::Contract(format!(
                "d_logp length {} != generated length {gen_len}",
                d_logp.len()
            )));
        }
        if d_logp.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite loss derivative".into()));
        }
        let t_total = self.ids.len();
        let p = &self.params;
        let lay = &self.layout;
        let mut grad = vec![0.0; lay.total];

        // unembedding + final norm
        let mut dxf = vec![0.0; t_total * d]; // grad wrt x_final
        for (i, &w) in d_logp.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let pos = self.prompt_len - 1 + i;
            let target = self.ids[self.prompt_len + i] as usize;
            let probs = &self.probs[i];
            let f = &self.f_out[pos * d..(pos + 1) * d];
            // d logp_target / d logit_o = onehot(target) - probs
            let mut df = vec![0.0; d];
            let urows = &p[lay.unembed..lay.unembed + v * d];
            let gu = &mut grad[lay.unembed..lay.unembed + v * d];
            for o in 0..v {
                let dl = w * ((if o == target { 1.0 } else { 0.0 }) - probs[o]);
                if dl == 0.0 {
                    continue;
                }
                let row = &urows[o * d..(o + 1) * d];
                let grow = &mut gu[o * d..(o + 1) * d];
                for i2 in 0..d {
                    df[i2] += dl * row[i2];
                    grow[i2] += dl * f[i2];
                }
            }
            // final rmsnorm backward
            let xf = &self.x_final[pos * d..(pos + 1) * d];
            let mut dgf = vec![0.0; d];
            let dx = rmsnorm_bwd(&df, xf, self.rif[pos], &p[lay.gf..lay.gf + d], &mut dgf);
            for i2 in 0..d {
                grad[lay.gf + i2] += dgf[i2];
                dxf[pos * d + i2] += dx[i2];
            }
        }

        // layers in reverse
        let mut dx = dxf; // grad wrt each layer's output stream
        for (li, lo) in lay.layers.iter().enumerate().rev() {
            let st = &self.layers[li];
            let scale = 1.0 / (dh as f64).sqrt();

            // MLP sublayer
            let mut dx_mid = vec![0.0; t_total * d];
            for t in 0..t_total {
                let dm = &dx[t * d..(t + 1) * d];
                dx_mid[t * d..(t + 1) * d].copy_from_slice(dm); // residual path
                let hid = &st.hidden[t * ff..(t + 1) * ff];
                let x_mid = &st.x_mid[t * d..(t + 1) * d];
                // recompute b = rmsnorm(x_mid) * g2
                let ri2 = st.ri2[t];
                let g2 = &p[lo.g2..lo.g2 + d];
                let b: Vec<f64> = (0..d).map(|i| g2[i] * x_mid[i] * ri2).collect();
                let mut dhid = vec![0.0; ff];
                matvec_t(&p[lo.w2..lo.w2 + d * ff], dm, d, ff, &mut dhid);
                outer_acc(&mut grad[lo.w2..lo.w2 + d * ff], dm, hid, d, ff);
                for i in 0..ff {
                    if hid[i] <= 0.0 {
                        dhid[i] = 0.0;
                    }
                }
                let mut db = vec![0.0; d];
                matvec_t(&p[lo.w1..lo.w1 + ff * d], &dhid, ff, d, &mut db);
                outer_acc(&mut grad[lo.w1..lo.w1 + ff * d], &dhid, &b, ff, d);
                let mut dg2 = vec![0.0; d];
                let dxm = rmsnorm_bwd(&db, x_mid, ri2, g2, &mut dg2);
                for i in 0..d {
                    grad[lo.g2 + i] += dg2[i];
                    dx_mid[t * d + i] += dxm[i];
                }
            }

            // attention sublayer: accumulate dq/dk/dv over all positions
            let mut dq = vec![0.0; t_total * d];
            let mut dk = vec![0.0; t_total * d];
            let mut dv = vec![0.0; t_total * d];
            for t in 0..t_total {
                let do_ = &dx_mid[t * d..(t + 1) * d];
                let ctx = &st.ctx[t * d..(t + 1) * d];
                let mut dctx = vec![0.0; d];
                matvec_t(&p[lo.wo..lo.wo + d * d], do_, d, d, &mut dctx);
                outer_acc(&mut grad[lo.wo..lo.wo + d * d], do_, ctx, d, d);
                let probs_flat = &st.probs[t];
                let q = &st.queries[t * d..(t + 1) * d];
                for head in 0..h {
                    let probs = &probs_flat[head * (t + 1)..(head + 1) * (t + 1)];
                    let dctx_h = &dctx[head * dh..(head + 1) * dh];
                    let qh = &q[head * dh..(head + 1) * dh];
                    // dp and softmax backward
                    let mut dp = vec![0.0; t + 1];
                    for j in 0..=t {
                        let vh = &st.vals[j * d + head * dh..j * d + (head + 1) * dh];
                        let mut s = 0.0;
                        for i in 0..dh {
                            s += dctx_h[i] * vh[i];
                            dv[j * d + head * dh + i] += probs[j] * dctx_h[i];
                        }
                        dp[j] = s;
                    }
                    let dot: f64 = probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..=t {
                        let ds = probs[j] * (dp[j] - dot) * scale;
                        let kh = &st.keys[j * d + head * dh..j * d + (head + 1) * dh];
                        for i in 0..dh {
                            dq[t * d + head * dh + i] += ds * kh[i];
                            dk[j * d + head * dh + i] += ds * qh[i];
                        }
                    }
                }
            }
            // back through the q/k/v projections and the first norm
            let mut dx_in = vec![0.0; t_total * d];
            for t in 0..t_total {
                let x_in = &st.x_in[t * d..(t + 1) * d];
                let ri1 = st.ri1[t];
                let g1 = &p[lo.g1..lo.g1 + d];
                let a: Vec<f64> = (0..d).map(|i| g1[i] * x_in[i] * ri1).collect();
                let mut da = vec![0.0; d];
                let dqt = &dq[t * d..(t + 1) * d];
                let dkt = &dk[t * d..(t + 1) * d];
                let dvt = &dv[t * d..(t + 1) * d];
                matvec_t(&p[lo.wq..lo.wq + d * d], dqt, d, d, &mut da);
                matvec_t(&p[lo.wk..lo.wk + d * d], dkt, d, d, &mut da);
                matvec_t(&p[lo.wv..lo.wv + d * d], dvt, d, d, &mut da);
                outer_acc(&mut grad[lo.wq..lo.wq + d * d], dqt, &a, d, d);
                outer_acc(&mut grad[lo.wk..lo.wk + d * d], dkt, &a, d, d);
                outer_acc(&mut grad[lo.wv..lo.wv + d * d], dvt, &a, d, d);
                let mut dg1 = vec![0.0; d];
                let dxn = rmsnorm_bwd(&da, x_in, ri1, g1, &mut dg1);
                for i in 0..d {
                    grad[lo.g1 + i] += dg1[i];
                    // residual path: layer output grad flows to input
                    dx_in[t * d + i] = dx_mid[t * d + i] + dxn[i];
                }
            }
            dx = dx_in;
        }

        // embeddings
        for t in 0..t_total {
            let tok = self.ids[t] as usize;
            for i in 0..d {
                grad[lay.tok_emb + tok * d + i] += dx[t * d + i];
                grad[lay.pos_emb + t * d + i] += dx[t * d + i];
            }
        }
        Ok(grad)
    }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Small gaussians; output-side projections zeroed, gains at one.
    Gaussian { std: f64 },
    /// All zeros (uniform next-token distribution everywhere).
    Zeros,
}

impl PolicyModel {
    pub fn new(cfg: ModelConfig, init: Init, seed: u64) -> Result<PolicyModel> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        if let Init::Gaussian { std } = init {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gauss = |rng: &mut ChaCha8Rng| -> f64 {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            for x in params.iter_mut() {
                *x = std * gauss(&mut rng);
            }
            // residual-output projections start at zero, norm gains at one
            for lo in &layout.layers {
                let d = cfg.d_model;
                let ff = cfg.d_ff;
                params[lo.wo..lo.wo + d * d].fill(0.0);
                params[lo.w2..lo.w2 + d * ff].fill(0.0);
                params[lo.g1..lo.g1 + d].fill(1.0);
                params[lo.g2..lo.g2 + d].fill(1.0);
            }
            params[layout.gf..layout.gf + cfg.d_model].fill(1.0);
        }
        Ok(PolicyModel {
            cfg,
            params,
            layout,
        })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<f64>) -> Result<PolicyModel> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Config(format!(
                "parameter vector length {} != layout size {}",
                params.len(),
                layout.total
            )));
        }
        Ok(PolicyModel {
            cfg,
            params,
            layout,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn named_segments(&self) -> Vec<(String, std::ops::Range<usize>)> {
        self.layout.named_segments(&self.cfg)
    }

    /// Deep copy for use as a frozen old/reference policy.
    pub fn clone_frozen(&self) -> PolicyModel {
        self.clone()
    }

    /// Next-token log-probabilities (temperature 1) after consuming `prefix`.
    pub fn next_token_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::Input("prefix must be non-empty".into()));
        }
        let mut runner = Runner::new(self, false);
        let mut f = Vec::new();
        for &t in prefix {
            f = runner.step(t)?;
        }
        Ok(log_softmax(&runner.logits(&f)))
    }

    /// Per-token log-probabilities of `generated` given `prompt`.
    pub fn score(&self, prompt: &[u32], generated: &[u32]) -> Result<Vec<f64>> {
        Ok(self.run(prompt, generated, false)?.per_token_logprob)
    }

    /// Like [`PolicyModel::score`] but records activations for `backward`.
    pub fn score_recorded(&self, prompt: &[u32], generated: &[u32]) -> Result<Recorded> {
        self.run(prompt, generated, true)
    }

    fn run(&self, prompt: &[u32], generated: &[u32], record: bool) -> Result<Recorded> {
        if prompt.is_empty() {
            return Err(Error::Input("prompt must be non-empty".into()));
        }
        let mut runner = Runner::new(self, record);
        let mut per_token_logprob = Vec::with_capacity(generated.len());
        let mut probs = Vec::new();
        let mut f = Vec::new();
        for &t in prompt {
            f = runner.step(t)?;
        }
        for (i, &t) in generated.iter().enumerate() {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::Input(format!("token id {t} out of vocabulary")));
            }
            let logits = runner.logits(&f);
            let lp = log_softmax(&logits);
            per_token_logprob.push(lp[t as usize]);
            if record {
                probs.push(lp.iter().map(|x| x.exp()).collect());
            }
            if i + 1 < generated.len() || record {
                f = runner.step(t)?;
            }
        }
        let ids: Vec<u32> = prompt.iter().chain(generated.iter()).copied().collect();
        Ok(Recorded {
            cfg: self.cfg,
            params: self.params.clone(),
            layout: self.layout.clone(),
            prompt_len: prompt.len(),
            ids,
            per_token_logprob,
            probs,
            layers: runner.layers,
            x_final: runner.x_final,
            rif: runner.rif,
            f_out: runner.f_out,
        })
    }

    /// Autoregressive sampling. Recorded log-probabilities are always the
    /// temperature-1 model probabilities so that `score` reproduces them.
    pub fn sample(&self, prompt: &[u32], opts: &SampleOptions) -> Result<Rollout> {
        if !opts.greedy && opts.temperature <= 0.0 {
            return Err(Error::Input("temperature must be > 0".into()));
        }
        if opts.max_new_tokens == 0 {
            return Err(Error::Input("max_new_tokens must be >= 1".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Input("prompt must be non-empty".into()));
        }
        if prompt.len() >= self.cfg.context_len {
            return Err(Error::Input(format!(
                "prompt length {} exceeds context length {}",
                prompt.len(),
                self.cfg.context_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut runner = Runner::new(self, false);
        let mut f = Vec::new();
        for &t in prompt {
            f = runner.step(t)?;
        }
        let mut generated = Vec::new();
        let mut per_token_logprob = Vec::new();
        let budget = opts
            .max_new_tokens
            .min(self.cfg.context_len - prompt.len());
        for _ in 0..budget {
            let logits = runner.logits(&f);
            let tok = if opts.greedy {
                argmax(&logits)
            } else {
                sample_from_logits(&logits, opts.temperature, &mut rng)
            } as u32;
            let lp = log_softmax(&logits);
            generated.push(tok);
            per_token_logprob.push(lp[tok as usize]);
            if tok == opts.eos {
                break;
            }
            if runner.pos < self.cfg.context_len {
                f = runner.step(tok)?;
            } else {
                break;
            }
        }
        Ok(Rollout {
            prompt_ids: prompt.to_vec(),
            generated_ids: generated,
            per_token_logprob,
            temperature: if opts.greedy { 0.0 } else { opts.temperature },
        })
    }

    /// In-place gradient step: params -= lr * grad.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::Contract("gradient length mismatch".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }
}
