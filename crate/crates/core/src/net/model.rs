//! Embedding, encoder and decoder stacks, output projection, and the full
//! reverse pass.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use super::attention::{mha_backward, mha_forward, two_mut, AttnMask, MhaCache};
use super::config::ModelConfig;
use super::layers::{
    dropout_mask, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    sinusoidal, NormCache,
};
use super::params::{FfnLayout, Layout, NormLayout, Parameters};
use crate::error::{Error, Result};
use crate::ingest::Frame;
use crate::mat::Mat;
use crate::real::Real;
use crate::rng::Rng;

/// One frame as the network sees it: flattened slots plus its mark.
#[derive(Debug, Clone, PartialEq)]
pub struct Token<T> {
    pub values: Vec<T>,
    pub mark: u32,
    pub masked: bool,
}

impl<T: Real> Token<T> {
    pub fn from_frame(f: &Frame) -> Self {
        Token {
            values: f.flatten().into_iter().map(T::from_f64).collect(),
            mark: f.mark,
            masked: f.masked,
        }
    }

    pub fn with_mark(mut self, mark: u32) -> Self {
        self.mark = mark;
        self
    }
}

/// One supervised training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    /// Encoder input, possibly corrupted.
    pub source: Vec<Token<T>>,
    /// Decoder input under teacher forcing.
    pub prompt: Vec<Token<T>>,
    /// `prompt.len() x token_dim` clean targets.
    pub target: Vec<T>,
    /// Encoder positions to reconstruct through the auxiliary head.
    pub aux: Vec<(usize, Vec<T>)>,
}

struct FfnCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

struct EncCache<T> {
    attn: MhaCache<T>,
    drop1: Option<Vec<T>>,
    norm1: NormCache<T>,
    ffn: FfnCache<T>,
    drop2: Option<Vec<T>>,
    norm2: NormCache<T>,
}

struct DecCache<T> {
    self_attn: MhaCache<T>,
    drop1: Option<Vec<T>>,
    norm1: NormCache<T>,
    cross: MhaCache<T>,
    drop2: Option<Vec<T>>,
    norm2: NormCache<T>,
    ffn: FfnCache<T>,
    drop3: Option<Vec<T>>,
    norm3: NormCache<T>,
}

struct Pass<T> {
    memory: Vec<T>,
    hidden: Vec<T>,
    enc: Vec<EncCache<T>>,
    dec: Vec<DecCache<T>>,
}

/// Transformer weights plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: Parameters<T>,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.total == other.total && self.named() == other.named()
    }
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let params = Parameters::init(&layout, rng);
        Ok(Model {
            cfg,
            layout,
            params,
        })
    }

    pub fn from_params(cfg: ModelConfig, params: Parameters<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Shape {
                context: "parameter count",
                expected: layout.total,
                actual: params.len(),
            });
        }
        Ok(Model {
            cfg,
            layout,
            params,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg,
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    fn check_tokens(&self, tokens: &[Token<T>]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let td = self.cfg.token_dim();
        for t in tokens {
            if t.values.len() != td {
                return Err(Error::Shape {
                    context: "frame token width (4 x max_slots)",
                    expected: td,
                    actual: t.values.len(),
                });
            }
        }
        Ok(())
    }

    /// Frame tokens to `len x d_model`: linear projection of the slots (or
    /// the learned mask vector for masked frames) plus the sinusoidal
    /// encoding of the frame mark.
    pub fn embed(&self, tokens: &[Token<T>]) -> Result<Mat<T>> {
        self.check_tokens(tokens)?;
        let d = self.cfg.d_model;
        let td = self.cfg.token_dim();
        let p = &self.params;
        let mut out = Mat::zeros(tokens.len(), d);
        for (i, t) in tokens.iter().enumerate() {
            let row = if t.masked {
                p.get(self.layout.mask_vec).to_vec()
            } else {
                linear(&t.values, 1, p.get(self.layout.embed_w), p.get(self.layout.embed_b), td, d)
            };
            let pe = sinusoidal::<T>(t.mark, d);
            for ((o, r), e) in out.row_mut(i).iter_mut().zip(row).zip(pe) {
                *o = r + e;
            }
        }
        Ok(out)
    }

    fn embed_backward(&self, tokens: &[Token<T>], demb: &[T], g: &mut Parameters<T>) {
        let d = self.cfg.d_model;
        let td = self.cfg.token_dim();
        for (i, t) in tokens.iter().enumerate() {
            let dr = &demb[i * d..(i + 1) * d];
            if t.masked {
                for (a, &b) in g.get_mut(self.layout.mask_vec).iter_mut().zip(dr) {
                    *a += b;
                }
            } else {
                let (dw, db) = two_mut(g, self.layout.embed_w, self.layout.embed_b);
                crate::mat::matmul_at_acc(&t.values, dr, 1, td, d, dw);
                for (a, &b) in db.iter_mut().zip(dr) {
                    *a += b;
                }
            }
        }
    }

    fn ffn_forward(&self, f: &FfnLayout, x: &[T], n: usize) -> (Vec<T>, FfnCache<T>) {
        let (d, ff) = (self.cfg.d_model, self.cfg.d_ff);
        let p = &self.params;
        let pre = linear(x, n, p.get(f.w1), p.get(f.b1), d, ff);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let out = linear(&act, n, p.get(f.w2), p.get(f.b2), ff, d);
        (
            out,
            FfnCache {
                input: x.to_vec(),
                pre,
                act,
            },
        )
    }

    fn ffn_backward(&self, f: &FfnLayout, c: &FfnCache<T>, dout: &[T], n: usize, g: &mut Parameters<T>) -> Vec<T> {
        let (d, ff) = (self.cfg.d_model, self.cfg.d_ff);
        let p = &self.params;
        let mut dact = {
            let (dw, db) = two_mut(g, f.w2, f.b2);
            linear_backward(&c.act, dout, n, p.get(f.w2), ff, d, dw, db)
        };
        for (da, &z) in dact.iter_mut().zip(&c.pre) {
            *da *= gelu_grad(z);
        }
        let (dw, db) = two_mut(g, f.w1, f.b1);
        linear_backward(&c.input, &dact, n, p.get(f.w1), d, ff, dw, db)
    }

    fn norm(&self, l: &NormLayout, x: &[T], n: usize) -> (Vec<T>, NormCache<T>) {
        layer_norm(x, n, self.cfg.d_model, self.params.get(l.gain), self.params.get(l.shift))
    }

    fn norm_backward(&self, l: &NormLayout, c: &NormCache<T>, dy: &[T], n: usize, g: &mut Parameters<T>) -> Vec<T> {
        let (dg, ds) = two_mut(g, l.gain, l.shift);
        layer_norm_backward(c, dy, n, self.cfg.d_model, self.params.get(l.gain), dg, ds)
    }

    fn maybe_dropout(&self, x: &mut [T], rng: &mut Option<&mut dyn RngCore>) -> Option<Vec<T>> {
        let p = self.cfg.dropout;
        match rng {
            Some(r) if p > 0.0 => {
                let mask = dropout_mask::<T>(x.len(), p, &mut **r);
                for (v, &m) in x.iter_mut().zip(&mask) {
                    *v *= m;
                }
                Some(mask)
            }
            _ => None,
        }
    }

    fn encode_pass(
        &self,
        emb: &[T],
        n: usize,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Vec<T>, Vec<EncCache<T>>)> {
        let (d, h) = (self.cfg.d_model, self.cfg.n_heads);
        let mut x = emb.to_vec();
        let mut caches = Vec::with_capacity(self.layout.enc.len());
        for l in &self.layout.enc {
            let (mut a, attn) = mha_forward(&self.params, &l.attn, h, d, &x, n, &x, &x, n, AttnMask::None)?;
            let drop1 = self.maybe_dropout(&mut a, rng);
            for (av, &xv) in a.iter_mut().zip(&x) {
                *av += xv;
            }
            let (h1, norm1) = self.norm(&l.norm1, &a, n);
            let (mut f, ffn) = self.ffn_forward(&l.ffn, &h1, n);
            let drop2 = self.maybe_dropout(&mut f, rng);
            for (fv, &hv) in f.iter_mut().zip(&h1) {
                *fv += hv;
            }
            let (out, norm2) = self.norm(&l.norm2, &f, n);
            caches.push(EncCache {
                attn,
                drop1,
                norm1,
                ffn,
                drop2,
                norm2,
            });
            x = out;
        }
        Ok((x, caches))
    }

    fn decode_pass(
        &self,
        emb: &[T],
        m: usize,
        memory: &[T],
        n: usize,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Vec<T>, Vec<DecCache<T>>)> {
        let (d, h) = (self.cfg.d_model, self.cfg.n_heads);
        if self.cfg.paper_cross_wiring && m != n {
            return Err(Error::Shape {
                context: "paper cross-attention wiring needs equal encoder/decoder lengths",
                expected: n,
                actual: m,
            });
        }
        let mut y = emb.to_vec();
        let mut caches = Vec::with_capacity(self.layout.dec.len());
        for l in &self.layout.dec {
            let (mut s, self_attn) =
                mha_forward(&self.params, &l.self_attn, h, d, &y, m, &y, &y, m, AttnMask::Causal)?;
            let drop1 = self.maybe_dropout(&mut s, rng);
            for (sv, &yv) in s.iter_mut().zip(&y) {
                *sv += yv;
            }
            let (h1, norm1) = self.norm(&l.norm1, &s, m);
            let (mut c, cross) = if self.cfg.paper_cross_wiring {
                mha_forward(&self.params, &l.cross_attn, h, d, memory, n, memory, &h1, n, AttnMask::None)?
            } else {
                mha_forward(&self.params, &l.cross_attn, h, d, &h1, m, memory, memory, n, AttnMask::None)?
            };
            let drop2 = self.maybe_dropout(&mut c, rng);
            for (cv, &hv) in c.iter_mut().zip(&h1) {
                *cv += hv;
            }
            let (h2, norm2) = self.norm(&l.norm2, &c, m);
            let (mut f, ffn) = self.ffn_forward(&l.ffn, &h2, m);
            let drop3 = self.maybe_dropout(&mut f, rng);
            for (fv, &hv) in f.iter_mut().zip(&h2) {
                *fv += hv;
            }
            let (out, norm3) = self.norm(&l.norm3, &f, m);
            caches.push(DecCache {
                self_attn,
                drop1,
                norm1,
                cross,
                drop2,
                norm2,
                ffn,
                drop3,
                norm3,
            });
            y = out;
        }
        Ok((y, caches))
    }

    fn check_prompt(&self, prompt: &[Token<T>]) -> Result<()> {
        if prompt.len() > self.cfg.pred_len {
            return Err(Error::PromptTooLong {
                len: prompt.len(),
                max: self.cfg.pred_len,
            });
        }
        self.check_tokens(prompt)
    }

    fn run(
        &self,
        source: &[Token<T>],
        prompt: &[Token<T>],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Pass<T>> {
        self.check_prompt(prompt)?;
        let src = self.embed(source)?;
        let (memory, enc) = self.encode_pass(&src.data, source.len(), &mut rng)?;
        let prm = self.embed(prompt)?;
        let (hidden, dec) = self.decode_pass(&prm.data, prompt.len(), &memory, source.len(), &mut rng)?;
        Ok(Pass {
            memory,
            hidden,
            enc,
            dec,
        })
    }

    /// Encoder stack over already-embedded tokens.
    pub fn encode(&self, embedded: &Mat<T>) -> Result<Mat<T>> {
        let (mem, _) = self.encode_pass(&embedded.data, embedded.rows, &mut None)?;
        Mat::from_vec(embedded.rows, self.cfg.d_model, mem)
    }

    /// Decoder stack over an embedded prompt, attending to `memory`.
    pub fn decode(&self, prompt: &Mat<T>, memory: &Mat<T>) -> Result<Mat<T>> {
        if prompt.rows > self.cfg.pred_len {
            return Err(Error::PromptTooLong {
                len: prompt.rows,
                max: self.cfg.pred_len,
            });
        }
        let (h, _) = self.decode_pass(&prompt.data, prompt.rows, &memory.data, memory.rows, &mut None)?;
        Mat::from_vec(prompt.rows, self.cfg.d_model, h)
    }

    /// Cross-attention weights of every decoder layer and head, in that
    /// order, for inspection.
    pub fn cross_attention_weights(&self, source: &[Token<T>], prompt: &[Token<T>]) -> Result<Vec<Mat<T>>> {
        let pass = self.run(source, prompt, None)?;
        let (m, n) = if self.cfg.paper_cross_wiring {
            (source.len(), source.len())
        } else {
            (prompt.len(), source.len())
        };
        let mut out = Vec::new();
        for c in &pass.dec {
            for h in 0..self.cfg.n_heads {
                out.push(Mat::from_vec(m, n, c.cross.head_weights(h).to_vec())?);
            }
        }
        Ok(out)
    }

    fn project(&self, hidden: &[T], rows: usize) -> Vec<T> {
        linear(
            hidden,
            rows,
            self.params.get(self.layout.out_w),
            self.params.get(self.layout.out_b),
            self.cfg.d_model,
            self.cfg.token_dim(),
        )
    }

    /// Teacher-forced pass: one output frame per prompt position.
    pub fn forward_teacher(&self, source: &[Token<T>], prompt: &[Token<T>]) -> Result<Mat<T>> {
        let pass = self.run(source, prompt, None)?;
        Mat::from_vec(prompt.len(), self.cfg.token_dim(), self.project(&pass.hidden, prompt.len()))
    }

    /// Greedy autoregressive decoding of `steps` frames, starting from
    /// `start`. Each generated frame is fed back with the next mark.
    pub fn generate(&self, source: &[Token<T>], start: &Token<T>, steps: usize) -> Result<Mat<T>> {
        if steps > self.cfg.pred_len {
            return Err(Error::PromptTooLong {
                len: steps,
                max: self.cfg.pred_len,
            });
        }
        self.check_tokens(source)?;
        self.check_tokens(core::slice::from_ref(start))?;
        let src = self.embed(source)?;
        let (memory, _) = self.encode_pass(&src.data, source.len(), &mut None)?;
        let td = self.cfg.token_dim();
        let mut prompt = vec![start.clone()];
        let mut out = Mat::zeros(steps, td);
        for t in 0..steps {
            let emb = self.embed(&prompt)?;
            let (hidden, _) = self.decode_pass(&emb.data, prompt.len(), &memory, source.len(), &mut None)?;
            let d = self.cfg.d_model;
            let last = self.project(&hidden[t * d..(t + 1) * d], 1);
            out.row_mut(t).copy_from_slice(&last);
            prompt.push(Token {
                values: last,
                mark: start.mark + t as u32 + 1,
                masked: false,
            });
        }
        Ok(out)
    }

    fn aux_forward(&self, memory: &[T], aux: &[(usize, Vec<T>)]) -> Result<Vec<T>> {
        let (w, b) = self.layout.aux.ok_or_else(|| {
            Error::config("model.aux_head", "auxiliary loss requested without aux head")
        })?;
        let d = self.cfg.d_model;
        let mut rows = Vec::with_capacity(aux.len() * d);
        for (pos, _) in aux {
            rows.extend_from_slice(&memory[pos * d..(pos + 1) * d]);
        }
        Ok(linear(&rows, aux.len(), self.params.get(w), self.params.get(b), d, self.cfg.token_dim()))
    }

    fn check_example(&self, ex: &Example<T>) -> Result<()> {
        let td = self.cfg.token_dim();
        if ex.target.len() != ex.prompt.len() * td {
            return Err(Error::Shape {
                context: "target size",
                expected: ex.prompt.len() * td,
                actual: ex.target.len(),
            });
        }
        for (pos, v) in &ex.aux {
            if *pos >= ex.source.len() || v.len() != td {
                return Err(Error::Shape {
                    context: "auxiliary target",
                    expected: td,
                    actual: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Training loss of one example without dropout.
    pub fn loss(&self, ex: &Example<T>) -> Result<T> {
        self.check_example(ex)?;
        let pass = self.run(&ex.source, &ex.prompt, None)?;
        let pred = self.project(&pass.hidden, ex.prompt.len());
        let mut loss = mse(&pred, &ex.target);
        if !ex.aux.is_empty() {
            let aux_pred = self.aux_forward(&pass.memory, &ex.aux)?;
            let aux_tgt: Vec<T> = ex.aux.iter().flat_map(|(_, v)| v.iter().copied()).collect();
            loss += mse(&aux_pred, &aux_tgt);
        }
        Ok(loss)
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, ex: &Example<T>, rng: Option<&mut dyn RngCore>) -> Result<(T, Parameters<T>)> {
        let mut g = Parameters::zeros(self.layout.total);
        let loss = self.accumulate_grad(ex, rng, &mut g)?;
        Ok((loss, g))
    }

    /// Adds this example's gradient into `g` and returns its loss.
    pub fn accumulate_grad(
        &self,
        ex: &Example<T>,
        rng: Option<&mut dyn RngCore>,
        g: &mut Parameters<T>,
    ) -> Result<T> {
        self.check_example(ex)?;
        let (d, h) = (self.cfg.d_model, self.cfg.n_heads);
        let td = self.cfg.token_dim();
        let m = ex.prompt.len();
        let n = ex.source.len();
        let pass = self.run(&ex.source, &ex.prompt, rng)?;

        let pred = self.project(&pass.hidden, m);
        let mut loss = mse(&pred, &ex.target);
        let dpred = mse_grad(&pred, &ex.target);
        let mut dy = {
            let (dw, db) = two_mut(g, self.layout.out_w, self.layout.out_b);
            linear_backward(&pass.hidden, &dpred, m, self.params.get(self.layout.out_w), d, td, dw, db)
        };

        let mut dmem = vec![T::ZERO; n * d];
        if !ex.aux.is_empty() {
            let (w, b) = self.layout.aux.ok_or_else(|| {
                Error::config("model.aux_head", "auxiliary loss requested without aux head")
            })?;
            let aux_pred = self.aux_forward(&pass.memory, &ex.aux)?;
            let aux_tgt: Vec<T> = ex.aux.iter().flat_map(|(_, v)| v.iter().copied()).collect();
            loss += mse(&aux_pred, &aux_tgt);
            let daux = mse_grad(&aux_pred, &aux_tgt);
            let mut rows = Vec::with_capacity(ex.aux.len() * d);
            for (pos, _) in &ex.aux {
                rows.extend_from_slice(&pass.memory[pos * d..(pos + 1) * d]);
            }
            let (dw, db) = two_mut(g, w, b);
            let drows = linear_backward(&rows, &daux, ex.aux.len(), self.params.get(w), d, td, dw, db);
            for (k, (pos, _)) in ex.aux.iter().enumerate() {
                for c in 0..d {
                    dmem[pos * d + c] += drows[k * d + c];
                }
            }
        }

        for (l, c) in self.layout.dec.iter().zip(&pass.dec).rev() {
            let df = self.norm_backward(&l.norm3, &c.norm3, &dy, m, g);
            let mut dh2 = df.clone();
            let dffn_out = apply_drop(&df, &c.drop3);
            let dffn_in = self.ffn_backward(&l.ffn, &c.ffn, &dffn_out, m, g);
            add(&mut dh2, &dffn_in);

            let dc = self.norm_backward(&l.norm2, &c.norm2, &dh2, m, g);
            let mut dh1 = dc.clone();
            let dcross = apply_drop(&dc, &c.drop2);
            let (dq, dk, dv) = mha_backward(&self.params, g, &l.cross_attn, h, d, &c.cross, &dcross);
            if self.cfg.paper_cross_wiring {
                add(&mut dmem, &dq);
                add(&mut dmem, &dk);
                add(&mut dh1, &dv);
            } else {
                add(&mut dh1, &dq);
                add(&mut dmem, &dk);
                add(&mut dmem, &dv);
            }

            let ds = self.norm_backward(&l.norm1, &c.norm1, &dh1, m, g);
            let mut dyin = ds.clone();
            let dself = apply_drop(&ds, &c.drop1);
            let (dq, dk, dv) = mha_backward(&self.params, g, &l.self_attn, h, d, &c.self_attn, &dself);
            add(&mut dyin, &dq);
            add(&mut dyin, &dk);
            add(&mut dyin, &dv);
            dy = dyin;
        }
        self.embed_backward(&ex.prompt, &dy, g);

        let mut dx = dmem;
        for (l, c) in self.layout.enc.iter().zip(&pass.enc).rev() {
            let df = self.norm_backward(&l.norm2, &c.norm2, &dx, n, g);
            let mut dh1 = df.clone();
            let dffn_out = apply_drop(&df, &c.drop2);
            let dffn_in = self.ffn_backward(&l.ffn, &c.ffn, &dffn_out, n, g);
            add(&mut dh1, &dffn_in);

            let da = self.norm_backward(&l.norm1, &c.norm1, &dh1, n, g);
            let mut dxin = da.clone();
            let dattn = apply_drop(&da, &c.drop1);
            let (dq, dk, dv) = mha_backward(&self.params, g, &l.attn, h, d, &c.attn, &dattn);
            add(&mut dxin, &dq);
            add(&mut dxin, &dk);
            add(&mut dxin, &dv);
            dx = dxin;
        }
        self.embed_backward(&ex.source, &dx, g);
        Ok(loss)
    }
}

fn add<T: Real>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn apply_drop<T: Real>(g: &[T], mask: &Option<Vec<T>>) -> Vec<T> {
    match mask {
        Some(m) => g.iter().zip(m).map(|(&a, &b)| a * b).collect(),
        None => g.to_vec(),
    }
}

/// Mean of squared differences.
pub(crate) fn mse<T: Real>(pred: &[T], target: &[T]) -> T {
    let n = T::from_usize(pred.len().max(1));
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        / n
}

fn mse_grad<T: Real>(pred: &[T], target: &[T]) -> Vec<T> {
    let k = T::from_f64(2.0) / T::from_usize(pred.len().max(1));
    pred.iter().zip(target).map(|(&p, &t)| k * (p - t)).collect()
}
