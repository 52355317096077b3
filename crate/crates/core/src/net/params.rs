//! Flat parameter storage and the fixed inventory order.
//!
//! All weights live in one contiguous vector; [`Layout`] maps each tensor
//! to a [`Span`] of it. The order here is the checkpoint order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::config::{param_count, ModelConfig};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnLayout {
    pub wq: Span,
    pub bq: Span,
    pub wk: Span,
    pub bk: Span,
    pub wv: Span,
    pub bv: Span,
    pub wo: Span,
    pub bo: Span,
}

#[derive(Debug, Clone, Copy)]
pub struct NormLayout {
    pub gain: Span,
    pub shift: Span,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnLayout {
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayerLayout {
    pub attn: AttnLayout,
    pub norm1: NormLayout,
    pub ffn: FfnLayout,
    pub norm2: NormLayout,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayerLayout {
    pub self_attn: AttnLayout,
    pub norm1: NormLayout,
    pub cross_attn: AttnLayout,
    pub norm2: NormLayout,
    pub ffn: FfnLayout,
    pub norm3: NormLayout,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub embed_w: Span,
    pub embed_b: Span,
    pub mask_vec: Span,
    pub enc: Vec<EncLayerLayout>,
    pub dec: Vec<DecLayerLayout>,
    pub out_w: Span,
    pub out_b: Span,
    pub aux: Option<(Span, Span)>,
    pub total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, rows: usize, cols: usize) -> Span {
        let s = Span {
            offset: self.0,
            rows,
            cols,
        };
        self.0 += rows * cols;
        s
    }

    fn attn(&mut self, d: usize) -> AttnLayout {
        AttnLayout {
            wq: self.take(d, d),
            bq: self.take(1, d),
            wk: self.take(d, d),
            bk: self.take(1, d),
            wv: self.take(d, d),
            bv: self.take(1, d),
            wo: self.take(d, d),
            bo: self.take(1, d),
        }
    }

    fn norm(&mut self, d: usize) -> NormLayout {
        NormLayout {
            gain: self.take(1, d),
            shift: self.take(1, d),
        }
    }

    fn ffn(&mut self, d: usize, ff: usize) -> FfnLayout {
        FfnLayout {
            w1: self.take(d, ff),
            b1: self.take(1, ff),
            w2: self.take(ff, d),
            b2: self.take(1, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let t = cfg.token_dim();
        let mut c = Cursor(0);
        let embed_w = c.take(t, d);
        let embed_b = c.take(1, d);
        let mask_vec = c.take(1, d);
        let enc = (0..cfg.n_enc)
            .map(|_| EncLayerLayout {
                attn: c.attn(d),
                norm1: c.norm(d),
                ffn: c.ffn(d, cfg.d_ff),
                norm2: c.norm(d),
            })
            .collect();
        let dec = (0..cfg.n_dec)
            .map(|_| DecLayerLayout {
                self_attn: c.attn(d),
                norm1: c.norm(d),
                cross_attn: c.attn(d),
                norm2: c.norm(d),
                ffn: c.ffn(d, cfg.d_ff),
                norm3: c.norm(d),
            })
            .collect();
        let out_w = c.take(d, t);
        let out_b = c.take(1, t);
        let aux = cfg.aux_head.then(|| (c.take(d, t), c.take(1, t)));
        let layout = Layout {
            embed_w,
            embed_b,
            mask_vec,
            enc,
            dec,
            out_w,
            out_b,
            aux,
            total: c.0,
        };
        debug_assert_eq!(layout.total, param_count(cfg));
        layout
    }

    /// Every tensor with a readable name, in storage order.
    pub fn named(&self) -> Vec<(String, Span)> {
        let mut out = vec![
            (String::from("embed.w"), self.embed_w),
            (String::from("embed.b"), self.embed_b),
            (String::from("mask_vec"), self.mask_vec),
        ];
        let attn = |out: &mut Vec<(String, Span)>, p: &str, a: &AttnLayout| {
            for (n, s) in [
                ("wq", a.wq),
                ("bq", a.bq),
                ("wk", a.wk),
                ("bk", a.bk),
                ("wv", a.wv),
                ("bv", a.bv),
                ("wo", a.wo),
                ("bo", a.bo),
            ] {
                out.push((format!("{p}.{n}"), s));
            }
        };
        let norm = |out: &mut Vec<(String, Span)>, p: &str, n: &NormLayout| {
            out.push((format!("{p}.gain"), n.gain));
            out.push((format!("{p}.shift"), n.shift));
        };
        let ffn = |out: &mut Vec<(String, Span)>, p: &str, f: &FfnLayout| {
            for (n, s) in [("w1", f.w1), ("b1", f.b1), ("w2", f.w2), ("b2", f.b2)] {
                out.push((format!("{p}.{n}"), s));
            }
        };
        for (i, l) in self.enc.iter().enumerate() {
            attn(&mut out, &format!("enc{i}.attn"), &l.attn);
            norm(&mut out, &format!("enc{i}.norm1"), &l.norm1);
            ffn(&mut out, &format!("enc{i}.ffn"), &l.ffn);
            norm(&mut out, &format!("enc{i}.norm2"), &l.norm2);
        }
        for (i, l) in self.dec.iter().enumerate() {
            attn(&mut out, &format!("dec{i}.self_attn"), &l.self_attn);
            norm(&mut out, &format!("dec{i}.norm1"), &l.norm1);
            attn(&mut out, &format!("dec{i}.cross_attn"), &l.cross_attn);
            norm(&mut out, &format!("dec{i}.norm2"), &l.norm2);
            ffn(&mut out, &format!("dec{i}.ffn"), &l.ffn);
            norm(&mut out, &format!("dec{i}.norm3"), &l.norm3);
        }
        out.push((String::from("out.w"), self.out_w));
        out.push((String::from("out.b"), self.out_b));
        if let Some((w, b)) = self.aux {
            out.push((String::from("aux.w"), w));
            out.push((String::from("aux.b"), b));
        }
        out
    }
}

/// Every learnable scalar of the network, or a gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub values: Vec<T>,
}

impl<T: Real> Parameters<T> {
    pub fn zeros(n: usize) -> Self {
        Parameters {
            values: vec![T::ZERO; n],
        }
    }

    /// Xavier-uniform matrices, zero biases and shifts, unit gains and a
    /// small random mask vector.
    pub fn init(layout: &Layout, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(layout.total);
        let xavier = |p: &mut Self, s: Span, rng: &mut Rng| {
            let a = libm::sqrt(6.0 / (s.rows + s.cols) as f64);
            for v in &mut p.values[s.range()] {
                *v = T::from_f64(rng.random_range(-a..a));
            }
        };
        let ones = |p: &mut Self, s: Span| p.values[s.range()].fill(T::ONE);
        xavier(&mut p, layout.embed_w, rng);
        for v in &mut p.values[layout.mask_vec.range()] {
            *v = T::from_f64(rng.random_range(-0.1..0.1));
        }
        let attn = |p: &mut Self, a: &AttnLayout, rng: &mut Rng| {
            for s in [a.wq, a.wk, a.wv, a.wo] {
                xavier(p, s, rng);
            }
        };
        for l in &layout.enc {
            attn(&mut p, &l.attn, rng);
            xavier(&mut p, l.ffn.w1, rng);
            xavier(&mut p, l.ffn.w2, rng);
            ones(&mut p, l.norm1.gain);
            ones(&mut p, l.norm2.gain);
        }
        for l in &layout.dec {
            attn(&mut p, &l.self_attn, rng);
            attn(&mut p, &l.cross_attn, rng);
            xavier(&mut p, l.ffn.w1, rng);
            xavier(&mut p, l.ffn.w2, rng);
            ones(&mut p, l.norm1.gain);
            ones(&mut p, l.norm2.gain);
            ones(&mut p, l.norm3.gain);
        }
        xavier(&mut p, layout.out_w, rng);
        if let Some((w, _)) = layout.aux {
            xavier(&mut p, w, rng);
        }
        p
    }

    #[inline]
    pub fn get(&self, s: Span) -> &[T] {
        &self.values[s.range()]
    }

    #[inline]
    pub fn get_mut(&mut self, s: Span) -> &mut [T] {
        &mut self.values[s.range()]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            values: self.values.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.values {
            *v *= k;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v.to_f64() * v.to_f64()).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
