//! Network-level checks: gradients against finite differences, structural
//! properties of attention stacks, and a naive reference forward pass.

use trajformer_core::mat::Mat;
use trajformer_core::net::{gelu, multi_head, sinusoidal, AttnMask, Example, Model, ModelConfig, Token};
use trajformer_core::rng::{stream, Stream};

use rand::Rng as _;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc: 1,
        n_dec: 1,
        d_ff: 16,
        max_slots: 2,
        hist_len: 4,
        pred_len: 4,
        dropout: 0.0,
        paper_cross_wiring: false,
        aux_head: true,
    }
}

fn random_token(rng: &mut trajformer_core::rng::Rng, td: usize, mark: u32, masked: bool) -> Token<f64> {
    Token {
        values: (0..td).map(|_| rng.random_range(0.0..1.0)).collect(),
        mark,
        masked,
    }
}

fn tiny_example(cfg: &ModelConfig, seed: u64) -> Example<f64> {
    let mut rng = stream(seed, Stream::Data);
    let td = cfg.token_dim();
    let source: Vec<_> = (0..cfg.hist_len)
        .map(|i| random_token(&mut rng, td, i as u32, i == 1))
        .collect();
    let prompt: Vec<_> = (0..cfg.pred_len)
        .map(|i| random_token(&mut rng, td, (cfg.hist_len - 1 + i) as u32, false))
        .collect();
    let target = (0..cfg.pred_len * td).map(|_| rng.random_range(0.0..1.0)).collect();
    let aux = vec![(1, (0..td).map(|_| rng.random_range(0.0..1.0)).collect())];
    Example {
        source,
        prompt,
        target,
        aux,
    }
}

/// Max relative error of analytic vs central-difference gradients.
fn grad_check(cfg: ModelConfig, seed: u64) -> (f64, String) {
    let mut init = stream(seed, Stream::Init);
    let model: Model<f64> = Model::new(cfg, &mut init).unwrap();
    let ex = tiny_example(&cfg, seed);
    let (_, analytic) = model.loss_and_grad(&ex, None).unwrap();

    let h = 1e-5;
    let names = model.layout.named();
    let mut worst = (0.0, String::new());
    let mut probe = model.clone();
    for i in 0..model.params.len() {
        let orig = probe.params.values[i];
        probe.params.values[i] = orig + h;
        let up = probe.loss(&ex).unwrap();
        probe.params.values[i] = orig - h;
        let down = probe.loss(&ex).unwrap();
        probe.params.values[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.values[i];
        // Relative error with an absolute floor so that exactly-zero
        // gradients are not judged on round-off alone.
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.0 {
            let name = names
                .iter()
                .find(|(_, s)| s.range().contains(&i))
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            worst = (rel, format!("{name}[{}]: analytic {a:e} numeric {numeric:e}", i));
        }
    }
    worst
}

#[test]
fn gradients_match_central_differences() {
    let (err, at) = grad_check(tiny_cfg(), 11);
    assert!(err < 1e-4, "max relative error {err:e} at {at}");
}

#[test]
fn gradients_match_with_paper_cross_wiring() {
    let cfg = ModelConfig {
        paper_cross_wiring: true,
        ..tiny_cfg()
    };
    let (err, at) = grad_check(cfg, 12);
    assert!(err < 1e-4, "max relative error {err:e} at {at}");
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = tiny_cfg();
    let model: Model<f64> = Model::new(cfg, &mut stream(3, Stream::Init)).unwrap();
    let ex = tiny_example(&cfg, 3);
    let (_, g) = model.loss_and_grad(&ex, None).unwrap();
    for (name, span) in model.layout.named() {
        let touched = g.get(span).iter().any(|v| *v != 0.0);
        assert!(touched, "{name} has an all-zero gradient");
    }
}

#[test]
fn unused_mask_vector_gets_zero_gradient() {
    let cfg = ModelConfig {
        aux_head: false,
        ..tiny_cfg()
    };
    let model: Model<f64> = Model::new(cfg, &mut stream(4, Stream::Init)).unwrap();
    let mut ex = tiny_example(&cfg, 4);
    ex.aux.clear();
    for t in &mut ex.source {
        t.masked = false;
    }
    let (_, g) = model.loss_and_grad(&ex, None).unwrap();
    assert!(g.get(model.layout.mask_vec).iter().all(|v| *v == 0.0));
}

#[test]
fn perfect_prediction_zeroes_output_gradient() {
    let cfg = ModelConfig {
        aux_head: false,
        ..tiny_cfg()
    };
    let mut model: Model<f64> = Model::new(cfg, &mut stream(5, Stream::Init)).unwrap();
    // Zero output weights: prediction is the bias; make the target equal it.
    model.params.get_mut(model.layout.out_w).fill(0.0);
    let bias: Vec<f64> = (0..cfg.token_dim()).map(|i| 0.1 * i as f64).collect();
    model.params.get_mut(model.layout.out_b).copy_from_slice(&bias);
    let mut ex = tiny_example(&cfg, 5);
    ex.aux.clear();
    ex.target = bias.iter().copied().cycle().take(cfg.pred_len * cfg.token_dim()).collect();
    let (loss, g) = model.loss_and_grad(&ex, None).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.get(model.layout.out_w).iter().all(|v| *v == 0.0));
    assert!(g.get(model.layout.out_b).iter().all(|v| *v == 0.0));
}

#[test]
fn zero_frame_embeds_to_positional_term() {
    let cfg = tiny_cfg();
    let mut model: Model<f64> = Model::new(cfg, &mut stream(6, Stream::Init)).unwrap();
    model.params.get_mut(model.layout.embed_b).fill(0.0);
    let tok = Token {
        values: vec![0.0; cfg.token_dim()],
        mark: 5,
        masked: false,
    };
    let e = model.embed(&[tok]).unwrap();
    assert_eq!(e.row(0), sinusoidal::<f64>(5, cfg.d_model).as_slice());
}

#[test]
fn equal_content_differs_only_by_position() {
    let cfg = tiny_cfg();
    let model: Model<f64> = Model::new(cfg, &mut stream(7, Stream::Init)).unwrap();
    let mut rng = stream(7, Stream::Data);
    let a = random_token(&mut rng, cfg.token_dim(), 2, false);
    let b = a.clone().with_mark(9);
    let e = model.embed(&[a, b]).unwrap();
    let pa = sinusoidal::<f64>(2, cfg.d_model);
    let pb = sinusoidal::<f64>(9, cfg.d_model);
    for c in 0..cfg.d_model {
        let content_a = e.at(0, c) - pa[c];
        let content_b = e.at(1, c) - pb[c];
        assert!((content_a - content_b).abs() < 1e-12);
    }
}

#[test]
fn masked_token_ignores_slot_contents() {
    let cfg = tiny_cfg();
    let model: Model<f64> = Model::new(cfg, &mut stream(8, Stream::Init)).unwrap();
    let mut rng = stream(8, Stream::Data);
    let a = random_token(&mut rng, cfg.token_dim(), 3, true);
    let mut b = a.clone();
    for v in &mut b.values {
        *v += rng.random_range(-1.0..1.0);
    }
    let ea = model.embed(&[a]).unwrap();
    let eb = model.embed(&[b]).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn wrong_token_width_is_rejected() {
    let cfg = tiny_cfg();
    let model: Model<f64> = Model::new(cfg, &mut stream(8, Stream::Init)).unwrap();
    let tok = Token {
        values: vec![0.0; cfg.token_dim() + 4],
        mark: 0,
        masked: false,
    };
    assert!(model.embed(&[tok]).is_err());
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = tiny_cfg();
    let model: Model<f64> = Model::new(cfg, &mut stream(9, Stream::Init)).unwrap();
    let mut rng = stream(9, Stream::Data);
    let toks: Vec<_> = (0..6).map(|i| random_token(&mut rng, cfg.token_dim(), i, false)).collect();
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permuted: Vec<_> = perm.iter().map(|&i| toks[i].clone()).collect();
    let a = model.encode(&model.embed(&toks).unwrap()).unwrap();
    let b = model.encode(&model.embed(&permuted).unwrap()).unwrap();
    for (row, &src) in perm.iter().enumerate() {
        for c in 0..cfg.d_model {
            assert!((b.at(row, c) - a.at(src, c)).abs() < 1e-6);
        }
    }
}

#[test]
fn single_token_encoder_is_finite() {
    let cfg = tiny_cfg();
    let model: Model<f64> = Model::new(cfg, &mut stream(10, Stream::Init)).unwrap();
    let mut rng = stream(10, Stream::Data);
    let t = random_token(&mut rng, cfg.token_dim(), 0, false);
    let out = model.encode(&model.embed(&[t]).unwrap()).unwrap();
    assert!(out.all_finite());
}

#[test]
fn decoder_is_causal() {
    let cfg = tiny_cfg();
    let model: Model<f64> = Model::new(cfg, &mut stream(11, Stream::Init)).unwrap();
    let ex = tiny_example(&cfg, 11);
    let base = model.forward_teacher(&ex.source, &ex.prompt).unwrap();
    let mut rng = stream(11, Stream::Batch);
    for t in 0..cfg.pred_len {
        let mut prompt = ex.prompt.clone();
        for later in prompt.iter_mut().skip(t + 1) {
            for v in &mut later.values {
                *v = rng.random_range(0.0..1.0);
            }
        }
        let out = model.forward_teacher(&ex.source, &prompt).unwrap();
        for row in 0..=t {
            assert_eq!(out.row(row), base.row(row), "row {row} moved after perturbing > {t}");
        }
    }
}

#[test]
fn cross_attention_rows_sum_to_one() {
    let cfg = tiny_cfg();
    let model: Model<f64> = Model::new(cfg, &mut stream(12, Stream::Init)).unwrap();
    let ex = tiny_example(&cfg, 12);
    let w = model.cross_attention_weights(&ex.source, &ex.prompt[..1]).unwrap();
    for m in w {
        assert_eq!(m.rows, 1);
        let s: f64 = m.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn overlong_prompt_is_rejected() {
    let cfg = tiny_cfg();
    let model: Model<f64> = Model::new(cfg, &mut stream(13, Stream::Init)).unwrap();
    let mut ex = tiny_example(&cfg, 13);
    ex.prompt.push(ex.prompt[0].clone());
    assert!(model.forward_teacher(&ex.source, &ex.prompt).is_err());
}

#[test]
fn teacher_and_autoregressive_agree_on_own_outputs() {
    let cfg = ModelConfig {
        aux_head: false,
        ..tiny_cfg()
    };
    let model: Model<f32> = Model::new(cfg, &mut stream(14, Stream::Init)).unwrap();
    let ex = tiny_example(&cfg, 14);
    let source: Vec<Token<f32>> = ex
        .source
        .iter()
        .map(|t| Token {
            values: t.values.iter().map(|&v| v as f32).collect(),
            mark: t.mark,
            masked: t.masked,
        })
        .collect();
    let start = Token {
        values: ex.prompt[0].values.iter().map(|&v| v as f32).collect(),
        mark: ex.prompt[0].mark,
        masked: false,
    };
    let gen = model.generate(&source, &start, cfg.pred_len).unwrap();
    let mut prompt = vec![start.clone()];
    for t in 0..cfg.pred_len - 1 {
        prompt.push(Token {
            values: gen.row(t).to_vec(),
            mark: start.mark + t as u32 + 1,
            masked: false,
        });
    }
    let teacher = model.forward_teacher(&source, &prompt).unwrap();
    assert_eq!(teacher, gen);
}

#[test]
fn single_head_multi_head_is_projected_attention() {
    let cfg = ModelConfig {
        d_model: 4,
        n_heads: 1,
        ..tiny_cfg()
    };
    let model: Model<f64> = Model::new(cfg, &mut stream(15, Stream::Init)).unwrap();
    let l = &model.layout.enc[0].attn;
    let p = &model.params;
    let mut rng = stream(15, Stream::Data);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xm = Mat::from_vec(3, 4, x.clone()).unwrap();
    let out = multi_head(&xm, &xm, p, l, 1, AttnMask::None).unwrap();

    let proj = |w: &[f64], b: &[f64]| -> Mat<f64> {
        let mut m = Mat::zeros(3, 4);
        for r in 0..3 {
            for c in 0..4 {
                m.data[r * 4 + c] = b[c] + (0..4).map(|k| x[r * 4 + k] * w[k * 4 + c]).sum::<f64>();
            }
        }
        m
    };
    let q = proj(p.get(l.wq), p.get(l.bq));
    let k = proj(p.get(l.wk), p.get(l.bk));
    let v = proj(p.get(l.wv), p.get(l.bv));
    let a = trajformer_core::net::attention(&q, &k, &v, None).unwrap().output;
    let (wo, bo) = (p.get(l.wo), p.get(l.bo));
    for r in 0..3 {
        for c in 0..4 {
            let want = bo[c] + (0..4).map(|kk| a.at(r, kk) * wo[kk * 4 + c]).sum::<f64>();
            assert!((out.at(r, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn two_head_attention_matches_per_head_hand_computation() {
    let cfg = ModelConfig {
        d_model: 4,
        n_heads: 2,
        ..tiny_cfg()
    };
    let mut model: Model<f64> = Model::new(cfg, &mut stream(16, Stream::Init)).unwrap();
    let l = model.layout.enc[0].attn;
    // Identity projections with zero bias: heads see columns {0,1} and {2,3}.
    for (w, b) in [(l.wq, l.bq), (l.wk, l.bk), (l.wv, l.bv), (l.wo, l.bo)] {
        let wm = model.params.get_mut(w);
        wm.fill(0.0);
        for i in 0..4 {
            wm[i * 4 + i] = 1.0;
        }
        model.params.get_mut(b).fill(0.0);
    }
    let x = Mat::from_rows(&[&[1.0, 0.0, 0.0, 2.0], &[0.0, 1.0, 2.0, 0.0]]).unwrap();
    let out = multi_head(&x, &x, &model.params, &l, 2, AttnMask::None).unwrap();

    // Head 0 scores: [[1,0],[0,1]]/sqrt2 -> weights [a,1-a],[1-a,a]
    let a = 1.0 / (1.0 + (-1.0f64 / 2f64.sqrt()).exp());
    // Head 1 scores: [[4,0],[0,4]]/sqrt2 -> weights [b,1-b],[1-b,b]
    let b = 1.0 / (1.0 + (-4.0f64 / 2f64.sqrt()).exp());
    let want = [
        [a * 1.0, (1.0 - a) * 1.0, (1.0 - b) * 2.0, b * 2.0],
        [(1.0 - a) * 1.0, a * 1.0, b * 2.0, (1.0 - b) * 2.0],
    ];
    for r in 0..2 {
        for c in 0..4 {
            assert!((out.at(r, c) - want[r][c]).abs() < 1e-12, "({r},{c})");
        }
    }
}

// ---------------------------------------------------------------------------
// Straight-line reference forward pass, written against the parameter
// inventory with plain nested loops.

struct Ref<'a> {
    cfg: ModelConfig,
    model: &'a Model<f64>,
}

type M = Vec<Vec<f64>>;

impl Ref<'_> {
    fn w(&self, s: trajformer_core::net::Span) -> M {
        let v = self.model.params.get(s);
        (0..s.rows).map(|r| v[r * s.cols..(r + 1) * s.cols].to_vec()).collect()
    }
    fn b(&self, s: trajformer_core::net::Span) -> Vec<f64> {
        self.model.params.get(s).to_vec()
    }
    fn lin(&self, x: &M, w: trajformer_core::net::Span, b: trajformer_core::net::Span) -> M {
        let (w, b) = (self.w(w), self.b(b));
        x.iter()
            .map(|row| {
                (0..b.len())
                    .map(|c| b[c] + row.iter().enumerate().map(|(k, v)| v * w[k][c]).sum::<f64>())
                    .collect()
            })
            .collect()
    }
    fn ln(&self, x: &M, n: &trajformer_core::net::NormLayout) -> M {
        let (g, s) = (self.b(n.gain), self.b(n.shift));
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                row.iter()
                    .enumerate()
                    .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g[c] + s[c])
                    .collect()
            })
            .collect()
    }
    fn mha(&self, xq: &M, xkv: &M, a: &trajformer_core::net::AttnLayout, causal: bool) -> M {
        let q = self.lin(xq, a.wq, a.bq);
        let k = self.lin(xkv, a.wk, a.bk);
        let v = self.lin(xkv, a.wv, a.bv);
        let dk = self.cfg.d_head();
        let mut concat = vec![vec![0.0; self.cfg.d_model]; xq.len()];
        for h in 0..self.cfg.n_heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..xq.len() {
                let allowed: Vec<usize> = (0..xkv.len()).filter(|&j| !causal || j <= i).collect();
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (s, &j) in scores.iter().zip(&allowed) {
                    let p = (s - mx).exp() / z;
                    for c in cols.clone() {
                        concat[i][c] += p * v[j][c];
                    }
                }
            }
        }
        self.lin(&concat, a.wo, a.bo)
    }
    fn ffn(&self, x: &M, f: &trajformer_core::net::FfnLayout) -> M {
        let mut h = self.lin(x, f.w1, f.b1);
        for row in &mut h {
            for v in row.iter_mut() {
                *v = 0.5 * *v * (1.0 + libm::erf(*v / 2f64.sqrt()));
            }
        }
        self.lin(&h, f.w2, f.b2)
    }
    fn add(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
    }
    fn embed(&self, toks: &[Token<f64>]) -> M {
        let l = &self.model.layout;
        toks.iter()
            .map(|t| {
                let base = if t.masked {
                    self.b(l.mask_vec)
                } else {
                    self.lin(&vec![t.values.clone()], l.embed_w, l.embed_b).remove(0)
                };
                let d = self.cfg.d_model;
                base.iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let ang = t.mark as f64 / 10000f64.powf(2.0 * (i / 2) as f64 / d as f64);
                        v + if i % 2 == 0 { ang.sin() } else { ang.cos() }
                    })
                    .collect()
            })
            .collect()
    }
    fn encode(&self, x: &M) -> M {
        let mut x = x.clone();
        for l in &self.model.layout.enc {
            let h1 = self.ln(&Self::add(&x, &self.mha(&x, &x, &l.attn, false)), &l.norm1);
            x = self.ln(&Self::add(&h1, &self.ffn(&h1, &l.ffn)), &l.norm2);
        }
        x
    }
    fn decode(&self, y: &M, mem: &M) -> M {
        let mut y = y.clone();
        for l in &self.model.layout.dec {
            let h1 = self.ln(&Self::add(&y, &self.mha(&y, &y, &l.self_attn, true)), &l.norm1);
            let h2 = self.ln(&Self::add(&h1, &self.mha(&h1, mem, &l.cross_attn, false)), &l.norm2);
            y = self.ln(&Self::add(&h2, &self.ffn(&h2, &l.ffn)), &l.norm3);
        }
        y
    }
}

#[test]
fn encode_and_decode_match_reference_forward() {
    let cfg = ModelConfig {
        n_enc: 2,
        n_dec: 2,
        ..tiny_cfg()
    };
    let model: Model<f64> = Model::new(cfg, &mut stream(17, Stream::Init)).unwrap();
    let r = Ref { cfg, model: &model };
    let ex = tiny_example(&cfg, 17);

    let emb = model.embed(&ex.source).unwrap();
    let ref_emb = r.embed(&ex.source);
    let mem = model.encode(&emb).unwrap();
    let ref_mem = r.encode(&ref_emb);
    for (i, row) in ref_mem.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((mem.at(i, c) - v).abs() < 1e-10);
        }
    }

    let pe = model.embed(&ex.prompt).unwrap();
    let dec = model.decode(&pe, &mem).unwrap();
    let ref_dec = r.decode(&r.embed(&ex.prompt), &ref_mem);
    for (i, row) in ref_dec.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((dec.at(i, c) - v).abs() < 1e-10);
        }
    }
    assert!((gelu(0.5f64) - 0.5 * 0.5 * (1.0 + libm::erf(0.5 / 2f64.sqrt()))).abs() < 1e-15);
}

#[test]
fn random_inputs_give_finite_outputs() {
    let cfg = ModelConfig::desk();
    let model: Model<f32> = Model::new(cfg, &mut stream(18, Stream::Init)).unwrap();
    let mut rng = stream(18, Stream::Data);
    let td = cfg.token_dim();
    for _ in 0..50 {
        let source: Vec<Token<f32>> = (0..cfg.hist_len)
            .map(|i| Token {
                values: (0..td).map(|_| rng.random_range(0.0..1.0)).collect(),
                mark: i as u32,
                masked: rng.random::<f64>() < 0.15,
            })
            .collect();
        let start = Token {
            values: (0..td).map(|_| rng.random_range(0.0..1.0)).collect(),
            mark: cfg.hist_len as u32 - 1,
            masked: false,
        };
        let out = model.generate(&source, &start, cfg.pred_len).unwrap();
        assert_eq!((out.rows, out.cols), (cfg.pred_len, td));
        assert!(out.all_finite());
    }
}

#[test]
fn dropout_gradients_match_under_a_fixed_mask() {
    let cfg = ModelConfig {
        dropout: 0.2,
        ..tiny_cfg()
    };
    let model: Model<f64> = Model::new(cfg, &mut stream(19, Stream::Init)).unwrap();
    let ex = tiny_example(&cfg, 19);
    let eval = |m: &Model<f64>| {
        let mut r = stream(19, Stream::Dropout);
        m.loss_and_grad(&ex, Some(&mut r)).unwrap()
    };
    let (_, analytic) = eval(&model);
    let mut probe = model.clone();
    let h = 1e-5;
    for i in (0..model.params.len()).step_by(7) {
        let orig = probe.params.values[i];
        probe.params.values[i] = orig + h;
        let up = eval(&probe).0;
        probe.params.values[i] = orig - h;
        let down = eval(&probe).0;
        probe.params.values[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.values[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-4, "param {i}: analytic {a:e} numeric {numeric:e}");
    }
    // Dropout must actually change the loss relative to evaluation mode.
    assert_ne!(eval(&model).0, model.loss(&ex).unwrap());
}
