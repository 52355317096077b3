//! Subcommand implementations. Each one reads its inputs, delegates to the
//! core and writes its artifacts atomically.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use rand::seq::SliceRandom;
use serde::Serialize;
use trajformer_core::eval::{compensation_cases, evaluate_cases, prediction_cases, MetricsReport};
use trajformer_core::infer::{extract_trajectories, rollout, speed_grid, Prediction};
use trajformer_core::ingest::{build_samples, denormalize, Frame, Sample, SampleMeta};
use trajformer_core::net::{param_count, Model};
use trajformer_core::noise::corrupt;
use trajformer_core::rng::{stream, substream, Stream};
use trajformer_core::syngen::gen_corpus;
use trajformer_core::train::{
    decode_checkpoint, encode_checkpoint, finetune_compensation, pretrain, TrainOutcome, TraceRow,
};

use crate::config::{ConfigError, RunConfig};
use crate::io::{
    comment_header, read_tracks, sha256_hex, split_path, to_jsonl, tracks_to_csv, write_atomic, Dataset,
    NoisedRecord, SplitManifest,
};
use crate::pool::Pool;

/// A failed command and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl Failure {
    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_DATA,
            error: e.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error: e.into(),
        }
    }
}

impl From<trajformer_core::Error> for Failure {
    fn from(e: trajformer_core::Error) -> Self {
        use trajformer_core::Error as E;
        let code = match e {
            E::Config { .. } | E::ConfigMismatch { .. } | E::Infeasible(_) => EXIT_CONFIG,
            E::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure { code, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::data(e)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Everything a command needs besides its own arguments.
pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub pool: &'a Pool,
}

impl Ctx<'_> {
    fn header(&self) -> String {
        comment_header(&self.cfg.to_text())
    }
}

pub fn syngen(ctx: &Ctx, out: &Path) -> CmdResult {
    let points = gen_corpus(&ctx.cfg.syn, ctx.cfg.syn_duration)?;
    write_atomic(out, &tracks_to_csv(&points, &ctx.header())?)?;
    eprintln!("wrote {} track points to {}", points.len(), out.display());
    Ok(())
}

/// Deterministic train/test split by shuffled sample order.
pub fn split(samples: &[Sample], test_fraction: f64, seed: u64) -> SplitManifest {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut stream(seed, Stream::Data));
    let n_test = (test_fraction * samples.len() as f64).round() as usize;
    let key = |i: &usize| samples[*i].meta.key();
    SplitManifest {
        seed,
        test: idx[..n_test].iter().map(key).collect(),
        train: idx[n_test..].iter().map(key).collect(),
    }
}

pub fn preprocess(ctx: &Ctx, input: &Path, out: &Path) -> CmdResult {
    let tracks = read_tracks(input).map_err(Failure::data)?;
    let (samples, diags) = build_samples(&tracks, &ctx.cfg.domain, &ctx.cfg.site)?;
    if samples.is_empty() {
        return Err(Failure::data(anyhow!("no samples could be assembled from {}", input.display())));
    }
    let manifest = split(&samples, ctx.cfg.test_fraction, ctx.cfg.seed);
    write_atomic(out, &to_jsonl(&samples)?)?;
    let mut m = serde_json::to_value(&manifest).map_err(Failure::data)?;
    m["config"] = ctx.cfg.to_text().into();
    write_atomic(&split_path(out), &serde_json::to_vec_pretty(&m).map_err(Failure::data)?)?;
    eprintln!(
        "{} samples ({} train, {} test), {} diagnostics",
        samples.len(),
        manifest.train.len(),
        manifest.test.len(),
        diags.len()
    );
    Ok(())
}

fn trace_csv(header: &str, trace: &[TraceRow]) -> String {
    let mut s = String::from(header);
    s.push_str("step,lr,loss\n");
    for r in trace {
        let _ = writeln!(s, "{},{:e},{:e}", r.step, r.lr, r.loss);
    }
    s
}

fn finish_training(ctx: &Ctx, outcome: TrainOutcome, out: &Path, trace: Option<&Path>) -> CmdResult {
    write_atomic(out, &encode_checkpoint(&outcome.model, &ctx.cfg.to_text()))?;
    if let Some(t) = trace {
        write_atomic(t, trace_csv(&ctx.header(), &outcome.trace).as_bytes())?;
    }
    if let Some(last) = outcome.trace.last() {
        eprintln!("{} steps, final loss {:e}", outcome.trace.len(), last.loss);
    }
    if let Some(a) = outcome.abort {
        return Err(Failure {
            code: EXIT_NUMERIC,
            error: anyhow!("training aborted at step {}: {}; last good checkpoint written", a.step, a.reason),
        });
    }
    Ok(())
}

pub fn pretrain_cmd(ctx: &Ctx, data: &Path, out: &Path, trace: Option<&Path>) -> CmdResult {
    let ds = Dataset::load(data).map_err(Failure::data)?;
    let train = ds.train()?;
    let model = Model::new(ctx.cfg.model, &mut stream(ctx.cfg.seed, Stream::Init))?;
    let outcome = pretrain(model, &train, &ctx.cfg.noise, &ctx.cfg.train, ctx.pool)?;
    finish_training(ctx, outcome, out, trace)
}

pub fn load_model(ctx: &Ctx, path: &Path) -> CmdResult<(Model<f32>, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ck = decode_checkpoint(&bytes, Some(&ctx.cfg.model))?;
    Ok((ck.model, sha256_hex(&bytes)))
}

pub fn finetune_cmd(ctx: &Ctx, checkpoint: &Path, data: &Path, out: &Path, trace: Option<&Path>) -> CmdResult {
    let (model, _) = load_model(ctx, checkpoint)?;
    let ds = Dataset::load(data).map_err(Failure::data)?;
    let train = ds.train()?;
    let outcome = finetune_compensation(model, &train, &ctx.cfg.noise, &ctx.cfg.finetune, ctx.pool)?;
    finish_training(ctx, outcome, out, trace)
}

/// Plot-ready rows for predicted frames. Speeds continue from the history.
pub fn prediction_csv(header: &str, meta: &SampleMeta, history: &[Frame], pred: &Prediction) -> String {
    let cfg = &meta.cfg;
    let origin = meta.origin();
    let mut all = history.to_vec();
    all.extend(pred.frames.iter().cloned());
    let slots = cfg.max_slots;
    let speeds = speed_grid(&extract_trajectories(&all, cfg, origin), all.len(), slots);
    let mut s = String::from(header);
    let _ = writeln!(s, "# checkpoint = {}", pred.provenance);
    s.push_str("loop,frame_mark,slot,x_m,y_m,len_m,wid_m,present,speed_mps\n");
    for (k, f) in pred.frames.iter().enumerate() {
        for slot in 0..f.slots.len() {
            let m = denormalize(&f.slots[slot], cfg, origin);
            let speed = speeds[history.len() + k][slot].map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                pred.loops[k],
                f.mark,
                slot,
                m.x,
                m.y,
                m.len,
                m.wid,
                u8::from(f.present[slot]),
                speed
            );
        }
    }
    s
}

fn test_sample(ds: &Dataset, index: usize) -> CmdResult<Sample> {
    let test = ds.test()?;
    test.get(index)
        .cloned()
        .ok_or_else(|| Failure::data(anyhow!("test split has {} samples; index {index} out of range", test.len())))
}

pub fn rollout_cmd(ctx: &Ctx, checkpoint: &Path, data: &Path, index: usize, loops: usize, out: &Path) -> CmdResult {
    let (model, hash) = load_model(ctx, checkpoint)?;
    let ds = Dataset::load(data).map_err(Failure::data)?;
    let s = test_sample(&ds, index)?;
    let mut pred = rollout(&model, s.history(), loops, &ctx.cfg.presence)?;
    pred.provenance = hash;
    write_atomic(out, prediction_csv(&ctx.header(), &s.meta, s.history(), &pred).as_bytes())?;
    eprintln!("wrote {} predicted frames to {}", pred.frames.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Prediction,
    Compensation,
}

#[derive(Debug, Serialize)]
pub struct ReportFile<'a> {
    pub checkpoint_sha256: &'a str,
    pub dataset_sha256: &'a str,
    pub config: String,
    pub metrics: &'a MetricsReport,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into())
}

pub fn summary(r: &MetricsReport) -> String {
    format!(
        "task {}: {} samples, {} scored slots\n\
         rmse eq2 {:.6} (norm) {:.6} m | conventional {:.6} (norm) {:.6} m\n\
         mean IoU {:.4} | overlap rate {} (gt {}) | DCN {}\n\
         speed deviation mean {} m/s, p95 {} m/s over {} pairs\n",
        r.task,
        r.n_samples,
        r.n_scored,
        r.rmse_eq2_norm,
        r.rmse_eq2_m,
        r.rmse_conventional_norm,
        r.rmse_conventional_m,
        r.mean_iou,
        opt(r.overlap_rate),
        opt(r.gt_overlap_rate),
        r.dcn,
        opt(r.speed_dev_mean),
        opt(r.speed_dev_p95),
        r.n_speed_pairs
    )
}

fn report_csv(header: &str, ckpt: &str, data: &str, r: &MetricsReport) -> String {
    let mut s = String::from(header);
    let _ = writeln!(s, "# checkpoint_sha256 = {ckpt}\n# dataset_sha256 = {data}");
    s.push_str("metric,value\n");
    let rows: [(&str, String); 15] = [
        ("task", r.task.clone()),
        ("n_samples", r.n_samples.to_string()),
        ("n_scored", r.n_scored.to_string()),
        ("rmse_eq2_norm", format!("{:e}", r.rmse_eq2_norm)),
        ("rmse_eq2_m", format!("{:e}", r.rmse_eq2_m)),
        ("rmse_conventional_norm", format!("{:e}", r.rmse_conventional_norm)),
        ("rmse_conventional_m", format!("{:e}", r.rmse_conventional_m)),
        ("mean_iou", format!("{:e}", r.mean_iou)),
        ("overlap_rate", opt(r.overlap_rate)),
        ("gt_overlap_rate", opt(r.gt_overlap_rate)),
        ("dcn", r.dcn.to_string()),
        ("speed_dev_mean", opt(r.speed_dev_mean)),
        ("speed_dev_p95", opt(r.speed_dev_p95)),
        ("presence_eps_w", r.presence.eps_w.to_string()),
        ("presence_eps_h", r.presence.eps_h.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

pub fn evaluate_cmd(
    ctx: &Ctx,
    checkpoint: &Path,
    data: &Path,
    task: Task,
    out: &Path,
    csv: Option<&Path>,
) -> CmdResult<MetricsReport> {
    let (model, ckpt_hash) = load_model(ctx, checkpoint)?;
    let ds = Dataset::load(data).map_err(Failure::data)?;
    let mut test = ds.test()?;
    if ctx.cfg.eval_max_samples > 0 {
        test.truncate(ctx.cfg.eval_max_samples);
    }
    let rule = &ctx.cfg.presence;
    let (name, cases) = match task {
        Task::Prediction => ("prediction", prediction_cases(&model, &test, rule, ctx.pool)?),
        Task::Compensation => (
            "compensation",
            compensation_cases(&model, &test, rule, ctx.cfg.noise.lambda, ctx.cfg.seed, ctx.pool)?,
        ),
    };
    let report = evaluate_cases(name, &cases, rule, ctx.pool)?;
    let file = ReportFile {
        checkpoint_sha256: &ckpt_hash,
        dataset_sha256: &ds.hash,
        config: ctx.cfg.to_text(),
        metrics: &report,
    };
    let mut json = serde_json::to_vec_pretty(&file).map_err(Failure::data)?;
    json.push(b'\n');
    write_atomic(out, &json)?;
    if let Some(c) = csv {
        write_atomic(c, report_csv(&ctx.header(), &ckpt_hash, &ds.hash, &report).as_bytes())?;
    }
    print!("{}", summary(&report));
    Ok(report)
}

pub fn param_count_cmd(ctx: &Ctx) -> usize {
    param_count(&ctx.cfg.model)
}

/// Ground-truth CSV of the test split plus corrupted training samples with
/// their noise plans.
pub fn export(ctx: &Ctx, data: &Path, out_dir: &Path) -> CmdResult {
    let ds = Dataset::load(data).map_err(Failure::data)?;
    let mut gt = ctx.header();
    gt.push_str("sample,frame_mark,slot,x_m,y_m,len_m,wid_m,present\n");
    for s in ds.test()? {
        let origin = s.meta.origin();
        for f in &s.frames {
            for slot in 0..f.slots.len() {
                let m = denormalize(&f.slots[slot], &s.meta.cfg, origin);
                let _ = writeln!(
                    gt,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                    s.meta.key(),
                    f.mark,
                    slot,
                    m.x,
                    m.y,
                    m.len,
                    m.wid,
                    u8::from(f.present[slot])
                );
            }
        }
    }
    write_atomic(&out_dir.join("ground_truth.csv"), gt.as_bytes())?;

    let train = ds.train()?;
    let hist = ctx.cfg.domain.hist_len;
    let records: Vec<NoisedRecord> = train
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = substream(ctx.cfg.seed, Stream::Noise, i as u64);
            let (sample, plan) = corrupt(s, &ctx.cfg.noise, hist, &mut rng)?;
            Ok(NoisedRecord {
                key: s.meta.key(),
                plan,
                sample,
            })
        })
        .collect::<Result<_, trajformer_core::Error>>()?;
    write_atomic(&out_dir.join("noised.jsonl"), &to_jsonl(&records)?)?;
    eprintln!("exported {} test samples and {} noised training samples", ds.split.test.len(), records.len());
    Ok(())
}
