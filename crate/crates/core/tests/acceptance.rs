//! Acceptance checks, one PASS/FAIL line each.
//!
//! The trained matrix (5 variants x 3 seeds x 3000 steps) is cached under
//! `$S2UT_ACCEPTANCE_DIR` (default `target/tmp/acceptance-matrix`) and only
//! retrained when a run is missing or its artifacts fail their digests. The
//! matrix layout is the one `s2ut run-matrix --out <dir>` writes, so the cache
//! can be filled ahead of time by the CLI.
//!
//! Every criterion prints PASS or FAIL. Only code contracts decide the exit
//! status; properties of trained models (the three trends and beam scores
//! versus greedy) are reported without failing the target.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2ut_core::analysis::{
    entropy, entropy_delta_from_values, first_occurrence_stat, median, summarize, RunDumps, ShiftReport,
    BASELINE_VARIANT,
};
use s2ut_core::autodiff::{CtcTarget, Graph, Segment, Tensor};
use s2ut_core::data::{generate_dataset, read_dataset, write_dataset, Sample, TaskSpec, TASK_FILE};
use s2ut_core::decoding::{beam_search, greedy_decode, DecodeMode, DecodeOptions, ModelScorer};
use s2ut_core::experiment::{eval_run, latest_checkpoint, load_run, matrix_run_dir, run_is_complete, train_run};
use s2ut_core::gradsuite::{run_grad_suite, SuiteConfig};
use s2ut_core::losses::{left_shift_packed, mtp_loss, ntp_loss, MtpProbe};
use s2ut_core::model::{Batch, DecoderTrace, EncoderOutput, ModelConfig, MtpVariant, S2utModel};
use s2ut_core::tokens::unit;
use s2ut_core::training::{checkpoint_path, run_training, RunConfig, Trainer, FINAL_CHECKPOINT};

const SEEDS: [u64; 3] = [1, 2, 3];
const STEPS: usize = 3000;
const GRAD_BUDGET_SECS: f64 = 120.0;
const CTC_TOL: f64 = 1e-9;
const REDUCTION_TOL: f64 = 1e-12;
const MTP_SLACK_BLEU: f64 = 0.5;
const SCORE_TOL: f64 = 1e-9;

struct Outcome {
    id: usize,
    pass: bool,
    /// Failure of a code contract rather than of a trained-model property.
    blocking: bool,
}

/// `Err((detail, blocking))` on failure.
type Check = Result<String, (String, bool)>;

fn contract(r: Result<String, String>) -> Check {
    r.map_err(|d| (d, true))
}

fn empirical(r: Result<String, String>) -> Check {
    r.map_err(|d| (d, false))
}

fn report(id: usize, name: &'static str, r: Check) -> Outcome {
    let (pass, blocking, detail) = match r {
        Ok(d) => (true, false, d),
        Err((d, b)) => (false, b, d),
    };
    let o = Outcome { id, pass, blocking };
    println!(
        "{} [{}] {}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        name,
        detail
    );
    o
}

fn check(cond: bool, detail: String) -> Result<String, String> {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Result<String, String> {
    let cfg = SuiteConfig::default();
    let r = run_grad_suite(&cfg).map_err(|e| e.to_string())?;
    let secs = r.elapsed.as_secs_f64();
    let min_seeds = r.cases.iter().map(|c| c.seeds).min().unwrap_or(0);
    let failed: Vec<&str> = r
        .cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    let detail = format!(
        "{} cases x {} seeds, max rel err {:.2e} (tol {:.0e}, eps {:.0e}), {:.1}s",
        r.cases.len(),
        min_seeds,
        r.max_rel_error(),
        cfg.tol,
        cfg.eps,
        secs
    );
    let ok = failed.is_empty() && min_seeds >= 20 && cfg.eps == 1e-3 && cfg.tol <= 1e-5 && secs < GRAD_BUDGET_SECS;
    check(
        ok,
        if failed.is_empty() {
            detail
        } else {
            format!("{detail}; failing {failed:?}")
        },
    )
}

// ---------------------------------------------------------------------- ctc

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

fn brute_force(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let (frames, classes) = (probs.len(), probs[0].len());
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    for code in 0..classes.pow(frames as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % classes;
            c /= classes;
        }
        if collapse(&path) == labels {
            total += path.iter().enumerate().map(|(t, &k)| probs[t][k]).product::<f64>();
        }
    }
    total
}

fn ctc_dp(logp: Vec<Vec<f64>>, labels: &[usize]) -> Result<f64, String> {
    let mut g = Graph::new();
    let frames = logp.len();
    let x = g.constant(Tensor::from_rows(&logp).map_err(|e| e.to_string())?);
    let target = CtcTarget {
        frames: Segment::new(0, frames),
        labels: labels.to_vec(),
    };
    let (l, stats) = g.ctc(x, &[target], 0).map_err(|e| e.to_string())?;
    Ok(if stats.infeasible > 0 {
        f64::INFINITY
    } else {
        g.scalar(l)
    })
}

fn ctc_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut cases, mut worst) = (0usize, 0.0f64);
    for frames in 1..=5usize {
        for classes in 2..=4usize {
            for len in 0..=3u32 {
                for code in 0..(classes - 1).pow(len) {
                    let mut c = code;
                    let labels: Vec<usize> = (0..len)
                        .map(|_| {
                            let l = 1 + c % (classes - 1);
                            c /= classes - 1;
                            l
                        })
                        .collect();
                    let probs: Vec<Vec<f64>> = (0..frames)
                        .map(|_| {
                            let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
                            let s: f64 = raw.iter().sum();
                            raw.iter().map(|x| x / s).collect()
                        })
                        .collect();
                    let p = brute_force(&probs, &labels);
                    let dp = ctc_dp(
                        probs.iter().map(|r| r.iter().map(|x| x.ln()).collect()).collect(),
                        &labels,
                    )?;
                    let err = if p == 0.0 {
                        if dp.is_infinite() {
                            0.0
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        (dp + p.ln()).abs()
                    };
                    worst = worst.max(err);
                    cases += 1;
                }
            }
        }
    }
    let uniform = ctc_dp(vec![vec![-(3f64.ln()); 3]; 3], &[1, 2])?;
    let target = -(5.0f64 / 27.0).ln();
    check(
        worst <= CTC_TOL && (uniform - target).abs() <= 1e-12 && (uniform - 1.686399).abs() < 1e-6,
        format!(
            "{cases} cases, max |dp - brute| {worst:.1e} (tol {CTC_TOL:.0e}); uniform T=3 \"ab\" = {uniform:.6} vs -ln(5/27) = {target:.6}"
        ),
    )
}

// -------------------------------------------------------------- objectives

fn tiny(variant: MtpVariant, n: usize) -> ModelConfig {
    ModelConfig {
        feat_dim: 3,
        enc_layers: 2,
        enc_dim: 8,
        dec_layers: 3,
        dec_dim: 8,
        heads: 2,
        unit_vocab: 11,
        text_vocab: 7,
        mtp_variant: variant,
        mtp_n: n,
        ctc_layer: 2,
        aux_enc_taps: vec![1, 2],
        ..ModelConfig::default()
    }
}

fn sample(id: u64, src_len: usize, y: &[usize], units: &[usize]) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(id + 100);
    Sample {
        id,
        src_tokens: y.to_vec(),
        src_feats: (0..src_len)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
        x_text: y.iter().rev().copied().collect(),
        y_text: y.to_vec(),
        units: units.to_vec(),
    }
}

fn toy_batch() -> Batch {
    let a = sample(0, 4, &[0, 2], &[3, 4, 9, unit::EOS]);
    let b = sample(1, 3, &[1], &[6, 7, 8, 6, 5, unit::EOS]);
    let c = sample(2, 2, &[2, 2], &[9, 10, 9, unit::EOS]);
    Batch::from_samples(&[&a, &b, &c]).expect("toy batch")
}

struct Fwd<'p> {
    g: Graph<'p>,
    enc: EncoderOutput,
    trace: DecoderTrace,
}

fn forward<'p>(model: &'p S2utModel, batch: &Batch) -> Fwd<'p> {
    let mut g = Graph::with_params(model.params());
    let feats = g.constant(batch.src_feats.clone());
    let enc = model.encode(&mut g, feats, &batch.src_segs).expect("encode");
    let dec_in = batch.decoder_inputs().expect("decoder inputs");
    let trace = model
        .decode_trace(&mut g, &enc, &dec_in, &batch.tgt_segs)
        .expect("decode");
    Fwd { g, enc, trace }
}

fn mtp_terms(model: &S2utModel, batch: &Batch, probe: &MtpProbe) -> (f64, Vec<f64>) {
    let mut f = forward(model, batch);
    let out = mtp_loss(&mut f.g, model, &f.enc, &f.trace, &batch.units, probe).expect("mtp loss");
    (
        f.g.scalar(out.total),
        out.terms.iter().map(|&t| f.g.scalar(t)).collect(),
    )
}

/// Mean of `-logp[t, u[t + k]]` over real target positions, from raw values.
fn shifted_nll_oracle(logp: &Tensor, batch: &Batch, k: usize) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..batch.len() {
        let u = batch.target(i);
        let off = batch.tgt_segs[i].offset;
        for t in 0..u.len() {
            if let Some(&target) = u.get(t + k) {
                if target != unit::PAD {
                    sum -= logp.row(off + t)[target];
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn reductions() -> Result<String, String> {
    let batch = toy_batch();
    let mut worst = 0.0f64;
    for v in MtpVariant::ALL.into_iter().filter(|&v| v != MtpVariant::None) {
        let model = S2utModel::new(tiny(v, 1), 5).map_err(|e| e.to_string())?;
        let (total, _) = mtp_terms(&model, &batch, &MtpProbe::default());
        let mut f = forward(&model, &batch);
        let k0 = if v == MtpVariant::S2ut {
            let lp = model
                .sibling_head_log_probs(&mut f.g, &f.enc, &f.trace, 0)
                .map_err(|e| e.to_string())?;
            shifted_nll_oracle(f.g.value(lp), &batch, 0)
        } else {
            let l = ntp_loss(&mut f.g, &model, &f.trace, &batch.units).map_err(|e| e.to_string())?;
            f.g.scalar(l)
        };
        worst = worst.max((total - k0).abs());
    }
    let n = 4;
    let model = S2utModel::new(tiny(MtpVariant::ParallelLinear, n), 8).map_err(|e| e.to_string())?;
    let (total, _) = mtp_terms(&model, &batch, &MtpProbe::default());
    let mut f = forward(&model, &batch);
    let mut sum = 0.0;
    for k in 0..n {
        let lp = model
            .sibling_head_log_probs(&mut f.g, &f.enc, &f.trace, k)
            .map_err(|e| e.to_string())?;
        sum += shifted_nll_oracle(f.g.value(lp), &batch, k);
    }
    let pl_err = (total - sum).abs();
    check(
        worst <= REDUCTION_TOL && pl_err <= REDUCTION_TOL,
        format!("N=1 vs k=0 path max err {worst:.1e}; parallel-linear N={n} vs sum of shifted NTP err {pl_err:.1e} (tol {REDUCTION_TOL:.0e})"),
    )
}

fn changed(a: f64, b: f64) -> bool {
    (a - b).abs() > 1e-9
}

fn structural() -> Result<String, String> {
    let batch = toy_batch();
    let n = 4;
    let mut notes = Vec::new();

    // DeepSeek-V3: replacing the teacher tokens fed to head k moves terms >= k only.
    let model = S2utModel::new(tiny(MtpVariant::DeepseekV3, n), 12).map_err(|e| e.to_string())?;
    let (_, base) = mtp_terms(&model, &batch, &MtpProbe::default());
    for k in 1..n {
        let mut tokens = left_shift_packed(&batch.units, &batch.tgt_segs, k - 1)
            .map_err(|e| e.to_string())?
            .0;
        for t in tokens.iter_mut().filter(|t| **t != unit::PAD) {
            *t = if *t == 5 { 6 } else { 5 };
        }
        let probe = MtpProbe {
            teacher_override: Some((k, tokens)),
            ..MtpProbe::default()
        };
        let (_, terms) = mtp_terms(&model, &batch, &probe);
        for j in 0..n {
            if changed(terms[j], base[j]) != (j >= k) {
                return Err(format!("deepseek: teacher input {k} vs term {j}"));
            }
        }
    }
    notes.push("deepseek teacher inputs reach terms >= k only");

    // VocalNet: the embedding table gradient equals what flows in through the
    // main decoder input; the heads add nothing. DeepSeek-V3 is the control.
    let inputs = batch.decoder_inputs().map_err(|e| e.to_string())?;
    let mut gaps = Vec::new();
    for v in [MtpVariant::Vocalnet, MtpVariant::DeepseekV3] {
        let model = S2utModel::new(tiny(v, 3), 13).map_err(|e| e.to_string())?;
        let mut f = forward(&model, &batch);
        let out = mtp_loss(&mut f.g, &model, &f.enc, &f.trace, &batch.units, &MtpProbe::default())
            .map_err(|e| e.to_string())?;
        f.g.backward(out.total).map_err(|e| e.to_string())?;
        let id = model.params().get("dec.unit_embedding").ok_or("no embedding table")?;
        let table = f.g.param_grad(id).ok_or("no embedding gradient")?.to_vec();
        let gx = f.g.grad(f.trace.layer(0)).ok_or("no decoder input gradient")?;
        let d = model.config().dec_dim;
        let mut via_input = vec![0.0; table.len()];
        for (t, &tok) in inputs.iter().enumerate() {
            for j in 0..d {
                via_input[tok * d + j] += gx[t * d + j];
            }
        }
        gaps.push(
            table
                .iter()
                .zip(&via_input)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    if !(gaps[0] < 1e-12 && gaps[1] > 1e-6) {
        return Err(format!(
            "vocalnet embedding gap {:.1e}, deepseek control {:.1e}",
            gaps[0], gaps[1]
        ));
    }
    notes.push("vocalnet heads send no embedding gradient");

    // MTP-S2UT: zeroing head j changes term j alone.
    let model = S2utModel::new(tiny(MtpVariant::S2ut, n), 15).map_err(|e| e.to_string())?;
    let (_, base) = mtp_terms(&model, &batch, &MtpProbe::default());
    for j in 0..n {
        let mut zeroed = model.clone();
        let prefix = format!("mtp.head{j}.");
        let ids: Vec<_> = zeroed
            .params()
            .ids()
            .filter(|&id| zeroed.params().name(id).starts_with(&prefix))
            .collect();
        if ids.is_empty() {
            return Err(format!("no parameters under {prefix}"));
        }
        for id in ids {
            zeroed.params_mut().tensor_mut(id).data_mut().fill(0.0);
        }
        let (_, terms) = mtp_terms(&zeroed, &batch, &MtpProbe::default());
        for k in 0..n {
            if changed(terms[k], base[k]) != (k == j) {
                return Err(format!("s2ut: zeroed head {j} moved term {k}"));
            }
        }
    }
    notes.push("s2ut heads independent");
    Ok(notes.join("; "))
}

// ------------------------------------------------------------------- matrix

struct Matrix {
    dir: PathBuf,
    data: PathBuf,
    spec: TaskSpec,
    runs: Vec<RunDumps>,
}

fn matrix_dir() -> PathBuf {
    std::env::var_os("S2UT_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-matrix"))
}

fn run_config(spec: &TaskSpec, variant: MtpVariant, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.mtp_variant = variant;
    cfg.model.feat_dim = spec.feat_dim;
    cfg.model.unit_vocab = spec.unit_vocab();
    cfg.model.text_vocab = spec.text_vocab();
    cfg.train.seed = seed;
    cfg.train.steps = STEPS;
    cfg
}

fn eval_options(spec: &TaskSpec) -> DecodeOptions {
    DecodeOptions {
        max_len: spec.max_decode_len(),
        length_norm: false,
        keep_distributions: false,
    }
}

fn build_matrix() -> s2ut_core::Result<Matrix> {
    let dir = matrix_dir();
    let data = dir.join("data");
    if !data.join(TASK_FILE).exists() {
        write_dataset(&data, &generate_dataset(&TaskSpec::default())?)?;
    }
    let spec = read_dataset(&data)?.spec;
    if spec != TaskSpec::default() {
        return Err(s2ut_core::Error::Config(format!(
            "{} is not the default task",
            data.display()
        )));
    }
    let mut runs = Vec::new();
    for variant in MtpVariant::ALL {
        for seed in SEEDS {
            let run = matrix_run_dir(&dir, variant, seed);
            let cfg = run_config(&spec, variant, seed);
            if !run_is_complete(&run, &cfg) {
                eprintln!("training {}", run.display());
                let t = Instant::now();
                train_run(&data, &run, cfg, true)?;
                eval_run(&run, &data, "test", &DecodeMode::STANDARD, &eval_options(&spec))?;
                eprintln!("  {:.0}s", t.elapsed().as_secs_f64());
            }
            runs.push(load_run(&run)?);
        }
    }
    Ok(Matrix { dir, data, spec, runs })
}

fn bleu_trend(m: &Matrix) -> Result<String, String> {
    let s = summarize(&m.runs).map_err(|e| e.to_string())?;
    let col = s.mode_index("greedy").ok_or("no greedy column")?;
    let mean = |v: &str| {
        s.variant(v)
            .and_then(|x| x.bleu[col])
            .ok_or(format!("no greedy BLEU for {v}"))
    };
    let base = mean(BASELINE_VARIANT)?;
    let mut parts = vec![format!("none {base:.2}")];
    let mut ok = true;
    for v in MtpVariant::ALL.into_iter().skip(1) {
        let b = mean(v.as_str())?;
        ok &= b >= base - MTP_SLACK_BLEU;
        if v == MtpVariant::S2ut {
            ok &= b > base;
        }
        parts.push(format!("{v} {b:.2}"));
    }
    check(ok, format!("3-seed mean greedy BLEU: {}", parts.join(", ")))
}

fn shift_trend(m: &Matrix) -> Result<String, String> {
    let fig = first_occurrence_stat(&[5, 0, 0, 0, 6, 0, 0, 0], 0).ok_or("no first occurrences")?;
    let unit_ok = fig.positions.len() == 2
        && (fig.positions[0].1 - 0.125).abs() < 1e-12
        && (fig.positions[1].1 - 0.625).abs() < 1e-12;
    let s = summarize(&m.runs).map_err(|e| e.to_string())?;
    let get = |v: &str| s.variant(v).and_then(|x| x.shift).ok_or(format!("no shift for {v}"));
    let (base, s2ut) = (get(BASELINE_VARIANT)?, get("s2ut")?);
    let mut per_seed = Vec::new();
    for r in m
        .runs
        .iter()
        .filter(|r| r.variant == "s2ut" || r.variant == BASELINE_VARIANT)
    {
        let sr: ShiftReport = r.shift().map_err(|e| e.to_string())?.ok_or("no greedy dump")?;
        per_seed.push(format!("{}_s{} {:.4}", r.variant, r.seed, sr.statistic(false)));
    }
    check(
        unit_ok && s2ut < base,
        format!(
            "example labels give {:.3}/{:.3}; 3-seed mean s2ut {s2ut:.4} vs none {base:.4} ({})",
            fig.positions[0].1,
            fig.positions.get(1).map_or(f64::NAN, |p| p.1),
            per_seed.join(", ")
        ),
    )
}

fn entropy_trend(m: &Matrix) -> Result<String, String> {
    let e = |d: &[f64]| entropy(d).map_err(|e| e.to_string());
    let unit_ok = (e(&[0.25; 4])? - 4f64.ln()).abs() < 1e-12
        && e(&[0.0, 1.0, 0.0, 0.0])? == 0.0
        && (e(&[0.5, 0.5])? - 2f64.ln()).abs() < 1e-12;
    let s = summarize(&m.runs).map_err(|e| e.to_string())?;
    let pooled = |v: &str| {
        s.variant(v)
            .map(|x| x.entropies.clone())
            .ok_or(format!("no entropies for {v}"))
    };
    let (base, s2ut) = (pooled(BASELINE_VARIANT)?, pooled("s2ut")?);
    let med = median(&base).ok_or("empty baseline")?;
    let delta = entropy_delta_from_values(&s2ut, &base, (s.unit_vocab as f64).ln()).map_err(|e| e.to_string())?;
    let (below, above) = delta.mass_split(med);
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    check(
        unit_ok && below > 0.0 && above < 0.0,
        format!(
            "baseline median {med:.3} nats; delta mass below {below:+.4}, above {above:+.4}; mean entropy s2ut {:.3} vs none {:.3} over {}/{} predictions",
            mean(&s2ut),
            mean(&base),
            s2ut.len(),
            base.len()
        ),
    )
}

fn decoding_contracts(m: &Matrix) -> Check {
    let fatal = |e: String| (e, true);
    let test = read_dataset(&m.data).map_err(|e| fatal(e.to_string()))?.test;
    let max_len = m.spec.max_decode_len();
    let mut compared = 0;
    for variant in [MtpVariant::None, MtpVariant::S2ut] {
        let run = matrix_run_dir(&m.dir, variant, SEEDS[0]);
        let model = Trainer::load(&run.join(FINAL_CHECKPOINT))
            .map_err(|e| fatal(e.to_string()))?
            .into_model();
        for s in &test {
            let scorer = ModelScorer::new(&model, s).map_err(|e| fatal(e.to_string()))?;
            let g = greedy_decode(&scorer, max_len)
                .map_err(|e| fatal(e.to_string()))?
                .hypothesis;
            let b = beam_search(&scorer, 1, max_len, false).map_err(|e| fatal(e.to_string()))?;
            if b.tokens != g.tokens || b.logprob.to_bits() != g.logprob.to_bits() {
                return Err(fatal(format!("{variant} sample {}: beam1 differs from greedy", s.id)));
            }
            compared += 1;
        }
    }
    let (mut pairs, mut violations, mut worst) = (0usize, Vec::new(), 0.0f64);
    for r in &m.runs {
        let greedy = r.records("greedy").ok_or_else(|| fatal("no greedy dump".into()))?;
        for mode in ["beam5", "beam10"] {
            let beam = r.records(mode).ok_or_else(|| fatal(format!("no {mode} dump")))?;
            for (g, b) in greedy.iter().zip(beam) {
                pairs += 1;
                let gap = g.logprob - b.logprob;
                if gap > SCORE_TOL {
                    worst = worst.max(gap);
                    violations.push(format!("{}_s{} {mode} #{}", r.variant, r.seed, g.id));
                }
            }
        }
    }
    // beam search may prune the greedy path, so this half is a property of the
    // trained model, not a code contract
    empirical(check(
        violations.is_empty(),
        format!(
            "beam1 == greedy on {compared} decodes; beam score >= greedy on {}/{pairs} pairs{}",
            pairs - violations.len(),
            if violations.is_empty() {
                String::new()
            } else {
                format!(
                    " (worst deficit {worst:.3}, e.g. {})",
                    violations[..violations.len().min(3)].join(", ")
                )
            }
        ),
    ))
}

fn reproducibility(m: &Matrix) -> Result<String, String> {
    let err = |e: s2ut_core::Error| e.to_string();
    let reference = matrix_run_dir(&m.dir, MtpVariant::S2ut, SEEDS[0]);
    let cfg = run_config(&m.spec, MtpVariant::S2ut, SEEDS[0]);
    let expected = std::fs::read(reference.join(FINAL_CHECKPOINT)).map_err(|e| e.to_string())?;
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;

    let fresh = scratch.path().join("fresh");
    train_run(&m.data, &fresh, cfg.clone(), false).map_err(err)?;
    let same_fresh = std::fs::read(fresh.join(FINAL_CHECKPOINT)).map_err(|e| e.to_string())? == expected;

    let mid = cfg.train.checkpoint_every;
    let resumed = scratch.path().join("resumed");
    let mut t = Trainer::load(&checkpoint_path(&reference, mid)).map_err(err)?;
    let data = read_dataset(&m.data).map_err(err)?;
    run_training(&mut t, &data.train, &resumed).map_err(err)?;
    let same_resumed = std::fs::read(resumed.join(FINAL_CHECKPOINT)).map_err(|e| e.to_string())? == expected;

    let newest = latest_checkpoint(&reference).map_err(err)?.is_some();
    check(
        same_fresh && same_resumed && newest,
        format!(
            "s2ut seed {}: fresh retrain {} cached checkpoint; resume from step {mid} {}",
            SEEDS[0],
            if same_fresh { "bit-identical to" } else { "DIFFERS from" },
            if same_resumed { "bit-identical" } else { "DIFFERS" }
        ),
    )
}

fn main() {
    // libtest flags (--nocapture, filters) are accepted and ignored.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut out = vec![
        report(1, "gradient suite", contract(gradient_suite())),
        report(2, "ctc oracle", contract(ctc_oracle())),
        report(3, "reduction identities", contract(reductions())),
        report(4, "structural contrasts", contract(structural())),
    ];
    match build_matrix() {
        Ok(m) => {
            out.push(report(5, "bleu trend", empirical(bleu_trend(&m))));
            out.push(report(6, "forward-shift trend", empirical(shift_trend(&m))));
            out.push(report(7, "entropy trend", empirical(entropy_trend(&m))));
            out.push(report(8, "decoding contracts", decoding_contracts(&m)));
            out.push(report(9, "reproducibility", contract(reproducibility(&m))));
        }
        Err(e) => {
            for (id, name) in [
                (5, "bleu trend"),
                (6, "forward-shift trend"),
                (7, "entropy trend"),
                (8, "decoding contracts"),
                (9, "reproducibility"),
            ] {
                out.push(report(id, name, Err((format!("matrix unavailable: {e}"), true))));
            }
        }
    }
    let passed = out.iter().filter(|o| o.pass).count();
    let failed = |blocking: bool| -> Vec<usize> {
        out.iter()
            .filter(|o| !o.pass && o.blocking == blocking)
            .map(|o| o.id)
            .collect()
    };
    let contract_failures = failed(true);
    println!(
        "acceptance: {passed}/{} passed in {:.0}s; contract failures {:?}; model-property failures {:?}",
        out.len(),
        start.elapsed().as_secs_f64(),
        contract_failures,
        failed(false)
    );
    if !contract_failures.is_empty() {
        std::process::exit(1);
    }
}
