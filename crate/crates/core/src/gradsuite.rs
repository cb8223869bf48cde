//! Finite-difference gradient checks over every differentiable primitive and
//! every training objective, repeated across random seeds.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_params, CtcTarget, Graph, InputCheck, ParamId, Segment, Tensor, Var};
use crate::data::Sample;
use crate::error::Result;
use crate::losses::{aux_text_loss, ctc_loss, mtp_loss, ntp_loss, MtpProbe};
use crate::model::{Batch, ModelConfig, MtpVariant, S2utModel};
use crate::tokens::unit;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seeds: u64,
    pub eps: f64,
    pub tol: f64,
    /// Coordinates probed per model parameter tensor.
    pub coords_per_param: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            eps: 1e-3,
            tol: 1e-5,
            coords_per_param: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub failed_seeds: Vec<u64>,
    /// Input or parameter holding the largest error, with its seed.
    pub worst: String,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failed_seeds.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub tol: f64,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Nonlinear scalar readout so every output coordinate carries a distinct gradient.
fn readout(g: &mut Graph<'_>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
    let r = g.constant(rand_tensor(rng, &[cols, 3]));
    let y = g.matmul(x, r)?;
    let lp = g.log_softmax_rows(y);
    let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..3)).collect();
    g.nll(lp, &targets, &vec![true; rows])
}

fn worst_input(inputs: &[InputCheck]) -> Option<&InputCheck> {
    inputs.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
}

type PrimitiveFn = fn(&mut Graph<'_>, &[Var], u64) -> Result<Var>;

struct Primitive {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    f: PrimitiveFn,
}

fn head_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9)
}

const PRIMITIVES: &[Primitive] = &[
    Primitive {
        name: "matmul",
        shapes: &[&[3, 4], &[4, 5]],
        f: |g, v, s| {
            let y = g.matmul(v[0], v[1])?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "add_bias",
        shapes: &[&[3, 4], &[4]],
        f: |g, v, s| {
            let y = g.add_bias(v[0], v[1])?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "add",
        shapes: &[&[3, 4], &[3, 4]],
        f: |g, v, s| {
            let y = g.add(v[0], v[1])?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "scale",
        shapes: &[&[3, 4]],
        f: |g, v, s| {
            let y = g.scale(v[0], -0.7);
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "relu",
        shapes: &[&[3, 4]],
        f: |g, v, s| {
            let y = g.relu(v[0]);
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "silu",
        shapes: &[&[3, 4]],
        f: |g, v, s| {
            let y = g.silu(v[0]);
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "softmax_rows",
        shapes: &[&[3, 5]],
        f: |g, v, s| {
            let y = g.softmax_rows(v[0]);
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "log_softmax_rows",
        shapes: &[&[3, 5]],
        f: |g, v, s| {
            let y = g.log_softmax_rows(v[0]);
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "layer_norm",
        shapes: &[&[4, 8], &[8], &[8]],
        f: |g, v, s| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "embedding",
        shapes: &[&[6, 4]],
        f: |g, v, s| {
            let y = g.embedding(v[0], &[2, 0, 5, 2])?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "nll",
        shapes: &[&[4, 5]],
        f: |g, v, _| g.nll(v[0], &[1, 4, 0, 2], &[true, false, true, true]),
    },
    Primitive {
        name: "sum",
        shapes: &[&[3, 3]],
        f: |g, v, _| {
            let y = g.matmul(v[0], v[0])?;
            Ok(g.sum(y))
        },
    },
    Primitive {
        name: "concat_cols",
        shapes: &[&[3, 2], &[3, 3]],
        f: |g, v, s| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "concat_rows",
        shapes: &[&[2, 3], &[3, 3]],
        f: |g, v, s| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "gather_rows",
        shapes: &[&[4, 3]],
        f: |g, v, s| {
            let y = g.gather_rows(v[0], &[3, 1, 1, 0])?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "attention",
        shapes: &[&[5, 4], &[5, 4], &[5, 4]],
        f: |g, v, s| {
            let segs = Segment::pack(&[3, 2]);
            let y = g.attention(v[0], v[1], v[2], &segs, &segs, 2, false)?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "attention_causal",
        shapes: &[&[5, 4], &[5, 4], &[5, 4]],
        f: |g, v, s| {
            let segs = Segment::pack(&[3, 2]);
            let y = g.attention(v[0], v[1], v[2], &segs, &segs, 2, true)?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "cross_attention",
        shapes: &[&[3, 4], &[6, 4], &[6, 4]],
        f: |g, v, s| {
            let q = Segment::pack(&[2, 1]);
            let k = Segment::pack(&[4, 2]);
            let y = g.attention(v[0], v[1], v[2], &q, &k, 2, false)?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "depthwise_conv",
        shapes: &[&[5, 3], &[3, 3], &[3]],
        f: |g, v, s| {
            let segs = Segment::pack(&[2, 3]);
            let y = g.depthwise_conv(v[0], v[1], v[2], &segs)?;
            readout(g, y, &mut head_rng(s))
        },
    },
    Primitive {
        name: "ctc",
        shapes: &[&[7, 4]],
        f: |g, v, _| {
            let targets = [
                CtcTarget {
                    frames: Segment::new(0, 4),
                    labels: vec![1, 1],
                },
                CtcTarget {
                    frames: Segment::new(4, 3),
                    labels: vec![2, 3],
                },
            ];
            let lp = g.log_softmax_rows(v[0]);
            Ok(g.ctc(lp, &targets, 0)?.0)
        },
    },
];

/// Keeps relu inputs away from the kink so central differences stay on one side.
const KINK_MARGIN: f64 = 1e-2;

fn primitive_inputs(p: &Primitive, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Tensor> = p.shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    if p.name == "relu" {
        for x in inputs[0].data_mut() {
            if x.abs() < KINK_MARGIN {
                *x = KINK_MARGIN.copysign(*x);
            }
        }
    }
    inputs
}

fn check_primitive(p: &Primitive, cfg: &SuiteConfig) -> Result<CaseResult> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let mut worst_at = String::new();
    for seed in 0..cfg.seeds {
        let inputs = primitive_inputs(p, seed);
        let report = grad_check(|g, v| (p.f)(g, v, seed), &inputs, cfg.eps, cfg.tol)?;
        if let Some(c) = worst_input(&report.inputs) {
            if c.max_rel_error > worst {
                worst = c.max_rel_error;
                worst_at = format!("input {} coord {} seed {seed}", c.input, c.worst_coord);
            }
        }
        if !report.passed() {
            failed.push(seed);
        }
    }
    Ok(CaseResult {
        name: p.name.to_string(),
        seeds: cfg.seeds,
        max_rel_error: worst,
        failed_seeds: failed,
        worst: worst_at,
        elapsed: start.elapsed(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    Ntp,
    Mtp(MtpVariant),
    Ctc,
    AuxSrc,
    AuxTgt,
}

impl Objective {
    fn name(self) -> String {
        match self {
            Objective::Ntp => "loss_ntp".into(),
            Objective::Mtp(v) => format!("loss_mtp_{v}"),
            Objective::Ctc => "loss_ctc".into(),
            Objective::AuxSrc => "loss_aux_src".into(),
            Objective::AuxTgt => "loss_aux_tgt".into(),
        }
    }

    fn variant(self) -> MtpVariant {
        match self {
            Objective::Mtp(v) => v,
            _ => MtpVariant::None,
        }
    }
}

const OBJECTIVES: [Objective; 8] = [
    Objective::Ntp,
    Objective::Mtp(MtpVariant::ParallelLinear),
    Objective::Mtp(MtpVariant::DeepseekV3),
    Objective::Mtp(MtpVariant::Vocalnet),
    Objective::Mtp(MtpVariant::S2ut),
    Objective::Ctc,
    Objective::AuxSrc,
    Objective::AuxTgt,
];

fn suite_model_config(variant: MtpVariant) -> ModelConfig {
    ModelConfig {
        feat_dim: 3,
        enc_layers: 2,
        enc_dim: 24,
        dec_layers: 3,
        dec_dim: 24,
        heads: 2,
        unit_vocab: 11,
        text_vocab: 7,
        mtp_variant: variant,
        mtp_n: 3,
        ctc_layer: 2,
        aux_enc_taps: vec![1, 2],
        ..ModelConfig::default()
    }
}

/// Two random samples whose targets always admit a CTC alignment.
fn suite_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let n_semantic = cfg.text_vocab - crate::tokens::text::RESERVED;
    let samples: Vec<Sample> = (0..2)
        .map(|id| {
            let y: Vec<usize> = (0..rng.gen_range(1..=2))
                .map(|_| rng.gen_range(0..n_semantic))
                .collect();
            let x: Vec<usize> = (0..rng.gen_range(1..=2))
                .map(|_| rng.gen_range(0..n_semantic))
                .collect();
            let mut units: Vec<usize> = (0..rng.gen_range(4..=5))
                .map(|_| rng.gen_range(unit::FIRST..cfg.unit_vocab))
                .collect();
            units.push(unit::EOS);
            let src_len = rng.gen_range(2..=4);
            Sample {
                id,
                src_tokens: x.clone(),
                src_feats: (0..src_len)
                    .map(|_| (0..cfg.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
                x_text: x,
                y_text: y,
                units,
            }
        })
        .collect();
    Batch::from_samples(&samples.iter().collect::<Vec<_>>())
}

fn objective_value(g: &mut Graph<'_>, model: &S2utModel, batch: &Batch, obj: Objective) -> Result<Var> {
    let feats = g.constant(batch.src_feats.clone());
    let enc = model.encode(g, feats, &batch.src_segs)?;
    let taps = &model.config().aux_enc_taps;
    match obj {
        Objective::AuxSrc => return aux_text_loss(g, model, &enc, taps[0], &batch.x_text),
        Objective::AuxTgt => return aux_text_loss(g, model, &enc, taps[1], &batch.y_text),
        _ => {}
    }
    let dec_in = batch.decoder_inputs()?;
    let trace = model.decode_trace(g, &enc, &dec_in, &batch.tgt_segs)?;
    match obj {
        Objective::Ntp => ntp_loss(g, model, &trace, &batch.units),
        Objective::Mtp(_) => Ok(mtp_loss(g, model, &enc, &trace, &batch.units, &MtpProbe::default())?.total),
        Objective::Ctc => Ok(ctc_loss(g, model, &trace, &batch.units, &batch.y_text)?.0),
        Objective::AuxSrc | Objective::AuxTgt => unreachable!("handled before decoding"),
    }
}

/// Parameters the objective reads: analytic gradient nonzero somewhere.
fn touched_params(model: &S2utModel, batch: &Batch, obj: Objective) -> Result<Vec<ParamId>> {
    let mut g = Graph::with_params(model.params());
    let loss = objective_value(&mut g, model, batch, obj)?;
    g.backward(loss)?;
    Ok(model
        .params()
        .ids()
        .filter(|&id| g.param_grad(id).is_some_and(|d| d.iter().any(|&x| x != 0.0)))
        .collect())
}

fn check_objective(obj: Objective, cfg: &SuiteConfig) -> Result<CaseResult> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let mut worst_at = String::new();
    for seed in 0..cfg.seeds {
        let model = S2utModel::new(suite_model_config(obj.variant()), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
        let batch = suite_batch(model.config(), &mut rng)?;
        let ids = touched_params(&model, &batch, obj)?;
        let report = grad_check_params(
            model.params(),
            &ids,
            |g| objective_value(g, &model, &batch, obj),
            cfg.eps,
            cfg.tol,
            Some(cfg.coords_per_param),
        )?;
        if let Some(c) = worst_input(&report.inputs) {
            if c.max_rel_error > worst {
                worst = c.max_rel_error;
                let name = model.params().name(ids[c.input]);
                worst_at = format!("{name} coord {} seed {seed}", c.worst_coord);
            }
        }
        if !report.passed() {
            failed.push(seed);
        }
    }
    Ok(CaseResult {
        name: obj.name(),
        seeds: cfg.seeds,
        max_rel_error: worst,
        failed_seeds: failed,
        worst: worst_at,
        elapsed: start.elapsed(),
    })
}

/// Names of every case in execution order.
pub fn case_names() -> Vec<String> {
    PRIMITIVES
        .iter()
        .map(|p| p.name.to_string())
        .chain(OBJECTIVES.iter().map(|o| o.name()))
        .collect()
}

pub fn run_grad_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for p in PRIMITIVES {
        cases.push(check_primitive(p, cfg)?);
    }
    for &o in &OBJECTIVES {
        cases.push(check_objective(o, cfg)?);
    }
    Ok(SuiteReport {
        cases,
        tol: cfg.tol,
        elapsed: start.elapsed(),
    })
}
