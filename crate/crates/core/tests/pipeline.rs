use std::path::Path;

use proptest::prelude::*;

use s2ut_core::data::{generate_dataset, read_dataset, write_dataset, TaskSpec};
use s2ut_core::decoding::{beam_search, greedy_decode, DecodeMode, DecodeOptions, ModelScorer};
use s2ut_core::experiment::{eval_run, final_loss, load_run, matrix_run_dir, run_is_complete, train_run};
use s2ut_core::model::{ModelConfig, MtpVariant, S2utModel};
use s2ut_core::training::RunConfig;

fn tiny_task(seed: u64) -> TaskSpec {
    TaskSpec {
        seed,
        n_semantic: 6,
        units_per_semantic: 3,
        sent_len_min: 2,
        sent_len_max: 3,
        expansion_min: 1,
        expansion_max: 2,
        feat_dim: 4,
        n_train: 24,
        n_dev: 4,
        n_test: 6,
        ..TaskSpec::default()
    }
}

fn tiny_model(spec: &TaskSpec, variant: MtpVariant) -> ModelConfig {
    ModelConfig {
        feat_dim: spec.feat_dim,
        unit_vocab: spec.unit_vocab(),
        text_vocab: spec.text_vocab(),
        enc_layers: 2,
        enc_dim: 8,
        dec_layers: 2,
        dec_dim: 8,
        heads: 2,
        mtp_variant: variant,
        mtp_n: 2,
        ctc_layer: 1,
        aux_enc_taps: vec![1, 2],
        ..ModelConfig::default()
    }
}

fn tiny_run(spec: &TaskSpec, variant: MtpVariant, seed: u64, steps: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: tiny_model(spec, variant),
        ..RunConfig::default()
    };
    cfg.train.seed = seed;
    cfg.train.steps = steps;
    cfg.train.batch_size = 4;
    cfg.train.warmup_steps = 5;
    cfg.train.log_every = 5;
    cfg.train.checkpoint_every = 20;
    cfg
}

fn logged_totals(run: &Path) -> Vec<f64> {
    let mut r = csv::Reader::from_path(run.join("train_log.csv")).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == "total").unwrap();
    r.records().map(|x| x.unwrap()[col].parse().unwrap()).collect()
}

#[test]
fn every_variant_trains_evaluates_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_task(3);
    let data = dir.path().join("data");
    write_dataset(&data, &generate_dataset(&spec).unwrap()).unwrap();
    let modes = [DecodeMode::Greedy, DecodeMode::Beam(2)];
    let opts = DecodeOptions {
        max_len: spec.max_decode_len(),
        length_norm: false,
        keep_distributions: false,
    };
    for variant in MtpVariant::ALL {
        let run = matrix_run_dir(dir.path(), variant, 1);
        let cfg = tiny_run(&spec, variant, 1, 20);
        train_run(&data, &run, cfg.clone(), false).unwrap();
        assert!(!run_is_complete(&run, &cfg), "{variant}: complete before eval");
        let scores = eval_run(&run, &data, "test", &modes, &opts).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(
            scores.iter().all(|(_, b)| (0.0..=100.0).contains(b)),
            "{variant}: {scores:?}"
        );
        assert!(run_is_complete(&run, &cfg), "{variant}");

        let dumps = load_run(&run).unwrap();
        assert_eq!(dumps.variant, variant.to_string());
        assert_eq!(
            dumps.dumps.iter().map(|d| d.0.as_str()).collect::<Vec<_>>(),
            ["greedy", "beam2"]
        );
        for (_, recs) in &dumps.dumps {
            assert_eq!(recs.len(), spec.n_test);
            assert!(recs.iter().all(|r| r.logprob <= 0.0 && r.tokens.len() <= opts.max_len));
        }
        assert!(final_loss(&run).unwrap().unwrap().is_finite());

        let mut other = cfg.clone();
        other.train.seed = 2;
        assert!(!run_is_complete(&run, &other), "{variant}: config change unnoticed");
    }

    let run = matrix_run_dir(dir.path(), MtpVariant::S2ut, 1);
    let dump = run.join("eval/greedy.jsonl");
    let mut bytes = std::fs::read(&dump).unwrap();
    bytes.push(b'\n');
    std::fs::write(&dump, bytes).unwrap();
    assert!(!run_is_complete(&run, &tiny_run(&spec, MtpVariant::S2ut, 1, 20)));
}

#[test]
fn training_lowers_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_task(8);
    let data = dir.path().join("data");
    write_dataset(&data, &generate_dataset(&spec).unwrap()).unwrap();
    let run = dir.path().join("run");
    train_run(&data, &run, tiny_run(&spec, MtpVariant::S2ut, 4, 120), false).unwrap();
    let totals = logged_totals(&run);
    let head: f64 = totals[..3].iter().sum::<f64>() / 3.0;
    let tail: f64 = totals[totals.len() - 3..].iter().sum::<f64>() / 3.0;
    assert!(tail < 0.8 * head, "loss {head:.3} -> {tail:.3}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn datasets_are_deterministic_and_round_trip(seed in 0u64..1000) {
        let spec = tiny_task(seed);
        let d = generate_dataset(&spec).unwrap();
        prop_assert_eq!(&d, &generate_dataset(&spec).unwrap());
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        prop_assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn width_one_beam_is_greedy(seed in 0u64..1000, v in 0usize..MtpVariant::ALL.len()) {
        let spec = tiny_task(seed);
        let d = generate_dataset(&spec).unwrap();
        let model = S2utModel::new(tiny_model(&spec, MtpVariant::ALL[v]), seed).unwrap();
        for s in &d.test[..2] {
            let scorer = ModelScorer::new(&model, s).unwrap();
            let g = greedy_decode(&scorer, spec.max_decode_len()).unwrap().hypothesis;
            let b = beam_search(&scorer, 1, spec.max_decode_len(), false).unwrap();
            prop_assert_eq!(&g.tokens, &b.tokens);
            prop_assert_eq!(g.logprob.to_bits(), b.logprob.to_bits());
            prop_assert!(g.tokens.len() <= spec.max_decode_len());
        }
    }
}
