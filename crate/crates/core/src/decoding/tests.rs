use std::collections::HashMap;

use proptest::prelude::*;

use super::*;
use crate::data::generate_dataset;
use crate::model::{ModelConfig, MtpVariant};

const A: usize = 3;
const B: usize = 4;

/// Fixed next-token table keyed by prefix; unknown prefixes emit eos.
struct Table(HashMap<Vec<usize>, Vec<(usize, f64)>>);

impl Table {
    fn toy() -> Self {
        let mut t = HashMap::new();
        t.insert(vec![], vec![(A, 0.6), (B, 0.4)]);
        t.insert(vec![A], vec![(A, 0.3), (B, 0.3), (unit::EOS, 0.4)]);
        t.insert(vec![B], vec![(unit::EOS, 0.9), (A, 0.1)]);
        Table(t)
    }
}

impl StepScorer for Table {
    type State = Vec<usize>;

    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, states: &mut [Vec<usize>], tokens: &[usize]) -> Result<StepOutput> {
        let mut log_probs = Vec::new();
        for (s, &t) in states.iter_mut().zip(tokens) {
            if t != unit::BOS {
                s.push(t);
            }
            let mut row = vec![f64::NEG_INFINITY; 5];
            match self.0.get(s.as_slice()) {
                Some(entries) => entries.iter().for_each(|&(tok, p)| row[tok] = p.ln()),
                None => row[unit::EOS] = 0.0,
            }
            log_probs.push(row);
        }
        Ok(StepOutput {
            ctc_labels: vec![0; tokens.len()],
            log_probs,
        })
    }
}

#[test]
fn beam_finds_sequence_greedy_misses() {
    let t = Table::toy();
    let g = greedy_decode(&t, 5).unwrap().hypothesis;
    assert_eq!(g.tokens, vec![A, unit::EOS]);
    assert!((g.logprob - (0.6f64 * 0.4).ln()).abs() < 1e-12);
    let b = beam_search(&t, 2, 5, false).unwrap();
    assert_eq!(b.tokens, vec![B, unit::EOS]);
    assert!((b.logprob - (0.4f64 * 0.9).ln()).abs() < 1e-12);
    assert_eq!(beam_search(&t, 1, 5, false).unwrap(), g);
}

#[test]
fn truncation_without_eos() {
    let mut t = Table::toy();
    t.0.insert(vec![A], vec![(A, 1.0)]);
    t.0.insert(vec![A, A], vec![(A, 1.0)]);
    let g = greedy_decode(&t, 2).unwrap();
    assert!(g.truncated);
    assert_eq!(g.hypothesis.tokens, vec![A, A]);
    assert_eq!(g.distributions.len(), 2);
    let b = beam_search(&t, 1, 2, false).unwrap();
    assert!(!b.finished);
    assert!(greedy_decode(&t, 0).is_err());
    assert!(beam_search(&t, 0, 3, false).is_err());
}

#[test]
fn greedy_ties_go_to_lowest_id() {
    assert_eq!(best_unit(&[0.0, 0.0, -1.0, -0.5, -0.5]), 3);
    assert_eq!(best_unit(&[5.0, 5.0, -1.0, -2.0]), unit::EOS);
}

#[test]
fn ctc_collapse_examples() {
    let (y1, y2) = (5, 6);
    assert_eq!(ctc_greedy_collapse(&[y1, 0, 0, 0, y2, 0, 0, 0], 0), vec![y1, y2]);
    assert!(ctc_greedy_collapse(&[0; 6], 0).is_empty());
    assert_eq!(ctc_greedy_collapse(&[7, 7, 0, 7], 0), vec![7, 7]);
    assert_eq!(
        ctc_semantic(&[text::BLANK, text::FIRST + 2, text::EOS, text::FIRST]),
        vec![2, 0]
    );
}

proptest! {
    #[test]
    fn collapse_is_idempotent(labels in prop::collection::vec(0usize..4, 0..20)) {
        let once = ctc_greedy_collapse(&labels, 0);
        prop_assert!(once.iter().all(|&l| l != 0));
        prop_assert!(once.len() <= labels.len());
        let spaced: Vec<usize> = once.iter().flat_map(|&l| [l, 0]).collect();
        prop_assert_eq!(ctc_greedy_collapse(&spaced, 0), once);
    }
}

#[test]
fn mode_names_round_trip() {
    for m in DecodeMode::STANDARD {
        assert_eq!(DecodeMode::parse(&m.name()).unwrap(), m);
    }
    assert!(DecodeMode::parse("beam0").is_err());
    assert!(DecodeMode::parse("sample").is_err());
}

fn small_model() -> (S2utModel, Vec<Sample>, TaskSpec) {
    let spec = TaskSpec {
        n_semantic: 6,
        units_per_semantic: 3,
        sent_len_min: 2,
        sent_len_max: 3,
        expansion_min: 1,
        expansion_max: 2,
        feat_dim: 4,
        n_train: 2,
        n_dev: 2,
        n_test: 4,
        ..TaskSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let cfg = ModelConfig {
        feat_dim: 4,
        enc_layers: 2,
        enc_dim: 8,
        dec_layers: 2,
        dec_dim: 8,
        heads: 2,
        unit_vocab: spec.unit_vocab(),
        text_vocab: spec.text_vocab(),
        mtp_variant: MtpVariant::S2ut,
        mtp_n: 2,
        ctc_layer: 1,
        aux_enc_taps: vec![1, 2],
        ..ModelConfig::default()
    };
    (S2utModel::new(cfg, 3).unwrap(), data.test, spec)
}

#[test]
fn eos_biased_model_stops_immediately() {
    let (mut model, samples, spec) = small_model();
    let id = model.params().get("dec.out.proj.b").unwrap();
    model.params_mut().tensor_mut(id).data_mut()[unit::EOS] = 50.0;
    let scorer = ModelScorer::new(&model, &samples[0]).unwrap();
    let g = greedy_decode(&scorer, spec.max_decode_len()).unwrap();
    assert_eq!(g.hypothesis.tokens, vec![unit::EOS]);
    assert!(g.hypothesis.finished);
    assert_eq!(g.hypothesis.frame_labels.len(), 1);
}

#[test]
fn model_greedy_matches_beam_one_and_is_deterministic() {
    let (model, samples, spec) = small_model();
    let max_len = spec.max_decode_len();
    for s in &samples {
        let scorer = ModelScorer::new(&model, s).unwrap();
        let g = greedy_decode(&scorer, max_len).unwrap();
        assert_eq!(g, greedy_decode(&scorer, max_len).unwrap());
        let b = beam_search(&scorer, 1, max_len, false).unwrap();
        assert_eq!(b.tokens, g.hypothesis.tokens);
        assert_eq!(b.logprob.to_bits(), g.hypothesis.logprob.to_bits());
        assert_eq!(b.frame_labels, g.hypothesis.frame_labels);
        for d in &g.distributions {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(g.hypothesis.frame_labels.len(), g.hypothesis.tokens.len());
    }
}

#[test]
fn decode_samples_writes_readable_records() {
    let (model, samples, spec) = small_model();
    let opts = DecodeOptions {
        max_len: spec.max_decode_len(),
        length_norm: false,
        keep_distributions: true,
    };
    let recs = decode_samples(&model, &samples, &spec, DecodeMode::Greedy, &opts).unwrap();
    assert_eq!(recs.len(), samples.len());
    for (r, s) in recs.iter().zip(&samples) {
        assert_eq!(r.reference, s.y_text);
        assert_eq!(r.entropies.len(), r.tokens.len());
        assert_eq!(r.distributions.as_ref().unwrap().len(), r.tokens.len());
    }
    let beam = decode_samples(&model, &samples, &spec, DecodeMode::Beam(3), &opts).unwrap();
    assert!(beam.iter().all(|r| r.entropies.is_empty() && r.distributions.is_none()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("greedy.jsonl");
    write_records(&path, &recs).unwrap();
    assert_eq!(read_records(&path).unwrap(), recs);
}

#[test]
fn dump_parse_errors_name_the_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let good = r#"{"id":0,"mode":"greedy","tokens":[2],"logprob":-1.0,"finished":true,"frame_labels":[0],"hypothesis":[],"reference":[1]}"#;
    std::fs::write(&path, format!("{good}\n{}\n", good.replace("\"tokens\"", "\"tokenz\""))).unwrap();
    match read_records(&path) {
        Err(Error::Parse { line, msg }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("tokenz"), "{msg}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}
