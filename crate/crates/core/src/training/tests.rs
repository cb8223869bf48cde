use super::*;
use crate::data::{generate_dataset, TaskSpec};

fn tiny_run(variant: MtpVariant) -> (RunConfig, Vec<Sample>) {
    let spec = TaskSpec {
        n_semantic: 6,
        units_per_semantic: 3,
        sent_len_min: 2,
        sent_len_max: 3,
        expansion_min: 1,
        expansion_max: 2,
        feat_dim: 4,
        n_train: 12,
        n_dev: 2,
        n_test: 2,
        ..TaskSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let cfg = RunConfig {
        model: ModelConfig {
            feat_dim: 4,
            enc_layers: 2,
            enc_dim: 8,
            dec_layers: 2,
            dec_dim: 8,
            heads: 2,
            unit_vocab: spec.unit_vocab(),
            text_vocab: spec.text_vocab(),
            mtp_variant: variant,
            mtp_n: 3,
            ctc_layer: 1,
            aux_enc_taps: vec![1, 2],
            ..ModelConfig::default()
        },
        train: TrainConfig {
            steps: 6,
            batch_size: 4,
            warmup_steps: 2,
            seed: 5,
            log_every: 1,
            checkpoint_every: 0,
            ..TrainConfig::default()
        },
        weights: LossWeights::default(),
    };
    (cfg, data.train)
}

fn bits(t: &Trainer) -> Vec<u64> {
    let s = t.model().params();
    s.ids()
        .flat_map(|id| s.tensor(id).data().iter().map(|x| x.to_bits()))
        .collect()
}

#[test]
fn training_is_bit_deterministic() {
    let (cfg, data) = tiny_run(MtpVariant::S2ut);
    let mut a = Trainer::new(cfg.clone()).unwrap();
    let mut b = Trainer::new(cfg).unwrap();
    for _ in 0..2 {
        a.train_step(&data[..4]).unwrap();
        b.train_step(&data[..4]).unwrap();
    }
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(
        a.to_checkpoint().to_bytes().unwrap(),
        b.to_checkpoint().to_bytes().unwrap()
    );
}

#[test]
fn resume_matches_uninterrupted_training() {
    for v in [MtpVariant::None, MtpVariant::DeepseekV3] {
        let (cfg, data) = tiny_run(v);
        let mut full = Trainer::new(cfg.clone()).unwrap();
        for _ in 0..5 {
            full.train_step(&data).unwrap();
        }
        let mut first = Trainer::new(cfg).unwrap();
        for _ in 0..3 {
            first.train_step(&data).unwrap();
        }
        let bytes = first.to_checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(resumed.adam(), first.adam());
        for _ in 0..2 {
            resumed.train_step(&data).unwrap();
        }
        assert_eq!(bits(&resumed), bits(&full), "{v}");
        assert_eq!(resumed.adam(), full.adam());
    }
}

#[test]
fn epochs_cover_data_in_full_batches() {
    let (_, data) = tiny_run(MtpVariant::None);
    let a = epoch_batches(&data, 4, 9, 0);
    assert_eq!(a.len(), 3);
    let mut seen: Vec<usize> = a.iter().flatten().copied().collect();
    seen.sort();
    assert_eq!(seen, (0..12).collect::<Vec<_>>());
    assert_eq!(a, epoch_batches(&data, 4, 9, 0));
    assert_ne!(a, epoch_batches(&data, 4, 9, 1));
    assert_eq!(epoch_batches(&data[..3], 4, 9, 0).len(), 1);
}

#[test]
fn run_writes_log_and_checkpoints_and_resumes() {
    let (mut cfg, data) = tiny_run(MtpVariant::Vocalnet);
    cfg.train.checkpoint_every = 3;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    run_training(&mut t, &data, dir.path()).unwrap();
    let log = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines[0], "step,ntp,mtp_k0,mtp_k1,mtp_k2,ctc,aux_src,aux_tgt,total");
    assert_eq!(lines.len(), 7);
    assert!(checkpoint_path(dir.path(), 3).exists());
    let final_bytes = fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap();

    let other = tempfile::tempdir().unwrap();
    let mut resumed = Trainer::load(&checkpoint_path(dir.path(), 3)).unwrap();
    fs::copy(dir.path().join(TRAIN_LOG), other.path().join(TRAIN_LOG)).unwrap();
    run_training(&mut resumed, &data, other.path()).unwrap();
    assert_eq!(final_bytes, fs::read(other.path().join(FINAL_CHECKPOINT)).unwrap());
    assert_eq!(log, fs::read_to_string(other.path().join(TRAIN_LOG)).unwrap());
}

#[test]
fn divergence_guard_stops_after_two_bad_steps() {
    let (cfg, data) = tiny_run(MtpVariant::None);
    let mut t = Trainer::new(cfg).unwrap();
    let ids: Vec<_> = t.model.params().ids().collect();
    let id = ids[0];
    t.model.params_mut().tensor_mut(id).data_mut()[0] = f64::NAN;
    let first = t.train_step(&data).unwrap();
    assert!(first.skipped);
    assert!(matches!(t.train_step(&data), Err(Error::Diverged { step: 2, .. })));
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::default();
    c.validate().unwrap();
    c.warmup_steps = c.steps;
    assert!(c.validate().is_err());
    let run = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&run.to_toml()).unwrap(), run);
}
