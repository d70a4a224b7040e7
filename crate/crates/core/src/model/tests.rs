use super::*;
use crate::autodiff::grad_check;
use crate::vocab::{EOS, SOS};

/// 4 reserved + 3 LangA + 3 LangB ids.
fn langs() -> Vec<LanguageTag> {
    let mut l = vec![LanguageTag::Special; 4];
    l.extend([LanguageTag::LangA; 3]);
    l.extend([LanguageTag::LangB; 3]);
    l
}

fn feats(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, dim, (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

struct Batch {
    feats: Vec<Tensor>,
    tokens: Vec<Vec<usize>>,
}

impl Batch {
    fn utterances(&self) -> Vec<Utterance<'_>> {
        self.feats
            .iter()
            .zip(&self.tokens)
            .map(|(features, tokens)| Utterance { features, tokens })
            .collect()
    }
}

fn mixed_batch(dim: usize) -> Batch {
    Batch {
        feats: vec![feats(5, dim, 1), feats(4, dim, 2)],
        tokens: vec![vec![SOS, 4, 7, 8, 5, EOS], vec![SOS, 9, 6, EOS]],
    }
}

#[test]
fn logits_have_one_row_per_target_position() {
    let model = Model::new(ModelConfig::tiny(10, Variant::Baseline)).unwrap();
    let b = Batch {
        feats: vec![feats(4, 4, 3)],
        tokens: vec![vec![SOS, 4, 8, EOS]],
    };
    let mut g = Graph::no_grad();
    let logits = model.forward(&mut g, &b.utterances(), &langs(), None).unwrap();
    assert_eq!(g.value(logits).shape(), &[3, 10]);
}

#[test]
fn unit_weights_reproduce_baseline_logits() {
    let base = Model::new(ModelConfig::tiny(10, Variant::Baseline)).unwrap();
    let mut cfg = ModelConfig::tiny(10, Variant::ScoreReweighted);
    cfg.variant.mask.w_same = 1.0;
    cfg.variant.mask.w_diff = 1.0;
    let rew = Model::new(cfg).unwrap();
    assert_eq!(base.store, rew.store);
    let b = mixed_batch(4);
    let run = |m: &Model| {
        let mut g = Graph::no_grad();
        let l = m.forward(&mut g, &b.utterances(), &langs(), None).unwrap();
        g.value(l).data().to_vec()
    };
    assert_eq!(run(&base), run(&rew));
}

#[test]
fn every_variant_passes_gradient_check() {
    for variant in Variant::ALL {
        let mut model = Model::new(ModelConfig::tiny(10, variant)).unwrap();
        // Move biases and norms off their initial values so every path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            for v in model.store.get_mut(id).value.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let b = mixed_batch(4);
        let utts = b.utterances();
        let tl = langs();
        let template = model.clone();
        let report = grad_check(&mut model.store, 1e-5, |g, store| {
            let m = Model {
                store: store.clone(),
                ..template.clone()
            };
            m.loss(g, &utts, &tl, None)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{variant}: {report:?}");
        assert_eq!(report.checked, Model::expected_numel(&model.config));
    }
}

#[test]
fn parameter_count_matches_formula() {
    for variant in Variant::ALL {
        let mut c = ModelConfig::default();
        c.vocab_size = 50;
        c.variant.variant = variant;
        let m = Model::new(c.clone()).unwrap();
        assert_eq!(m.store.numel(), Model::expected_numel(&c), "{variant}");
    }
    let mut c = ModelConfig::default();
    c.vocab_size = 50;
    c.variant.variant = Variant::SplitShared;
    let shared = Model::new(c.clone()).unwrap().store.numel();
    c.variant.variant = Variant::SplitIndependent;
    let indep = Model::new(c.clone()).unwrap();
    let d = c.d_model;
    assert_eq!(indep.store.numel() - shared, c.dec_layers * (4 * d * d + 3 * d));
    assert_eq!(indep.bank_b_params().len(), 7 * c.dec_layers);
}

#[test]
fn initial_loss_is_near_log_vocab() {
    let mut c = ModelConfig::tiny(40, Variant::Baseline);
    c.d_model = 16;
    c.label_smoothing = 0.0;
    let model = Model::new(c).unwrap();
    let mut tl = vec![LanguageTag::Special; 4];
    tl.extend([LanguageTag::LangA; 18]);
    tl.extend([LanguageTag::LangB; 18]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = Batch {
        feats: (0..16).map(|i| feats(8, 4, 100 + i)).collect(),
        tokens: (0..16)
            .map(|_| {
                let mut t = vec![SOS];
                t.extend((0..6).map(|_| rng.random_range(4..40)));
                t.push(EOS);
                t
            })
            .collect(),
    };
    let mut g = Graph::no_grad();
    let l = model.loss(&mut g, &b.utterances(), &tl, None).unwrap();
    let loss = g.value(l).data()[0];
    let expected = 40f64.ln();
    assert!((loss - expected).abs() < 0.1 * expected, "loss {loss} vs {expected}");
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let model = Model::new(ModelConfig::tiny(10, Variant::SplitIndependent)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, 17).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.step, 17);
    let banks = ck.params.iter().filter(|(n, _)| n.starts_with("dec.0.self_attn.")).map(|(n, _)| n.split('.').nth(3).unwrap().to_string()).collect::<std::collections::BTreeSet<_>>();
    assert_eq!(banks.into_iter().collect::<Vec<_>>(), vec!["a", "b"]);
    let back = ck.into_model().unwrap();
    assert_eq!(back.store, model.store);
    let b = mixed_batch(4);
    let run = |m: &Model| {
        let mut g = Graph::no_grad();
        let l = m.forward(&mut g, &b.utterances(), &langs(), None).unwrap();
        g.value(l).data().to_vec()
    };
    assert_eq!(run(&back), run(&model));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = Model::new(ModelConfig::tiny(10, Variant::Baseline)).unwrap();
    let bytes = Checkpoint::from_model(&model, 1).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Magic)));
    let mut bad = bytes.clone();
    bad[6] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version { found: 9, .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));

    let mut ck = Checkpoint::from_model(&model, 1);
    ck.params[0].0 = "enc.bogus.w".into();
    assert!(matches!(ck.into_model(), Err(CheckpointError::UnknownParam(_))));
    let mut ck = Checkpoint::from_model(&model, 1);
    ck.params.pop();
    assert!(matches!(ck.into_model(), Err(CheckpointError::MissingParam(_))));
}

#[test]
fn evaluation_forward_is_deterministic_and_dropout_is_not() {
    let mut c = ModelConfig::tiny(10, Variant::SplitShared);
    c.dropout = 0.3;
    let model = Model::new(c).unwrap();
    let b = mixed_batch(4);
    let run = |rng: Option<&mut ChaCha8Rng>| {
        let mut g = Graph::no_grad();
        let l = model.forward(&mut g, &b.utterances(), &langs(), rng).unwrap();
        g.value(l).data().to_vec()
    };
    assert_eq!(run(None), run(None));
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    assert_ne!(run(None), run(Some(&mut r1)));
}

#[test]
fn initialization_is_shared_across_variants() {
    let base = Model::new(ModelConfig::tiny(10, Variant::Baseline)).unwrap();
    let indep = Model::new(ModelConfig::tiny(10, Variant::SplitIndependent)).unwrap();
    for (_, p) in base.store.iter() {
        let q = indep.store.get(indep.store.id(&p.name).unwrap());
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn pure_a_batch_leaves_bank_b_without_gradient() {
    let model = Model::new(ModelConfig::tiny(10, Variant::SplitIndependent)).unwrap();
    let b = Batch {
        feats: vec![feats(6, 4, 1), feats(3, 4, 2)],
        tokens: vec![vec![SOS, 4, 5, 6, EOS], vec![SOS, 6, EOS]],
    };
    let mut g = Graph::new();
    let mut access = BankAccess::default();
    let l = model.loss_with_access(&mut g, &b.utterances(), &langs(), None, Some(&mut access)).unwrap();
    g.backward(l).unwrap();
    let mut store = model.store.clone();
    store.accumulate_grads(&g);
    for id in model.bank_b_params() {
        assert!(store.get(id).value.grad().is_none());
    }
    assert_eq!(access.bank_b_rows, 0);
}
