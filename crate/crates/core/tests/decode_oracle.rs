mod common;

use csattn::attention::{BankAccess, Variant};
use csattn::decode::{beam_search, BeamConfig, Hypothesis};
use csattn::lang_mask::MaskState;
use csattn::vocab::LanguageTag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn exhaustive_beam_equals_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for k in 0..20 {
        let variant = Variant::ALL[k % 4];
        let n_a = rng.random_range(1..=2);
        let n_b = rng.random_range(1..=2);
        let langs = common::tags(n_a, n_b);
        let model = common::random_tiny_model(langs.len(), variant, 100 + k as u64, 3.0);
        let max_len = rng.random_range(1..=4);
        let f = common::random_features(rng.random_range(2..6), 4, &mut rng);
        let (want, score) = common::brute_force_best(&model, &f, &langs, max_len);
        let got = beam_search(&model, &f, &langs, BeamConfig { beam: 1000, max_len }, None, None).unwrap();
        assert_eq!(got.best.output(), want.as_slice(), "model {k} ({variant})");
        assert!((got.best.logprob - score).abs() < 1e-9);
    }
}

#[test]
fn beam_of_one_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for k in 0..12 {
        let variant = Variant::ALL[k % 4];
        let langs = common::tags(3, 3);
        let model = common::random_tiny_model(langs.len(), variant, 200 + k as u64, 2.0);
        let f = common::random_features(5, 4, &mut rng);
        let got = beam_search(&model, &f, &langs, BeamConfig { beam: 1, max_len: 6 }, None, None).unwrap();
        assert_eq!(got.best.output(), common::greedy(&model, &f, &langs, 6).as_slice(), "{variant}");
    }
}

#[test]
fn live_masks_always_match_a_rebuild_from_the_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for variant in Variant::ALL {
        let langs = common::tags(2, 3);
        let model = common::random_tiny_model(langs.len(), variant, 7, 2.0);
        let f = common::random_features(6, 4, &mut rng);
        let mut checked = 0;
        let mut obs = |live: &[Hypothesis]| {
            for h in live {
                let tags: Vec<LanguageTag> = h.tokens.iter().map(|&t| langs[t]).collect();
                assert_eq!(h.mask, MaskState::from_langs(&tags, model.config.variant.mask).unwrap());
                checked += 1;
            }
        };
        beam_search(&model, &f, &langs, BeamConfig { beam: 4, max_len: 8 }, None, Some(&mut obs)).unwrap();
        assert!(checked > 0);
    }
}

#[test]
fn monolingual_a_decoding_never_touches_bank_b() {
    let langs = common::tags(3, 3);
    let mut model = common::random_tiny_model(langs.len(), Variant::SplitIndependent, 9, 1.0);
    // Make LangB outputs unreachable.
    let out_b = model.store.id("out.b").unwrap();
    for (t, v) in model.store.get_mut(out_b).value.data_mut().iter_mut().enumerate() {
        if langs[t] == LanguageTag::LangB {
            *v = -1e6;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    // A wide beam keeps some (hopeless) LangB hypotheses alive; only those may
    // reach bank B. With beam 1 no LangB prefix ever exists.
    for beam in [5, 1] {
        let mut access = BankAccess::default();
        for _ in 0..10 {
            let f = common::random_features(6, 4, &mut rng);
            let r = beam_search(&model, &f, &langs, BeamConfig { beam, max_len: 8 }, Some(&mut access), None).unwrap();
            assert!(r.best.output().iter().all(|&t| langs[t] != LanguageTag::LangB));
        }
        assert!(access.bank_a_rows > 0);
        assert_eq!(access.bank_b_rows_without_langb, 0);
        if beam == 1 {
            assert_eq!(access.bank_b_rows, 0);
        }
    }
}

#[test]
fn decoding_is_deterministic() {
    let langs = common::tags(3, 3);
    let model = common::random_tiny_model(langs.len(), Variant::ScoreReweighted, 3, 2.0);
    let f = common::random_features(5, 4, &mut ChaCha8Rng::seed_from_u64(54));
    let run = || beam_search(&model, &f, &langs, BeamConfig::default(), None, None).unwrap().nbest;
    assert_eq!(run(), run());
}
