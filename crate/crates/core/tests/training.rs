mod common;

use csattn::attention::Variant;
use csattn::model::{Model, ModelConfig};
use csattn::synth::SynthConfig;
use csattn::train::{train, Corpus, TrainConfig};

fn memorization_set() -> (csattn::vocab::Vocab, Vec<csattn::data::Example>) {
    let cfg = SynthConfig::default();
    let data = cfg.generate().unwrap();
    let ex = common::examples(&data.cs[..50], &data.vocab, &cfg);
    (data.vocab, ex)
}

#[test]
fn memorization_loss_falls_below_a_tenth() {
    let (vocab, ex) = memorization_set();
    let mut c = ModelConfig::default();
    c.vocab_size = vocab.len();
    c.label_smoothing = 0.0;
    c.dropout = 0.0;
    c.warmup = 100;
    let mut m = Model::new(c).unwrap();
    let langs = vocab.languages(&(0..vocab.len()).collect::<Vec<_>>()).unwrap();
    let corpora = [Corpus { name: "mem".into(), examples: ex }];
    let tc = TrainConfig { steps: 200, batch_size: 50, seed: 1 };
    let losses = train(&mut m, &corpora, &langs, &tc, &mut |_| {}).unwrap();
    let last = *losses.last().unwrap();
    assert!(last < 0.1 && last < losses[0], "first {} last {last}", losses[0]);
}

#[test]
fn training_is_deterministic() {
    let (vocab, ex) = memorization_set();
    let langs = vocab.languages(&(0..vocab.len()).collect::<Vec<_>>()).unwrap();
    let corpora = [Corpus { name: "mem".into(), examples: ex[..20].to_vec() }];
    let run = || {
        let mut c = ModelConfig::tiny(vocab.len(), Variant::SplitIndependent);
        c.feat_dim = 16;
        c.dropout = 0.1;
        let mut m = Model::new(c).unwrap();
        let tc = TrainConfig { steps: 8, batch_size: 6, seed: 4 };
        let l = train(&mut m, &corpora, &langs, &tc, &mut |_| {}).unwrap();
        (l, m.store)
    };
    assert_eq!(run(), run());
}
