#![allow(dead_code)]

use std::sync::OnceLock;

use rand_distr::{Distribution, Normal};

use ibg_core::autodiff::Tensor;
use ibg_core::data::{encode_corpus, generate_corpus, EncodedExample, GeneratorConfig, Vocab};
use ibg_core::model::{ModelConfig, SentimentClassifier};
use ibg_core::rng;

pub struct Fixture {
    pub vocab: Vocab,
    pub examples: Vec<EncodedExample>,
    /// Untrained, with a randomized (non-identity) bottleneck.
    pub model: SentimentClassifier,
}

pub fn fill_normal(t: &mut Tensor, std: f64, r: &mut rng::Rng) {
    let n = Normal::new(0.0, std).unwrap();
    t.data_mut().iter_mut().for_each(|v| *v = n.sample(r));
}

pub fn small_model(vocab_size: usize, seed: u64) -> SentimentClassifier {
    let mut model = SentimentClassifier::new(ModelConfig {
        vocab_size,
        high_dim: 16,
        low_dim: 4,
        seed,
        ..Default::default()
    })
    .unwrap();
    model.insert_ibil().unwrap();
    let mut r = rng::stream(seed, "fixture-ibil");
    let ib = model.ibil.as_mut().unwrap();
    fill_normal(&mut ib.w_mu, 0.3, &mut r);
    fill_normal(&mut ib.w_xi, 0.1, &mut r);
    fill_normal(&mut ib.w_up, 0.3, &mut r);
    model
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = generate_corpus(&GeneratorConfig {
            size: 64,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let vocab = Vocab::build(&corpus);
        let model = small_model(vocab.len(), 11);
        let examples = encode_corpus(&corpus, &vocab, model.config.max_len).unwrap();
        Fixture { vocab, examples, model }
    })
}
