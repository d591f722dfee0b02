use proptest::prelude::*;

use ibg_core::autodiff::{Tape, Tensor};
use ibg_core::data::{by_split, generate_corpus, load_jsonl, save_jsonl, GeneratorConfig, Split};

/// tanh(a·b) → softmax rows → cross-entropy against label 0, with b fixed.
fn chain(a: &Tensor, b: &Tensor) -> (f64, Tensor) {
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone()).unwrap();
    let bv = tape.leaf(b.clone()).unwrap();
    let m = tape.matmul(av, bv).unwrap();
    let t = tape.tanh(m);
    let loss = tape.cross_entropy(t, &vec![0; a.rows()]).unwrap();
    tape.backward(loss).unwrap();
    (tape.value(loss).item(), tape.grad_tensor(av).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composed_ops_match_finite_differences(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 9),
    ) {
        let a = Tensor::matrix(2, 3, a).unwrap();
        let b = Tensor::matrix(3, 3, b).unwrap();
        let (_, g) = chain(&a, &b);
        for i in 0..a.len() {
            let shift = |h: f64| {
                let mut p = a.clone();
                p.data_mut()[i] += h;
                chain(&p, &b).0
            };
            let numeric = (shift(1e-5) - shift(-1e-5)) / 2e-5;
            prop_assert!((numeric - g.data()[i]).abs() < 1e-6, "{} vs {}", numeric, g.data()[i]);
        }
    }

    #[test]
    fn generated_examples_are_valid_and_round_trip(seed in 0u64..1000, size in 1usize..40) {
        let corpus = generate_corpus(&GeneratorConfig { seed, size, ..Default::default() }).unwrap();
        prop_assert_eq!(corpus.len(), size);
        for ex in &corpus {
            prop_assert!(ex.validate().is_ok());
            prop_assert_eq!(ex.split, Split::for_id(&ex.id));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_jsonl(&corpus, &path).unwrap();
        prop_assert_eq!(load_jsonl(&path).unwrap(), corpus.clone());
        let parts: usize = [Split::Train, Split::Dev, Split::Test].iter().map(|s| by_split(&corpus, *s).len()).sum();
        prop_assert_eq!(parts, size);
    }
}
