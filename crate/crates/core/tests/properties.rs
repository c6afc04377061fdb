use mmtprobe::autodiff::softmax_rows;
use mmtprobe::checkpoint::{decode_checkpoint_bytes, encode_checkpoint_bytes};
use mmtprobe::filters::top_k_indices;
use mmtprobe::querygen::{extract_keywords, IdfTable, Stopwords};
use mmtprobe::retrieval::{decode_feature_bytes, encode_feature_bytes};
use mmtprobe::{bleu_corpus, Matrix};
use proptest::prelude::*;

fn sentence(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 0..=max)
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    prop::collection::vec((sentence(10), sentence(10)), 1..8)
}

fn words(ids: &[u8]) -> Vec<String> {
    ids.iter().map(|i| format!("w{i}")).collect()
}

proptest! {
    #[test]
    fn bleu_is_bounded(c in corpus()) {
        let (h, r): (Vec<_>, Vec<_>) = c.into_iter().unzip();
        let b = bleu_corpus(&h, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&b.score));
        prop_assert!(b.precisions.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!(b.brevity_penalty <= 1.0);
    }

    #[test]
    fn bleu_ignores_sentence_order(c in corpus(), rot in 0usize..8) {
        let (h, r): (Vec<_>, Vec<_>) = c.into_iter().unzip();
        let k = rot % h.len();
        let mut h2 = h.clone();
        let mut r2 = r.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        let a = bleu_corpus(&h, &r).unwrap();
        let b = bleu_corpus(&h2, &r2).unwrap();
        prop_assert!((a.score - b.score).abs() < 1e-12);
    }

    #[test]
    fn bleu_of_reference_against_itself_is_one(r in prop::collection::vec(prop::collection::vec(0u8..6, 4..10), 1..5)) {
        prop_assert_eq!(bleu_corpus(&r, &r).unwrap().score, 1.0);
    }

    #[test]
    fn top_k_is_sorted_stable_and_nested(scores in prop::collection::vec(0u8..4, 1..20), k in 1usize..20) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let k = k.min(scores.len());
        let top = top_k_indices(&scores, k);
        prop_assert_eq!(top.len(), k);
        for w in top.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(scores[a] > scores[b] || (scores[a] == scores[b] && a < b));
        }
        let worst = scores[top[k - 1]];
        for i in (0..scores.len()).filter(|i| !top.contains(i)) {
            prop_assert!(scores[i] <= worst);
        }
        if k < scores.len() {
            prop_assert_eq!(&top_k_indices(&scores, k + 1)[..k], &top[..]);
        }
    }

    #[test]
    fn keywords_grow_as_prefixes(docs in prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 1..6), m in 1usize..6) {
        let docs: Vec<Vec<String>> = docs.iter().map(|d| words(d)).collect();
        let idf = IdfTable::from_documents(docs.iter()).unwrap();
        let stop = Stopwords::parse("w0\n");
        let small = extract_keywords(&docs[0], &idf, m, &stop).unwrap();
        let large = extract_keywords(&docs[0], &idf, m + 1, &stop).unwrap();
        prop_assert_eq!(&large[..small.len()], &small[..]);
        prop_assert!(small.iter().all(|k| k.term != "w0"));
        let mut terms: Vec<&str> = large.iter().map(|k| k.term.as_str()).collect();
        terms.sort();
        terms.dedup();
        prop_assert_eq!(terms.len(), large.len());
    }

    #[test]
    fn softmax_rows_normalize(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let m = Matrix::row_vector(v);
        let s = softmax_rows(&m);
        prop_assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.as_slice().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn feature_bytes_round_trip(bits in prop::collection::vec(any::<u32>(), 1..30), cols in 1usize..6) {
        let vals: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).filter(|v| v.is_finite()).collect();
        prop_assume!(vals.len() >= cols);
        let rows = vals.len() / cols;
        let m = Matrix::from_fn(rows, cols, |r, c| vals[r * cols + c]);
        let back: Matrix<f32> = decode_feature_bytes(&encode_feature_bytes(&m).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        let b1: Vec<u32> = back.as_slice().iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u32> = m.as_slice().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(b1, b2);
    }

    #[test]
    fn checkpoint_bytes_round_trip(shapes in prop::collection::vec((1usize..4, 1usize..4), 1..5), seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tensors: Vec<(String, Matrix<f32>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| (format!("t{i}"), Matrix::uniform(r, c, 2.0, &mut rng)))
            .collect();
        let named: Vec<(&str, &Matrix<f32>)> = tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let back = decode_checkpoint_bytes::<f32>(&encode_checkpoint_bytes(&named).unwrap()).unwrap();
        prop_assert_eq!(back, tensors);
    }
}
