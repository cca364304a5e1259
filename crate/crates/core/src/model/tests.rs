use super::*;
use crate::tensor::finite_diff_grad;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: MIN_VOCAB,
        d_model: 16,
        n_layers: 2,
        max_seq_len: 48,
        mlp_hidden: 24,
    }
}

fn random_tokens(seed: u64, len: usize) -> TokenSequence {
    let mut rng = Seed(seed).rng();
    let bytes: Vec<u8> = (0..len).map(|_| rng.gen_range(b'a'..=b'z')).collect();
    tokenize(&bytes, 1024).unwrap()
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    seeded_init(rows, cols, Seed(seed), InitScheme::UniformScaled).unwrap()
}

#[test]
fn project_examples() {
    let w = random_matrix(5, 5, 1);
    assert_eq!(project(&Matrix::identity(5), &w).unwrap(), w);
    let h = random_matrix(3, 5, 2);
    assert!(project(&h, &Matrix::zeros(5, 5)).unwrap().data().iter().all(|v| *v == 0.0));
    assert_eq!(project(&h, &w).unwrap(), h.matmul(&w).unwrap());
    assert!(project(&h, &random_matrix(4, 5, 3)).is_err());
}

fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Matrix {
    let d = q.cols() as f64;
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let n = if causal { i + 1 } else { k.rows() };
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / d.sqrt())
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for j in 0..n {
            let p = (scores[j] - m).exp() / z;
            for c in 0..v.cols() {
                out.set(i, c, out.get(i, c) + p * v.get(j, c));
            }
        }
    }
    out
}

#[test]
fn attention_examples() {
    let q = random_matrix(1, 4, 1);
    let k = random_matrix(1, 4, 2);
    let v = random_matrix(1, 4, 3);
    let out = self_attention(&q, &k, &v, true).unwrap();
    for (a, b) in out.data().iter().zip(v.data()) {
        assert!((a - b).abs() < 1e-15);
    }

    // All-equal scores give the column mean of v.
    let q = Matrix::zeros(3, 4);
    let k = random_matrix(3, 4, 4);
    let v = random_matrix(3, 4, 5);
    let out = self_attention(&q, &k, &v, false).unwrap();
    for c in 0..4 {
        let mean = (0..3).map(|j| v.get(j, c)).sum::<f64>() / 3.0;
        assert!((out.get(1, c) - mean).abs() < 1e-12);
    }

    let q = random_matrix(4, 6, 6).scale(3.0);
    let k = random_matrix(4, 6, 7).scale(3.0);
    let v = random_matrix(4, 6, 8);
    let fast = self_attention(&q, &k, &v, true).unwrap();
    assert!(fast.max_abs_diff(&naive_attention(&q, &k, &v, true)) < 1e-12);
    assert!(self_attention(&q, &random_matrix(4, 5, 9), &v, true).is_err());
}

#[test]
fn forward_shapes_and_determinism() {
    let model = Transformer::init(tiny_config(), Seed(3)).unwrap();
    let one = tokenize(b"", 48).unwrap();
    let trace = model.forward(&one).unwrap();
    assert_eq!(trace.layers.len(), 2);
    for l in &trace.layers {
        assert_eq!(l.block_input.shape(), (1, 16));
        assert_eq!(l.q.shape(), (1, 16));
    }
    let toks = random_tokens(1, 20);
    let a = model.forward(&toks).unwrap();
    let b = model.forward(&toks).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.logits.shape(), (21, MIN_VOCAB));
    let probs = a.logits.softmax_rows();
    for i in 0..probs.rows() {
        assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_rejects_bad_input() {
    let model = Transformer::init(tiny_config(), Seed(3)).unwrap();
    assert!(model.forward(&random_tokens(1, 60)).is_err());
    let bad = TokenSequence::from_ids_unchecked(vec![BOS, 999]);
    assert!(matches!(model.forward(&bad), Err(Error::TokenOutOfRange { id: 999, .. })));
}

#[test]
fn causality() {
    let model = Transformer::init(tiny_config(), Seed(4)).unwrap();
    for seed in 0..10 {
        let toks = random_tokens(seed, 24);
        let j = 5 + (seed as usize % 15);
        let mut ids = toks.ids().to_vec();
        ids[j] = if ids[j] == u32::from(b'q') { u32::from(b'r') } else { u32::from(b'q') };
        let changed = TokenSequence::from_ids_unchecked(ids);
        let a = model.forward(&toks).unwrap();
        let b = model.forward(&changed).unwrap();
        for t in 0..j {
            assert_eq!(a.logits.row(t), b.logits.row(t));
            for l in 0..2 {
                assert_eq!(a.layers[l].block_input.row(t), b.layers[l].block_input.row(t));
            }
        }
        assert_ne!(a.logits.row(j), b.logits.row(j));
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let model = Transformer::init(tiny_config(), Seed(5)).unwrap();
    let prompt = random_tokens(9, 10);
    let out = model.greedy_generate(&prompt, 12, StopRule::Budget).unwrap();
    assert_eq!(out.len(), 23);
    // Every generated token must be the argmax of a full forward on its prefix.
    for t in prompt.len()..out.len() {
        let prefix = TokenSequence::from_ids_unchecked(out.ids()[..t].to_vec());
        let logits = model.forward(&prefix).unwrap().logits;
        assert_eq!(argmax_bytes(logits.row(t - 1)), out.ids()[t]);
    }
}

#[test]
fn generation_contracts() {
    let model = Transformer::init(tiny_config(), Seed(6)).unwrap();
    let prompt = random_tokens(2, 8);
    assert_eq!(model.greedy_generate(&prompt, 0, StopRule::Budget).unwrap(), prompt);
    let a = model.greedy_generate(&prompt, 10, StopRule::Budget).unwrap();
    assert_eq!(a, model.greedy_generate(&prompt, 10, StopRule::Budget).unwrap());
    assert!(model.greedy_generate(&prompt, 45, StopRule::Budget).is_err());
    assert!(model.sample_generate(&prompt, 4, 0.0, Seed(1), StopRule::Budget).is_err());
    assert!(model.sample_generate(&prompt, 4, -1.0, Seed(1), StopRule::Budget).is_err());
    let s1 = model.sample_generate(&prompt, 10, 1.0, Seed(9), StopRule::Budget).unwrap();
    assert_eq!(s1, model.sample_generate(&prompt, 10, 1.0, Seed(9), StopRule::Budget).unwrap());
}

#[test]
fn cold_sampling_equals_greedy() {
    let model = Transformer::init(tiny_config(), Seed(7)).unwrap();
    for i in 0..100 {
        let prompt = random_tokens(100 + i, 6);
        let g = model.greedy_generate(&prompt, 5, StopRule::Budget).unwrap();
        let s = model.sample_generate(&prompt, 5, 1e-6, Seed(i), StopRule::Budget).unwrap();
        assert_eq!(g, s);
    }
}

#[test]
fn flat_logits_sample_diversely() {
    let mut model = Transformer::init(tiny_config(), Seed(8)).unwrap();
    model.tok_emb = Matrix::zeros(model.tok_emb.rows(), model.tok_emb.cols());
    let prompt = random_tokens(3, 4);
    let outs: std::collections::HashSet<_> = (0..8)
        .map(|s| model.sample_generate(&prompt, 6, 1.0, Seed(s), StopRule::Budget).unwrap())
        .collect();
    assert!(outs.len() >= 2);
}

#[test]
fn stop_on_lines() {
    let mut model = Transformer::init(tiny_config(), Seed(8)).unwrap();
    // Make '\n' the only plausible output.
    model.tok_emb = Matrix::zeros(model.tok_emb.rows(), model.tok_emb.cols());
    model.lnf_bias = Matrix::new(1, 16, vec![1.0; 16]).unwrap();
    model.tok_emb.row_mut(b'\n' as usize).iter_mut().for_each(|v| *v = 1.0);
    let out = model.greedy_generate(&random_tokens(1, 3), 10, StopRule::Lines(2)).unwrap();
    assert_eq!(out.len(), 4 + 2);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let model = Transformer::init(tiny_config(), Seed(11)).unwrap();
    let h1 = model.save(&path).unwrap();
    let (loaded, h2) = Transformer::load(&path).unwrap();
    assert_eq!(model, loaded);
    assert_eq!(h1, h2);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 13]).unwrap();
    let err = Transformer::load(&path).unwrap_err().to_string();
    assert!(err.contains("expected") && err.contains("found"), "{err}");
}

#[test]
fn pretraining_gradient_matches_finite_differences() {
    let config = ModelConfig {
        vocab_size: MIN_VOCAB,
        d_model: 8,
        n_layers: 2,
        max_seq_len: 16,
        mlp_hidden: 12,
    };
    let model = Transformer::init(config, Seed(21)).unwrap();
    let a = random_tokens(1, 7);
    let b = random_tokens(2, 5);
    let batch = [&a, &b];
    let (_, grads) = pretrain_loss_and_grad(&model, &batch).unwrap();

    let mut rng = Seed(5).rng();
    let n_tensors = model.params().len();
    for tensor in 0..n_tensors {
        let len = model.params()[tensor].data().len();
        // A few coordinates per tensor; tok_emb rows for the used bytes are hit
        // through the explicit probes below.
        let mut coords: Vec<usize> = (0..3).map(|_| rng.gen_range(0..len)).collect();
        if tensor == 0 {
            coords.push(a.ids()[2] as usize * 8 + 3);
        }
        if tensor == 1 {
            coords.extend([0, 8 + 5, 4 * 8 + 1, 6 * 8 + 7]);
        }
        for idx in coords {
            let f = |p: &[f64]| {
                let mut m = model.clone();
                m.params_mut()[tensor].data_mut()[idx] = p[0];
                pretrain_loss_and_grad(&m, &batch).unwrap().0
            };
            let x0 = model.params()[tensor].data()[idx];
            let numeric = finite_diff_grad(f, &[x0], 1e-6).unwrap()[0];
            let analytic = grads[tensor].data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "tensor {tensor} idx {idx}: analytic {analytic} numeric {numeric}"
            );
        }
    }
}

#[test]
fn memorises_a_continuation() {
    let config = ModelConfig {
        vocab_size: MIN_VOCAB,
        d_model: 16,
        n_layers: 1,
        max_seq_len: 32,
        mlp_hidden: 32,
    };
    let text = b"fn add(a, b) { a + b }\n";
    let seq = tokenize(text, 32).unwrap();
    let train = PretrainConfig {
        steps: 300,
        batch_size: 1,
        learning_rate: 1e-2,
        seed: Seed(1),
        clip_norm: 1.0,
    };
    let (model, report) = pretrain(config, &[seq], &train, |_, _| {}).unwrap();
    assert!(report.losses.last().unwrap() < &0.05, "{:?}", report.losses.last());
    let prompt = tokenize(b"fn add", 32).unwrap();
    let out = model.greedy_generate(&prompt, text.len() - 6, StopRule::Lines(1)).unwrap();
    assert_eq!(detokenize(&out), text.to_vec());
}
