use nl2code::model::{relative_bucket, ForwardMode, ModelConfig, Seq2SeqBatch, TokenBatch, Transformer};
use nl2code::tensor::{check_gradients, Tape, Tensor};

const DISTANCES: [i64; 71] = [
    -1000, -140, -133, -129, -128, -127, -126, -119, -112, -105, -98, -91, -84, -77, -70, -65, -64, -63, -56, -49,
    -42, -35, -33, -32, -31, -28, -21, -17, -16, -15, -14, -9, -8, -7, -1, 0, 1, 7, 8, 9, 14, 15, 16, 17, 21, 28, 31,
    32, 33, 35, 42, 49, 56, 63, 64, 65, 70, 77, 84, 91, 98, 105, 112, 119, 126, 127, 128, 129, 133, 140, 1000,
];

// Reference values from an independent implementation of the bucketing
// scheme (32 buckets, max distance 128), identical in f32 and f64.
const BIDIRECTIONAL: [usize; 71] = [
    15, 15, 15, 15, 15, 15, 15, 15, 15, 15, 15, 15, 14, 14, 14, 14, 14, 13, 13, 13, 12, 12, 12, 12, 11, 11, 10, 10, 10, 9,
    9, 8, 8, 7, 1, 0, 17, 23, 24, 24, 25, 25, 26, 26, 26, 27, 27, 28, 28, 28, 28, 29, 29, 29, 30, 30, 30, 30, 30, 31, 31,
    31, 31, 31, 31, 31, 31, 31, 31, 31, 31,
];
const CAUSAL: [usize; 71] = [
    31, 31, 31, 31, 31, 31, 31, 31, 30, 30, 29, 29, 28, 28, 27, 26, 26, 26, 25, 24, 23, 22, 21, 21, 21, 20, 18, 16, 16, 15,
    14, 9, 8, 7, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0,
    0, 0,
];

#[test]
fn bucket_table_matches_reference() {
    for (i, &d) in DISTANCES.iter().enumerate() {
        assert_eq!(relative_bucket(d, true, 32, 128), BIDIRECTIONAL[i], "bidirectional {d}");
        assert_eq!(relative_bucket(d, false, 32, 128), CAUSAL[i], "causal {d}");
    }
}

fn toy(vocab: usize, d: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_heads: 2,
        d_ff: 2 * d,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        n_relative_buckets: 8,
        max_relative_distance: 16,
        dropout_rate: 0.0,
    }
}

/// Give relative bias tables non-zero values so they influence outputs.
fn perturbed<S: nl2code::tensor::Scalar>(cfg: ModelConfig, seed: u64) -> Transformer<S> {
    let mut m = Transformer::<S>::new(cfg, seed).unwrap();
    for (i, t) in m.params.tensors_mut().enumerate() {
        for (j, x) in t.data_mut().iter_mut().enumerate() {
            *x += S::of(0.05 * (((i * 31 + j * 7) % 13) as f64 - 6.0) / 6.0);
        }
    }
    m
}

#[test]
fn decoder_is_causal() {
    let m = perturbed::<f64>(toy(30, 16), 3);
    let src = TokenBatch::from_rows(&[vec![5, 6, 7, 1]]);
    let a = m.logits(&src, &TokenBatch::from_rows(&[vec![0, 9, 10, 11, 12]])).unwrap();
    let b = m.logits(&src, &TokenBatch::from_rows(&[vec![0, 9, 10, 20, 21]])).unwrap();
    let v = 30;
    for t in 0..3 {
        for k in 0..v {
            let (x, y) = (a.data()[t * v + k], b.data()[t * v + k]);
            assert!((x - y).abs() < 1e-12, "position {t}");
        }
    }
    assert!((0..v).any(|k| (a.data()[3 * v + k] - b.data()[3 * v + k]).abs() > 1e-6));
}

#[test]
fn source_padding_does_not_change_outputs() {
    let m = perturbed::<f64>(toy(30, 16), 4);
    let tgt = TokenBatch::from_rows(&[vec![0, 9, 10]]);
    let short = m.logits(&TokenBatch::from_rows(&[vec![5, 6, 1]]), &tgt).unwrap();
    let padded = m.logits(&TokenBatch::from_rows(&[vec![5, 6, 1, 0, 0, 0]]), &tgt).unwrap();
    for (x, y) in short.data().iter().zip(padded.data()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn batched_rows_match_single_rows() {
    let m = perturbed::<f64>(toy(30, 16), 5);
    let rows = [vec![5u32, 6, 7, 1], vec![8u32, 1]];
    let tgts = [vec![0u32, 3, 4], vec![0u32, 9]];
    let batched = m.logits(&TokenBatch::from_rows(&rows), &TokenBatch::from_rows(&tgts)).unwrap();
    for b in 0..2 {
        let single = m.logits(&TokenBatch::from_rows(&rows[b..=b]), &TokenBatch::from_rows(&tgts[b..=b])).unwrap();
        for t in 0..tgts[b].len() {
            for k in 0..30 {
                let x = batched.data()[(b * 3 + t) * 30 + k];
                let y = single.data()[t * 30 + k];
                assert!((x - y).abs() < 1e-9, "row {b} pos {t}");
            }
        }
    }
}

#[test]
fn incremental_decoding_matches_full_pass() {
    let m = perturbed::<f32>(toy(40, 16), 6);
    let sources = vec![vec![5u32, 6, 7, 8, 1], vec![9u32, 1]];
    let tokens = [[0u32, 0], [12, 13], [14, 15], [16, 17], [18, 19]];
    let tgt: Vec<Vec<u32>> = (0..2).map(|b| tokens.iter().map(|t| t[b]).collect()).collect();
    let full = m.logits(&TokenBatch::from_rows(&sources), &TokenBatch::from_rows(&tgt)).unwrap();
    let mut dec = m.start_decoding(&sources).unwrap();
    for (t, step) in tokens.iter().enumerate() {
        let out = dec.step(step).unwrap();
        for b in 0..2 {
            for k in 0..40 {
                let x = out.data()[b * 40 + k];
                let y = full.data()[(b * tokens.len() + t) * 40 + k];
                assert!((x - y).abs() < 1e-5, "step {t} row {b}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn incremental_reorder_follows_rows() {
    let m = perturbed::<f64>(toy(40, 16), 7);
    let sources = vec![vec![5u32, 6, 1], vec![9u32, 10, 11, 1]];
    let mut both = m.start_decoding(&sources).unwrap();
    both.step(&[0, 0]).unwrap();
    both.step(&[3, 4]).unwrap();
    both.reorder(&[1, 1, 0]).unwrap();
    let out = both.step(&[7, 8, 9]).unwrap();

    let mut second = m.start_decoding(&sources[1..]).unwrap();
    second.step(&[0]).unwrap();
    second.step(&[4]).unwrap();
    let expect = second.step(&[8]).unwrap();
    for k in 0..40 {
        assert!((out.data()[40 + k] - expect.data()[k]).abs() < 1e-9);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = toy(50, 8);
    let model = perturbed::<f64>(cfg.clone(), 11);
    let batch = Seq2SeqBatch {
        src: TokenBatch::from_rows(&[vec![3, 4, 5, 1], vec![6, 1]]),
        tgt_in: TokenBatch::from_rows(&[vec![0, 7, 8], vec![0, 9]]),
        tgt_out: TokenBatch::from_rows(&[vec![7, 8, 1], vec![9, 1]]),
    };
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(&inputs, 1e-3, |tape: &mut Tape<f64>, vars| {
        let bound = nl2code::model::Bound::from_vars(vars.to_vec());
        model.loss(tape, &bound, &batch, None, &mut ForwardMode::eval())
    })
    .unwrap();
    let names: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
    for (name, err) in names.iter().zip(&report.relative_errors) {
        assert!(*err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn dropout_is_seeded() {
    let mut cfg = toy(30, 16);
    cfg.dropout_rate = 0.3;
    let m = Transformer::<f32>::new(cfg, 1).unwrap();
    let batch = Seq2SeqBatch {
        src: TokenBatch::from_rows(&[vec![3, 4, 1]]),
        tgt_in: TokenBatch::from_rows(&[vec![0, 7]]),
        tgt_out: TokenBatch::from_rows(&[vec![7, 1]]),
    };
    let run = |seed| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let l = m.loss(&mut tape, &bound, &batch, None, &mut ForwardMode::train(0.3, seed)).unwrap();
        tape.value(l).item().unwrap()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}
