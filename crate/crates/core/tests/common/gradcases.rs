//! Finite-difference checks for every differentiable op and a small full
//! model, shared by the gradient test target and the acceptance suite.

use nl2code::model::{attention, AttnMask, Bound, ForwardMode, ModelConfig, Seq2SeqBatch, TokenBatch, Transformer};
use nl2code::tensor::{check_gradients, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random(rng, shape);
    for x in t.data_mut() {
        *x = x.signum() * (0.2 + x.abs());
    }
    t
}

/// `Σ out ⊙ probe`, turning any output into a scalar with a non-trivial
/// gradient.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random(&mut rng, tape.shape(out));
    let p = tape.constant(p);
    let prod = tape.mul(out, p)?;
    tape.sum(prod)
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>);

fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut r = |shape: &[usize]| random(&mut rng, shape);
    let mut cases: Vec<Case> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 5])], Box::new(|t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o, 1)
        })),
        ("matmul_transpose_a", vec![r(&[4, 3]), r(&[4, 5])], Box::new(|t, v| {
            let o = t.matmul_t(v[0], v[1], true, false)?;
            probe(t, o, 2)
        })),
        ("matmul_transpose_b", vec![r(&[3, 4]), r(&[5, 4])], Box::new(|t, v| {
            let o = t.matmul_t(v[0], v[1], false, true)?;
            probe(t, o, 3)
        })),
        ("matmul_transpose_both", vec![r(&[2, 4, 3]), r(&[2, 5, 4])], Box::new(|t, v| {
            let o = t.matmul_t(v[0], v[1], true, true)?;
            probe(t, o, 4)
        })),
        ("matmul_batched", vec![r(&[2, 3, 4]), r(&[2, 4, 5])], Box::new(|t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o, 5)
        })),
        ("matmul_broadcast", vec![r(&[2, 1, 3, 4]), r(&[3, 4, 2])], Box::new(|t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o, 6)
        })),
        ("matmul_shared_weight", vec![r(&[2, 3, 4]), r(&[4, 5])], Box::new(|t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o, 7)
        })),
        ("add_broadcast", vec![r(&[2, 3, 4]), r(&[4]), r(&[3, 1])], Box::new(|t, v| {
            let o = t.add(v[0], v[1])?;
            let o = t.add(o, v[2])?;
            probe(t, o, 8)
        })),
        ("mul_broadcast", vec![r(&[2, 3, 4]), r(&[2, 1, 4])], Box::new(|t, v| {
            let o = t.mul(v[0], v[1])?;
            probe(t, o, 9)
        })),
        ("mul_self", vec![r(&[3, 3])], Box::new(|t, v| {
            let o = t.mul(v[0], v[0])?;
            probe(t, o, 10)
        })),
        ("scale", vec![r(&[4, 2])], Box::new(|t, v| {
            let o = t.scale(v[0], -2.5)?;
            probe(t, o, 11)
        })),
        ("gelu", vec![r(&[3, 5])], Box::new(|t, v| {
            let o = t.gelu(v[0])?;
            probe(t, o, 12)
        })),
        ("softmax_last", vec![r(&[2, 3, 4])], Box::new(|t, v| {
            let o = t.softmax(v[0], 2)?;
            probe(t, o, 13)
        })),
        ("softmax_middle", vec![r(&[2, 3, 4])], Box::new(|t, v| {
            let o = t.softmax(v[0], 1)?;
            probe(t, o, 14)
        })),
        ("softmax_first", vec![r(&[2, 3, 4])], Box::new(|t, v| {
            let o = t.softmax(v[0], 0)?;
            probe(t, o, 15)
        })),
        ("rms_norm", vec![r(&[2, 3, 5]), r(&[5])], Box::new(|t, v| {
            let o = t.rms_norm(v[0], v[1], 1e-6)?;
            probe(t, o, 16)
        })),
        ("embedding", vec![r(&[6, 4])], Box::new(|t, v| {
            let o = t.embedding(v[0], &[1, 3, 3, 0, 5, 1])?;
            probe(t, o, 17)
        })),
        ("cross_entropy", vec![r(&[5, 7])], Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 6, 0, 3], 0))),
        ("weighted_cross_entropy", vec![r(&[2, 3, 7])], Box::new(|t, v| {
            t.weighted_cross_entropy(v[0], &[2, 5, 0, 4, 4, 1], 0, Some(&[0.2, 1.0, 1.0, 0.7, 0.5, 0.9]))
        })),
        ("reshape", vec![r(&[2, 6])], Box::new(|t, v| {
            let o = t.reshape(v[0], &[3, 4])?;
            let o = t.gelu(o)?;
            probe(t, o, 18)
        })),
        ("permute", vec![r(&[2, 3, 4])], Box::new(|t, v| {
            let o = t.permute(v[0], &[2, 0, 1])?;
            probe(t, o, 19)
        })),
        ("dropout", vec![r(&[4, 5])], Box::new(|t, v| {
            let o = t.dropout(v[0], 0.3, 5)?;
            probe(t, o, 20)
        })),
        ("sum", vec![r(&[3, 2])], Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        })),
    ];
    let relu_input = away_from_zero(&mut rng, &[3, 4]);
    cases.push(("relu", vec![relu_input], Box::new(|t, v| {
        let o = t.relu(v[0])?;
        probe(t, o, 21)
    })));
    cases
}

fn attention_case() -> (Vec<Tensor<f64>>, impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, nl2code::model::ModelError>) {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let inputs = vec![
        random(&mut rng, &[2, 2, 3, 4]),
        random(&mut rng, &[2, 2, 5, 4]),
        random(&mut rng, &[2, 2, 5, 4]),
        random(&mut rng, &[2, 3, 5]),
    ];
    let keep: Vec<bool> = (0..2 * 3 * 5).map(|i| i % 7 != 3).collect();
    let mask = AttnMask::new(2, 3, 5, keep).unwrap();
    let f = move |t: &mut Tape<f64>, v: &[Var]| {
        let o = attention(t, v[0], v[1], v[2], Some(v[3]), Some(&mask))?;
        Ok(probe(t, o, 22)?)
    };
    (inputs, f)
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 50,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        n_relative_buckets: 8,
        max_relative_distance: 16,
        dropout_rate: 0.0,
    }
}

fn model_case() -> (Transformer<f64>, Seq2SeqBatch) {
    let mut model = Transformer::<f64>::new(toy_model_config(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // move gains and bias tables off their constant init
    for t in model.params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    let batch = Seq2SeqBatch {
        src: TokenBatch::from_rows(&[vec![3, 17, 42, 1], vec![9, 1]]),
        tgt_in: TokenBatch::from_rows(&[vec![0, 11, 12], vec![0, 30]]),
        tgt_out: TokenBatch::from_rows(&[vec![11, 12, 1], vec![30, 1]]),
    };
    (model, batch)
}

/// (case name, worst relative error over its inputs).
pub fn run_all() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases() {
        let report = check_gradients(&inputs, STEP, |t: &mut Tape<f64>, v: &[Var]| f(t, v)).unwrap();
        out.push((name.to_string(), report.max_relative_error()));
    }
    let (inputs, f) = attention_case();
    let report = check_gradients(&inputs, STEP, f).unwrap();
    out.push(("attention".into(), report.max_relative_error()));

    let (model, batch) = model_case();
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(&inputs, STEP, |t: &mut Tape<f64>, v: &[Var]| {
        model.loss(t, &Bound::from_vars(v.to_vec()), &batch, None, &mut ForwardMode::eval())
    })
    .unwrap();
    for ((name, _), err) in model.params.iter().zip(&report.relative_errors) {
        out.push((format!("model:{name}"), *err));
    }
    out
}
