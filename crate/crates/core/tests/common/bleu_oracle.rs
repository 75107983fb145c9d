//! Naive BLEU oracle and random test sets, written without reference to the
//! library implementation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Naive BLEU: n-grams compared by linear scans, clipping by explicit
/// counting, no shared code with the library.
pub fn brute_force_bleu(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut h, mut r) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        h += hyp.len();
        r += reference.len();
        for n in 1..=4 {
            if hyp.len() < n {
                continue;
            }
            let hyp_grams: Vec<&[String]> = (0..=hyp.len() - n).map(|i| &hyp[i..i + n]).collect();
            let ref_grams: Vec<&[String]> =
                if reference.len() >= n { (0..=reference.len() - n).map(|i| &reference[i..i + n]).collect() } else { vec![] };
            total[n - 1] += hyp_grams.len();
            let mut seen: Vec<&[String]> = Vec::new();
            for g in &hyp_grams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_hyp = hyp_grams.iter().filter(|x| x == &g).count();
                let in_ref = ref_grams.iter().filter(|x| x == &g).count();
                matched[n - 1] += in_hyp.min(in_ref);
            }
        }
    }
    if h == 0 {
        return 0.0;
    }
    let mut logs = Vec::new();
    for n in 0..4 {
        if total[n] == 0 {
            continue;
        }
        let p = if matched[n] == 0 { 0.5 / total[n] as f64 } else { matched[n] as f64 / total[n] as f64 };
        logs.push(p.ln());
    }
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let bp = if h >= r { 1.0 } else { (1.0 - r as f64 / h as f64).exp() };
    100.0 * bp * mean.exp()
}

pub fn random_pairs(rng: &mut ChaCha8Rng, kind: usize) -> Vec<(Vec<String>, Vec<String>)> {
    let vocab: Vec<String> = ["x", "y", "(", ")", "=", "df", "print", ",", "1", "2"].iter().map(|s| s.to_string()).collect();
    let other: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let n = rng.random_range(1..8);
    (0..n)
        .map(|_| {
            let rl = rng.random_range(0..12);
            let reference: Vec<String> = (0..rl).map(|_| vocab[rng.random_range(0..vocab.len())].clone()).collect();
            let hyp = match kind {
                0 => reference.clone(),
                1 => (0..rng.random_range(0..12)).map(|_| other[rng.random_range(0..other.len())].clone()).collect(),
                _ => {
                    let mut h = reference.clone();
                    for _ in 0..rng.random_range(0..4) {
                        match rng.random_range(0..3) {
                            0 if !h.is_empty() => {
                                let i = rng.random_range(0..h.len());
                                h.remove(i);
                            }
                            1 => {
                                let i = rng.random_range(0..=h.len());
                                h.insert(i, vocab[rng.random_range(0..vocab.len())].clone());
                            }
                            _ if !h.is_empty() => {
                                let i = rng.random_range(0..h.len());
                                h[i] = vocab[rng.random_range(0..vocab.len())].clone();
                            }
                            _ => {}
                        }
                    }
                    h
                }
            };
            (hyp, reference)
        })
        .collect()
}
