#![allow(dead_code)]

//! Brute-force metric references over plain token lists.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn grams(t: &[u32], n: usize) -> Vec<Vec<u32>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

pub fn count(list: &[Vec<u32>], g: &[u32]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn distinct(list: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu_ref(h: &[Vec<u32>], r: &[Vec<u32>], n_max: usize) -> Vec<f64> {
    let c: usize = h.iter().map(|x| x.len()).sum();
    let rl: usize = r.iter().map(|x| x.len()).sum();
    let bp = if c == 0 {
        0.0
    } else if c > rl {
        1.0
    } else {
        (1.0 - rl as f64 / c as f64).exp()
    };
    let mut logs = Vec::new();
    (1..=n_max)
        .map(|n| {
            let mut m = 0;
            let mut t = 0;
            for (a, b) in h.iter().zip(r) {
                let ha = grams(a, n);
                let rb = grams(b, n);
                for g in distinct(&ha) {
                    m += count(&ha, &g).min(count(&rb, &g));
                }
                t += ha.len();
            }
            logs.push(if m == 0 { 1e-9f64.ln() } else { (m as f64 / t as f64).ln() });
            bp * (logs.iter().sum::<f64>() / n as f64).exp()
        })
        .collect()
}

pub fn lcs_ref(a: &[u32], b: &[u32]) -> usize {
    fn go(a: &[u32], b: &[u32], memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if a.is_empty() || b.is_empty() {
            return 0;
        }
        if let Some(v) = memo[a.len()][b.len()] {
            return v;
        }
        let v = if a[0] == b[0] {
            1 + go(&a[1..], &b[1..], memo)
        } else {
            go(&a[1..], b, memo).max(go(a, &b[1..], memo))
        };
        memo[a.len()][b.len()] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, &mut memo)
}

pub fn rouge_ref(h: &[Vec<u32>], r: &[Vec<u32>]) -> f64 {
    let beta2 = 1.2;
    h.iter()
        .zip(r)
        .map(|(a, b)| {
            let l = lcs_ref(a, b) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rc) = (l / a.len() as f64, l / b.len() as f64);
            (1.0 + beta2) * p * rc / (rc + beta2 * p)
        })
        .sum::<f64>()
        / h.len() as f64
}

pub fn cider_ref(h: &[Vec<u32>], r: &[Vec<u32>]) -> f64 {
    let n_docs = r.len() as f64;
    let mut total = 0.0;
    for (i, a) in h.iter().enumerate() {
        let mut s = 0.0;
        for n in 1..=4 {
            let ha = grams(a, n);
            let rb = grams(&r[i], n);
            let vocab = distinct(&[ha.clone(), rb.clone()].concat());
            let df = |g: &[u32]| r.iter().filter(|doc| grams(doc, n).iter().any(|x| x.as_slice() == g)).count();
            let all: Vec<Vec<u32>> = distinct(&r.iter().flat_map(|doc| grams(doc, n)).collect::<Vec<_>>());
            let max_idf = all.iter().map(|g| n_docs.ln() - (df(g) as f64).ln()).fold(0.0, f64::max);
            let idf = |g: &[u32]| match df(g) {
                0 => max_idf,
                d => n_docs.ln() - (d as f64).ln(),
            };
            let hv: Vec<f64> = vocab.iter().map(|g| count(&ha, g) as f64 * idf(g)).collect();
            let rv: Vec<f64> = vocab.iter().map(|g| count(&rb, g) as f64 * idf(g)).collect();
            let nh = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nr = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nh > 0.0 && nr > 0.0 {
                s += hv.iter().zip(&rv).map(|(x, y)| x * y).sum::<f64>() / (nh * nr);
            }
        }
        total += s / 4.0;
    }
    10.0 * total / h.len() as f64
}

pub fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let pairs = rng.random_range(1..6);
    let vocab = rng.random_range(2..7);
    let mut sent = |lo| -> Vec<u32> { (0..rng.random_range(lo..8)).map(|_| rng.random_range(0..vocab)).collect() };
    let refs: Vec<Vec<u32>> = (0..pairs).map(|_| sent(1)).collect();
    let hyps: Vec<Vec<u32>> = (0..pairs).map(|_| sent(0)).collect();
    (hyps, refs)
}

