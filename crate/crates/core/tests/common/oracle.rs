//! Independent reference implementations used to cross-check the library.

use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};

/// BLEU by linear scans over n-gram lists: no hashing, no shared code with
/// the library beyond the final formula. Inputs are whitespace-tokenized,
/// which matches the library tokenizer on purely alphanumeric words.
pub fn brute_bleu(hyps: &[String], refs: &[Vec<String>]) -> ([u64; 4], [u64; 4], u64, u64, f64) {
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let (mut c, mut r) = (0u64, 0u64);
    for (hyp, rset) in hyps.iter().zip(refs) {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let rs: Vec<Vec<&str>> = rset.iter().map(|x| x.split_whitespace().collect()).collect();
        c += h.len() as u64;
        let mut best = usize::MAX;
        for x in &rs {
            let better = x.len().abs_diff(h.len()) < best.abs_diff(h.len())
                || (x.len().abs_diff(h.len()) == best.abs_diff(h.len()) && x.len() < best);
            if best == usize::MAX || better {
                best = x.len();
            }
        }
        r += best as u64;
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let grams: Vec<&[&str]> = h.windows(n).collect();
            totals[n - 1] += grams.len() as u64;
            let mut seen: Vec<&[&str]> = Vec::new();
            for g in &grams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_hyp = grams.iter().filter(|x| *x == g).count() as u64;
                let in_ref = rs
                    .iter()
                    .map(|x| x.windows(n).filter(|w| w == g).count() as u64)
                    .max()
                    .unwrap_or(0);
                matches[n - 1] += in_hyp.min(in_ref);
            }
        }
    }
    let score = if c == 0 || matches[0] == 0 {
        0.0
    } else {
        let p = |n: usize| {
            if n >= 2 && matches[n - 1] == 0 {
                1.0 / (totals[n - 1] as f64 + 1.0)
            } else if totals[n - 1] == 0 {
                0.0
            } else {
                matches[n - 1] as f64 / totals[n - 1] as f64
            }
        };
        let bp = if c <= r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
        let log_sum: f64 = (1..=4).map(|n| p(n).ln()).sum();
        100.0 * bp * (log_sum / 4.0).exp()
    };
    (matches, totals, c, r, score)
}

/// All sentences over `vocab` with up to `max_len` words, including "".
pub fn all_sentences(vocab: &[&str], max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut frontier: Vec<Vec<&str>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for w in vocab {
                let mut t = s.clone();
                t.push(w);
                out.push(t.join(" "));
                next.push(t);
            }
        }
        frontier = next;
    }
    out
}

/// Small deterministic LCG so corpus generation is independent of the
/// library's generator.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn below(&mut self, n: usize) -> usize {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((self.0 >> 33) % n as u64) as usize
    }
}

pub struct BleuSuite {
    pub corpora: usize,
    pub mismatches: Vec<String>,
}

/// Runs the library against the oracle over exhaustive tiny corpora plus a
/// seeded sweep of corpora with up to 5 sentences and 10 words.
pub fn bleu_suite() -> BleuSuite {
    let mut suite = BleuSuite {
        corpora: 0,
        mismatches: Vec::new(),
    };
    let mut check = |hyps: Vec<String>, refs: Vec<Vec<String>>| {
        suite.corpora += 1;
        let lib = infermark::metrics::bleu_stats(&hyps, &refs).unwrap();
        let (m, t, c, r, score) = brute_bleu(&hyps, &refs);
        let ok = lib.matches == m
            && lib.totals == t
            && lib.hyp_len == c
            && lib.ref_len == r
            && lib.score().to_bits() == score.to_bits();
        if !ok && suite.mismatches.len() < 5 {
            suite
                .mismatches
                .push(format!("{hyps:?} vs {refs:?}: {lib:?} / {m:?} {t:?} {c} {r} {score}"));
        }
    };

    let abc = all_sentences(&["a", "b", "c"], 3);
    for h in &abc {
        for r in &abc {
            check(vec![h.clone()], vec![vec![r.clone()]]);
        }
    }
    let ab = all_sentences(&["a", "b"], 2);
    for h1 in &ab {
        for h2 in &ab {
            for r1 in &ab {
                for r2 in &ab {
                    check(
                        vec![h1.clone(), h2.clone()],
                        vec![vec![r1.clone()], vec![r2.clone()]],
                    );
                }
            }
        }
    }
    let ab3 = all_sentences(&["a", "b"], 3);
    for h in &ab3 {
        for r1 in &ab3 {
            for r2 in &ab3 {
                check(vec![h.clone()], vec![vec![r1.clone(), r2.clone()]]);
            }
        }
    }

    let vocab: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let mut rng = Lcg(0x5eed);
    let sentence = |rng: &mut Lcg| {
        let len = rng.below(9);
        let size = 1 + rng.below(10);
        (0..len)
            .map(|_| vocab[rng.below(size)].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    for _ in 0..20_000 {
        let k = 1 + rng.below(5);
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..k {
            hyps.push(sentence(&mut rng));
            let nref = 1 + rng.below(3);
            refs.push((0..nref).map(|_| sentence(&mut rng)).collect());
        }
        check(hyps, refs);
    }
    suite
}

pub struct ChiSquare {
    pub statistic: f64,
    pub critical: f64,
    pub dof: usize,
}

/// Pearson chi-square of `draws` against Pois(`mean`), with bins merged from
/// both tails until every expected count is at least 5.
pub fn poisson_chi_square(draws: &[u64], mean: f64) -> ChiSquare {
    let pois = Poisson::new(mean).unwrap();
    let n = draws.len() as f64;
    let max = *draws.iter().max().unwrap() as usize;
    let mut observed = vec![0f64; max + 1];
    for &d in draws {
        observed[d as usize] += 1.0;
    }
    let expected: Vec<f64> = (0..=max as u64).map(|k| pois.pmf(k) * n).collect();

    let lo = (0..=max).find(|&k| expected[k] >= 5.0).unwrap();
    let hi = (0..=max).rev().find(|&k| expected[k] >= 5.0).unwrap();
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let below: f64 = (0..=lo).map(|k| pois.pmf(k as u64)).sum::<f64>() * n;
    bins.push((observed[..=lo].iter().sum(), below));
    for k in lo + 1..hi {
        bins.push((observed[k], expected[k]));
    }
    let upper = n - bins.iter().map(|b| b.1).sum::<f64>();
    bins.push((observed[hi..].iter().sum(), upper));

    let statistic = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = bins.len() - 1;
    let critical = ChiSquared::new(dof as f64).unwrap().inverse_cdf(0.999);
    ChiSquare {
        statistic,
        critical,
        dof,
    }
}
