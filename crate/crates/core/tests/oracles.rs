use std::collections::HashMap;

use moesumm_core::metrics::{lcs_len, ngram_overlap, rouge, rouge_text, Prf};
use moesumm_core::objectives::{margin, max_margin_loss};
use proptest::prelude::*;

/// Clipped overlap by exhaustive enumeration of n-gram positions.
fn brute_overlap(cand: &[u8], reference: &[u8], n: usize) -> (usize, usize, usize) {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    };
    let (c, r) = (grams(cand), grams(reference));
    let mut seen: Vec<&Vec<u8>> = Vec::new();
    let mut overlap = 0;
    for g in &c {
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        let in_c = c.iter().filter(|x| *x == g).count();
        let in_r = r.iter().filter(|x| *x == g).count();
        overlap += in_c.min(in_r);
    }
    (overlap, c.len(), r.len())
}

fn lcs_memo(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs_memo(a, b, i + 1, j + 1, memo)
    } else {
        lcs_memo(a, b, i + 1, j, memo).max(lcs_memo(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 0..=20)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn rouge_matches_brute_force(c in seq(), r in prop::collection::vec(0u8..6, 1..=20)) {
        let s = rouge(&c, &r);
        for (n, prf) in [(1, s.r1), (2, s.r2)] {
            let counts = brute_overlap(&c, &r, n);
            prop_assert_eq!(ngram_overlap(&c, &r, n), counts);
            prop_assert_eq!(prf, Prf::from_counts(counts.0, counts.1, counts.2));
            if counts.1 + counts.2 > 0 && counts.0 > 0 {
                let f = 2.0 * counts.0 as f64 / (counts.1 + counts.2) as f64;
                prop_assert!((prf.f1 - f).abs() < 1e-12);
            }
        }
        let l = lcs_memo(&c, &r, 0, 0, &mut HashMap::new());
        prop_assert_eq!(lcs_len(&c, &r), l);
        prop_assert_eq!(s.rl, Prf::from_counts(l, c.len(), r.len()));
    }

    #[test]
    fn swapping_arguments_swaps_precision_and_recall(a in prop::collection::vec(0u8..6, 1..=20), b in prop::collection::vec(0u8..6, 1..=20)) {
        let ab = rouge(&a, &b);
        let ba = rouge(&b, &a);
        for (x, y) in [(ab.r1, ba.r1), (ab.r2, ba.r2), (ab.rl, ba.rl)] {
            prop_assert_eq!(x.precision, y.recall);
            prop_assert_eq!(x.recall, y.precision);
            prop_assert!((x.f1 - y.f1).abs() < 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn margin_loss_matches_closed_form(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..40)) {
        let (pf, pm): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut expect = 0.0;
        for (&f, &m) in pf.iter().zip(&pm) {
            let d = f - m;
            expect += (1.0 - f) * (1.0 - d * d * d * d * d) / 2.0;
        }
        let got = max_margin_loss(&pf, &pm).unwrap();
        prop_assert!((got - expect).abs() <= 1e-12, "{} vs {}", got, expect);
        prop_assert!(got >= 0.0 && got <= pf.len() as f64);
        for (&f, &m) in pf.iter().zip(&pm) {
            let d = margin(f, m).unwrap();
            prop_assert!((-1.0..=1.0).contains(&d));
        }
    }
}

#[test]
fn hand_counted_rouge() {
    let s = rouge_text("a b c", "a b d");
    assert!((s.r1.f1 - 2.0 / 3.0).abs() < 1e-15);
    assert!((s.r2.f1 - 0.5).abs() < 1e-15);
    assert!((s.rl.f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn worked_margin_losses() {
    // one token, P_full 0.8, P_main 0.5
    assert!((max_margin_loss(&[0.8], &[0.5]).unwrap() - 0.099757).abs() < 1e-12);
    // a certain full model contributes nothing
    assert_eq!(max_margin_loss(&[1.0], &[0.0]).unwrap(), 0.0);
    // zero margin: (1 - P_full) / 2
    assert!((max_margin_loss(&[0.6, 0.2], &[0.6, 0.2]).unwrap() - (0.2 + 0.4)).abs() < 1e-15);
    assert!(max_margin_loss(&[0.5], &[1.5]).is_err());
    assert!(max_margin_loss(&[0.5], &[]).is_err());
}
