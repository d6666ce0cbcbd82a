//! Involution, locality and fixed points of the part swap, for every part
//! of every layout in n ∈ {2, 3, 5}, m ∈ {1, 5}, compared bit for bit.

use dsd_core::autodiff::{Feeds, Graph};
use dsd_core::model::{swap_graph, swap_part, Code, CodeLayout};
use dsd_core::Tensor;
use proptest::prelude::*;

const LAYOUTS: [(usize, usize); 6] = [(2, 1), (2, 5), (3, 1), (3, 5), (5, 1), (5, 5)];

fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}

fn code(layout: CodeLayout, values: &[f64]) -> Code {
    Code::new(values.to_vec(), layout).unwrap()
}

/// Every property for one pair and every part index.
fn check_pair(layout: CodeLayout, a: &[f64], b: &[f64]) {
    let (ca, cb) = (code(layout, a), code(layout, b));
    for k in 0..layout.n {
        let (ha, hb) = swap_part(&ca, &cb, k).unwrap();
        // inputs untouched
        assert_eq!(bits(ca.values()), bits(a));
        assert_eq!(bits(cb.values()), bits(b));
        // locality: part k exchanged, everything else kept
        for j in 0..layout.n {
            let (want_a, want_b) = if j == k { (cb.part(j), ca.part(j)) } else { (ca.part(j), cb.part(j)) };
            assert_eq!(bits(ha.part(j)), bits(want_a), "layout {layout:?}, k {k}, part {j}");
            assert_eq!(bits(hb.part(j)), bits(want_b), "layout {layout:?}, k {k}, part {j}");
        }
        // involution
        let (ra, rb) = swap_part(&ha, &hb, k).unwrap();
        assert_eq!(bits(ra.values()), bits(a));
        assert_eq!(bits(rb.values()), bits(b));
        // fixed point: a code swapped with itself
        let (sa, sb) = swap_part(&ca, &ca, k).unwrap();
        assert_eq!(bits(sa.values()), bits(a));
        assert_eq!(bits(sb.values()), bits(a));
        // fixed point: pairs that already agree on part k
        let mut agree = b.to_vec();
        agree[layout.part(k)].copy_from_slice(ca.part(k));
        let (fa, fb) = swap_part(&ca, &code(layout, &agree), k).unwrap();
        assert_eq!(bits(fa.values()), bits(a));
        assert_eq!(bits(fb.values()), bits(&agree));
    }
}

/// Distinct, sign-sensitive values, including both zeros.
fn distinct(layout: CodeLayout, offset: f64) -> Vec<f64> {
    (0..layout.total())
        .map(|i| match i {
            0 => 0.0 * offset.signum(),
            _ => offset + i as f64 * 0.1,
        })
        .collect()
}

#[test]
fn exhaustive_over_layouts_and_parts() {
    for (n, m) in LAYOUTS {
        let layout = CodeLayout::new(n, m).unwrap();
        check_pair(layout, &distinct(layout, 1.0), &distinct(layout, -1.0));
        // special values survive bit-exactly
        let mut odd = distinct(layout, 2.0);
        odd[layout.total() - 1] = f64::NAN;
        odd[0] = -0.0;
        check_pair(layout, &odd, &distinct(layout, f64::MIN_POSITIVE));
    }
}

#[test]
fn graph_swap_matches_code_swap() {
    for (n, m) in LAYOUTS {
        let layout = CodeLayout::new(n, m).unwrap();
        let (a, b) = (distinct(layout, 1.0), distinct(layout, -3.0));
        for k in 0..n {
            let mut g = Graph::new();
            let (na, nb) = (g.input("a"), g.input("b"));
            let (ha, hb) = swap_graph(&mut g, layout, na, nb, k);
            g.mark_output("ha", ha);
            g.mark_output("hb", hb);
            let ta = Tensor::matrix(1, a.len(), a.clone()).unwrap();
            let tb = Tensor::matrix(1, b.len(), b.clone()).unwrap();
            let out = g.forward(&Feeds::new().with("a", &ta).with("b", &tb)).unwrap();
            let (ca, cb) = swap_part(&code(layout, &a), &code(layout, &b), k).unwrap();
            assert_eq!(bits(out["ha"].data()), bits(ca.values()));
            assert_eq!(bits(out["hb"].data()), bits(cb.values()));
        }
    }
}

proptest! {
    #[test]
    fn random_pairs_obey_the_algebra(
        layout_index in 0..LAYOUTS.len(),
        seed in proptest::collection::vec(-1e6f64..1e6, 50),
    ) {
        let (n, m) = LAYOUTS[layout_index];
        let layout = CodeLayout::new(n, m).unwrap();
        let t = layout.total();
        check_pair(layout, &seed[..t], &seed[t..2 * t]);
    }
}
