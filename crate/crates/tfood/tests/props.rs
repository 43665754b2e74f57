//! Property-based invariants over the numeric core and the loss stack.

use proptest::prelude::*;

use tfood::eval::rank_matrix;
use tfood::losses::{itc_loss, margin_at, MarginPolicy};
use tfood::tensor::Tensor;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0..10.0f64, len)
}

fn unit_rows(b: usize, d: usize, data: Vec<f64>) -> Tensor {
    let mut v = data;
    for i in 0..b {
        let row = &mut v[i * d..(i + 1) * d];
        let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            row[0] = 1.0;
        } else {
            for x in row.iter_mut() {
                *x /= n;
            }
        }
    }
    Tensor::from_vec(&[b, d], v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(data in finite_vec(24)) {
        let t = Tensor::from_vec(&[4, 6], data);
        let s = t.softmax_rows().unwrap();
        let d = s.data();
        for i in 0..4 {
            let sum: f64 = d[i * 6..(i + 1) * 6].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(d[i * 6..(i + 1) * 6].iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn l2_normalized_rows_are_unit(data in finite_vec(20)) {
        let t = Tensor::from_vec(&[4, 5], data.clone());
        let n = t.l2_normalize_rows().unwrap().data();
        for i in 0..4 {
            let row_in = &data[i * 5..(i + 1) * 5];
            let norm_in: f64 = row_in.iter().map(|x| x * x).sum::<f64>().sqrt();
            let norm_out: f64 = n[i * 5..(i + 1) * 5].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm_in > 1e-9 {
                prop_assert!((norm_out - 1.0).abs() < 1e-9);
            } else {
                prop_assert!(norm_out.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn itc_loss_is_permutation_invariant(
        a in finite_vec(32),
        b in finite_vec(32),
        perm_seed in 0u64..1000,
    ) {
        let bsz = 4;
        let d = 8;
        let e_r = unit_rows(bsz, d, a);
        let e_v = unit_rows(bsz, d, b);
        let (base, stats) = itc_loss(&e_r, &e_v, 0.2).unwrap();

        // apply the same row permutation to both modalities
        let mut order: Vec<usize> = (0..bsz).collect();
        let mut s = perm_seed;
        for i in (1..bsz).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permute = |t: &Tensor| {
            let src = t.data();
            let mut out = vec![0.0; src.len()];
            for (new, &old) in order.iter().enumerate() {
                out[new * d..(new + 1) * d].copy_from_slice(&src[old * d..(old + 1) * d]);
            }
            Tensor::from_vec(&[bsz, d], out)
        };
        let (permuted, pstats) = itc_loss(&permute(&e_r), &permute(&e_v), 0.2).unwrap();
        prop_assert!((base.item() - permuted.item()).abs() < 1e-9);
        prop_assert_eq!(stats.delta_r, pstats.delta_r);
        prop_assert_eq!(stats.delta_v, pstats.delta_v);
    }

    #[test]
    fn tape_gradients_are_additive(a in finite_vec(12), b in finite_vec(12)) {
        // grad of (f + g) equals grad f plus grad g on the same tape
        let x = Tensor::param(&[3, 4], a);
        let y = Tensor::from_vec(&[3, 4], b);

        x.zero_grad();
        x.mul(&y).unwrap().sum_all().backward();
        let gf = x.grad().unwrap();

        x.zero_grad();
        x.relu().sum_all().backward();
        let gg = x.grad().unwrap();

        x.zero_grad();
        x.mul(&y).unwrap().sum_all().add(&x.relu().sum_all()).unwrap().backward();
        let gsum = x.grad().unwrap();
        for i in 0..12 {
            prop_assert!((gsum[i] - (gf[i] + gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn inc_margin_monotone_and_clamped(e1 in 0usize..200, e2 in 0usize..200) {
        let p = MarginPolicy::inc();
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        let (m_lo, m_hi) = (margin_at(&p, lo, 0), margin_at(&p, hi, 0));
        prop_assert!(m_lo <= m_hi);
        prop_assert!((0.05..=0.3).contains(&m_lo));
        prop_assert!((0.05..=0.3).contains(&m_hi));
    }

    #[test]
    fn ranks_are_a_valid_assignment(q in finite_vec(30), c in finite_vec(30)) {
        let ranks = rank_matrix(&q, &c, 5, 6);
        prop_assert_eq!(ranks.len(), 5);
        prop_assert!(ranks.iter().all(|&r| (1..=5).contains(&r)));
    }
}
