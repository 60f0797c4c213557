//! Invariants of the dose metrics on random volumes.

use mcdenoise::metrics::{d_number, dvh, evaluate, isodose_dice, DVH_BINS, DVH_MAX_DOSE};
use mcdenoise::phantom::{DoseVolume, Mask};
use proptest::prelude::*;

fn volumes() -> impl Strategy<Value = (DoseVolume, DoseVolume, Mask, Mask)> {
    (1usize..=8, 1usize..=8, 1usize..=4).prop_flat_map(|(h, w, d)| {
        let n = h * w * d;
        (
            prop::collection::vec(-0.1f64..90.0, n),
            prop::collection::vec(-0.1f64..90.0, n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
        )
            .prop_map(move |(a, b, m, k)| {
                let e = [h, w, d];
                let mut ptv = m;
                ptv[k] = true;
                let a = DoseVolume::new(e, [1.0; 3], a).unwrap();
                let b = DoseVolume::new(e, [1.0; 3], b).unwrap();
                let ptv_mask = Mask::from_fn(e, [1.0; 3], |[i, j, l]| ptv[(i * w + j) * d + l]);
                let body = Mask::from_fn(e, [1.0; 3], |_| true);
                (a, b, ptv_mask, body)
            })
    })
}

proptest! {
    #[test]
    fn dvh_is_a_survival_curve((a, _b, ptv, _body) in volumes()) {
        let c = dvh(&a, &ptv, DVH_BINS, DVH_MAX_DOSE / 80.0 * 100.0, "ptv").unwrap();
        prop_assert_eq!(c.fractions[0], 1.0);
        prop_assert!(c.fractions.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(c.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn d_numbers_are_ordered((a, _b, ptv, _body) in volumes()) {
        let d = |p| d_number(&a, &ptv, p).unwrap();
        prop_assert!(d(99.0) <= d(98.0) && d(98.0) <= d(95.0));
    }

    #[test]
    fn dice_is_symmetric_and_bounded((a, b, _ptv, _body) in volumes(), level in 1.0f64..100.0) {
        let x = isodose_dice(&a, &b, level, 80.0).unwrap();
        prop_assert_eq!(x, isodose_dice(&b, &a, level, 80.0).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(isodose_dice(&a, &a, level, 80.0).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_is_scale_invariant((a, b, ptv, body) in volumes(), k in -4i32..=4) {
        prop_assume!(d_number(&b, &ptv, 95.0).unwrap() > 0.0);
        let c = 2f64.powi(k);
        let scale = |v: &DoseVolume| v.with_values(v.values.iter().map(|x| x * c).collect()).unwrap();
        let r = evaluate(&a, &b, &ptv, &body).unwrap();
        let mut s = evaluate(&scale(&a), &scale(&b), &ptv, &body).unwrap();
        prop_assert_eq!(s.reference_d95, c * r.reference_d95);
        s.reference_d95 = r.reference_d95;
        prop_assert_eq!(s, r);
    }
}
