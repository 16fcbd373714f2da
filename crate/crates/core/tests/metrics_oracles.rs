mod common;

use common::*;
use lorapt::segmetrics::{
    connected_components, dice, dice_loss, dice_loss_with_grad, hd95, remove_small_components, Mask3D, ProbVolume,
    DEFAULT_MIN_COMPONENT_MM3,
};
use lorapt::Error;
use proptest::prelude::*;
use rand::Rng;

fn dims_strategy() -> impl Strategy<Value = [usize; 3]> {
    (1usize..=10, 1usize..=10, 1usize..=10).prop_map(|(x, y, z)| [x, y, z])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_match_brute_force(dims in dims_strategy(), seed in any::<u64>(), density in 0.05f64..0.6) {
        let mut r = rng(seed);
        let sp = [r.random_range(0.5..2.0), r.random_range(0.5..2.0), r.random_range(0.5..2.0)];
        let a = random_mask(&mut r, dims, sp, density);
        let b = random_mask(&mut r, dims, sp, density);
        prop_assert_eq!(dice(&a, &b).unwrap(), brute_dice(&a, &b));
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        match brute_hd95(&a, &b) {
            Some(want) => {
                let got = hd95(&a, &b).unwrap();
                prop_assert!((got - want).abs() <= 1e-12, "got {} want {}", got, want);
                prop_assert_eq!(got, hd95(&b, &a).unwrap());
                prop_assert!(got <= brute_hausdorff(&a, &b).unwrap() + 1e-12);
            }
            None => prop_assert!(matches!(hd95(&a, &b), Err(Error::UndefinedMetric(_)))),
        }
    }

    #[test]
    fn component_filter_matches_flood_fill(dims in dims_strategy(), seed in any::<u64>(), thr in 0.0f64..40.0) {
        let mut r = rng(seed);
        let m = random_mask(&mut r, dims, [1.0, 1.0, 1.5], 0.25);
        let out = remove_small_components(&m, thr);
        let want = flood_fill_filter(&m, thr);
        prop_assert_eq!(out.voxels(), want.as_slice());
        prop_assert_eq!(&remove_small_components(&out, thr), &out);
        prop_assert!(out.voxels().iter().zip(m.voxels()).all(|(o, i)| o <= i));
        let (_, sizes) = flood_fill_labels(&m);
        prop_assert_eq!(connected_components(&m).len(), sizes.len());
    }
}

#[test]
fn single_voxels_three_apart() {
    let mut a = Mask3D::empty([8, 2, 2], [1.0; 3]).unwrap();
    let mut b = a.clone();
    a.set(1, 0, 0, true);
    b.set(4, 0, 0, true);
    assert_eq!(hd95(&a, &b).unwrap(), 3.0);
    assert_eq!(brute_hd95(&a, &b).unwrap(), 3.0);
}

#[test]
fn percentile_ignores_the_worst_five_percent() {
    // 40 boundary voxels of b sit on a; one far outlier does not move HD95
    let mut a = Mask3D::empty([60, 3, 1], [1.0; 3]).unwrap();
    for x in 0..40 {
        a.set(x, 1, 0, true);
    }
    let mut b = a.clone();
    b.set(59, 1, 0, true);
    assert_eq!(hd95(&a, &b).unwrap(), 0.0);
    assert_eq!(brute_hausdorff(&a, &b).unwrap(), 20.0);
}

#[test]
fn dice_loss_gradient_matches_finite_differences() {
    let mut r = rng(77);
    let dims = [4, 4, 4];
    let targets: Vec<Mask3D> = (0..2).map(|_| random_mask(&mut r, dims, [1.0; 3], 0.4)).collect();
    let preds: Vec<ProbVolume> = (0..2)
        .map(|_| ProbVolume::new(dims, (0..64).map(|_| r.random_range(0.05..0.95)).collect()).unwrap())
        .collect();
    let (_, grad) = dice_loss_with_grad(&preds, &targets).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for n in 0..2 {
        for v in 0..64 {
            let mut plus = preds.clone();
            let mut minus = preds.clone();
            let mut vp = plus[n].values().to_vec();
            vp[v] += h;
            plus[n] = ProbVolume::new(dims, vp).unwrap();
            let mut vm = minus[n].values().to_vec();
            vm[v] -= h;
            minus[n] = ProbVolume::new(dims, vm).unwrap();
            let fd = (dice_loss(&plus, &targets).unwrap() - dice_loss(&minus, &targets).unwrap()) / (2.0 * h);
            let g = grad[n][v];
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()));
        }
    }
    assert!(worst <= 1e-6, "worst relative error {worst}");
}

#[test]
fn binary_prediction_loss_is_negative_dice() {
    let mut r = rng(5);
    let a = random_mask(&mut r, [5, 5, 5], [1.0; 3], 0.3);
    let b = random_mask(&mut r, [5, 5, 5], [1.0; 3], 0.3);
    let loss = dice_loss(&[ProbVolume::from_mask(&a)], &[b.clone()]).unwrap();
    assert!((loss + dice(&a, &b).unwrap()).abs() <= 1e-6);
}

#[test]
fn thousand_cubic_millimetre_rule() {
    // 1500-voxel slab and a 400-voxel slab, separated by an empty plane
    let mut m = Mask3D::empty([20, 20, 10], [1.0; 3]).unwrap();
    for x in 0..15 {
        for y in 0..10 {
            for z in 0..10 {
                m.set(x, y, z, true);
            }
        }
    }
    for x in 0..10 {
        for y in 12..16 {
            for z in 0..10 {
                m.set(x, y, z, true);
            }
        }
    }
    assert_eq!(m.count(), 1900);
    let out = remove_small_components(&m, DEFAULT_MIN_COMPONENT_MM3);
    assert_eq!(out.count(), 1500);
    assert_eq!(out.voxels(), flood_fill_filter(&m, 1000.0).as_slice());
    assert!(!out.get(0, 12, 0) && out.get(0, 0, 0));
}
