mod common;

use common::brute;
use pixelseg::metrics::{self, BinaryMask, DistanceMode};
use proptest::prelude::*;

fn mask(dims: &[usize], grid: Vec<bool>) -> BinaryMask {
    BinaryMask::new(dims, grid).unwrap()
}

#[test]
fn all_nonempty_three_by_three_pairs_match_brute_force() {
    let masks: Vec<Vec<bool>> = (1u32..512).map(|b| brute::mask_from_bits(b, 9)).collect();
    let built: Vec<BinaryMask> = masks.iter().map(|m| mask(&[3, 3], m.clone())).collect();
    for (a, ma) in masks.iter().zip(&built) {
        for (b, mb) in masks.iter().zip(&built) {
            assert_eq!(metrics::dice(ma, mb).unwrap(), brute::dice(a, b));
            assert_eq!(
                metrics::hausdorff95(ma, mb).unwrap(),
                brute::hd95(a, b, 3, 3, (1.0, 1.0))
            );
        }
    }
}

fn grid_strategy() -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            proptest::collection::vec(any::<bool>(), h * w),
            proptest::collection::vec(any::<bool>(), h * w),
        )
    })
}

proptest! {
    #[test]
    fn anisotropic_distances_match_brute_force((h, w, a, b) in grid_strategy(), sy in 0.25f64..4.0, sx in 0.25f64..4.0) {
        let pa = mask(&[h, w], a.clone()).with_spacing(&[sy, sx]).unwrap();
        let pb = mask(&[h, w], b.clone()).with_spacing(&[sy, sx]).unwrap();
        let got = metrics::hausdorff95(&pa, &pb).unwrap();
        let want = brute::hd95(&a, &b, h, w, (sy, sx));
        match (got, want) {
            (Some(g), Some(e)) => prop_assert!((g - e).abs() <= 1e-12 * e.max(1.0)),
            (g, e) => prop_assert_eq!(g, e),
        }
    }

    #[test]
    fn distances_scale_linearly_with_spacing((h, w, a, b) in grid_strategy(), s in 0.1f64..10.0) {
        let base = |sp: &[f64], g: &Vec<bool>| mask(&[h, w], g.clone()).with_spacing(sp).unwrap();
        let one = metrics::surface_distances(&base(&[1.0, 1.5], &a), &base(&[1.0, 1.5], &b), DistanceMode::Surface).unwrap();
        let scaled = metrics::surface_distances(&base(&[s, 1.5 * s], &a), &base(&[s, 1.5 * s], &b), DistanceMode::Surface).unwrap();
        if let (Some(o), Some(t)) = (one, scaled) {
            for (x, y) in [(o.hd95, t.hd95), (o.hausdorff, t.hausdorff), (o.average, t.average)] {
                prop_assert!((x * s - y).abs() <= 1e-12 * y.max(1.0), "{} vs {}", x * s, y);
            }
        } else {
            prop_assert!(one.is_none() && scaled.is_none());
        }
    }

    #[test]
    fn translation_leaves_metrics_unchanged((h, w, a, b) in grid_strategy(), dy in 0usize..4, dx in 0usize..4) {
        let (hh, ww) = (h + 4, w + 4);
        let shift = |g: &Vec<bool>, oy: usize, ox: usize| {
            let mut out = vec![false; hh * ww];
            for r in 0..h {
                for c in 0..w {
                    out[(r + oy + 1) * ww + c + ox + 1] = g[r * w + c];
                }
            }
            mask(&[hh, ww], out)
        };
        let (a0, b0) = (shift(&a, 0, 0), shift(&b, 0, 0));
        let (a1, b1) = (shift(&a, dy.min(2), dx.min(2)), shift(&b, dy.min(2), dx.min(2)));
        prop_assert_eq!(metrics::dice(&a0, &b0).unwrap(), metrics::dice(&a1, &b1).unwrap());
        let d0 = metrics::surface_distances(&a0, &b0, DistanceMode::AllVoxels).unwrap();
        let d1 = metrics::surface_distances(&a1, &b1, DistanceMode::AllVoxels).unwrap();
        prop_assert_eq!(d0, d1);
    }

    #[test]
    fn volumetric_distances_match_brute_force(d in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>(), sz in 0.5f64..3.0) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let n = d * h * w;
        let a: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        let b: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        let spacing = [sz, 1.0, 0.75];
        let ma = mask(&[d, h, w], a.clone()).with_spacing(&spacing).unwrap();
        let mb = mask(&[d, h, w], b.clone()).with_spacing(&spacing).unwrap();
        let got = metrics::surface_distances(&ma, &mb, DistanceMode::AllVoxels).unwrap();
        let pts = |g: &[bool]| -> Vec<[f64; 3]> {
            (0..n).filter(|&i| g[i]).map(|i| [(i / (h * w)) as f64 * sz, ((i / w) % h) as f64, (i % w) as f64 * 0.75]).collect()
        };
        let (pa, pb) = (pts(&a), pts(&b));
        if pa.is_empty() || pb.is_empty() {
            prop_assert!(got.is_none());
            return Ok(());
        }
        let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| -> Vec<f64> {
            x.iter().map(|p| y.iter().map(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()).fold(f64::INFINITY, f64::min).sqrt()).collect()
        };
        let (ab, ba) = (directed(&pa, &pb), directed(&pb, &pa));
        let want = brute::p95(ab.clone()).max(brute::p95(ba.clone()));
        let got = got.unwrap();
        prop_assert!((got.hd95 - want).abs() <= 1e-12 * want.max(1.0));
        let mean = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64;
        prop_assert!((got.average - mean).abs() <= 1e-12 * mean.max(1.0));
    }
}

#[test]
fn single_voxel_three_four_five() {
    let a = BinaryMask::from_coords(&[8, 8], &[&[0, 0]]).unwrap();
    let b = BinaryMask::from_coords(&[8, 8], &[&[3, 4]]).unwrap();
    assert_eq!(metrics::hausdorff95(&a, &b).unwrap(), Some(5.0));
}
