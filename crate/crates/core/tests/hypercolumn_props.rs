mod common;

use pixelseg::hypercolumn::{self, extract_hypercolumns, FeatureLevel, FeaturePyramid};
use pixelseg::nn::{Tape, Tensor};
use proptest::prelude::*;

fn pyramid_strategy() -> impl Strategy<Value = (FeaturePyramid, Vec<(usize, usize)>)> {
    (1usize..4, 4usize..17, 4usize..17, any::<u64>()).prop_flat_map(|(levels, h, w, seed)| {
        let pixels = proptest::collection::vec((0..h, 0..w), 1..12);
        (Just((levels, h, w, seed)), pixels).prop_map(|((levels, h, w, seed), pixels)| {
            let mut r = common::rng(seed);
            let levels: Vec<FeatureLevel> = (0..levels)
                .filter(|&l| h >> l > 0 && w >> l > 0)
                .map(|l| FeatureLevel {
                    map: common::random_tensor(&[1 + l, h >> l, w >> l], &mut r),
                    stride: 1 << l,
                })
                .collect();
            (FeaturePyramid::new(levels, h, w).unwrap(), pixels)
        })
    })
}

/// Independent statement of the centre-aligned mapping.
fn expected_coordinate(p: usize, stride: usize, extent: usize) -> f64 {
    let raw = (2.0 * p as f64 + 1.0 - stride as f64) / (2.0 * stride as f64);
    raw.max(0.0).min((extent - 1) as f64)
}

proptest! {
    #[test]
    fn batched_equals_per_pixel((pyramid, pixels) in pyramid_strategy()) {
        let batch = extract_hypercolumns(&pyramid, &pixels).unwrap();
        let f = pyramid.width();
        for (i, &p) in pixels.iter().enumerate() {
            let single = pyramid.hypercolumn(p).unwrap();
            for (a, b) in batch.data()[i * f..(i + 1) * f].iter().zip(single.vector.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn values_lie_between_neighbouring_cells((pyramid, pixels) in pyramid_strategy()) {
        let batch = extract_hypercolumns(&pyramid, &pixels).unwrap();
        let f = pyramid.width();
        for (i, &(r, c)) in pixels.iter().enumerate() {
            let mut offset = 0;
            for level in pyramid.levels() {
                let shape = level.map.shape();
                let y = expected_coordinate(r, level.stride, shape[1]);
                let x = expected_coordinate(c, level.stride, shape[2]);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = (y.ceil() as usize, x.ceil() as usize);
                for ch in 0..shape[0] {
                    let cells = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)].map(|(a, b)| level.map.at(&[ch, a, b]));
                    let lo = cells.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let v = batch.data()[i * f + offset + ch];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
                }
                offset += shape[0];
            }
        }
    }

    #[test]
    fn integer_coordinates_read_cells_bit_exactly(h in 1usize..9, w in 1usize..9, seed in any::<u64>(), r in 0usize..9, c in 0usize..9) {
        let mut rng = common::rng(seed);
        let map = common::random_tensor(&[3, h, w], &mut rng);
        let (r, c) = (r % h, c % w);
        let s = hypercolumn::bilinear_sample(&map, (r as f64, c as f64)).unwrap();
        for ch in 0..3 {
            prop_assert_eq!(s.data()[ch].to_bits(), map.at(&[ch, r, c]).to_bits());
        }
    }

    #[test]
    fn recorded_extraction_matches_functional((pyramid, pixels) in pyramid_strategy()) {
        let mut tape = Tape::new();
        let levels: Vec<_> = pyramid
            .levels()
            .iter()
            .map(|l| (tape.leaf(l.map.clone()), l.stride))
            .collect();
        let v = hypercolumn::extract_on_tape(&mut tape, &levels, pyramid.input_size(), &pixels).unwrap();
        let direct = extract_hypercolumns(&pyramid, &pixels).unwrap();
        prop_assert_eq!(tape.value(v).data(), direct.data());
    }
}

#[test]
fn coordinate_mapping_matches_independent_formula() {
    for stride in [1usize, 2, 4, 8] {
        for extent in 1..6 {
            for p in 0..stride * extent {
                let (y, x) = hypercolumn::map_coordinate((p, p), stride, (extent, extent));
                assert_eq!(y, expected_coordinate(p, stride, extent));
                assert_eq!(x, y);
            }
        }
    }
}

#[test]
fn stride_two_example_interpolates_four_cells() {
    let map = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let pyramid = FeaturePyramid::new(vec![FeatureLevel { map, stride: 2 }], 4, 4).unwrap();
    // pixel (1, 1) maps to (0.25, 0.25)
    let v = pyramid.hypercolumn((1, 1)).unwrap().vector.data()[0];
    assert!((v - (0.75 * 0.25 * 1.0 + 0.25 * 0.75 * 2.0 + 0.25 * 0.25 * 3.0)).abs() < 1e-15);
}
