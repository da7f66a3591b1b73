use std::path::Path;

use proptest::prelude::*;

use tightbox::bags::crossing_lines;
use tightbox::geometry::{iou, BBox, BinaryMask, ClassId, Dims};
use tightbox::metrics::{cdr_from_boxes, dice, f1_glaucoma};
use tightbox::pgm::{self, GrayImage};
use tightbox::regression::{decode_box, eiou, encode_target};
use tightbox::smoothmax::{alpha_quasimax, alpha_softmax};

fn any_box() -> impl Strategy<Value = BBox> {
    (-100.0..100.0f64, -100.0..100.0f64, 0.1..80.0f64, 0.1..80.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn mask(dims: Dims) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), dims.area())
        .prop_map(move |bits| BinaryMask::from_fn(dims, |x, y| bits[dims.index(x, y)]))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in any_box(), b in any_box()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_max_bounds(x in proptest::collection::vec(-20.0..20.0f64, 1..200), k in 0usize..4) {
        let alpha = [1.0, 4.0, 8.0, 16.0][k];
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let (s, gs) = alpha_softmax(&x, alpha).unwrap();
        let (q, gq) = alpha_quasimax(&x, alpha).unwrap();
        prop_assert!(min <= s && s <= max);
        prop_assert!(max - (x.len() as f64).ln() / alpha <= q && q <= max);
        prop_assert!((gs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((gq.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(gq.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn box_coding_roundtrip(b in any_box(), u in 0.0..1.0f64, v in 0.0..1.0f64, s in 1.0..200.0f64) {
        let loc = (b.xl + u * b.width(), b.yt + v * b.height());
        let t = encode_target(loc, &b, s);
        prop_assert!(t.0.iter().all(|&x| x >= -1e-12));
        let d = decode_box(loc, t.0, s).unwrap();
        for (p, q) in [(d.xl, b.xl), (d.yt, b.yt), (d.xr, b.xr), (d.yb, b.yb)] {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn cdr_scale_invariance(oc in any_box(), od in any_box(), s in 0.01..100.0f64) {
        let scale = |b: &BBox| BBox::new(b.xl, b.yt * s, b.xr, b.yb * s).unwrap();
        let (a, b) = (cdr_from_boxes(&oc, &od), cdr_from_boxes(&scale(&oc), &scale(&od)));
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn eiou_range_and_mirror(r1 in 0.01..0.99f64, r2 in 0.01..0.99f64) {
        let e = eiou(r1, r2).unwrap();
        prop_assert!(e > 0.0 && e <= 1.0);
        prop_assert!((e - eiou(1.0 - r1, r2).unwrap()).abs() < 1e-12);
        prop_assert!((e - eiou(r2, r1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn f1_bounded_and_permutation_invariant(
        pairs in proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..40),
        rot in 0usize..40,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
        let f = f1_glaucoma(&p, &t, 0.6).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let (p2, t2): (Vec<f64>, Vec<f64>) = rotated.into_iter().unzip();
        prop_assert_eq!(f, f1_glaucoma(&p2, &t2, 0.6).unwrap());
    }

    #[test]
    fn dice_symmetric(a in mask(Dims::new(6, 7)), b in mask(Dims::new(6, 7))) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn pgm_roundtrip(h in 1usize..20, w in 1usize..20, seed in any::<u8>()) {
        let pixels = (0..h * w).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = GrayImage::new(Dims::new(h, w), pixels).unwrap();
        prop_assert_eq!(pgm::decode(&pgm::encode(&img), Path::new("p.pgm")).unwrap(), img);
    }

    #[test]
    fn crossing_lines_stay_in_box(
        x in 0.0..40.0f64, y in 0.0..40.0f64, w in 1.0..30.0f64, h in 1.0..30.0f64, k in 0usize..9,
    ) {
        let b = BBox::new(x, y, x + w, y + h).unwrap();
        let theta = -40.0 + 10.0 * k as f64;
        let dims = Dims::new(64, 64);
        for bag in crossing_lines(&b, theta, ClassId(1), dims) {
            prop_assert!(!bag.pixels.is_empty());
            for &(px, py) in &bag.pixels {
                prop_assert!(b.contains_pixel(px, py), "({}, {}) outside {:?}", px, py, b);
            }
        }
    }
}
