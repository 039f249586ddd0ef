use proptest::prelude::*;
use transvg_core::{giou, iou, BBox};

/// Exact area oracle: boxes with integer corners on a small grid, areas by
/// counting unit cells.
fn cells(c: [i32; 4]) -> Vec<(i32, i32)> {
    (c[0]..c[2]).flat_map(|x| (c[1]..c[3]).map(move |y| (x, y))).collect()
}

fn grid_box(c: [i32; 4]) -> BBox {
    BBox::from_corners(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64).unwrap()
}

fn corners() -> impl Strategy<Value = [i32; 4]> {
    (0..12i32, 0..12i32, 1..8i32, 1..8i32).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn unit_box() -> impl Strategy<Value = BBox> {
    (0.0..1.0f64, 0.0..1.0f64, 1e-3..1.0f64, 1e-3..1.0f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
}

#[test]
fn hand_derived_values() {
    let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0).unwrap();
    assert!((iou(a, b) - 1.0 / 7.0).abs() < 1e-12);
    assert!((giou(a, b).unwrap() - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-12);
    let far = BBox::from_corners(2.0, 2.0, 3.0, 3.0).unwrap();
    let unit = BBox::from_corners(0.0, 0.0, 1.0, 1.0).unwrap();
    assert!((giou(unit, far).unwrap() + 7.0 / 9.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn iou_and_giou_match_cell_counting(a in corners(), b in corners()) {
        let (ca, cb) = (cells(a), cells(b));
        let inter = ca.iter().filter(|p| cb.contains(p)).count() as f64;
        let union = (ca.len() + cb.len()) as f64 - inter;
        let hull = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
        let hull = cells(hull).len() as f64;
        let (ba, bb) = (grid_box(a), grid_box(b));
        prop_assert!((iou(ba, bb) - inter / union).abs() < 1e-12);
        let expected = inter / union - (hull - union) / hull;
        prop_assert!((giou(ba, bb).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn giou_properties(a in unit_box(), b in unit_box(), k in 0.1..10.0f64) {
        let g = giou(a, b).unwrap();
        prop_assert!((g - giou(b, a).unwrap()).abs() < 1e-12);
        prop_assert!(g <= iou(a, b) + 1e-12);
        prop_assert!(g > -1.0 && g <= 1.0);
        let s = |x: BBox| BBox::new(x.cx * k, x.cy * k, x.w * k, x.h * k).unwrap();
        prop_assert!((giou(s(a), s(b)).unwrap() - g).abs() < 1e-9);
        prop_assert!((giou(a, a).unwrap() - 1.0).abs() < 1e-12);
    }
}
