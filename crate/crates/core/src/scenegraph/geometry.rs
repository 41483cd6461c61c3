use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let in_range = [x1, y1, x2, y2].iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidArgument(format!(
                "invalid box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    a.union(b)
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn union_examples() {
        let unit = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(union_box(&unit, &unit), unit);
        assert_eq!(union_box(&b(0.0, 0.0, 0.2, 0.2), &b(0.5, 0.5, 0.8, 0.9)), b(0.0, 0.0, 0.8, 0.9));
    }

    #[test]
    fn iou_examples() {
        let a = b(0.1, 0.2, 0.4, 0.6);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 0.1, 0.1), &b(0.5, 0.5, 0.6, 0.6)), 0.0);
        // overlap 0.1 x 0.1 = 0.01; union 0.04 + 0.04 - 0.01 = 0.07
        let v = iou(&b(0.0, 0.0, 0.2, 0.2), &b(0.1, 0.1, 0.3, 0.3));
        assert!((v - 1.0 / 7.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BoundingBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.5, 1.0).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..0.1f64, 0.01..0.1f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn union_contains_inputs(a in arb_box(), c in arb_box()) {
            let u = union_box(&a, &c);
            prop_assert!(u.contains(&a) && u.contains(&c));
        }

        #[test]
        fn union_commutes_and_associates(a in arb_box(), c in arb_box(), d in arb_box()) {
            prop_assert_eq!(union_box(&a, &c), union_box(&c, &a));
            prop_assert_eq!(union_box(&union_box(&a, &c), &d), union_box(&a, &union_box(&c, &d)));
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
