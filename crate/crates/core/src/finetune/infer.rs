//! Link decoding: probability threshold, the father-selection restriction,
//! and the rule-based geometric-constraint baseline.

use std::collections::BTreeSet;

use crate::geometry::BBox;
use crate::heads::RelationMatrix;

/// Decoded father -> son links of one document.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecodedRelations {
    pub links: BTreeSet<(usize, usize)>,
}

/// Thresholded decoding, optionally restricted to fathers whose probability
/// is within `tau` of the row maximum. The restricted output is always a
/// subset of the plain thresholded output; the diagonal is ignored.
pub fn decode_rsf(relations: &RelationMatrix<f32>, tau: f64, enabled: bool) -> DecodedRelations {
    let n = relations.n();
    let mut links = BTreeSet::new();
    for son in 0..n {
        let row_max = (0..n)
            .filter(|&f| f != son)
            .map(|f| relations.get(son, f))
            .fold(f32::NEG_INFINITY, f32::max);
        for father in 0..n {
            if father == son {
                continue;
            }
            let p = relations.get(son, father);
            if p <= 0.5 {
                continue;
            }
            if enabled && f64::from(row_max) >= f64::from(p) + tau {
                continue;
            }
            links.insert((father, son));
        }
    }
    DecodedRelations { links }
}

/// Median segment height times three: the default pruning distance for the
/// geometric-constraint baseline.
pub fn default_constraint_delta(boxes: &[BBox]) -> f64 {
    if boxes.is_empty() {
        return f64::INFINITY;
    }
    let mut heights: Vec<f64> = boxes.iter().map(BBox::height).collect();
    heights.sort_by(|a, b| a.partial_cmp(b).expect("finite heights"));
    let mid = heights.len() / 2;
    let median = if heights.len() % 2 == 0 {
        (heights[mid - 1] + heights[mid]) / 2.0
    } else {
        heights[mid]
    };
    3.0 * median
}

/// Removes links whose son center sits more than `delta` above the father
/// center. Output is always a subset of the input.
pub fn geometric_constraint_filter(
    decoded: &DecodedRelations,
    boxes: &[BBox],
    delta: f64,
) -> DecodedRelations {
    let links = decoded
        .links
        .iter()
        .copied()
        .filter(|&(father, son)| {
            let (_, fy) = boxes[father].center();
            let (_, sy) = boxes[son].center();
            fy - sy <= delta
        })
        .collect();
    DecodedRelations { links }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use proptest::prelude::*;

    fn matrix(n: usize, probs: Vec<f32>) -> RelationMatrix<f32> {
        RelationMatrix::new(Tensor::new(vec![n, n], probs).unwrap())
    }

    #[test]
    fn rsf_prunes_fathers_far_from_the_row_maximum() {
        // Row for son 0: fathers at 0.9, 0.8995, 0.6; diagonal unused.
        #[rustfmt::skip]
        let m = matrix(4, vec![
            0.0, 0.9, 0.8995, 0.6,
            0.0, 0.0, 0.0,    0.0,
            0.0, 0.0, 0.0,    0.0,
            0.0, 0.0, 0.0,    0.0,
        ]);
        let plain = decode_rsf(&m, 1e-3, false);
        assert_eq!(
            plain.links,
            [(1usize, 0usize), (2, 0), (3, 0)].into_iter().collect()
        );
        let restricted = decode_rsf(&m, 1e-3, true);
        assert_eq!(
            restricted.links,
            [(1usize, 0usize), (2, 0)].into_iter().collect()
        );
    }

    #[test]
    fn all_below_threshold_decodes_nothing() {
        let m = matrix(2, vec![0.9, 0.4, 0.49, 0.9]);
        assert!(decode_rsf(&m, 1e-3, true).links.is_empty());
        assert!(decode_rsf(&m, 1e-3, false).links.is_empty());
    }

    #[test]
    fn filter_removes_far_above_sons_and_keeps_the_rest() {
        let boxes = vec![
            BBox::new(10.0, 100.0, 60.0, 112.0).unwrap(), // father
            BBox::new(10.0, 10.0, 60.0, 22.0).unwrap(),   // son far above
            BBox::new(10.0, 120.0, 60.0, 132.0).unwrap(), // son below
        ];
        let decoded = DecodedRelations {
            links: [(0usize, 1usize), (0, 2)].into_iter().collect(),
        };
        let delta = default_constraint_delta(&boxes);
        assert!((delta - 36.0).abs() < 1e-9);
        let kept = geometric_constraint_filter(&decoded, &boxes, delta);
        assert_eq!(kept.links, [(0usize, 2usize)].into_iter().collect());

        // An infinite threshold keeps everything.
        let all = geometric_constraint_filter(&decoded, &boxes, f64::INFINITY);
        assert_eq!(all.links, decoded.links);
    }

    proptest! {
        #[test]
        fn rsf_output_is_subset_of_threshold_output(
            probs in proptest::collection::vec(0.0f32..1.0, 16),
            tau in 0.0f64..0.2,
        ) {
            let m = matrix(4, probs);
            let plain = decode_rsf(&m, tau, false);
            let restricted = decode_rsf(&m, tau, true);
            prop_assert!(restricted.links.is_subset(&plain.links));
            // Removed links are exactly those failing the margin test.
            for &(father, son) in plain.links.difference(&restricted.links) {
                let row_max = (0..4)
                    .filter(|&f| f != son)
                    .map(|f| m.get(son, f))
                    .fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(f64::from(row_max) >= f64::from(m.get(son, father)) + tau);
            }
        }

        #[test]
        fn constraint_filter_output_is_subset(
            ys in proptest::collection::vec(0.0f64..500.0, 4),
            delta in 0.0f64..200.0,
        ) {
            let boxes: Vec<BBox> = ys
                .iter()
                .map(|&y| BBox::new(10.0, y, 60.0, y + 12.0).unwrap())
                .collect();
            let mut links = BTreeSet::new();
            for f in 0..4usize {
                for s in 0..4usize {
                    if f != s {
                        links.insert((f, s));
                    }
                }
            }
            let decoded = DecodedRelations { links: links.clone() };
            let kept = geometric_constraint_filter(&decoded, &boxes, delta);
            prop_assert!(kept.links.is_subset(&links));
        }
    }
}
