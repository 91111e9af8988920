//! Boundary extraction and boundary-to-boundary distances.
//!
//! Distances are computed exactly: an integer squared Euclidean distance
//! transform (Meijster et al.'s separable algorithm) gives, for every pixel,
//! the squared distance to the nearest boundary pixel of the other mask; the
//! square root is taken only at the end.

/// Row-major boundary of `mask [h, w]`: mask pixels with at least one
/// 4-neighbour outside the mask. Pixels beyond the image count as outside.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    assert_eq!(mask.len(), height * width, "mask extent");
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            out[i] = y == 0
                || x == 0
                || y + 1 == height
                || x + 1 == width
                || !mask[i - width]
                || !mask[i + width]
                || !mask[i - 1]
                || !mask[i + 1];
        }
    }
    out
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel
/// of `features`; `None` when there are no features.
pub fn squared_distance_transform(features: &[bool], height: usize, width: usize) -> Option<Vec<u64>> {
    assert_eq!(features.len(), height * width, "feature extent");
    if !features.iter().any(|&f| f) {
        return None;
    }
    let (h, w) = (height as i64, width as i64);
    let inf = h + w;
    // column pass: distance to the nearest feature in the same column
    let mut g = vec![0i64; features.len()];
    for x in 0..width {
        let col = |y: usize| y * width + x;
        g[col(0)] = if features[col(0)] { 0 } else { inf };
        for y in 1..height {
            g[col(y)] = if features[col(y)] { 0 } else { g[col(y - 1)] + 1 };
        }
        for y in (0..height - 1).rev() {
            if g[col(y + 1)] < g[col(y)] {
                g[col(y)] = g[col(y + 1)] + 1;
            }
        }
    }
    // row pass: lower envelope of the parabolas (x - i)² + g(i)²
    let mut out = vec![0u64; features.len()];
    let mut s = vec![0i64; width];
    let mut t = vec![0i64; width];
    for y in 0..height {
        let row = &g[y * width..(y + 1) * width];
        let f = |x: i64, i: i64| (x - i) * (x - i) + row[i as usize] * row[i as usize];
        let sep = |i: i64, u: i64| {
            (u * u - i * i + row[u as usize] * row[u as usize] - row[i as usize] * row[i as usize]).div_euclid(2 * (u - i))
        };
        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..w {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let v = 1 + sep(s[q as usize], u);
                if v < w {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = v;
                }
            }
        }
        for x in (0..w).rev() {
            out[y * width + x as usize] = f(x, s[q as usize]) as u64;
            if x == t[q as usize] {
                q -= 1;
            }
        }
    }
    Some(out)
}

/// Directed boundary distances between two masks: for each boundary pixel
/// of `a` (row-major order) the distance to the nearest boundary pixel of
/// `b`, and vice versa. `None` when either mask is empty.
pub fn boundary_distances(a: &[bool], b: &[bool], height: usize, width: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let (ba, bb) = (boundary(a, height, width), boundary(b, height, width));
    let da = squared_distance_transform(&ba, height, width)?;
    let db = squared_distance_transform(&bb, height, width)?;
    let directed = |from: &[bool], to: &[u64]| {
        from.iter()
            .zip(to)
            .filter(|(&on, _)| on)
            .map(|(_, &d2)| (d2 as f64).sqrt())
            .collect::<Vec<_>>()
    };
    Some((directed(&ba, &db), directed(&bb, &da)))
}

/// Mean of the values, summed in order.
pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Average Hausdorff distance: the larger of the two directed mean boundary
/// distances.
pub fn average_hausdorff(a: &[bool], b: &[bool], height: usize, width: usize) -> Option<f64> {
    let (ab, ba) = boundary_distances(a, b, height, width)?;
    Some(mean(&ab).max(mean(&ba)))
}

/// Nearest-rank 95th percentile of both directed distance lists pooled.
pub fn hd95(a: &[bool], b: &[bool], height: usize, width: usize) -> Option<f64> {
    let (ab, ba) = boundary_distances(a, b, height, width)?;
    Some(percentile_95(ab.into_iter().chain(ba).collect()))
}

/// Classic (maximum) Hausdorff distance between the boundaries.
pub fn hausdorff(a: &[bool], b: &[bool], height: usize, width: usize) -> Option<f64> {
    let (ab, ba) = boundary_distances(a, b, height, width)?;
    Some(ab.into_iter().chain(ba).fold(0.0, f64::max))
}

/// The value at rank `ceil(0.95·n)` (1-based) of the sorted list.
pub(crate) fn percentile_95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = (v.len() * 95).div_ceil(100).max(1);
    v[rank - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn from_points(points: &[(usize, usize)], h: usize, w: usize) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for &(y, x) in points {
            m[y * w + x] = true;
        }
        m
    }

    fn brute_transform(features: &[bool], h: usize, w: usize) -> Vec<u64> {
        let pts: Vec<(i64, i64)> = (0..h * w)
            .filter(|&i| features[i])
            .map(|i| ((i / w) as i64, (i % w) as i64))
            .collect();
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as i64, (i % w) as i64);
                pts.iter().map(|&(py, px)| ((py - y).pow(2) + (px - x).pow(2)) as u64).min().unwrap()
            })
            .collect()
    }

    #[test]
    fn boundary_of_a_filled_square_is_its_ring() {
        let (h, w) = (6, 6);
        let m: Vec<bool> = (0..36).map(|i| (1..5).contains(&(i / 6)) && (1..5).contains(&(i % 6))).collect();
        let b = boundary(&m, h, w);
        assert_eq!(b.iter().filter(|&&x| x).count(), 12);
        assert!(!b[2 * 6 + 2] && !b[3 * 6 + 3]);
    }

    #[test]
    fn image_edge_counts_as_outside() {
        let b = boundary(&[true; 9], 3, 3);
        assert_eq!(b.iter().filter(|&&x| x).count(), 8);
        assert!(!b[4]);
    }

    #[test]
    fn single_points_three_four_five() {
        let a = from_points(&[(0, 0)], 8, 8);
        let b = from_points(&[(3, 4)], 8, 8);
        assert_eq!(average_hausdorff(&a, &b, 8, 8), Some(5.0));
        assert_eq!(average_hausdorff(&b, &a, 8, 8), Some(5.0));
        assert_eq!(hd95(&a, &b, 8, 8), Some(5.0));
    }

    #[test]
    fn empty_masks_are_undefined() {
        let a = from_points(&[(1, 1)], 4, 4);
        let none = vec![false; 16];
        assert_eq!(average_hausdorff(&a, &none, 4, 4), None);
        assert_eq!(hd95(&none, &none, 4, 4), None);
    }

    #[test]
    fn identical_masks_are_at_distance_zero() {
        let a = from_points(&[(1, 1), (1, 2), (2, 1), (5, 5)], 8, 8);
        assert_eq!(average_hausdorff(&a, &a, 8, 8), Some(0.0));
        assert_eq!(hd95(&a, &a, 8, 8), Some(0.0));
        assert_eq!(hausdorff(&a, &a, 8, 8), Some(0.0));
    }

    #[test]
    fn one_outlier_is_cut_by_the_95th_percentile() {
        // 24 coincident single-pixel boundary points plus one far outlier in
        // the prediction: 49 pooled distances, 48 zeros and one 20
        let (h, w) = (32, 32);
        let matched: Vec<(usize, usize)> = (0..24).map(|i| (2 * (i / 8), 2 * (i % 8))).collect();
        let truth = from_points(&matched, h, w);
        let mut with_outlier = matched.clone();
        with_outlier.push((30, 14));
        let pred = from_points(&with_outlier, h, w);
        assert_eq!(hd95(&pred, &truth, h, w), Some(0.0));
        assert!(hausdorff(&pred, &truth, h, w).unwrap() > 10.0);
    }

    #[test]
    fn percentile_uses_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile_95(v.clone()), 19.0);
        assert_eq!(percentile_95(vec![3.0]), 3.0);
        assert_eq!(percentile_95((1..=21).map(f64::from).collect()), 20.0);
    }

    #[test]
    fn transform_matches_brute_force_on_random_grids() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
            let density = rng.random_range(0.01..0.5);
            let mut f: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
            f[rng.random_range(0..h * w)] = true;
            assert_eq!(squared_distance_transform(&f, h, w).unwrap(), brute_transform(&f, h, w), "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn hd95_never_exceeds_hausdorff(
            a in proptest::collection::vec(any::<bool>(), 100),
            b in proptest::collection::vec(any::<bool>(), 100),
        ) {
            if let (Some(p), Some(m)) = (hd95(&a, &b, 10, 10), hausdorff(&a, &b, 10, 10)) {
                prop_assert!(p <= m);
                prop_assert!(average_hausdorff(&a, &b, 10, 10).unwrap() <= m);
            }
        }

        #[test]
        fn average_hausdorff_is_symmetric(
            a in proptest::collection::vec(any::<bool>(), 64),
            b in proptest::collection::vec(any::<bool>(), 64),
        ) {
            prop_assert_eq!(average_hausdorff(&a, &b, 8, 8), average_hausdorff(&b, &a, 8, 8));
        }
    }
}
