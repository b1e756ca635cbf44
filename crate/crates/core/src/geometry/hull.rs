use super::Point;

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Strict convex hull (Andrew's monotone chain). Collinear and duplicate
/// points are dropped; the result is counter-clockwise starting from the
/// lowest-x (then lowest-y) point. Fewer than three vertices means the
/// input was degenerate.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Shoelace signed area; positive for counter-clockwise vertex order.
pub fn signed_area(vertices: &[Point]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

/// Every turn between consecutive edges is strictly left.
pub fn is_convex_ccw(vertices: &[Point]) -> bool {
    let n = vertices.len();
    n >= 3
        && (0..n).all(|i| cross(vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]) > 0.0)
}

/// Closed point-in-polygon test for a counter-clockwise convex polygon:
/// boundary points count as inside.
pub fn point_in_convex_polygon(vertices: &[Point], p: Point) -> bool {
    let n = vertices.len();
    (0..n).all(|i| cross(vertices[i], vertices[(i + 1) % n], p) >= 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn triangle_hull_is_the_triangle() {
        let tri = [p(0.0, 0.0), p(4.0, 0.0), p(1.0, 3.0)];
        let hull = convex_hull(&tri);
        assert_eq!(hull.len(), 3);
        for v in &tri {
            assert!(hull.contains(v));
        }
        assert!(signed_area(&hull) > 0.0);
    }

    #[test]
    fn collinear_points_collapse() {
        let line = [p(0.0, 0.0), p(1.0, 1.0), p(2.0, 2.0), p(3.0, 3.0)];
        assert_eq!(convex_hull(&line).len(), 2);
        assert_eq!(convex_hull(&[p(1.0, 1.0), p(1.0, 1.0)]).len(), 1);
    }

    #[test]
    fn interior_and_edge_points_are_dropped() {
        let pts = [p(0.0, 0.0), p(4.0, 0.0), p(4.0, 4.0), p(0.0, 4.0), p(2.0, 2.0), p(2.0, 0.0)];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        assert!(!hull.contains(&p(2.0, 2.0)));
        assert!(!hull.contains(&p(2.0, 0.0)));
        assert!(point_in_convex_polygon(&hull, p(2.0, 2.0)));
        assert!(point_in_convex_polygon(&hull, p(2.0, 0.0)));
        assert!(!point_in_convex_polygon(&hull, p(5.0, 2.0)));
    }

    /// Ray-casting test, used as an independent containment oracle.
    fn ray_cast_strictly_outside(poly: &[Point], q: Point) -> bool {
        let n = poly.len();
        // On-boundary points are not "strictly outside".
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let c = cross(a, b, q);
            let within = q.x >= a.x.min(b.x) - 1e-9
                && q.x <= a.x.max(b.x) + 1e-9
                && q.y >= a.y.min(b.y) - 1e-9
                && q.y <= a.y.max(b.y) + 1e-9;
            if c.abs() <= 1e-9 * (1.0 + a.distance(&b)) && within {
                return false;
            }
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (poly[i], poly[j]);
            if (a.y > q.y) != (b.y > q.y) && q.x < (b.x - a.x) * (q.y - a.y) / (b.y - a.y) + a.x {
                inside = !inside;
            }
            j = i;
        }
        !inside
    }

    proptest! {
        #[test]
        fn hull_is_convex_and_contains_inputs(
            coords in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 3..40)
        ) {
            let pts: Vec<Point> = coords.iter().map(|&(x, y)| p(x, y)).collect();
            let hull = convex_hull(&pts);
            prop_assume!(hull.len() >= 3);
            prop_assert!(is_convex_ccw(&hull));
            for q in &pts {
                prop_assert!(!ray_cast_strictly_outside(&hull, *q));
            }
            for v in &hull {
                prop_assert!(pts.contains(v));
            }
        }
    }
}
