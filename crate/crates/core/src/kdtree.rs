//! Exact k-d tree for nearest-neighbor queries over 3D points.
//!
//! Ties in distance are broken by the lowest point index so results agree
//! bit-for-bit with a brute-force scan using the same rule.

use crate::geometry::Point3;

const LEAF_SIZE: usize = 12;

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

pub struct KdTree {
    points: Vec<Point3>,
    // indices into the original slice, permuted during build
    order: Vec<usize>,
    root: Node,
}

fn coord(p: &Point3, axis: usize) -> f64 {
    match axis {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

impl KdTree {
    pub fn build(points: &[Point3]) -> KdTree {
        assert!(!points.is_empty(), "KdTree::build on empty slice");
        let pts = points.to_vec();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(&pts, &mut order, 0, points.len());
        KdTree {
            points: pts,
            order,
            root,
        }
    }

    fn build_node(points: &[Point3], order: &mut [usize], start: usize, end: usize) -> Node {
        let n = end - start;
        if n <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        // split on the widest axis at the median
        let slice = &order[start..end];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slice.iter() {
            for axis in 0..3 {
                let c = coord(&points[i], axis);
                lo[axis] = lo[axis].min(c);
                hi[axis] = hi[axis].max(c);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        if hi[axis] - lo[axis] == 0.0 {
            // all points coincide; no useful split
            return Node::Leaf { start, end };
        }
        let mid = start + n / 2;
        order[start..end].select_nth_unstable_by(n / 2, |&a, &b| {
            coord(&points[a], axis)
                .total_cmp(&coord(&points[b], axis))
                .then(a.cmp(&b))
        });
        let value = coord(&points[order[mid]], axis);
        let left = Box::new(Self::build_node(points, order, start, mid));
        let right = Box::new(Self::build_node(points, order, mid, end));
        Node::Split {
            axis,
            value,
            left,
            right,
        }
    }

    /// Returns (index, squared distance) of the nearest stored point.
    pub fn nearest(&self, query: &Point3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(&self.root, query, &mut best);
        best
    }

    fn search(&self, node: &Node, query: &Point3, best: &mut (usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d2 = query.dist2(&self.points[i]);
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = coord(query, *axis) - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, best);
                // <= so equal-distance candidates across the plane are still
                // visited and the lowest-index tie-break stays exact
                if diff * diff <= best.1 {
                    self.search(far, query, best);
                }
            }
        }
    }
}
