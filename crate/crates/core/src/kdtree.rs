//! Static KD-tree for nearest-neighbour queries over a handful of
//! equal-length real vectors.

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

/// Points are identified by their insertion index. Among equidistant
/// points the lowest index wins.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<Vec<f64>>,
    root: Option<Box<Node>>,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KdTree {
    /// Panics if the points do not all have length `dim`.
    pub fn build(dim: usize, points: Vec<Vec<f64>>) -> Self {
        assert!(points.iter().all(|p| p.len() == dim), "point dimension mismatch");
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_rec(&points, &mut idx, 0, dim);
        Self { dim, points, root }
    }

    fn build_rec(points: &[Vec<f64>], idx: &mut [usize], depth: usize, dim: usize) -> Option<Box<Node>> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % dim.max(1);
        idx.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let (left, rest) = idx.split_at_mut(mid);
        let (pivot, right) = rest.split_first_mut().expect("non-empty");
        Some(Box::new(Node {
            point: *pivot,
            axis,
            left: Self::build_rec(points, left, depth + 1, dim),
            right: Self::build_rec(points, right, depth + 1, dim),
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, query: &[f64]) -> Option<(usize, f64)> {
        if query.len() != self.dim {
            return None;
        }
        let mut best = None;
        if let Some(root) = &self.root {
            self.search(root, query, &mut best);
        }
        best
    }

    fn search(&self, node: &Node, q: &[f64], best: &mut Option<(usize, f64)>) {
        let d = dist_sq(&self.points[node.point], q);
        let better = match *best {
            None => true,
            Some((i, bd)) => d < bd || (d == bd && node.point < i),
        };
        if better {
            *best = Some((node.point, d));
        }
        let diff = q[node.axis] - self.points[node.point][node.axis];
        let (near, far) = if diff < 0.0 {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        if let Some(n) = near {
            self.search(n, q, best);
        }
        // `<=` keeps equidistant points on the far side reachable for the
        // index tie-break.
        if let Some(n) = far {
            if best.is_none_or(|(_, bd)| diff * diff <= bd) {
                self.search(n, q, best);
            }
        }
    }
}
