use nalgebra::Point3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree over a set of 3D points.
///
/// Queries are exact. Among equidistant candidates the lowest point index wins.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(points: &[Point3<f64>]) -> Self {
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build_node(0, points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    /// Nearest stored point to `query` as `(index, distance)`.
    ///
    /// Panics if the index is empty.
    pub fn nearest(&self, query: &Point3<f64>) -> (usize, f64) {
        self.nearest_filtered(query, |_| true)
            .expect("nearest() on an empty spatial index")
    }

    /// Nearest stored point other than `exclude`.
    pub fn nearest_excluding(&self, query: &Point3<f64>, exclude: usize) -> Option<(usize, f64)> {
        self.nearest_filtered(query, |i| i != exclude)
    }

    fn nearest_filtered(
        &self,
        query: &Point3<f64>,
        accept: impl Fn(usize) -> bool,
    ) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.search_nearest(0, query, &accept, &mut best);
        (best.1 != usize::MAX).then(|| (best.1, best.0.sqrt()))
    }

    fn search_nearest(
        &self,
        node: usize,
        query: &Point3<f64>,
        accept: &impl Fn(usize) -> bool,
        best: &mut (f64, usize),
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if !accept(i) {
                        continue;
                    }
                    let d2 = (self.points[i] - query).norm_squared();
                    if d2 < best.0 || (d2 == best.0 && i < best.1) {
                        *best = (d2, i);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search_nearest(near, query, accept, best);
                if diff * diff <= best.0 {
                    self.search_nearest(far, query, accept, best);
                }
            }
        }
    }

    /// All points within `radius` (inclusive) of `query` as `(index, distance)`,
    /// sorted by index.
    pub fn within_radius(&self, query: &Point3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.search_radius(0, query, radius * radius, &mut out);
        }
        out.sort_unstable_by_key(|&(i, _)| i);
        out.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }

    fn search_radius(&self, node: usize, query: &Point3<f64>, r2: f64, out: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - query).norm_squared();
                    if d2 <= r2 {
                        out.push((i, d2));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.search_radius(left, query, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.search_radius(right, query, r2, out);
                }
            }
        }
    }

    /// Number of points within `radius` of `query`.
    pub fn count_within(&self, query: &Point3<f64>, radius: f64) -> usize {
        self.within_radius(query, radius).len()
    }
}
