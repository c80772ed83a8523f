//! Contrast-modulated Potts weights and the exact binary labeling solve.

use std::collections::VecDeque;

use super::cues::UnaryEnergies;
use crate::error::{Error, Result};
use crate::field::{BinaryMask, Image, ScalarField};

const WEIGHT_FLOOR: f64 = 1e-30;

/// Neighbour offsets of the four forward edges of each pixel. Together they
/// enumerate every unordered 8-neighbour pair exactly once.
pub const EDGE_OFFSETS: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];

/// Edge weights of the 8-connected grid.
#[derive(Clone, Debug)]
pub struct PottsWeights {
    pub width: usize,
    pub height: usize,
    /// `edges[k][i]` is the weight between pixel `i` and its neighbour at
    /// `EDGE_OFFSETS[k]`, or 0 when that neighbour is outside the image.
    pub edges: [Vec<f64>; 4],
    /// Per-pixel weights for horizontal and vertical regularizers.
    pub w_x: ScalarField,
    pub w_y: ScalarField,
    /// True when the image has no contrast and all weights are 1.
    pub degenerate: bool,
}

impl PottsWeights {
    /// Iterate `(i, j, weight)` over all existing edges.
    pub fn iter_edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let (w, h) = (self.width, self.height);
        EDGE_OFFSETS.iter().enumerate().flat_map(move |(k, &(dx, dy))| {
            (0..w * h).filter_map(move |i| {
                let (x, y) = ((i % w) as isize + dx, (i / w) as isize + dy);
                (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h)
                    .then(|| (i, y as usize * w + x as usize, self.edges[k][i]))
            })
        })
    }
}

fn sq_diff(img: &Image, a: (usize, usize), b: (usize, usize)) -> f64 {
    img.pixel(a.0, a.1)
        .iter()
        .zip(img.pixel(b.0, b.1))
        .map(|(p, q)| (p - q) * (p - q))
        .sum()
}

pub fn potts_weights(img: &Image) -> PottsWeights {
    let (w, h) = img.dims();
    let n = w * h;
    let mut diffs: [Vec<f64>; 4] = std::array::from_fn(|_| vec![f64::NAN; n]);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, &(dx, dy)) in EDGE_OFFSETS.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                    continue;
                }
                let d = sq_diff(img, (x, y), (nx as usize, ny as usize));
                diffs[k][y * w + x] = d;
                sum += d;
                count += 1;
            }
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    let degenerate = !(mean > 0.0);
    let beta = if degenerate { 0.0 } else { 1.0 / (2.0 * mean) };
    let edges: [Vec<f64>; 4] = std::array::from_fn(|k| {
        let diag = if k >= 2 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
        diffs[k]
            .iter()
            .map(|&d| {
                if d.is_nan() {
                    0.0
                } else if degenerate {
                    1.0
                } else {
                    ((-beta * d).exp() * diag).max(WEIGHT_FLOOR)
                }
            })
            .collect()
    });
    // an axis weight is the weaker of the two incident axis edges
    let w_x = ScalarField::from_fn(w, h, |x, y| {
        let fwd = (x + 1 < w).then(|| edges[0][y * w + x]);
        let bwd = (x > 0).then(|| edges[0][y * w + x - 1]);
        fwd.into_iter().chain(bwd).fold(1.0, f64::min)
    });
    let w_y = ScalarField::from_fn(w, h, |x, y| {
        let fwd = (y + 1 < h).then(|| edges[1][y * w + x]);
        let bwd = (y > 0).then(|| edges[1][(y - 1) * w + x]);
        fwd.into_iter().chain(bwd).fold(1.0, f64::min)
    });
    if degenerate {
        log::debug!("image has no contrast, Potts weights are uniform");
    }
    PottsWeights {
        width: w,
        height: h,
        edges,
        w_x,
        w_y,
        degenerate,
    }
}

/// Strict variant that reports a contrast-free image as an error.
pub fn potts_weights_checked(img: &Image) -> Result<PottsWeights> {
    let w = potts_weights(img);
    if w.degenerate {
        return Err(Error::DegenerateImage);
    }
    Ok(w)
}

/// Energy of a labeling; `true` is rigid.
pub fn labeling_energy(e: &UnaryEnergies, weights: &PottsWeights, lambda_rp: f64, labels: &[bool]) -> f64 {
    let unary: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &r)| if r { e.rigid[i] } else { e.moving[i] })
        .sum();
    let pair: f64 = weights
        .iter_edges()
        .filter(|&(i, j, _)| labels[i] != labels[j])
        .map(|(_, _, w)| w)
        .sum();
    unary + lambda_rp * pair
}

struct FlowGraph {
    head: Vec<usize>,
    cap: Vec<f64>,
    adj: Vec<Vec<usize>>,
}

impl FlowGraph {
    fn new(n: usize) -> Self {
        Self {
            head: Vec::new(),
            cap: Vec::new(),
            adj: vec![Vec::new(); n],
        }
    }

    /// Edge pair `u -> v` with capacity `c` and `v -> u` with capacity `c_rev`.
    fn add(&mut self, u: usize, v: usize, c: f64, c_rev: f64) {
        self.adj[u].push(self.head.len());
        self.head.push(v);
        self.cap.push(c);
        self.adj[v].push(self.head.len());
        self.head.push(u);
        self.cap.push(c_rev);
    }

    fn tail(&self, e: usize) -> usize {
        self.head[e ^ 1]
    }

    fn levels(&self, s: usize, eps: f64) -> Vec<usize> {
        let mut level = vec![usize::MAX; self.adj.len()];
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let v = self.head[e];
                if self.cap[e] > eps && level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level
    }

    /// Dinic's algorithm with an iterative blocking-flow search.
    fn max_flow(&mut self, s: usize, t: usize, eps: f64) -> f64 {
        let mut total = 0.0;
        loop {
            let mut level = self.levels(s, eps);
            if level[t] == usize::MAX {
                return total;
            }
            let mut it = vec![0usize; self.adj.len()];
            let mut path: Vec<usize> = Vec::new();
            let mut u = s;
            loop {
                if u == t {
                    let f = path.iter().map(|&e| self.cap[e]).fold(f64::INFINITY, f64::min);
                    for &e in &path {
                        self.cap[e] -= f;
                        self.cap[e ^ 1] += f;
                    }
                    total += f;
                    let k = path.iter().position(|&e| self.cap[e] <= eps).unwrap_or(0);
                    u = self.tail(path[k]);
                    path.truncate(k);
                    continue;
                }
                let mut advanced = false;
                while it[u] < self.adj[u].len() {
                    let e = self.adj[u][it[u]];
                    let v = self.head[e];
                    if self.cap[e] > eps && level[v] == level[u] + 1 {
                        path.push(e);
                        u = v;
                        advanced = true;
                        break;
                    }
                    it[u] += 1;
                }
                if !advanced {
                    level[u] = usize::MAX;
                    match path.pop() {
                        Some(e) => {
                            u = self.tail(e);
                            it[u] += 1;
                        }
                        None => break,
                    }
                }
            }
        }
    }

    /// Nodes that can still reach `t` in the residual graph.
    fn reaches_sink(&self, t: usize, eps: f64) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        seen[t] = true;
        let mut queue = VecDeque::from([t]);
        while let Some(v) = queue.pop_front() {
            for &e in &self.adj[v] {
                // e: v -> u, its twin u -> v carries the residual we need
                let u = self.head[e];
                if !seen[u] && self.cap[e ^ 1] > eps {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen
    }
}

/// Exact minimizer of the binary Potts energy by min-cut. Among several
/// minimizers the one with the largest rigid set is returned.
pub fn solve_rigidity_mrf(e: &UnaryEnergies, weights: &PottsWeights, lambda_rp: f64) -> Result<BinaryMask> {
    let n = e.len();
    if weights.width * weights.height != n || e.width * e.height != n {
        return Err(Error::DimensionMismatch {
            expected: (e.width, e.height),
            got: (weights.width, weights.height),
        });
    }
    if !(lambda_rp >= 0.0) || !lambda_rp.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "lambda_rp must be non-negative, got {lambda_rp}"
        )));
    }
    if e.rigid.iter().chain(&e.moving).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (s, t) = (n, n + 1);
    let mut g = FlowGraph::new(n + 2);
    let mut scale: f64 = 0.0;
    for i in 0..n {
        // only the difference of the unaries matters
        let m = e.rigid[i].min(e.moving[i]);
        let (cr, cm) = (e.rigid[i] - m, e.moving[i] - m);
        scale = scale.max(cr).max(cm);
        // source side is rigid: cutting s->i labels i moving
        if cm > 0.0 {
            g.add(s, i, cm, 0.0);
        }
        if cr > 0.0 {
            g.add(i, t, cr, 0.0);
        }
    }
    if lambda_rp > 0.0 {
        for (i, j, w) in weights.iter_edges() {
            let c = lambda_rp * w;
            if c > 0.0 {
                scale = scale.max(c);
                g.add(i, j, c, c);
            }
        }
    }
    let eps = 1e-12 * scale.max(1e-300);
    g.max_flow(s, t, eps);
    let to_sink = g.reaches_sink(t, eps);
    BinaryMask::from_vec(e.width, e.height, (0..n).map(|i| !to_sink[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_image_has_unit_weights() {
        let w = potts_weights(&Image::from_fn(8, 8, |_, _| 0.4));
        assert!(w.degenerate);
        assert!(w.iter_edges().all(|(_, _, v)| v == 1.0));
        assert!(w.w_x.data().iter().all(|&v| v == 1.0));
        assert!(potts_weights_checked(&Image::from_fn(8, 8, |_, _| 0.4)).is_err());
    }

    #[test]
    fn two_tone_boundary_weight() {
        let (wd, ht) = (8usize, 6usize);
        let d = 0.7;
        let img = Image::from_fn(wd, ht, |x, _| if x < 4 { 0.0 } else { d });
        let w = potts_weights(&img);
        // edges crossing the x = 3|4 boundary: horizontal ht, each diagonal ht - 1
        let total = (wd - 1) * ht + wd * (ht - 1) + 2 * (wd - 1) * (ht - 1);
        let crossing = ht + 2 * (ht - 1);
        let rho = crossing as f64 / total as f64;
        let expect = (-1.0 / (2.0 * rho)).exp();
        assert_relative_eq!(w.edges[0][3], expect, epsilon = 1e-12);
        assert_relative_eq!(w.edges[2][3], expect * std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_eq!(w.edges[0][0], 1.0);
        assert_relative_eq!(w.w_x.get(3, 2), expect, epsilon = 1e-12);
        assert_relative_eq!(w.w_x.get(4, 2), expect, epsilon = 1e-12);
        assert_eq!(w.w_x.get(0, 2), 1.0);
    }

    #[test]
    fn strong_edge_weight_is_small() {
        let img = Image::from_fn(16, 16, |x, y| if x == 8 { 1.0 } else { 0.01 * y as f64 });
        let w = potts_weights(&img);
        assert!(w.edges[0][8] < 0.5f64.exp().recip() * 0.1);
        let n = w.iter_edges().count();
        assert_eq!(n, 15 * 16 * 2 + 2 * 15 * 15);
        assert!(w.iter_edges().all(|(_, _, v)| v > 0.0 && v <= 1.0));
    }

    fn unary(p: &[f64], w: usize, h: usize) -> UnaryEnergies {
        UnaryEnergies::from_probability(&ScalarField::from_vec(w, h, p.to_vec()).unwrap())
    }

    #[test]
    fn zero_lambda_thresholds() {
        let p = [0.1, 0.6, 0.5, 0.9, 0.49, 0.51];
        let e = unary(&p, 3, 2);
        let w = potts_weights(&Image::from_fn(3, 2, |x, _| x as f64));
        let r = solve_rigidity_mrf(&e, &w, 0.0).unwrap();
        let expect: Vec<bool> = p.iter().map(|&v| v >= 0.5).collect();
        assert_eq!(r.data(), &expect[..]);
    }

    #[test]
    fn uniform_rigid_prior() {
        let e = unary(&[0.9; 64], 8, 8);
        let w = potts_weights(&Image::from_fn(8, 8, |x, y| ((x * y) % 3) as f64));
        assert_eq!(solve_rigidity_mrf(&e, &w, 1.1).unwrap().count(), 64);
        let e = unary(&[0.5; 64], 8, 8);
        assert_eq!(solve_rigidity_mrf(&e, &w, 1.1).unwrap().count(), 64);
    }

    #[test]
    fn smoothing_removes_isolated_pixel() {
        let mut p = vec![0.8; 25];
        p[12] = 0.3;
        let e = unary(&p, 5, 5);
        let w = potts_weights(&Image::from_fn(5, 5, |_, _| 0.0));
        let r = solve_rigidity_mrf(&e, &w, 1.0).unwrap();
        assert_eq!(r.count(), 25);
        let r = solve_rigidity_mrf(&e, &w, 0.0).unwrap();
        assert_eq!(r.count(), 24);
    }
}
