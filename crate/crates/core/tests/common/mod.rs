//! Independent oracles shared by the integration suites.
//!
//! Nothing here calls the code under test: each function recomputes its
//! answer the slow, obvious way.

#![allow(dead_code)]

use mssg_core::imaging::Mask;
use rand::Rng;

pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize, density: f64) -> Mask {
    let data = (0..h * w).map(|_| rng.random_bool(density)).collect();
    Mask::new(h, w, data).unwrap()
}

/// Interior by brute force: a non-border pixel is interior when a
/// depth-first walk from it over non-border pixels never touches the frame.
pub fn interior_by_walk(border: &Mask) -> Mask {
    let (h, w) = border.dims();
    let mut out = Mask::empty(h, w);
    for r0 in 0..h {
        for c0 in 0..w {
            if border.get(r0, c0) {
                continue;
            }
            let mut seen = vec![false; h * w];
            let mut stack = vec![(r0, c0)];
            seen[r0 * w + c0] = true;
            let mut escapes = false;
            while let Some((r, c)) = stack.pop() {
                if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                    escapes = true;
                    break;
                }
                for (nr, nc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
                    if !border.get(nr, nc) && !seen[nr * w + nc] {
                        seen[nr * w + nc] = true;
                        stack.push((nr, nc));
                    }
                }
            }
            if !escapes {
                out.set(r0, c0, true);
            }
        }
    }
    out
}

/// Minimum within-cluster sum of squares over every partition of the
/// points into at most `k` non-empty groups. Partitions are enumerated as
/// restricted growth strings; block sums are updated incrementally.
pub fn optimal_wcss(points: &[f64], dim: usize, k: usize) -> f64 {
    struct Search<'a> {
        points: &'a [f64],
        dim: usize,
        k: usize,
        sums: Vec<Vec<f64>>,
        sq: Vec<f64>,
        counts: Vec<usize>,
        best: f64,
    }
    impl Search<'_> {
        fn cost(&self) -> f64 {
            (0..self.sums.len())
                .filter(|&b| self.counts[b] > 0)
                .map(|b| {
                    let norm2: f64 = self.sums[b].iter().map(|s| s * s).sum();
                    self.sq[b] - norm2 / self.counts[b] as f64
                })
                .sum()
        }
        fn go(&mut self, i: usize, blocks: usize) {
            let n = self.points.len() / self.dim;
            if i == n {
                self.best = self.best.min(self.cost());
                return;
            }
            let p = &self.points[i * self.dim..(i + 1) * self.dim];
            let p2: f64 = p.iter().map(|v| v * v).sum();
            for b in 0..(blocks + 1).min(self.k) {
                for (s, v) in self.sums[b].iter_mut().zip(p) {
                    *s += v;
                }
                self.sq[b] += p2;
                self.counts[b] += 1;
                self.go(i + 1, blocks.max(b + 1));
                for (s, v) in self.sums[b].iter_mut().zip(p) {
                    *s -= v;
                }
                self.sq[b] -= p2;
                self.counts[b] -= 1;
            }
        }
    }
    let mut s = Search {
        points,
        dim,
        k,
        sums: vec![vec![0.0; dim]; k],
        sq: vec![0.0; k],
        counts: vec![0; k],
        best: f64::INFINITY,
    };
    s.go(0, 0);
    s.best
}

/// `(TP, FP, FN, TN)` by a direct loop over pixel pairs.
pub fn counts(pred: &Mask, gt: &Mask) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    c
}

pub fn mask_from_rows(rows: &[&str]) -> Mask {
    let w = rows[0].len();
    let data = rows
        .iter()
        .flat_map(|r| r.chars().map(|c| c == '#'))
        .collect();
    Mask::new(rows.len(), w, data).unwrap()
}

/// Small enough to run the whole pipeline in about a second.
pub const TINY: &str = "
data.train_count = 3
data.test_count = 2
synth.height = 64
synth.width = 64
synth.glands_max = 2
synth.radius_max = 16
spm.iterations = 10
spm.feature_channels = 8
msg.patch = 32
msg.stride = 32
msg.epochs = 2
msg.batch = 4
msg.width = 4
msg.embed_dim = 8
ablate.seeds = 0,1
";

pub fn tiny_config() -> mssg_core::config::RunConfig {
    let mut cfg = mssg_core::config::RunConfig::default();
    cfg.apply_text(TINY).unwrap();
    cfg
}
