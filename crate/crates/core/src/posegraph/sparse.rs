//! Envelope (skyline) Cholesky for block-sparse normal equations, with a
//! reverse Cuthill-McKee block ordering to keep the envelope narrow.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DVector, Matrix6};

use crate::error::{Error, Result};

/// Block ordering `order[new] = old` minimizing bandwidth heuristically.
/// Components are handled independently; output is deterministic.
pub fn reverse_cuthill_mckee(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (a, b) in edges {
        if a != b {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    for l in adj.iter_mut() {
        l.sort_unstable();
        l.dedup();
    }
    let deg: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);

    // BFS levels from `s` restricted to unplaced nodes
    let levels = |s: usize, placed: &[bool]| -> Vec<Vec<usize>> {
        let mut seen = placed.to_vec();
        seen[s] = true;
        let mut out = vec![vec![s]];
        loop {
            let mut next = Vec::new();
            for &u in out.last().expect("nonempty") {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        next.push(v);
                    }
                }
            }
            if next.is_empty() {
                return out;
            }
            out.push(next);
        }
    };

    while order.len() < n {
        let seed = (0..n)
            .filter(|&v| !placed[v])
            .min_by_key(|&v| (deg[v], v))
            .expect("unplaced node exists");
        // pseudo-peripheral start
        let mut start = seed;
        let mut ecc = levels(start, &placed).len();
        for _ in 0..8 {
            let lv = levels(start, &placed);
            let cand = *lv
                .last()
                .expect("nonempty")
                .iter()
                .min_by_key(|&&v| (deg[v], v))
                .expect("nonempty level");
            let e = levels(cand, &placed).len();
            if e <= ecc {
                break;
            }
            start = cand;
            ecc = e;
        }
        let mut queue = VecDeque::from([start]);
        placed[start] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nb: Vec<usize> = adj[u].iter().copied().filter(|&v| !placed[v]).collect();
            nb.sort_by_key(|&v| (deg[v], v));
            for v in nb {
                placed[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

/// Lower-triangular envelope storage: row `i` holds columns `first[i]..=i`.
#[derive(Clone, Debug)]
pub struct SkylineCholesky {
    first: Vec<usize>,
    offset: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineCholesky {
    /// Factor `H + lambda diag(H)` where `H` is given by upper blocks over
    /// `num_vars` 6-blocks, after applying `order[new] = old`.
    pub fn factor_blocks(
        num_vars: usize,
        blocks: &BTreeMap<(usize, usize), Matrix6<f64>>,
        order: &[usize],
        lambda: f64,
    ) -> Result<Self> {
        let mut pos = vec![0; num_vars];
        for (new, &old) in order.iter().enumerate() {
            pos[old] = new;
        }
        let n = 6 * num_vars;
        let mut first_block: Vec<usize> = (0..num_vars).collect();
        for &(r, c) in blocks.keys() {
            let (a, b) = (pos[r], pos[c]);
            let (lo, hi) = (a.min(b), a.max(b));
            first_block[hi] = first_block[hi].min(lo);
        }
        let first: Vec<usize> = (0..n).map(|i| 6 * first_block[i / 6]).collect();
        let mut offset = Vec::with_capacity(n + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            offset.push(total);
            total += i - f + 1;
        }
        offset.push(total);
        let mut s = Self {
            first,
            offset,
            data: vec![0.0; total],
        };
        for (&(r, c), m) in blocks {
            let (a, b) = (pos[r], pos[c]);
            for u in 0..6 {
                for v in 0..6 {
                    let (i, j) = (6 * a + u, 6 * b + v);
                    if j <= i {
                        let val = if i == j { m[(u, v)] * (1.0 + lambda) } else { m[(u, v)] };
                        *s.at_mut(i, j) = val;
                    } else if a == b {
                        // mirrored half of a diagonal block, already covered
                    } else {
                        *s.at_mut(j, i) = m[(u, v)];
                    }
                }
            }
        }
        s.factor_in_place()?;
        Ok(s)
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[self.offset[i] + j - self.first[i]]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let k = self.offset[i] + j - self.first[i];
        &mut self.data[k]
    }

    fn factor_in_place(&mut self) -> Result<()> {
        let n = self.first.len();
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..i {
                let fj = self.first[j];
                let k0 = fi.max(fj);
                let mut sum = self.at(i, j);
                let (ri, rj) = (self.offset[i] - fi, self.offset[j] - fj);
                for k in k0..j {
                    sum -= self.data[ri + k] * self.data[rj + k];
                }
                let l = sum / self.at(j, j);
                *self.at_mut(i, j) = l;
            }
            let ri = self.offset[i] - fi;
            let d = self.at(i, i) - (fi..i).map(|k| self.data[ri + k] * self.data[ri + k]).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::SingularSystem(format!("non-positive pivot {d:e} at row {i}")));
            }
            *self.at_mut(i, i) = d.sqrt();
        }
        Ok(())
    }

    /// Solve in the permuted ordering used at factorization.
    pub fn solve_permuted(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.first.len();
        let mut x = b.clone();
        for i in 0..n {
            let fi = self.first[i];
            let ri = self.offset[i] - fi;
            let mut s = x[i];
            for k in fi..i {
                s -= self.data[ri + k] * x[k];
            }
            x[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            x[i] /= self.at(i, i);
            let fi = self.first[i];
            let ri = self.offset[i] - fi;
            let xi = x[i];
            for k in fi..i {
                x[k] -= self.data[ri + k] * xi;
            }
        }
        x
    }

    /// Solve with `b` and the result in the original block ordering.
    pub fn solve(&self, order: &[usize], b: &DVector<f64>) -> DVector<f64> {
        let mut pb = DVector::zeros(b.len());
        for (new, &old) in order.iter().enumerate() {
            pb.rows_mut(6 * new, 6).copy_from(&b.rows(6 * old, 6));
        }
        let px = self.solve_permuted(&pb);
        let mut x = DVector::zeros(b.len());
        for (new, &old) in order.iter().enumerate() {
            x.rows_mut(6 * old, 6).copy_from(&px.rows(6 * new, 6));
        }
        x
    }

    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }
}
