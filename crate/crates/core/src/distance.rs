//! Unordered edit distance between cocktails and the normalized similarity.
//!
//! Cocktails are compared as sets under three operations: substitution at
//! the LCA cost, and insertion/deletion at depth(T)/2 each. The minimum
//! transformation cost reduces to a min-cost assignment because every pair
//! cost is capped at one deletion plus one insertion.

use std::io::Write;

use crate::atc::{AtcTree, Cocktail};
use crate::real::Real;

/// Costs of the elementary edit operations on a given tree.
#[derive(Debug, Clone, Copy)]
pub struct DistanceParams<R: Real> {
    pub indel_cost: R,
}

impl<R: Real> DistanceParams<R> {
    pub fn for_tree(tree: &AtcTree) -> Self {
        DistanceParams { indel_cost: R::of(tree.depth_t() as f64 / 2.0) }
    }
}

/// Exact minimum-cost square assignment (Hungarian method with potentials).
fn assignment_min_cost<R: Real>(cost: &[Vec<R>]) -> R {
    let n = cost.len();
    if n == 0 {
        return R::zero();
    }
    let inf = R::infinity();
    let mut u = vec![R::zero(); n + 1];
    let mut v = vec![R::zero(); n + 1];
    let mut matched = vec![0usize; n + 1]; // row matched to column j, 1-based; 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[matched[j] - 1][j - 1]).sum()
}

/// Minimum cost to transform one cocktail into the other.
///
/// Elements of the smaller cocktail are assigned to elements of the larger
/// one at cost `min(lca_cost, 2 * indel)`; the `|n1 - n2|` leftovers pay
/// one indel each.
pub fn cocktail_distance<R: Real>(tree: &AtcTree, c1: &Cocktail, c2: &Cocktail) -> R {
    let (small, large) = if c1.len() <= c2.len() { (c1, c2) } else { (c2, c1) };
    let indel = DistanceParams::<R>::for_tree(tree).indel_cost;
    let pair_cap = indel + indel;
    let n = large.len();
    let cost: Vec<Vec<R>> = (0..n)
        .map(|i| {
            large
                .nodes()
                .iter()
                .map(|&b| {
                    if i < small.len() {
                        let sub = R::of(tree.lca_cost(small.nodes()[i], b) as f64);
                        sub.min(pair_cap)
                    } else {
                        indel
                    }
                })
                .collect()
        })
        .collect();
    assignment_min_cost(&cost)
}

/// Sim(C1, C2) = 1 - 2 D(C1, C2) / ((n1 + n2) depth(T)), in [0, 1].
pub fn similarity<R: Real>(tree: &AtcTree, c1: &Cocktail, c2: &Cocktail) -> R {
    let d = cocktail_distance::<R>(tree, c1, c2);
    let max = R::of_usize(c1.len() + c2.len()) * R::of(tree.depth_t() as f64);
    let sim = R::one() - (d + d) / max;
    sim.max(R::zero()).min(R::one())
}

/// Symmetric pairwise distance matrix with zero diagonal.
pub fn distance_matrix<R: Real>(tree: &AtcTree, cocktails: &[Cocktail]) -> Vec<Vec<R>> {
    let n = cocktails.len();
    let mut m = vec![vec![R::zero(); n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cocktail_distance::<R>(tree, &cocktails[i], &cocktails[j]);
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

/// Export a distance matrix as CSV with cocktail code strings as the
/// header row and column.
pub fn write_matrix_csv<R: Real, W: Write>(
    tree: &AtcTree,
    cocktails: &[Cocktail],
    matrix: &[Vec<R>],
    writer: W,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let labels: Vec<String> = cocktails.iter().map(|c| c.codes(tree)).collect();
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    w.write_record(&header).map_err(csv_io)?;
    for (i, row) in matrix.iter().enumerate() {
        let mut rec = vec![labels[i].clone()];
        rec.extend(row.iter().map(|d| crate::fmt::sig6(d.to_f64_lossy())));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}
