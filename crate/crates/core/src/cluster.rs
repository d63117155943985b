//! Density clustering of discovered cocktails over the edit distance, a
//! planar embedding for plots, and family summaries from code-prefix tags.

use std::collections::HashMap;
use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atc::{AtcTree, Cocktail};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid clustering parameters: {0}")]
    InvalidParams(String),
    #[error("tag file error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid tag prefix {0:?}")]
    InvalidTag(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DbscanParams<R: Real> {
    pub eps: R,
    pub min_pts: usize,
}

/// Cluster labels by point index; `None` marks noise.
pub type Labels = Vec<Option<usize>>;

/// DBSCAN over a precomputed symmetric distance matrix.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Expansion scans indices in ascending order, so labels are
/// deterministic for a fixed matrix. Border points join the first core
/// point that reaches them.
pub fn dbscan<R: Real>(matrix: &[Vec<R>], params: &DbscanParams<R>) -> Result<Labels, ClusterError> {
    if params.min_pts == 0 {
        return Err(ClusterError::InvalidParams("min_pts must be >= 1".into()));
    }
    if params.eps < R::zero() {
        return Err(ClusterError::InvalidParams("eps must be nonnegative".into()));
    }
    let n = matrix.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| matrix[i][j] <= params.eps).collect())
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= params.min_pts).collect();

    let mut labels: Labels = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0usize;
    for start in 0..n {
        if visited[start] || !is_core[start] {
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        let mut queue = vec![start];
        visited[start] = true;
        labels[start] = Some(cluster);
        while let Some(p) = queue.pop() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(cluster);
                }
                if is_core[q] && !visited[q] {
                    visited[q] = true;
                    queue.push(q);
                }
            }
        }
    }
    Ok(labels)
}

/// Distance to the k-th nearest other point, per point, sorted ascending.
/// Plotting this curve is the usual way to pick eps by its elbow.
pub fn k_distances<R: Real>(matrix: &[Vec<R>], k: usize) -> Vec<R> {
    let n = matrix.len();
    let mut out: Vec<R> = (0..n)
        .filter_map(|i| {
            let mut row: Vec<R> = (0..n).filter(|&j| j != i).map(|j| matrix[i][j]).collect();
            if row.len() < k {
                return None;
            }
            row.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            Some(row[k - 1])
        })
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    out
}

/// Default neighborhood radius: the 25th percentile of nonzero pairwise
/// distances, or zero on degenerate inputs.
pub fn default_eps<R: Real>(matrix: &[Vec<R>]) -> R {
    let mut dists: Vec<R> = Vec::new();
    for (i, row) in matrix.iter().enumerate() {
        for &d in &row[i + 1..] {
            if d > R::zero() {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return R::zero();
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    dists[(dists.len() - 1) / 4]
}

/// Classical multidimensional scaling to 2 coordinates.
///
/// Double-centers the squared distances and takes the two leading
/// eigenpairs. Missing positive eigenvalues produce zero columns, and each
/// axis's sign is fixed so the largest-magnitude entry is positive.
pub fn embed_2d<R: Real>(matrix: &[Vec<R>]) -> Vec<[R; 2]> {
    let n = matrix.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![[R::zero(); 2]];
    }
    let sq = DMatrix::from_fn(n, n, |i, j| {
        let d = matrix[i][j].to_f64_lossy();
        d * d
    });
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + grand)
    });
    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut coords = vec![[R::zero(); 2]; n];
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    for (axis, &e) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[e];
        // relative cutoff: rank-deficient inputs get exact zero axes
        if lambda <= lambda_max * 1e-10 {
            continue;
        }
        let col = eig.eigenvectors.column(e);
        let scale = lambda.sqrt();
        let sign = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .map_or(1.0, |v| if v < 0.0 { -1.0 } else { 1.0 });
        for i in 0..n {
            coords[i][axis] = R::of(sign * scale * col[i]);
        }
    }
    coords
}

/// A named drug family identified by an ATC code prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyTag {
    pub family: String,
    pub prefix: String,
}

/// Parse `family,prefix` rows. Prefixes must be ASCII alphanumeric and at
/// most one full code long.
pub fn read_tags<Rd: Read>(reader: Rd) -> Result<Vec<FamilyTag>, ClusterError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut tags = Vec::new();
    for record in r.deserialize::<FamilyTag>() {
        let tag = record?;
        let p = &tag.prefix;
        if p.is_empty() || p.len() > 7 || !p.bytes().all(|b| b.is_ascii_alphanumeric()) {
            return Err(ClusterError::InvalidTag(p.clone()));
        }
        tags.push(tag);
    }
    Ok(tags)
}

/// How often each family's prefix appears inside each cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    /// (family name, cocktails containing a node under that prefix)
    pub family_counts: Vec<(String, usize)>,
    pub dominant_family: Option<String>,
}

/// Families present in one cocktail, each counted once.
pub fn families_of<'t>(cocktail: &Cocktail, tree: &AtcTree, tags: &'t [FamilyTag]) -> Vec<&'t str> {
    let mut out: Vec<&str> = Vec::new();
    for tag in tags {
        let hit = cocktail.iter().any(|id| tree.code(id).starts_with(tag.prefix.as_str()));
        if hit && !out.contains(&tag.family.as_str()) {
            out.push(&tag.family);
        }
    }
    out
}

/// Summarize clusters by family membership. Noise points are skipped.
/// The dominant family is the most frequent one, ties broken by tag order.
pub fn cluster_report(
    cocktails: &[Cocktail],
    labels: &Labels,
    tree: &AtcTree,
    tags: &[FamilyTag],
) -> Vec<ClusterSummary> {
    debug_assert_eq!(cocktails.len(), labels.len());
    let mut by_cluster: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, label) in labels.iter().enumerate() {
        if let Some(c) = label {
            by_cluster.entry(*c).or_default().push(i);
        }
    }
    let mut clusters: Vec<usize> = by_cluster.keys().copied().collect();
    clusters.sort_unstable();
    clusters
        .into_iter()
        .map(|cluster| {
            let members = &by_cluster[&cluster];
            let mut family_counts: Vec<(String, usize)> =
                tags.iter().map(|t| (t.family.clone(), 0)).collect();
            family_counts.dedup_by(|a, b| a.0 == b.0);
            for &i in members {
                for fam in families_of(&cocktails[i], tree, tags) {
                    if let Some(fc) = family_counts.iter_mut().find(|(f, _)| f == fam) {
                        fc.1 += 1;
                    }
                }
            }
            let dominant_family = family_counts
                .iter()
                .filter(|(_, c)| *c > 0)
                .max_by_key(|(_, c)| *c)
                .map(|(f, _)| f.clone());
            ClusterSummary { cluster, size: members.len(), family_counts, dominant_family }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::distance_matrix;
    use crate::testutil::toy_tree;
    use std::collections::VecDeque;

    fn matrix_of(points: &[(f64, f64)]) -> Vec<Vec<f64>> {
        let n = points.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let dx = points[i].0 - points[j].0;
                        let dy = points[i].1 - points[j].1;
                        (dx * dx + dy * dy).sqrt()
                    })
                    .collect()
            })
            .collect()
    }

    /// Textbook DBSCAN written independently: per-point outer loop with
    /// seed-set BFS, as in the original formulation.
    fn oracle_dbscan(matrix: &[Vec<f64>], eps: f64, min_pts: usize) -> Labels {
        let n = matrix.len();
        let region = |p: usize| -> Vec<usize> {
            (0..n).filter(|&q| matrix[p][q] <= eps).collect()
        };
        const UNSEEN: isize = -2;
        const NOISE: isize = -1;
        let mut label = vec![UNSEEN; n];
        let mut cluster: isize = -1;
        for p in 0..n {
            if label[p] != UNSEEN {
                continue;
            }
            let nb = region(p);
            if nb.len() < min_pts {
                label[p] = NOISE;
                continue;
            }
            cluster += 1;
            label[p] = cluster;
            let mut seeds: VecDeque<usize> = nb.into_iter().collect();
            while let Some(q) = seeds.pop_front() {
                if label[q] == NOISE {
                    label[q] = cluster;
                }
                if label[q] != UNSEEN {
                    continue;
                }
                label[q] = cluster;
                let qn = region(q);
                if qn.len() >= min_pts {
                    seeds.extend(qn);
                }
            }
        }
        label
            .into_iter()
            .map(|l| if l < 0 { None } else { Some(l as usize) })
            .collect()
    }

    /// Same partition up to cluster renaming, and identical noise sets.
    fn assert_same_partition(a: &Labels, b: &Labels) {
        assert_eq!(a.len(), b.len());
        let mut map: HashMap<usize, usize> = HashMap::new();
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for (x, y) in a.iter().zip(b) {
            match (x, y) {
                (None, None) => {}
                (Some(ca), Some(cb)) => {
                    assert_eq!(*map.entry(*ca).or_insert(*cb), *cb);
                    assert_eq!(*seen.entry(*cb).or_insert(*ca), *ca);
                }
                _ => panic!("noise mismatch: {x:?} vs {y:?}"),
            }
        }
    }

    #[test]
    fn two_blobs_and_noise() {
        let mut points: Vec<(f64, f64)> = Vec::new();
        for i in 0..6 {
            points.push((i as f64 * 0.1, 0.0)); // blob A
            points.push((10.0 + i as f64 * 0.1, 5.0)); // blob B
        }
        points.push((100.0, 100.0)); // outlier
        let m = matrix_of(&points);
        let params = DbscanParams { eps: 0.25, min_pts: 3 };
        let labels = dbscan(&m, &params).unwrap();
        let clusters: std::collections::HashSet<_> = labels.iter().flatten().collect();
        assert_eq!(clusters.len(), 2);
        assert_eq!(labels[12], None);
        // members of the same blob share a label
        assert_eq!(labels[0], labels[2]);
        assert_eq!(labels[1], labels[3]);
        assert_ne!(labels[0], labels[1]);
    }

    #[test]
    fn matches_textbook_oracle_on_random_point_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        for trial in 0..50 {
            let n = rng.random_range(5..40);
            let points: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0)).collect();
            let m = matrix_of(&points);
            for (eps, min_pts) in [(0.5, 3), (1.0, 4), (0.2, 2), (2.0, 5)] {
                let ours = dbscan(&m, &DbscanParams { eps, min_pts }).unwrap();
                let oracle = oracle_dbscan(&m, eps, min_pts);
                // border points can legitimately attach to different
                // clusters between implementations; compare on the core
                // partition plus the noise set
                let region_counts: Vec<usize> = (0..m.len())
                    .map(|i| (0..m.len()).filter(|&j| m[i][j] <= eps).count())
                    .collect();
                let core_a: Labels = ours
                    .iter()
                    .enumerate()
                    .map(|(i, l)| if region_counts[i] >= min_pts { *l } else { None })
                    .collect();
                let core_b: Labels = oracle
                    .iter()
                    .enumerate()
                    .map(|(i, l)| if region_counts[i] >= min_pts { *l } else { None })
                    .collect();
                assert_same_partition(&core_a, &core_b);
                for i in 0..m.len() {
                    assert_eq!(ours[i].is_none(), oracle[i].is_none(), "trial {trial} point {i}");
                }
            }
        }
    }

    #[test]
    fn dbscan_on_cocktail_distances() {
        let t = toy_tree();
        // two tight groups: subtrees of node 1 and node 4
        let cocktails = vec![
            Cocktail::new([2]),
            Cocktail::new([3]),
            Cocktail::new([2, 3]),
            Cocktail::new([5]),
            Cocktail::new([6]),
            Cocktail::new([5, 6]),
        ];
        let m = distance_matrix::<f64>(&t, &cocktails);
        let labels = dbscan(&m, &DbscanParams { eps: 1.0, min_pts: 2 }).unwrap();
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[3], labels[4]);
        assert_ne!(labels[0], labels[3]);
        assert!(labels.iter().all(|l| l.is_some()));
    }

    #[test]
    fn single_cluster_when_eps_spans_everything() {
        let m = matrix_of(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let labels = dbscan(&m, &DbscanParams { eps: 10.0, min_pts: 3 }).unwrap();
        assert_eq!(labels, vec![Some(0), Some(0), Some(0)]);
    }

    #[test]
    fn all_noise_when_min_pts_unreachable() {
        let m = matrix_of(&[(0.0, 0.0), (5.0, 0.0), (10.0, 0.0)]);
        let labels = dbscan(&m, &DbscanParams { eps: 1.0, min_pts: 2 }).unwrap();
        assert!(labels.iter().all(|l| l.is_none()));
    }

    #[test]
    fn k_distance_curve_sorted() {
        let m = matrix_of(&[(0.0, 0.0), (1.0, 0.0), (3.0, 0.0), (7.0, 0.0)]);
        let kd = k_distances(&m, 2);
        assert_eq!(kd.len(), 4);
        assert!(kd.windows(2).all(|w| w[0] <= w[1]));
        // point 0: distances 1, 3, 7 -> 2nd nearest is 3
        assert!(kd.contains(&3.0));
    }

    #[test]
    fn default_eps_is_lower_quartile_of_nonzero() {
        // nonzero pairwise distances: 1, 2, 3, 4 -> 25th percentile = 1
        let m = vec![
            vec![0.0, 1.0, 2.0],
            vec![1.0, 0.0, 3.0],
            vec![2.0, 3.0, 0.0],
        ];
        assert_eq!(default_eps(&m), 1.0);
        let zeros = vec![vec![0.0; 2]; 2];
        assert_eq!(default_eps(&zeros), 0.0);
    }

    #[test]
    fn mds_recovers_planar_distances() {
        // equilateral triangle with side 2
        let side = 2.0f64;
        let m = vec![
            vec![0.0, side, side],
            vec![side, 0.0, side],
            vec![side, side, 0.0],
        ];
        let coords = embed_2d::<f64>(&m);
        for i in 0..3 {
            for j in 0..3 {
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                let d = (dx * dx + dy * dy).sqrt();
                assert!((d - m[i][j]).abs() < 1e-9, "({i},{j}): {d}");
            }
        }
    }

    #[test]
    fn mds_on_collinear_points_uses_one_axis() {
        let m = matrix_of(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let coords = embed_2d::<f64>(&m);
        for c in &coords {
            assert!(c[1].abs() < 1e-9);
        }
        let d01 = (coords[0][0] - coords[1][0]).abs();
        assert!((d01 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mds_rank_correlation_on_tree_distances() {
        // Spearman correlation between tree distances and embedded
        // distances must be positive: the plot preserves coarse geometry
        let t = toy_tree();
        let cocktails: Vec<Cocktail> = vec![
            Cocktail::new([2]),
            Cocktail::new([3]),
            Cocktail::new([5]),
            Cocktail::new([6]),
            Cocktail::new([2, 3]),
            Cocktail::new([5, 6]),
            Cocktail::new([2, 5]),
        ];
        let m = distance_matrix::<f64>(&t, &cocktails);
        let coords = embed_2d::<f64>(&m);
        let mut orig = Vec::new();
        let mut emb = Vec::new();
        for i in 0..cocktails.len() {
            for j in (i + 1)..cocktails.len() {
                orig.push(m[i][j]);
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                emb.push((dx * dx + dy * dy).sqrt());
            }
        }
        let rank = |v: &[f64]| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = vec![0.0; v.len()];
            for (pos, &i) in idx.iter().enumerate() {
                r[i] = pos as f64;
            }
            r
        };
        let (ra, rb) = (rank(&orig), rank(&emb));
        let mean = (ra.len() as f64 - 1.0) / 2.0;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for i in 0..ra.len() {
            num += (ra[i] - mean) * (rb[i] - mean);
            da += (ra[i] - mean).powi(2);
            db += (rb[i] - mean).powi(2);
        }
        let rho = num / (da.sqrt() * db.sqrt());
        assert!(rho > 0.5, "spearman rho {rho}");
    }

    #[test]
    fn tags_parse_and_validate() {
        let csv = "family,prefix\nalimentary,A01\nrespiratory,R\n";
        let tags = read_tags(csv.as_bytes()).unwrap();
        assert_eq!(tags.len(), 2);
        assert_eq!(tags[0].family, "alimentary");
        assert_eq!(tags[1].prefix, "R");
        assert!(read_tags("family,prefix\nbad,\n".as_bytes()).is_err());
        assert!(read_tags("family,prefix\nbad,A01BC22X\n".as_bytes()).is_err());
        assert!(read_tags("family,prefix\nbad,A-1\n".as_bytes()).is_err());
    }

    #[test]
    fn report_counts_family_membership() {
        let t = toy_tree();
        let tags = read_tags(
            "family,prefix\nleft,A01\nright,A02\n".as_bytes(),
        )
        .unwrap();
        let cocktails = vec![
            Cocktail::new([2]),      // A01A -> left
            Cocktail::new([3]),      // A01B -> left
            Cocktail::new([5]),      // A02A -> right
            Cocktail::new([2, 5]),   // both
        ];
        let labels: Labels = vec![Some(0), Some(0), Some(1), None];
        let report = cluster_report(&cocktails, &labels, &t, &tags);
        assert_eq!(report.len(), 2);
        assert_eq!(report[0].size, 2);
        assert_eq!(report[0].family_counts, vec![("left".into(), 2), ("right".into(), 0)]);
        assert_eq!(report[0].dominant_family.as_deref(), Some("left"));
        assert_eq!(report[1].size, 1);
        assert_eq!(report[1].dominant_family.as_deref(), Some("right"));
    }
}
