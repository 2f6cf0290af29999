//! Collaboration-aware expert clustering.
//!
//! Farthest-point style: the first cluster is seeded with the most
//! co-activated pair, every later cluster with the unselected expert that
//! collaborates least with everything selected so far. Each cluster is then
//! filled greedily with the expert of highest average co-activation with its
//! current members. All ties go to the lowest expert index.
//!
//! Candidates at any step are compared against the same member set, so
//! comparing integer sums is equivalent to comparing means and avoids any
//! floating-point tie ambiguity.

use super::PlacementError;

pub fn cluster_experts(
    c: &[Vec<u64>],
    n_clusters: usize,
) -> Result<Vec<Vec<usize>>, PlacementError> {
    let n = c.len();
    if n_clusters == 0 {
        return Err(PlacementError::ZeroClusters);
    }
    if n == 0 || !n.is_multiple_of(n_clusters) {
        return Err(PlacementError::NotDivisible {
            n_experts: n,
            n_clusters,
        });
    }
    let size = n / n_clusters;
    let mut selected = vec![false; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut clusters: Vec<Vec<usize>> = Vec::with_capacity(n_clusters);

    for ci in 0..n_clusters {
        let mut members = Vec::with_capacity(size);
        if ci == 0 {
            let (i, j) = most_coactivated_pair(c);
            members.push(i);
            selected[i] = true;
            if size >= 2 {
                members.push(j);
                selected[j] = true;
            }
        } else {
            let seed = argmin_unselected(&selected, |e| order.iter().map(|&s| c[e][s]).sum())
                .expect("unselected experts remain");
            members.push(seed);
            selected[seed] = true;
        }
        while members.len() < size {
            let next = argmax_unselected(&selected, |e| members.iter().map(|&m| c[e][m]).sum())
                .expect("unselected experts remain");
            members.push(next);
            selected[next] = true;
        }
        order.extend_from_slice(&members);
        clusters.push(members);
    }
    Ok(clusters)
}

/// Lexicographically first `(i, j)`, `i < j`, maximizing `c[i][j]`.
fn most_coactivated_pair(c: &[Vec<u64>]) -> (usize, usize) {
    let n = c.len();
    if n == 1 {
        return (0, 0);
    }
    let mut best = (0, 1);
    for i in 0..n {
        for j in i + 1..n {
            if c[i][j] > c[best.0][best.1] {
                best = (i, j);
            }
        }
    }
    best
}

fn argmin_unselected(selected: &[bool], score: impl Fn(usize) -> u64) -> Option<usize> {
    let mut best: Option<(u64, usize)> = None;
    for e in (0..selected.len()).filter(|&e| !selected[e]) {
        let s = score(e);
        if best.is_none_or(|(b, _)| s < b) {
            best = Some((s, e));
        }
    }
    best.map(|(_, e)| e)
}

fn argmax_unselected(selected: &[bool], score: impl Fn(usize) -> u64) -> Option<usize> {
    let mut best: Option<(u64, usize)> = None;
    for e in (0..selected.len()).filter(|&e| !selected[e]) {
        let s = score(e);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, e));
        }
    }
    best.map(|(_, e)| e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(n: usize, entries: &[(usize, usize, u64)]) -> Vec<Vec<u64>> {
        let mut c = vec![vec![0; n]; n];
        for &(i, j, v) in entries {
            c[i][j] = v;
            c[j][i] = v;
        }
        c
    }

    #[test]
    fn two_obvious_pairs() {
        let c = sym(
            4,
            &[
                (0, 1, 10),
                (2, 3, 8),
                (0, 2, 1),
                (0, 3, 1),
                (1, 2, 0),
                (1, 3, 1),
            ],
        );
        assert_eq!(
            cluster_experts(&c, 2).unwrap(),
            vec![vec![0, 1], vec![2, 3]]
        );
    }

    #[test]
    fn all_zero_fills_in_index_order() {
        let c = vec![vec![0; 6]; 6];
        assert_eq!(
            cluster_experts(&c, 3).unwrap(),
            vec![vec![0, 1], vec![2, 3], vec![4, 5]]
        );
    }

    #[test]
    fn singleton_clusters() {
        let c = sym(3, &[(1, 2, 5)]);
        let cl = cluster_experts(&c, 3).unwrap();
        assert_eq!(cl[0], vec![1]);
        let mut all: Vec<usize> = cl.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn divisibility() {
        let c = vec![vec![0; 10]; 10];
        assert!(matches!(
            cluster_experts(&c, 4),
            Err(PlacementError::NotDivisible {
                n_experts: 10,
                n_clusters: 4
            })
        ));
        assert!(matches!(
            cluster_experts(&c, 0),
            Err(PlacementError::ZeroClusters)
        ));
    }
}
