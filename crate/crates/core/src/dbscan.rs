//! Density-based clustering for removal-candidate filtering.

use nalgebra::Vector3;

/// Cluster assignment; `Noise` points have too sparse a neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Noise,
    Cluster(u32),
}

/// Plain DBSCAN over 3D points. A point is a core point when at least
/// `min_pts` points (itself included) lie within `eps`; clusters grow from
/// core points through density reachability.
pub fn cluster(points: &[Vector3<f64>], eps: f64, min_pts: usize) -> Vec<Label> {
    let eps2 = eps * eps;
    let n = points.len();
    let mut labels = vec![Label::Noise; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0u32;

    let neighbors = |i: usize| -> Vec<usize> {
        (0..n).filter(|&j| (points[i] - points[j]).norm_squared() <= eps2).collect()
    };

    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let seed = neighbors(start);
        if seed.len() < min_pts {
            continue; // stays noise unless adopted as a border point later
        }
        let cluster_id = next_cluster;
        next_cluster += 1;
        labels[start] = Label::Cluster(cluster_id);
        let mut queue: Vec<usize> = seed;
        while let Some(idx) = queue.pop() {
            if labels[idx] == Label::Noise {
                labels[idx] = Label::Cluster(cluster_id);
            }
            if visited[idx] {
                continue;
            }
            visited[idx] = true;
            let nb = neighbors(idx);
            if nb.len() >= min_pts {
                queue.extend(nb);
            }
        }
    }
    labels
}

/// Axis-aligned bounding box of each cluster, expanded by `margin` on every
/// side, keyed by cluster id.
pub fn cluster_bounding_boxes(
    points: &[Vector3<f64>],
    labels: &[Label],
    margin: f64,
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let n_clusters = labels
        .iter()
        .filter_map(|l| match l {
            Label::Cluster(c) => Some(c + 1),
            Label::Noise => None,
        })
        .max()
        .unwrap_or(0) as usize;
    let mut boxes =
        vec![(Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)); n_clusters];
    for (p, l) in points.iter().zip(labels) {
        if let Label::Cluster(c) = l {
            let b = &mut boxes[*c as usize];
            b.0 = b.0.inf(p);
            b.1 = b.1.sup(p);
        }
    }
    for b in boxes.iter_mut() {
        b.0 -= Vector3::repeat(margin);
        b.1 += Vector3::repeat(margin);
    }
    boxes
}

pub fn point_in_box(p: &Vector3<f64>, b: &(Vector3<f64>, Vector3<f64>)) -> bool {
    (0..3).all(|d| p[d] >= b.0[d] && p[d] <= b.1[d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn blob(center: Vector3<f64>, n: usize, spread: f64, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                center
                    + Vector3::new(
                        rng.gen_range(-spread..spread),
                        rng.gen_range(-spread..spread),
                        rng.gen_range(-spread..spread),
                    )
            })
            .collect()
    }

    #[test]
    fn isolated_points_are_noise() {
        // Five scattered candidates with min_pts = 10: all filtered as noise.
        let points = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(5.0, 0.0, 0.0),
            Vector3::new(0.0, 5.0, 0.0),
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(3.0, 3.0, 3.0),
        ];
        let labels = cluster(&points, 0.5, 10);
        assert!(labels.iter().all(|l| *l == Label::Noise));
        assert!(cluster_bounding_boxes(&points, &labels, 0.1).is_empty());
    }

    #[test]
    fn two_blobs_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = blob(Vector3::new(0.0, 0.0, 0.0), 40, 0.2, &mut rng);
        pts.extend(blob(Vector3::new(4.0, 0.0, 0.0), 40, 0.2, &mut rng));
        let labels = cluster(&pts, 0.3, 5);
        let mut ids = std::collections::BTreeSet::new();
        for l in &labels {
            match l {
                Label::Cluster(c) => {
                    ids.insert(*c);
                }
                Label::Noise => panic!("dense blob point marked noise"),
            }
        }
        assert_eq!(ids.len(), 2);
        // All of blob 1 in one cluster, all of blob 2 in the other.
        assert!(labels[..40].iter().all(|l| *l == labels[0]));
        assert!(labels[40..].iter().all(|l| *l == labels[40]));
        assert_ne!(labels[0], labels[40]);

        let boxes = cluster_bounding_boxes(&pts, &labels, 0.05);
        assert_eq!(boxes.len(), 2);
        for p in &pts[..40] {
            assert!(point_in_box(p, &boxes[0]) || point_in_box(p, &boxes[1]));
        }
    }

    /// Brute-force reference: classify core points by direct neighborhood
    /// counting, then connected components over core adjacency; border points
    /// attach to any adjacent core component.
    fn reference_dbscan(points: &[Vector3<f64>], eps: f64, min_pts: usize) -> Vec<Option<u32>> {
        let n = points.len();
        let eps2 = eps * eps;
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| (points[i] - points[j]).norm_squared() <= eps2)
                    .collect()
            })
            .collect();
        let core: Vec<bool> = adj.iter().map(|a| a.len() >= min_pts).collect();
        let mut comp: Vec<Option<u32>> = vec![None; n];
        let mut next = 0u32;
        for i in 0..n {
            if !core[i] || comp[i].is_some() {
                continue;
            }
            let id = next;
            next += 1;
            let mut stack = vec![i];
            comp[i] = Some(id);
            while let Some(k) = stack.pop() {
                for &j in &adj[k] {
                    if core[j] && comp[j].is_none() {
                        comp[j] = Some(id);
                        stack.push(j);
                    }
                }
            }
        }
        // Border points: attached to some core neighbor's cluster.
        let mut out = comp.clone();
        for i in 0..n {
            if core[i] || out[i].is_some() {
                continue;
            }
            for &j in &adj[i] {
                if core[j] {
                    out[i] = comp[j];
                    break;
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_reference_on_random_sets() {
        // Border points may legitimately attach to either adjacent cluster,
        // so compare core-point partitions exactly and border points by
        // noise/cluster status only.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..50 {
            let n = 200;
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let eps = rng.gen_range(0.15..0.4);
            let min_pts = rng.gen_range(3..10);
            let ours = cluster(&pts, eps, min_pts);
            let reference = reference_dbscan(&pts, eps, min_pts);

            let eps2 = eps * eps;
            let is_core = |i: usize| {
                pts.iter().filter(|p| (pts[i] - *p).norm_squared() <= eps2).count() >= min_pts
            };
            // Noise status must agree everywhere.
            for i in 0..n {
                assert_eq!(
                    matches!(ours[i], Label::Noise),
                    reference[i].is_none(),
                    "case {case}: point {i} noise status differs"
                );
            }
            // Core points: same-cluster relation must match.
            let cores: Vec<usize> = (0..n).filter(|&i| is_core(i)).collect();
            for (a_pos, &i) in cores.iter().enumerate() {
                for &j in &cores[a_pos + 1..] {
                    let same_ours = ours[i] == ours[j];
                    let same_ref = reference[i] == reference[j];
                    assert_eq!(same_ours, same_ref, "case {case}: core pair ({i},{j}) differs");
                }
            }
        }
    }
}
