//! Haversine distance and per-user DBSCAN clustering of check-in points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
            return Err(Error::Validation(format!("lat {lat} outside [-90, 90]")));
        }
        if !(lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
            return Err(Error::Validation(format!("lon {lon} outside [-180, 180]")));
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Per-point cluster labels; `None` is noise.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<u32>>,
    pub n_clusters: u32,
}

impl ClusterAssignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Labels with noise removed; panics if any point is noise.
    pub fn dense_labels(&self) -> Vec<u32> {
        self.labels
            .iter()
            .map(|l| l.expect("noise label left in assignment"))
            .collect()
    }
}

/// DBSCAN over haversine distance.
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `eps_m`. Clusters are the connected components of core points, numbered in
/// order of their lowest-index member. A non-core point joins the cluster of
/// its lowest-index core neighbor, or stays noise.
pub fn dbscan(points: &[GeoPoint], eps_m: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if !(eps_m > 0.0 && eps_m.is_finite()) {
        return Err(Error::Config(format!(
            "eps_m must be positive, got {eps_m}"
        )));
    }
    if min_pts < 1 {
        return Err(Error::Config("min_pts must be at least 1".into()));
    }
    let n = points.len();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        neighbors[i].push(i);
        for j in (i + 1)..n {
            if haversine_m(points[i], points[j]) <= eps_m {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    for nb in &mut neighbors {
        nb.sort_unstable();
    }
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels: Vec<Option<u32>> = vec![None; n];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(next);
        stack.push(seed);
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && labels[q].is_none() {
                    labels[q] = Some(next);
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = neighbors[i]
                .iter()
                .find(|&&q| core[q])
                .and_then(|&q| labels[q]);
        }
    }
    Ok(ClusterAssignment {
        labels,
        n_clusters: next,
    })
}

/// Promotes each noise point to its own cluster, appending ids in point order.
pub fn assign_noise(assignment: &ClusterAssignment) -> ClusterAssignment {
    let mut next = assignment.n_clusters;
    let labels = assignment
        .labels
        .iter()
        .map(|l| {
            Some(l.unwrap_or_else(|| {
                next += 1;
                next - 1
            }))
        })
        .collect();
    ClusterAssignment {
        labels,
        n_clusters: next,
    }
}

/// Arithmetic mean of member coordinates per cluster.
pub fn centroids(
    points: &[GeoPoint],
    assignment: &ClusterAssignment,
) -> Result<BTreeMap<u32, GeoPoint>> {
    if points.len() != assignment.len() {
        return Err(Error::Validation(format!(
            "{} points but {} labels",
            points.len(),
            assignment.len()
        )));
    }
    let mut sums: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
    for (p, l) in points.iter().zip(&assignment.labels) {
        if let Some(l) = l {
            let e = sums.entry(*l).or_insert((0.0, 0.0, 0));
            e.0 += p.lat;
            e.1 += p.lon;
            e.2 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (lat, lon, n))| {
            (
                k,
                GeoPoint {
                    lat: lat / n as f64,
                    lon: lon / n as f64,
                },
            )
        })
        .collect())
}

/// Centroid of a single cluster; errors when no point carries `cluster`.
pub fn centroid_of(
    points: &[GeoPoint],
    assignment: &ClusterAssignment,
    cluster: u32,
) -> Result<GeoPoint> {
    centroids(points, assignment)?
        .remove(&cluster)
        .ok_or_else(|| Error::Validation(format!("unknown cluster id {cluster}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint { lat, lon }
    }

    /// Offsets a point north by `m` meters.
    fn north(a: GeoPoint, m: f64) -> GeoPoint {
        p(a.lat + (m / EARTH_RADIUS_M).to_degrees(), a.lon)
    }

    #[test]
    fn haversine_identity_and_equator_degree() {
        let a = p(41.88, -87.63);
        assert_eq!(haversine_m(a, a), 0.0);
        // R * pi / 180
        let d = haversine_m(p(0.0, 0.0), p(0.0, 1.0));
        assert!((d - 111_194.93).abs() < 5.0, "{d}");
    }

    #[test]
    fn invalid_points_rejected() {
        assert!(GeoPoint::new(95.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn close_pair_forms_one_cluster() {
        let a = p(41.88, -87.63);
        let asg = dbscan(&[a, north(a, 50.0)], 100.0, 2).unwrap();
        assert_eq!(asg.labels, vec![Some(0), Some(0)]);
        assert_eq!(asg.n_clusters, 1);
    }

    #[test]
    fn distant_pair_is_noise() {
        let a = p(41.88, -87.63);
        let asg = dbscan(&[a, north(a, 500.0)], 100.0, 2).unwrap();
        assert_eq!(asg.labels, vec![None, None]);
        let promoted = assign_noise(&asg);
        assert_eq!(promoted.labels, vec![Some(0), Some(1)]);
        assert_eq!(promoted.n_clusters, 2);
    }

    #[test]
    fn empty_input() {
        let asg = dbscan(&[], 100.0, 2).unwrap();
        assert!(asg.is_empty());
        assert_eq!(asg.n_clusters, 0);
    }

    #[test]
    fn bad_parameters() {
        assert!(dbscan(&[], 0.0, 2).is_err());
        assert!(dbscan(&[], 100.0, 0).is_err());
    }

    #[test]
    fn border_point_joins_lowest_index_core() {
        // Two chains whose nearest cores are 180 m apart, border point midway.
        let a = p(41.88, -87.63);
        let pts = [
            a,
            north(a, -20.0),
            north(a, -40.0),
            north(a, -60.0),
            north(a, 180.0),
            north(a, 200.0),
            north(a, 220.0),
            north(a, 240.0),
            north(a, 90.0),
        ];
        let asg = dbscan(&pts, 100.0, 4).unwrap();
        assert_eq!(asg.n_clusters, 2);
        assert_eq!(asg.labels[8], asg.labels[0]);
        assert_ne!(asg.labels[4], asg.labels[0]);
    }

    #[test]
    fn centroid_cases() {
        let a = p(41.0, -87.0);
        let single = assign_noise(&dbscan(&[a], 100.0, 2).unwrap());
        assert_eq!(centroids(&[a], &single).unwrap()[&0], a);

        let b = p(41.0002, -87.0004);
        let asg = dbscan(&[a, b], 100.0, 2).unwrap();
        let mid = centroid_of(&[a, b], &asg, 0).unwrap();
        assert!((mid.lat - 41.0001).abs() < 1e-12 && (mid.lon + 87.0002).abs() < 1e-12);

        let pts = [p(10.0, 20.0), p(10.0003, 20.0), p(10.0, 20.0006)];
        let asg = dbscan(&pts, 100.0, 2).unwrap();
        assert_eq!(asg.n_clusters, 1);
        let c = centroid_of(&pts, &asg, 0).unwrap();
        assert!((c.lat - 10.0001).abs() < 1e-12);
        assert!((c.lon - 20.0002).abs() < 1e-12);

        assert!(centroid_of(&pts, &asg, 7).is_err());
    }
}
