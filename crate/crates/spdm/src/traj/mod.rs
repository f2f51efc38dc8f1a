//! Trajectory representation, sparsification, normalization and the
//! linear-interpolation prior.
//!
//! A trajectory is a chronologically ordered sequence of
//! `(longitude, latitude, time)` points. Recovery starts from a sparse subset
//! of such a sequence plus a query of timestamps whose locations are unknown.

mod io;
mod synth;

pub use io::{load_jsonl, save_jsonl};
pub use synth::{synth_generate, SYNTH_BBOX};

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeds;

/// One spatio-temporal sample: longitude and latitude in degrees, time in
/// seconds since epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajPoint {
    pub lng: f64,
    pub lat: f64,
    pub time: f64,
}

impl TrajPoint {
    pub fn new(lng: f64, lat: f64, time: f64) -> Self {
        Self { lng, lat, time }
    }
}

/// A chronologically ordered sequence of at least two points with strictly
/// increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    points: Vec<TrajPoint>,
}

impl Trajectory {
    pub fn new(points: Vec<TrajPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs at least 2 points, got {}",
                points.len()
            )));
        }
        for w in points.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::Validation(format!(
                    "timestamps must be strictly increasing ({} then {})",
                    w[0].time, w[1].time
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[TrajPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // len >= 2 by construction
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.time)
    }

    pub fn first(&self) -> TrajPoint {
        self.points[0]
    }

    pub fn last(&self) -> TrajPoint {
        *self.points.last().unwrap()
    }

    pub fn time_span(&self) -> (f64, f64) {
        (self.first().time, self.last().time)
    }
}

/// An ordered sequence of timestamps whose locations are to be predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    times: Vec<f64>,
}

impl Query {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Validation(
                    "query timestamps must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Opaque contextual payload attached to a recovery task, keyed by name.
/// Embedders interpret payloads; the core pipeline never does.
#[derive(Debug, Clone, PartialEq)]
pub struct RawContext {
    pub name: String,
    pub payload: ContextPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextPayload {
    /// A categorical identity (user, vehicle, courier, ...).
    Id(u64),
    /// A scalar attached to the whole trajectory.
    Scalar(f64),
    /// One value per merged timeline position.
    Series(Vec<f64>),
    /// No payload; the embedder works from the timeline alone.
    None,
}

/// Per-dataset min/max normalization stats. Normalization maps each axis
/// affinely into [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub lng_min: f64,
    pub lng_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("lng", self.lng_min, self.lng_max),
            ("lat", self.lat_min, self.lat_max),
            ("time", self.t_min, self.t_max),
        ];
        for (name, lo, hi) in axes {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "degenerate {name} range [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Stats covering every point of `trajs`, one shared box per dataset.
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let mut stats = NormStats {
            lng_min: f64::INFINITY,
            lng_max: f64::NEG_INFINITY,
            lat_min: f64::INFINITY,
            lat_max: f64::NEG_INFINITY,
            t_min: f64::INFINITY,
            t_max: f64::NEG_INFINITY,
        };
        for t in trajs {
            for p in t.points() {
                stats.lng_min = stats.lng_min.min(p.lng);
                stats.lng_max = stats.lng_max.max(p.lng);
                stats.lat_min = stats.lat_min.min(p.lat);
                stats.lat_max = stats.lat_max.max(p.lat);
                stats.t_min = stats.t_min.min(p.time);
                stats.t_max = stats.t_max.max(p.time);
            }
        }
        stats.validate()?;
        Ok(stats)
    }

    fn to_unit(lo: f64, hi: f64, v: f64) -> f64 {
        2.0 * (v - lo) / (hi - lo) - 1.0
    }

    fn from_unit(lo: f64, hi: f64, u: f64) -> f64 {
        lo + (u + 1.0) * 0.5 * (hi - lo)
    }

    pub fn norm_lng(&self, v: f64) -> f64 {
        Self::to_unit(self.lng_min, self.lng_max, v)
    }

    pub fn norm_lat(&self, v: f64) -> f64 {
        Self::to_unit(self.lat_min, self.lat_max, v)
    }

    pub fn norm_time(&self, v: f64) -> f64 {
        Self::to_unit(self.t_min, self.t_max, v)
    }

    pub fn denorm_lng(&self, u: f64) -> f64 {
        Self::from_unit(self.lng_min, self.lng_max, u)
    }

    pub fn denorm_lat(&self, u: f64) -> f64 {
        Self::from_unit(self.lat_min, self.lat_max, u)
    }

    pub fn denorm_time(&self, u: f64) -> f64 {
        Self::from_unit(self.t_min, self.t_max, u)
    }
}

/// A sparse trajectory, a query, contextual features and the normalization
/// stats they are expressed against.
#[derive(Debug, Clone)]
pub struct RecoveryTask {
    pub sparse: Trajectory,
    pub query: Query,
    pub contexts: Vec<RawContext>,
    pub norm: NormStats,
}

impl RecoveryTask {
    pub fn new(
        sparse: Trajectory,
        query: Query,
        contexts: Vec<RawContext>,
        norm: NormStats,
    ) -> Result<Self> {
        norm.validate()?;
        let (t0, t1) = sparse.time_span();
        for &qt in query.times() {
            if !(qt > t0 && qt < t1) {
                return Err(Error::OutOfRange(format!(
                    "query time {qt} outside the open span ({t0}, {t1})"
                )));
            }
        }
        // The merged timeline must be free of duplicates.
        let mut all: Vec<f64> = sparse.times().chain(query.times().iter().copied()).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in all.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Validation(format!(
                    "duplicate timeline entry at t={}",
                    w[0]
                )));
            }
        }
        Ok(Self {
            sparse,
            query,
            contexts,
            norm,
        })
    }

    /// Merged, strictly increasing timeline of sparse and query timestamps.
    pub fn merged_times(&self) -> Vec<f64> {
        merge_times(&self.sparse, &self.query)
    }
}

fn merge_times(sparse: &Trajectory, query: &Query) -> Vec<f64> {
    let mut all: Vec<f64> = sparse.times().chain(query.times().iter().copied()).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all
}

/// Removes exactly `floor(sparsity * L)` interior points chosen uniformly at
/// random. The first and last points are always kept. Returns the sparse
/// trajectory, the query built from the removed timestamps, and the removed
/// `(lng, lat)` values in query order.
pub fn sparsify(
    dense: &Trajectory,
    sparsity: f64,
    seed: u64,
) -> Result<(Trajectory, Query, Vec<(f64, f64)>)> {
    if !(sparsity > 0.0 && sparsity < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sparsity must lie in (0, 1), got {sparsity}"
        )));
    }
    let l = dense.len();
    if l < 4 {
        return Err(Error::InvalidArgument(format!(
            "dense trajectory too short to sparsify (len {l} < 4)"
        )));
    }
    let m = (sparsity * l as f64).floor() as usize;
    if m < 1 {
        return Err(Error::InvalidArgument(format!(
            "sparsity {sparsity} removes no points at length {l}"
        )));
    }
    if m > l - 2 {
        return Err(Error::InvalidArgument(format!(
            "sparsity {sparsity} would remove {m} of {} interior points",
            l - 2
        )));
    }

    let mut interior: Vec<usize> = (1..l - 1).collect();
    let mut rng = seeds::stream_rng(seed, "sparsify");
    interior.shuffle(&mut rng);
    let mut removed: Vec<usize> = interior[..m].to_vec();
    removed.sort_unstable();

    let mut keep = vec![true; l];
    for &i in &removed {
        keep[i] = false;
    }
    let sparse_points: Vec<TrajPoint> = dense
        .points()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| *p)
        .collect();
    let query_times: Vec<f64> = removed.iter().map(|&i| dense.points()[i].time).collect();
    let truth: Vec<(f64, f64)> = removed
        .iter()
        .map(|&i| (dense.points()[i].lng, dense.points()[i].lat))
        .collect();

    Ok((
        Trajectory::new(sparse_points)?,
        Query::new(query_times)?,
        truth,
    ))
}

/// Fills every query position with the time-weighted linear interpolation
/// between its bracketing sparse points; sparse positions keep their original
/// values. The result lives on the merged timeline.
pub fn linear_prior(sparse: &Trajectory, query: &Query) -> Result<Trajectory> {
    let (t0, t1) = sparse.time_span();
    let sparse_times: Vec<f64> = sparse.times().collect();
    let mut merged: Vec<TrajPoint> = Vec::with_capacity(sparse.len() + query.len());
    merged.extend_from_slice(sparse.points());

    for &qt in query.times() {
        if !(qt >= t0 && qt <= t1) {
            return Err(Error::OutOfRange(format!(
                "query time {qt} outside sparse span [{t0}, {t1}]"
            )));
        }
        if sparse_times.binary_search_by(|probe| probe.partial_cmp(&qt).unwrap()).is_ok() {
            return Err(Error::Validation(format!(
                "query time {qt} duplicates a sparse timestamp"
            )));
        }
        // Index of the first sparse point strictly after qt.
        let hi = sparse_times.partition_point(|&t| t < qt);
        let lo = hi - 1;
        let (a, b) = (sparse.points()[lo], sparse.points()[hi]);
        let w = (qt - a.time) / (b.time - a.time);
        merged.push(TrajPoint::new(
            a.lng + w * (b.lng - a.lng),
            a.lat + w * (b.lat - a.lat),
            qt,
        ));
    }
    merged.sort_by(|p, q| p.time.partial_cmp(&q.time).unwrap());
    Trajectory::new(merged)
}

/// Maps a trajectory to a `[L x 3]` array of normalized
/// `(lng, lat, time)` channels, each affinely scaled into [-1, 1].
pub fn normalize(traj: &Trajectory, stats: &NormStats) -> Result<Array2<f64>> {
    stats.validate()?;
    let mut out = Array2::zeros((traj.len(), 3));
    for (i, p) in traj.points().iter().enumerate() {
        out[[i, 0]] = stats.norm_lng(p.lng);
        out[[i, 1]] = stats.norm_lat(p.lat);
        out[[i, 2]] = stats.norm_time(p.time);
    }
    Ok(out)
}

/// Exact inverse of [`normalize`].
pub fn denormalize(channels: &Array2<f64>, stats: &NormStats) -> Result<Trajectory> {
    stats.validate()?;
    if channels.ncols() != 3 {
        return Err(Error::Shape(format!(
            "expected 3 channels, got {}",
            channels.ncols()
        )));
    }
    let points = channels
        .rows()
        .into_iter()
        .map(|r| {
            TrajPoint::new(
                stats.denorm_lng(r[0]),
                stats.denorm_lat(r[1]),
                stats.denorm_time(r[2]),
            )
        })
        .collect();
    Trajectory::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn straight_line(l: usize) -> Trajectory {
        let points = (0..l)
            .map(|i| TrajPoint::new(i as f64 * 0.01, i as f64 * 0.02, i as f64 * 10.0))
            .collect();
        Trajectory::new(points).unwrap()
    }

    #[test]
    fn trajectory_rejects_short_and_unsorted_input() {
        assert!(Trajectory::new(vec![TrajPoint::new(0.0, 0.0, 0.0)]).is_err());
        let unsorted = vec![TrajPoint::new(0.0, 0.0, 5.0), TrajPoint::new(1.0, 1.0, 5.0)];
        assert!(Trajectory::new(unsorted).is_err());
    }

    #[test]
    fn sparsify_cardinality_is_forced_by_definition() {
        let dense = straight_line(10);
        let (sparse, query, truth) = sparsify(&dense, 0.5, 7).unwrap();
        assert_eq!(sparse.len(), 5);
        assert_eq!(query.len(), 5);
        assert_eq!(truth.len(), 5);
        assert_eq!(sparse.first().time, dense.first().time);
        assert_eq!(sparse.last().time, dense.last().time);
    }

    #[test]
    fn sparsify_minimal_case_removes_one_point() {
        let dense = straight_line(4);
        let (sparse, query, _) = sparsify(&dense, 0.25, 3).unwrap();
        assert_eq!(sparse.len(), 3);
        assert_eq!(query.len(), 1);
    }

    #[test]
    fn sparsify_is_deterministic() {
        let dense = straight_line(20);
        let a = sparsify(&dense, 0.5, 42).unwrap();
        let b = sparsify(&dense, 0.5, 42).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn sparsify_rejects_bad_arguments() {
        let dense = straight_line(10);
        assert!(sparsify(&dense, 0.0, 1).is_err());
        assert!(sparsify(&dense, 1.0, 1).is_err());
        assert!(sparsify(&straight_line(3), 0.5, 1).is_err());
        // floor(0.05 * 10) = 0 removed points
        assert!(sparsify(&dense, 0.05, 1).is_err());
    }

    #[test]
    fn sparsify_then_reassemble_is_identity() {
        let dense = straight_line(16);
        let (sparse, query, truth) = sparsify(&dense, 0.5, 9).unwrap();
        let mut merged: Vec<TrajPoint> = sparse.points().to_vec();
        for (&t, &(lng, lat)) in query.times().iter().zip(&truth) {
            merged.push(TrajPoint::new(lng, lat, t));
        }
        merged.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        assert_eq!(merged, dense.points());
    }

    #[test]
    fn linear_prior_midpoint() {
        let sparse = Trajectory::new(vec![
            TrajPoint::new(0.0, 0.0, 0.0),
            TrajPoint::new(2.0, 2.0, 10.0),
        ])
        .unwrap();
        let query = Query::new(vec![5.0]).unwrap();
        let prior = linear_prior(&sparse, &query).unwrap();
        assert_eq!(prior.len(), 3);
        let mid = prior.points()[1];
        assert!((mid.lng - 1.0).abs() < 1e-12);
        assert!((mid.lat - 1.0).abs() < 1e-12);
        assert_eq!(mid.time, 5.0);
    }

    #[test]
    fn linear_prior_quarter_point() {
        let sparse = Trajectory::new(vec![
            TrajPoint::new(0.0, 0.0, 0.0),
            TrajPoint::new(4.0, 0.0, 10.0),
        ])
        .unwrap();
        let query = Query::new(vec![2.5]).unwrap();
        let prior = linear_prior(&sparse, &query).unwrap();
        let p = prior.points()[1];
        assert!((p.lng - 1.0).abs() < 1e-12);
        assert!((p.lat - 0.0).abs() < 1e-12);
    }

    #[test]
    fn linear_prior_rejects_duplicates_and_out_of_span() {
        let sparse = straight_line(4);
        let dup = Query::new(vec![10.0]).unwrap(); // equals a sparse time
        assert!(matches!(
            linear_prior(&sparse, &dup),
            Err(Error::Validation(_))
        ));
        let outside = Query::new(vec![99.0]).unwrap();
        assert!(matches!(
            linear_prior(&sparse, &outside),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn linear_prior_is_exact_on_constant_velocity_paths() {
        let dense = straight_line(12);
        let (sparse, query, truth) = sparsify(&dense, 0.5, 5).unwrap();
        let prior = linear_prior(&sparse, &query).unwrap();
        for (&t, &(lng, lat)) in query.times().iter().zip(&truth) {
            let p = prior
                .points()
                .iter()
                .find(|p| p.time == t)
                .expect("query time present");
            assert!((p.lng - lng).abs() < 1e-12);
            assert!((p.lat - lat).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let stats = NormStats {
            lng_min: 10.0,
            lng_max: 20.0,
            lat_min: -5.0,
            lat_max: 5.0,
            t_min: 0.0,
            t_max: 100.0,
        };
        assert_eq!(stats.norm_lng(10.0), -1.0);
        assert_eq!(stats.norm_lng(15.0), 0.0);
        assert_eq!(stats.norm_lng(20.0), 1.0);
    }

    #[test]
    fn normalize_rejects_degenerate_stats() {
        let stats = NormStats {
            lng_min: 1.0,
            lng_max: 1.0,
            lat_min: 0.0,
            lat_max: 1.0,
            t_min: 0.0,
            t_max: 1.0,
        };
        let traj = straight_line(4);
        assert!(normalize(&traj, &stats).is_err());
    }

    #[test]
    fn normalize_round_trip_on_random_points() {
        let mut rng = seeds::stream_rng(11, "norm-test");
        let stats = NormStats {
            lng_min: 108.0,
            lng_max: 109.0,
            lat_min: 34.0,
            lat_max: 35.0,
            t_min: 0.0,
            t_max: 3600.0,
        };
        let mut points = Vec::new();
        let mut t = 0.5;
        for _ in 0..1000 {
            points.push(TrajPoint::new(
                108.0 + rng.gen::<f64>(),
                34.0 + rng.gen::<f64>(),
                t,
            ));
            t += 0.5 + rng.gen::<f64>();
        }
        let traj = Trajectory::new(points).unwrap();
        let channels = normalize(&traj, &stats).unwrap();
        let back = denormalize(&channels, &stats).unwrap();
        let mut max_err: f64 = 0.0;
        for (a, b) in traj.points().iter().zip(back.points()) {
            max_err = max_err.max((a.lng - b.lng).abs() / a.lng.abs().max(1.0));
            max_err = max_err.max((a.lat - b.lat).abs() / a.lat.abs().max(1.0));
            max_err = max_err.max((a.time - b.time).abs() / a.time.abs().max(1.0));
        }
        assert!(max_err < 1e-9, "round-trip error {max_err}");
    }

    #[test]
    fn recovery_task_rejects_duplicate_timeline() {
        let sparse = straight_line(4);
        let stats = NormStats::from_trajectories(std::slice::from_ref(&sparse)).unwrap();
        let query = Query::new(vec![10.0]).unwrap();
        assert!(RecoveryTask::new(sparse, query, vec![], stats).is_err());
    }

    proptest! {
        #[test]
        fn sparsify_reassembly_property(l in 6usize..40, seed in 0u64..500, pct in 1u32..9) {
            let dense = straight_line(l);
            let sparsity = pct as f64 / 10.0;
            if let Ok((sparse, query, truth)) = sparsify(&dense, sparsity, seed) {
                prop_assert_eq!(sparse.len() + query.len(), l);
                let mut merged: Vec<TrajPoint> = sparse.points().to_vec();
                for (&t, &(lng, lat)) in query.times().iter().zip(&truth) {
                    merged.push(TrajPoint::new(lng, lat, t));
                }
                merged.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
                prop_assert_eq!(&merged[..], dense.points());
            }
        }
    }
}
