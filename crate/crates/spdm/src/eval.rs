//! Metrics and workload estimators.
//!
//! Conventions: MSE is the mean over query rows and both coordinate channels
//! in normalized space. NDTW is the dynamic-time-warping distance with
//! Euclidean point cost on normalized coordinates, divided by the truth
//! length. JSD compares 2-D occupancy histograms of two trajectory sets in
//! nats. Speed/distance estimates use haversine on raw coordinates.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::traj::{linear_prior, normalize, NormStats, RecoveryTask, Trajectory};

const EARTH_RADIUS_KM: f64 = 6371.0;

/// Corpus-level metric summary plus an echo of the run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mse: f64,
    pub ndtw: f64,
    pub jsd: f64,
    pub n_trajectories: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mse", self.mse), ("ndtw", self.ndtw), ("jsd", self.jsd)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Numeric(format!("metric {name} is {v}")));
            }
        }
        Ok(())
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        format!(
            "metric          value\n\
             --------------  ------------\n\
             mse             {:<12.6e}\n\
             ndtw            {:<12.6e}\n\
             jsd             {:<12.6e}\n\
             trajectories    {}\n",
            self.mse, self.ndtw, self.jsd, self.n_trajectories
        )
    }
}

fn norm_xy(traj: &Trajectory, stats: &NormStats) -> Result<Array2<f64>> {
    let full = normalize(traj, stats)?;
    Ok(full.slice(ndarray::s![.., 0..2]).to_owned())
}

/// Mean squared error over query rows in normalized coordinates. The two
/// trajectories must share an identical timeline; `query_mask` marks the
/// recovered rows.
pub fn mse_metric(
    recovered: &Trajectory,
    truth: &Trajectory,
    query_mask: &[bool],
    stats: &NormStats,
) -> Result<f64> {
    check_aligned(recovered, truth)?;
    if query_mask.len() != truth.len() {
        return Err(Error::Shape(format!(
            "mask length {} vs timeline {}",
            query_mask.len(),
            truth.len()
        )));
    }
    let r = norm_xy(recovered, stats)?;
    let t = norm_xy(truth, stats)?;
    let mut acc = 0.0;
    let mut n = 0.0;
    for (i, &is_query) in query_mask.iter().enumerate() {
        if !is_query {
            continue;
        }
        acc += (r[[i, 0]] - t[[i, 0]]).powi(2) + (r[[i, 1]] - t[[i, 1]]).powi(2);
        n += 2.0;
    }
    if n == 0.0 {
        return Err(Error::InvalidArgument("no query rows to score".into()));
    }
    Ok(acc / n)
}

fn check_aligned(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "timelines differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (p, q) in a.points().iter().zip(b.points()) {
        if p.time != q.time {
            return Err(Error::Validation(format!(
                "timelines disagree at t={} vs t={}",
                p.time, q.time
            )));
        }
    }
    Ok(())
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Dynamic-time-warping distance (Euclidean point cost, normalized
/// coordinates) divided by the truth length.
pub fn ndtw_metric(recovered: &Trajectory, truth: &Trajectory, stats: &NormStats) -> Result<f64> {
    let r = norm_xy(recovered, stats)?;
    let t = norm_xy(truth, stats)?;
    Ok(dtw_cost(&r, &t) / truth.len() as f64)
}

/// Full-matrix DTW over two point sequences given as `[n x 2]` arrays.
pub fn dtw_cost(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (n, m) = (a.nrows(), b.nrows());
    let mut dp = vec![f64::INFINITY; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let d = euclid((a[[i, 0]], a[[i, 1]]), (b[[j, 0]], b[[j, 1]]));
            let best_prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 {
                    best = best.min(dp[at(i - 1, j)]);
                }
                if j > 0 {
                    best = best.min(dp[at(i, j - 1)]);
                }
                if i > 0 && j > 0 {
                    best = best.min(dp[at(i - 1, j - 1)]);
                }
                best
            };
            dp[at(i, j)] = best_prev + d;
        }
    }
    dp[at(n - 1, m - 1)]
}

/// Occupancy grid for JSD: bin counts over a shared bounding box.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lng_min: f64,
    pub lng_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    /// Additive smoothing added to every bin before normalization. The
    /// default is 0 (empty bins contribute nothing, `0 ln 0 = 0`), which
    /// keeps disjoint-support sets at exactly `ln 2`.
    pub smoothing: f64,
}

impl GridSpec {
    /// 64x64 grid covering every point of both sets.
    pub fn covering(a: &[Trajectory], b: &[Trajectory]) -> Result<Self> {
        let mut lng = (f64::INFINITY, f64::NEG_INFINITY);
        let mut lat = (f64::INFINITY, f64::NEG_INFINITY);
        for t in a.iter().chain(b) {
            for p in t.points() {
                lng = (lng.0.min(p.lng), lng.1.max(p.lng));
                lat = (lat.0.min(p.lat), lat.1.max(p.lat));
            }
        }
        if !(lng.1 > lng.0) || !(lat.1 > lat.0) {
            return Err(Error::InvalidArgument(
                "degenerate bounding box for occupancy grid".into(),
            ));
        }
        Ok(Self {
            nx: 64,
            ny: 64,
            lng_min: lng.0,
            lng_max: lng.1,
            lat_min: lat.0,
            lat_max: lat.1,
            smoothing: 0.0,
        })
    }

    fn histogram(&self, set: &[Trajectory]) -> Vec<f64> {
        let mut h = vec![0.0; self.nx * self.ny];
        for t in set {
            for p in t.points() {
                let fx = (p.lng - self.lng_min) / (self.lng_max - self.lng_min);
                let fy = (p.lat - self.lat_min) / (self.lat_max - self.lat_min);
                let ix = ((fx * self.nx as f64) as usize).min(self.nx - 1);
                let iy = ((fy * self.ny as f64) as usize).min(self.ny - 1);
                h[iy * self.nx + ix] += 1.0;
            }
        }
        h
    }
}

/// Jensen–Shannon divergence (nats) between the occupancy histograms of two
/// trajectory sets. Symmetric, bounded by `ln 2`.
pub fn jsd_metric(a: &[Trajectory], b: &[Trajectory], grid: &GridSpec) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("jsd needs two non-empty sets".into()));
    }
    let mut pa = grid.histogram(a);
    let mut pb = grid.histogram(b);
    for v in pa.iter_mut().chain(pb.iter_mut()) {
        *v += grid.smoothing;
    }
    let (sa, sb) = (pa.iter().sum::<f64>(), pb.iter().sum::<f64>());
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::InvalidArgument("empty occupancy histogram".into()));
    }
    let kl_to_mid = |p: &[f64], sp: f64, q: &[f64], sq: f64| {
        let mut acc = 0.0;
        for (&pi, &qi) in p.iter().zip(q) {
            let pi = pi / sp;
            let qi = qi / sq;
            if pi > 0.0 {
                let mid = 0.5 * (pi + qi);
                acc += pi * (pi / mid).ln();
            }
        }
        acc
    };
    Ok(0.5 * kl_to_mid(&pa, sa, &pb, sb) + 0.5 * kl_to_mid(&pb, sb, &pa, sa))
}

/// Haversine great-circle distance in kilometers.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lng1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lng2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlng = lng2 - lng1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlng / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().asin()
}

/// Average moving speed (m/s) and total moving distance (km) of a
/// trajectory, from haversine distances over consecutive pairs.
pub fn speed_and_distance(traj: &Trajectory) -> Result<(f64, f64)> {
    let mut dist_km = 0.0;
    for w in traj.points().windows(2) {
        dist_km += haversine_km((w[0].lng, w[0].lat), (w[1].lng, w[1].lat));
    }
    let duration = traj.last().time - traj.first().time;
    if duration <= 0.0 {
        return Err(Error::InvalidArgument(
            "zero-duration trajectory has no average speed".into(),
        ));
    }
    Ok((dist_km * 1000.0 / duration, dist_km))
}

/// The linear-interpolation recoverer: fills the query directly from the
/// prior. The comparison floor for every learned model.
pub fn baseline_linear(task: &RecoveryTask) -> Result<Trajectory> {
    linear_prior(&task.sparse, &task.query)
}

/// Pools MSE over all query cells of a corpus, averages NDTW per trajectory
/// and computes one set-level JSD.
pub fn evaluate_corpus(
    recovered: &[Trajectory],
    truth: &[Trajectory],
    query_masks: &[Vec<bool>],
    stats: &NormStats,
) -> Result<(f64, f64, f64)> {
    if recovered.len() != truth.len() || recovered.len() != query_masks.len() {
        return Err(Error::Shape(format!(
            "corpus sizes disagree: {} recovered, {} truth, {} masks",
            recovered.len(),
            truth.len(),
            query_masks.len()
        )));
    }
    if recovered.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation corpus".into()));
    }
    let mut mse_acc = 0.0;
    let mut mse_n = 0.0;
    let mut ndtw_acc = 0.0;
    for ((r, t), mask) in recovered.iter().zip(truth).zip(query_masks) {
        check_aligned(r, t)?;
        let rn = norm_xy(r, stats)?;
        let tn = norm_xy(t, stats)?;
        for (i, &is_query) in mask.iter().enumerate() {
            if is_query {
                mse_acc += (rn[[i, 0]] - tn[[i, 0]]).powi(2) + (rn[[i, 1]] - tn[[i, 1]]).powi(2);
                mse_n += 2.0;
            }
        }
        ndtw_acc += dtw_cost(&rn, &tn) / t.len() as f64;
    }
    let grid = GridSpec::covering(recovered, truth)?;
    let jsd = jsd_metric(recovered, truth, &grid)?;
    Ok((mse_acc / mse_n, ndtw_acc / recovered.len() as f64, jsd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use crate::traj::{sparsify, synth_generate, TrajPoint};
    use rand::Rng;

    fn unit_stats() -> NormStats {
        NormStats {
            lng_min: -1.0,
            lng_max: 1.0,
            lat_min: -1.0,
            lat_max: 1.0,
            t_min: 0.0,
            t_max: 100.0,
        }
    }

    fn line(points: &[(f64, f64, f64)]) -> Trajectory {
        Trajectory::new(
            points
                .iter()
                .map(|&(lng, lat, t)| TrajPoint::new(lng, lat, t))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mse_zero_on_identical_and_offset_algebra() {
        let stats = unit_stats();
        let truth = line(&[(0.0, 0.0, 0.0), (0.2, 0.2, 10.0), (0.4, 0.4, 20.0)]);
        let mask = vec![false, true, false];
        assert_eq!(mse_metric(&truth, &truth, &mask, &stats).unwrap(), 0.0);

        // Offset of delta (raw) on both axes at the query row. The stats map
        // spans 2 raw units onto the [-1, 1] range, so normalized delta is
        // raw delta, and per-coordinate-mean MSE equals delta^2.
        let delta = 0.05;
        let off = line(&[(0.0, 0.0, 0.0), (0.2 + delta, 0.2 + delta, 10.0), (0.4, 0.4, 20.0)]);
        let got = mse_metric(&off, &truth, &mask, &stats).unwrap();
        assert!((got - delta * delta).abs() < 1e-12, "{got}");
    }

    #[test]
    fn mse_rejects_misaligned_timelines() {
        let stats = unit_stats();
        let a = line(&[(0.0, 0.0, 0.0), (0.1, 0.1, 10.0)]);
        let b = line(&[(0.0, 0.0, 0.0), (0.1, 0.1, 11.0)]);
        assert!(mse_metric(&a, &b, &[false, true], &stats).is_err());
    }

    #[test]
    fn linear_baseline_is_exact_on_constant_velocity_and_not_on_curves() {
        let stats = unit_stats();
        let straight = line(&[
            (0.0, 0.0, 0.0),
            (0.1, 0.05, 10.0),
            (0.2, 0.1, 20.0),
            (0.3, 0.15, 30.0),
            (0.4, 0.2, 40.0),
            (0.5, 0.25, 50.0),
        ]);
        let (sparse, query, _) = sparsify(&straight, 0.4, 3).unwrap();
        let task = RecoveryTask::new(sparse, query, vec![], stats).unwrap();
        let rec = baseline_linear(&task).unwrap();
        let rec2 = baseline_linear(&task).unwrap();
        assert_eq!(rec, rec2);
        let mask: Vec<bool> = straight
            .points()
            .iter()
            .map(|p| task.query.times().contains(&p.time))
            .collect();
        assert_eq!(mse_metric(&rec, &straight, &mask, &stats).unwrap(), 0.0);

        let curved = &synth_generate(1, 32, 5).unwrap()[0];
        let cstats = NormStats::from_trajectories(std::slice::from_ref(curved)).unwrap();
        let (sparse, query, _) = sparsify(curved, 0.5, 4).unwrap();
        let ctask = RecoveryTask::new(sparse, query, vec![], cstats).unwrap();
        let crec = baseline_linear(&ctask).unwrap();
        let cmask: Vec<bool> = curved
            .points()
            .iter()
            .map(|p| ctask.query.times().contains(&p.time))
            .collect();
        assert!(mse_metric(&crec, curved, &cmask, &cstats).unwrap() > 0.0);
    }

    /// Exhaustive enumeration of all monotone alignments, accumulating cost
    /// along the path in the same order as the DP.
    fn dtw_brute(a: &Array2<f64>, b: &Array2<f64>, i: usize, j: usize, acc: f64) -> f64 {
        let d = euclid((a[[i, 0]], a[[i, 1]]), (b[[j, 0]], b[[j, 1]]));
        let acc = acc + d;
        if i == a.nrows() - 1 && j == b.nrows() - 1 {
            return acc;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.nrows() {
            best = best.min(dtw_brute(a, b, i + 1, j, acc));
        }
        if j + 1 < b.nrows() {
            best = best.min(dtw_brute(a, b, i, j + 1, acc));
        }
        if i + 1 < a.nrows() && j + 1 < b.nrows() {
            best = best.min(dtw_brute(a, b, i + 1, j + 1, acc));
        }
        best
    }

    #[test]
    fn dtw_matches_exhaustive_alignment_enumeration() {
        let mut rng = seeds::stream_rng(8, "dtw-oracle");
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=5);
            let a = Array2::from_shape_simple_fn((n, 2), || rng.gen_range(-1.0..1.0));
            let b = Array2::from_shape_simple_fn((m, 2), || rng.gen_range(-1.0..1.0));
            let dp = dtw_cost(&a, &b);
            let brute = dtw_brute(&a, &b, 0, 0, 0.0);
            assert_eq!(dp, brute, "dp {dp} vs brute {brute}");
        }
    }

    #[test]
    fn dtw_duplication_properties() {
        let stats = unit_stats();
        let t = line(&[(0.0, 0.0, 0.0), (0.3, 0.1, 10.0), (0.5, 0.4, 20.0)]);
        assert_eq!(ndtw_metric(&t, &t, &stats).unwrap(), 0.0);

        // Every monotone path must visit every row, so inserting a point can
        // never lower the distance, and when the duplicate aligns at zero
        // marginal cost (its twin's match is an exact copy) the distance is
        // unchanged.
        let mut rng = seeds::stream_rng(9, "dtw-dup");
        for _ in 0..50 {
            let n = rng.gen_range(2..6);
            let a = Array2::from_shape_simple_fn((n, 2), || rng.gen_range(-1.0..1.0));
            let b = Array2::from_shape_simple_fn((4, 2), || rng.gen_range(-1.0..1.0));
            let base = dtw_cost(&a, &b);
            let dup_at = rng.gen_range(0..n);
            let mut rows: Vec<[f64; 2]> = a.rows().into_iter().map(|r| [r[0], r[1]]).collect();
            rows.insert(dup_at, [a[[dup_at, 0]], a[[dup_at, 1]]]);
            let a2 = Array2::from_shape_fn((n + 1, 2), |(i, j)| rows[i][j]);
            assert!(dtw_cost(&a2, &b) >= base - 1e-12);

            // Zero-marginal-cost case: warping against an exact copy stays 0.
            assert_eq!(dtw_cost(&a2, &a), 0.0);
        }
    }

    #[test]
    fn jsd_bounds_symmetry_and_disjoint_support() {
        let a = vec![line(&[(0.1, 0.1, 0.0), (0.15, 0.12, 10.0)])];
        let b = vec![line(&[(0.8, 0.8, 0.0), (0.85, 0.82, 10.0)])];
        let grid = GridSpec {
            nx: 64,
            ny: 64,
            lng_min: 0.0,
            lng_max: 1.0,
            lat_min: 0.0,
            lat_max: 1.0,
            smoothing: 0.0,
        };
        assert_eq!(jsd_metric(&a, &a, &grid).unwrap(), 0.0);

        let d = jsd_metric(&a, &b, &grid).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-9, "disjoint jsd {d}");

        let ab = jsd_metric(&a, &b, &grid).unwrap();
        let ba = jsd_metric(&b, &a, &grid).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        // A mixed pair lands strictly inside (0, ln 2).
        let c = vec![line(&[(0.1, 0.1, 0.0), (0.8, 0.8, 10.0)])];
        let m = jsd_metric(&a, &c, &grid).unwrap();
        assert!(m > 0.0 && m < std::f64::consts::LN_2);
    }

    #[test]
    fn haversine_meridian_degree_and_speed() {
        let a = (30.0, 10.0);
        let b = (30.0, 11.0); // one degree of latitude along a meridian
        let d = haversine_km(a, b);
        assert!((d - 111.19).abs() < 0.02, "distance {d}");

        let traj = line(&[(30.0, 10.0, 0.0), (30.0, 11.0, 3600.0)]);
        let (speed, dist) = speed_and_distance(&traj).unwrap();
        assert!((dist - 111.19).abs() < 0.02, "dist {dist}");
        assert!((speed - 30.9).abs() < 0.05, "speed {speed}");
    }

    #[test]
    fn stationary_trajectory_has_zero_speed_and_distance() {
        let traj = line(&[(5.0, 5.0, 0.0), (5.0, 5.0, 10.0), (5.0, 5.0, 20.0)]);
        let (speed, dist) = speed_and_distance(&traj).unwrap();
        assert_eq!(speed, 0.0);
        assert_eq!(dist, 0.0);
    }

    #[test]
    fn downsampling_never_increases_distance() {
        for seed in 0..5 {
            let dense = &synth_generate(1, 40, seed).unwrap()[0];
            let (_, dist_dense) = speed_and_distance(dense).unwrap();
            let (sparse, _, _) = sparsify(dense, 0.5, seed + 10).unwrap();
            let (_, dist_sparse) = speed_and_distance(&sparse).unwrap();
            assert!(
                dist_sparse <= dist_dense + 1e-12,
                "sparse {dist_sparse} vs dense {dist_dense}"
            );
        }
    }

    #[test]
    fn report_table_and_validation() {
        let report = EvalReport {
            mse: 1e-4,
            ndtw: 2e-3,
            jsd: 0.01,
            n_trajectories: 10,
            config: serde_json::json!({"sampler": "sp-ddim"}),
        };
        report.validate().unwrap();
        let table = report.to_table();
        assert!(table.contains("mse"));
        assert!(table.contains("10"));

        let bad = EvalReport {
            mse: f64::NAN,
            ..report
        };
        assert!(bad.validate().is_err());
    }
}
