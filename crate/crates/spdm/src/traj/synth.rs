//! Synthetic trajectory generation.
//!
//! Stands in for field datasets at desk scale: smooth 2-D paths built from a
//! few low-frequency sinusoids plus a bounded random-walk perturbation, with
//! jittered but strictly increasing timestamps, all inside a fixed bounding
//! box.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{TrajPoint, Trajectory};
use crate::error::{Error, Result};
use crate::seeds;

/// Fixed generation box: (lng_min, lng_max, lat_min, lat_max).
pub const SYNTH_BBOX: (f64, f64, f64, f64) = (119.85, 120.15, 29.85, 30.15);

// Component amplitude budget; the sum stays inside the box without clamping
// (clamping would introduce kinks).
const BASE_AMP: f64 = 0.047;
const WALK_STEP: f64 = 6.0e-5;
const WALK_BOUND: f64 = 4.0e-3;

/// Generates `n` smooth trajectories of `length` points each. Deterministic
/// for a fixed seed; trajectory `i` depends only on `(seed, i)`.
pub fn synth_generate(n: usize, length: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if length < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic trajectories need at least 8 points, got {length}"
        )));
    }
    (0..n).map(|i| synth_one(length, seed, i as u64)).collect()
}

fn synth_one(length: usize, seed: u64, index: u64) -> Result<Trajectory> {
    let mut rng = seeds::indexed_rng(seed, "synth", index);
    let (lng_lo, lng_hi, lat_lo, lat_hi) = SYNTH_BBOX;
    let cx = 0.5 * (lng_lo + lng_hi);
    let cy = 0.5 * (lat_lo + lat_hi);

    // Center jitter keeps distinct trajectories from sharing an origin while
    // leaving room for the sinusoid amplitudes.
    let jx: f64 = rng.gen_range(-0.05..0.05);
    let jy: f64 = rng.gen_range(-0.05..0.05);

    // Three sinusoid components per axis with decaying amplitudes.
    let mut comps = Vec::with_capacity(6);
    for axis in 0..2 {
        for k in 0..3u32 {
            let amp = BASE_AMP / f64::from(1 << k) * rng.gen_range(0.4..1.0);
            let freq = rng.gen_range(1.2..4.4) * f64::from(k + 1);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            comps.push((axis, amp, freq, phase));
        }
    }

    // Jittered sampling intervals, always positive.
    let mut times = Vec::with_capacity(length);
    let mut t = 0.0;
    for _ in 0..length {
        times.push(t);
        t += rng.gen_range(20.0..40.0);
    }
    let duration = *times.last().unwrap();

    let mut walk = [0.0_f64; 2];
    let mut points = Vec::with_capacity(length);
    for &ti in &times {
        let u = ti / duration;
        let mut offset = [0.0_f64; 2];
        for &(axis, amp, freq, phase) in &comps {
            offset[axis] += amp * (std::f64::consts::TAU * freq * u + phase).sin();
        }
        for w in walk.iter_mut() {
            let step: f64 = rng.sample(StandardNormal);
            *w = (*w + step * WALK_STEP).clamp(-WALK_BOUND, WALK_BOUND);
        }
        points.push(TrajPoint::new(
            cx + jx + offset[0] + walk[0],
            cy + jy + offset[1] + walk[1],
            ti,
        ));
    }
    debug_assert!(
        points
            .iter()
            .all(|p| p.lng > lng_lo && p.lng < lng_hi && p.lat > lat_lo && p.lat < lat_hi),
        "synthetic path escaped the bounding box"
    );
    Trajectory::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generates_requested_shape_with_increasing_times() {
        let set = synth_generate(100, 64, 1).unwrap();
        assert_eq!(set.len(), 100);
        for t in &set {
            assert_eq!(t.len(), 64);
            for w in t.points().windows(2) {
                assert!(w[1].time > w[0].time);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_the_dataset() {
        let a = synth_generate(10, 32, 99).unwrap();
        let b = synth_generate(10, 32, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_too_short_length() {
        assert!(synth_generate(1, 7, 0).is_err());
    }

    #[test]
    fn paths_stay_inside_the_box() {
        let (lng_lo, lng_hi, lat_lo, lat_hi) = SYNTH_BBOX;
        for t in synth_generate(200, 64, 5).unwrap() {
            for p in t.points() {
                assert!(p.lng > lng_lo && p.lng < lng_hi);
                assert!(p.lat > lat_lo && p.lat < lat_hi);
            }
        }
    }

    #[test]
    fn displacement_p99_is_under_a_tenth_of_the_box_diagonal() {
        let (lng_lo, lng_hi, lat_lo, lat_hi) = SYNTH_BBOX;
        let diag = ((lng_hi - lng_lo).powi(2) + (lat_hi - lat_lo).powi(2)).sqrt();
        let mut disps = Vec::new();
        for t in synth_generate(100, 64, 1).unwrap() {
            for w in t.points().windows(2) {
                let d = ((w[1].lng - w[0].lng).powi(2) + (w[1].lat - w[0].lat).powi(2)).sqrt();
                disps.push(d);
            }
        }
        disps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p99 = disps[(disps.len() as f64 * 0.99) as usize];
        assert!(
            p99 < diag / 10.0,
            "p99 displacement {p99} vs diag/10 {}",
            diag / 10.0
        );
    }
}
