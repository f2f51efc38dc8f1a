//! Recovery rollouts.
//!
//! A rollout initializes the query-row coordinates with unit Gaussian noise,
//! then walks a descending step schedule: at each visited step the predictor
//! estimates the current multi-step noise, the sampler removes one chunk of
//! it, and the condition is refreshed with the less-noisy coordinates.
//! Observed rows are never touched, so the known points survive bit-exactly.
//! The propagation state threads across visited steps for `ddpm` and
//! `sp-ddim`; plain `ddim` feeds a zero state at every step.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condition::{build_condition, AggregatedCondition, EmbedderRegistry};
use crate::diffusion::{ddim_step, ddpm_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::net::PropagationState;
use crate::seeds;
use crate::traj::{RecoveryTask, TrajPoint, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    SpDdim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            "sp-ddim" => Ok(SamplerKind::SpDdim),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampler '{other}' (expected ddpm|ddim|sp-ddim)"
            ))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
            SamplerKind::SpDdim => "sp-ddim",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn validate(&self, t_count: usize) -> Result<()> {
        match self.kind {
            SamplerKind::Ddpm => {
                if self.steps != t_count {
                    return Err(Error::InvalidArgument(format!(
                        "ddpm visits every step: steps must equal {t_count}, got {}",
                        self.steps
                    )));
                }
            }
            SamplerKind::Ddim | SamplerKind::SpDdim => {
                if self.steps < 2 || self.steps > t_count {
                    return Err(Error::InvalidArgument(format!(
                        "step count must lie in [2, {t_count}], got {}",
                        self.steps
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Evenly spaced step indices from `T-1` down to 0, both ends included,
/// strictly decreasing.
pub fn make_step_schedule(t_count: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 2 || steps > t_count {
        return Err(Error::InvalidArgument(format!(
            "schedule needs 2..={t_count} visited steps, got {steps}"
        )));
    }
    let top = (t_count - 1) as f64;
    let out: Vec<usize> = (0..steps)
        .map(|i| (top * (1.0 - i as f64 / (steps - 1) as f64)).round() as usize)
        .collect();
    debug_assert!(out.windows(2).all(|w| w[0] > w[1]));
    debug_assert_eq!(*out.last().unwrap(), 0);
    Ok(out)
}

/// Anything that can estimate the multi-step noise at the query rows of a
/// condition. Implementations also provide the zero state a rollout starts
/// from.
pub trait NoisePredictor: Sync {
    /// Returns `[m x 2]` noise estimates for the query rows plus the next
    /// propagation state.
    fn predict(
        &self,
        cond: &AggregatedCondition,
        t: usize,
        state: &PropagationState,
    ) -> Result<(Array2<f64>, PropagationState)>;

    fn initial_state(&self, l: usize) -> PropagationState;
}

/// The trained network as a predictor.
pub struct ModelPredictor<'a> {
    pub model: &'a TrainedModel,
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(
        &self,
        cond: &AggregatedCondition,
        t: usize,
        state: &PropagationState,
    ) -> Result<(Array2<f64>, PropagationState)> {
        let (eps, next) = self
            .model
            .denoiser
            .denoise_forward(&self.model.params, cond, t, state)?;
        let mut at_query = Array2::zeros((cond.query_rows().len(), 2));
        for (j, &r) in cond.query_rows().iter().enumerate() {
            at_query[[j, 0]] = eps.values[[r, 0]];
            at_query[[j, 1]] = eps.values[[r, 1]];
        }
        Ok((at_query, next))
    }

    fn initial_state(&self, l: usize) -> PropagationState {
        PropagationState::zeros(self.model.config(), l)
    }
}

/// Exact inversion given the true clean coordinates: returns the noise
/// actually present in the current sample. Ties the samplers to the
/// forward-process algebra in tests and diagnostics.
pub struct OraclePredictor {
    pub x0_query: Array2<f64>,
    pub sched: NoiseSchedule,
}

impl NoisePredictor for OraclePredictor {
    fn predict(
        &self,
        cond: &AggregatedCondition,
        t: usize,
        state: &PropagationState,
    ) -> Result<(Array2<f64>, PropagationState)> {
        let x = cond.noisy_at_query();
        let abar = self.sched.alpha_bar(t);
        let eps = (&x - &(&self.x0_query * abar.sqrt())) / (1.0 - abar).sqrt();
        Ok((eps, state.clone()))
    }

    fn initial_state(&self, _l: usize) -> PropagationState {
        PropagationState::from_levels(Vec::new(), None)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RolloutOptions {
    /// Feed a zero state at every visited step (diagnostic: severed state).
    pub force_zero_state: bool,
    /// Recompute the fixed-channel checksum at every visited step and fail
    /// if any channel outside the noisy query cells changed.
    pub verify_fixed_channels: bool,
}

#[derive(Debug, Clone)]
pub struct RecoverOutput {
    pub trajectory: Trajectory,
    pub wall_seconds: f64,
    pub visited_steps: usize,
    /// Number of fixed-channel checksum validations performed (when enabled).
    pub checksum_checks: usize,
}

/// Full recovery with an explicit predictor. `recover` wraps this with the
/// trained model; tests drive it with the oracle.
pub fn rollout(
    task: &RecoveryTask,
    registry: &EmbedderRegistry,
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    spec: &SamplerSpec,
    opts: &RolloutOptions,
) -> Result<RecoverOutput> {
    spec.validate(sched.len())?;
    let start = Instant::now();

    let m = task.query.len();
    let mut init_rng = seeds::stream_rng(spec.seed, "init-noise");
    let mut x =
        Array2::from_shape_simple_fn((m, 2), || init_rng.sample::<f64, _>(StandardNormal));
    let top = sched.len() - 1;
    let mut cond = build_condition(task, registry, &x, top)?;
    let l = cond.data().nrows();
    let mut state = predictor.initial_state(l);
    let zero_state = predictor.initial_state(l);
    let baseline_checksum = cond.fixed_checksum();
    let mut checksum_checks = 0;

    let schedule = make_step_schedule(sched.len(), spec.steps)?;
    let mut z_rng = seeds::stream_rng(spec.seed, "rollout-noise");

    for (i, &t) in schedule.iter().enumerate() {
        let state_in = if opts.force_zero_state || spec.kind == SamplerKind::Ddim {
            &zero_state
        } else {
            &state
        };
        let (eps, next_state) = predictor.predict(&cond, t, state_in)?;
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite noise prediction at step {t}"
            )));
        }

        x = match spec.kind {
            SamplerKind::Ddpm => {
                let z = if t == 0 {
                    None
                } else {
                    Some(Array2::from_shape_simple_fn((m, 2), || {
                        z_rng.sample::<f64, _>(StandardNormal)
                    }))
                };
                ddpm_step(&x, &eps, t, z.as_ref(), sched)?
            }
            SamplerKind::Ddim | SamplerKind::SpDdim => {
                let t_prev = schedule.get(i + 1).copied();
                ddim_step(&x, &eps, t, t_prev, sched)?
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample after step {t}")));
        }

        state = next_state;
        let next_tag = schedule.get(i + 1).copied().unwrap_or(0);
        cond = cond.refresh(&x, next_tag)?;
        if opts.verify_fixed_channels {
            if cond.fixed_checksum() != baseline_checksum {
                return Err(Error::Validation(format!(
                    "fixed condition channels changed at step {t}"
                )));
            }
            checksum_checks += 1;
        }
    }

    // Merge: observed points are carried over bit-exactly from the input;
    // query points are denormalized from the final sample.
    let mut points: Vec<TrajPoint> = task.sparse.points().to_vec();
    for (j, &qt) in task.query.times().iter().enumerate() {
        points.push(TrajPoint::new(
            task.norm.denorm_lng(x[[j, 0]]),
            task.norm.denorm_lat(x[[j, 1]]),
            qt,
        ));
    }
    points.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
    Ok(RecoverOutput {
        trajectory: Trajectory::new(points)?,
        wall_seconds: start.elapsed().as_secs_f64(),
        visited_steps: schedule.len(),
        checksum_checks,
    })
}

/// Recovers the dense trajectory for a task with a trained model.
pub fn recover(
    task: &RecoveryTask,
    model: &TrainedModel,
    registry: &EmbedderRegistry,
    spec: &SamplerSpec,
) -> Result<RecoverOutput> {
    model.check_registry(registry)?;
    let sched = model.build_schedule()?;
    let predictor = ModelPredictor { model };
    rollout(task, registry, &predictor, &sched, spec, &RolloutOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::traj::{normalize, sparsify, synth_generate, NormStats};

    fn toy_task(seed: u64) -> (Trajectory, RecoveryTask, Array2<f64>) {
        let dense = &synth_generate(1, 32, seed).unwrap()[0];
        let stats = NormStats::from_trajectories(std::slice::from_ref(dense)).unwrap();
        let (sparse, query, truth) = sparsify(dense, 0.5, seed + 1).unwrap();
        let task = RecoveryTask::new(sparse, query, vec![], stats).unwrap();
        let mut x0 = Array2::zeros((truth.len(), 2));
        for (j, &(lng, lat)) in truth.iter().enumerate() {
            x0[[j, 0]] = stats.norm_lng(lng);
            x0[[j, 1]] = stats.norm_lat(lat);
        }
        (dense.clone(), task, x0)
    }

    #[test]
    fn step_schedule_shapes() {
        let all = make_step_schedule(500, 500).unwrap();
        assert_eq!(all.len(), 500);
        assert_eq!(all[0], 499);
        assert_eq!(*all.last().unwrap(), 0);
        for (i, &v) in all.iter().enumerate() {
            assert_eq!(v, 499 - i);
        }

        assert_eq!(make_step_schedule(500, 2).unwrap(), vec![499, 0]);

        let s21 = make_step_schedule(500, 21).unwrap();
        assert_eq!(s21.len(), 21);
        assert!(s21.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*s21.last().unwrap(), 0);
        let gaps: Vec<i64> = s21.windows(2).map(|w| w[0] as i64 - w[1] as i64).collect();
        let (lo, hi) = (gaps.iter().min().unwrap(), gaps.iter().max().unwrap());
        assert!(hi - lo <= 1, "gaps {gaps:?}");

        assert!(make_step_schedule(500, 1).is_err());
        assert!(make_step_schedule(500, 501).is_err());
    }

    #[test]
    fn sampler_spec_validation() {
        let spec = SamplerSpec {
            kind: SamplerKind::Ddpm,
            steps: 21,
            seed: 0,
        };
        assert!(spec.validate(500).is_err());
        let spec = SamplerSpec {
            kind: SamplerKind::SpDdim,
            steps: 21,
            seed: 0,
        };
        assert!(spec.validate(500).is_ok());
    }

    #[test]
    fn oracle_rollouts_recover_the_dense_truth() {
        let sched = make_schedule(50, 1e-3, 0.05).unwrap();
        let (dense, task, x0) = toy_task(3);
        let registry = EmbedderRegistry::new();
        let oracle = OraclePredictor {
            x0_query: x0.clone(),
            sched: sched.clone(),
        };

        for spec in [
            SamplerSpec { kind: SamplerKind::Ddpm, steps: 50, seed: 5 },
            SamplerSpec { kind: SamplerKind::Ddim, steps: 50, seed: 5 },
            SamplerSpec { kind: SamplerKind::Ddim, steps: 2, seed: 5 },
            SamplerSpec { kind: SamplerKind::SpDdim, steps: 21, seed: 5 },
        ] {
            let out = rollout(
                &task,
                &registry,
                &oracle,
                &sched,
                &spec,
                &RolloutOptions {
                    force_zero_state: false,
                    verify_fixed_channels: true,
                },
            )
            .unwrap();
            assert_eq!(out.trajectory.len(), dense.len());
            assert_eq!(out.checksum_checks, spec.steps);

            // Mean absolute error in normalized units at the query rows.
            let rec_norm = normalize(&out.trajectory, &task.norm).unwrap();
            let dense_norm = normalize(&dense, &task.norm).unwrap();
            let mut err = 0.0;
            let mut n = 0.0;
            for (r, &qt) in dense.points().iter().enumerate().flat_map(|(r, p)| {
                task.query.times().iter().filter(move |&&q| q == p.time).map(move |q| (r, q))
            }) {
                let _ = qt;
                err += (rec_norm[[r, 0]] - dense_norm[[r, 0]]).abs()
                    + (rec_norm[[r, 1]] - dense_norm[[r, 1]]).abs();
                n += 2.0;
            }
            assert!(n > 0.0);
            let mae = err / n;
            assert!(mae < 1e-3, "{:?}: oracle rollout mae {mae}", spec.kind);
        }
    }

    #[test]
    fn observed_points_survive_bit_exactly_and_rollouts_are_deterministic() {
        let sched = make_schedule(30, 1e-3, 0.05).unwrap();
        let (_, task, x0) = toy_task(9);
        let registry = EmbedderRegistry::new();
        let oracle = OraclePredictor { x0_query: x0, sched: sched.clone() };
        let spec = SamplerSpec {
            kind: SamplerKind::SpDdim,
            steps: 10,
            seed: 77,
        };
        let a = rollout(&task, &registry, &oracle, &sched, &spec, &RolloutOptions::default()).unwrap();
        let b = rollout(&task, &registry, &oracle, &sched, &spec, &RolloutOptions::default()).unwrap();
        assert_eq!(a.trajectory, b.trajectory);

        for p in task.sparse.points() {
            let q = a
                .trajectory
                .points()
                .iter()
                .find(|q| q.time == p.time)
                .expect("observed time present");
            assert_eq!(p.lng, q.lng);
            assert_eq!(p.lat, q.lat);
        }
    }

    #[test]
    fn ddpm_differs_from_ddim_but_both_end_clean_with_oracle() {
        let sched = make_schedule(40, 1e-3, 0.05).unwrap();
        let (_, task, x0) = toy_task(21);
        let registry = EmbedderRegistry::new();
        let oracle = OraclePredictor { x0_query: x0, sched: sched.clone() };
        let ddpm = rollout(
            &task,
            &registry,
            &oracle,
            &sched,
            &SamplerSpec { kind: SamplerKind::Ddpm, steps: 40, seed: 3 },
            &RolloutOptions::default(),
        )
        .unwrap();
        let ddim = rollout(
            &task,
            &registry,
            &oracle,
            &sched,
            &SamplerSpec { kind: SamplerKind::Ddim, steps: 40, seed: 3 },
            &RolloutOptions::default(),
        )
        .unwrap();
        for (p, q) in ddpm.trajectory.points().iter().zip(ddim.trajectory.points()) {
            assert!((p.lng - q.lng).abs() < 1e-6);
            assert!((p.lat - q.lat).abs() < 1e-6);
        }
    }

    /// The state emitted at each visited step must be consumed by the next
    /// visited step, across gaps, for sp-ddim.
    #[test]
    fn sp_ddim_threads_state_across_visited_steps() {
        use std::sync::Mutex;

        struct TaggingPredictor {
            inner: OraclePredictor,
            seen: Mutex<Vec<Option<usize>>>,
        }
        impl NoisePredictor for TaggingPredictor {
            fn predict(
                &self,
                cond: &AggregatedCondition,
                t: usize,
                state: &PropagationState,
            ) -> Result<(Array2<f64>, PropagationState)> {
                self.seen.lock().unwrap().push(state.emitted_at);
                let (eps, _) = self.inner.predict(cond, t, state)?;
                let next = PropagationState::from_levels(Vec::new(), Some(t));
                Ok((eps, next))
            }
            fn initial_state(&self, _l: usize) -> PropagationState {
                PropagationState::from_levels(Vec::new(), None)
            }
        }

        let sched = make_schedule(60, 1e-3, 0.05).unwrap();
        let (_, task, x0) = toy_task(31);
        let registry = EmbedderRegistry::new();
        let pred = TaggingPredictor {
            inner: OraclePredictor { x0_query: x0, sched: sched.clone() },
            seen: Mutex::new(Vec::new()),
        };
        let spec = SamplerSpec { kind: SamplerKind::SpDdim, steps: 12, seed: 1 };
        rollout(&task, &registry, &pred, &sched, &spec, &RolloutOptions::default()).unwrap();
        let seen = pred.seen.into_inner().unwrap();
        let schedule = make_step_schedule(60, 12).unwrap();
        assert_eq!(seen.len(), 12);
        assert_eq!(seen[0], None);
        for (i, tag) in seen.iter().enumerate().skip(1) {
            assert_eq!(*tag, Some(schedule[i - 1]), "state not threaded at visit {i}");
        }

        // Plain ddim must feed the zero (fresh) state at every step.
        let pred = TaggingPredictor {
            inner: OraclePredictor {
                x0_query: {
                    let (_, _, x0) = toy_task(31);
                    x0
                },
                sched: sched.clone(),
            },
            seen: Mutex::new(Vec::new()),
        };
        let spec = SamplerSpec { kind: SamplerKind::Ddim, steps: 12, seed: 1 };
        rollout(&task, &registry, &pred, &sched, &spec, &RolloutOptions::default()).unwrap();
        assert!(pred.seen.into_inner().unwrap().iter().all(|t| t.is_none()));
    }
}
