//! Hand-written reverse mode through the autoregressive rollout.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::Activation;
use super::model::Emulator;
use super::params::{GradientSet, ParamSets, INPUT_BIAS, INPUT_WEIGHT, OUTPUT_BIAS, OUTPUT_WEIGHT};
use crate::data::{FieldState, Space, TrainingWindow};
use crate::error::{Error, Result};
use crate::loss::{weighted_mse, LossSpec};
use crate::time;

fn check_split(split_points: &[usize], n_steps: usize) -> Result<()> {
    if split_points.iter().sum::<usize>() != n_steps || split_points.contains(&0) {
        return Err(Error::SplitMismatch {
            points: split_points.to_vec(),
            n_steps,
        });
    }
    Ok(())
}

impl Emulator<f64> {
    /// Loss and exact gradient of the full rollout over `window`.
    pub fn backprop_rollout(&self, window: &TrainingWindow, loss: &LossSpec) -> Result<(f64, GradientSet)> {
        self.backprop_segments(window, loss, &[window.n_steps()])
    }

    /// Loss and gradient when the rollout is computed in consecutive segments
    /// whose initial states are treated as constants. The forward values,
    /// and therefore the loss, are identical to the unsplit rollout.
    pub fn backprop_segments(
        &self,
        window: &TrainingWindow,
        loss: &LossSpec,
        split_points: &[usize],
    ) -> Result<(f64, GradientSet)> {
        let n_steps = window.n_steps();
        check_split(split_points, n_steps)?;
        if loss.n_steps != n_steps {
            return Err(Error::ShapeMismatch(format!(
                "loss expects {} steps, window has {n_steps}",
                loss.n_steps
            )));
        }
        let n = self.grid.n_cells();
        let nc = self.config.layout.n_channels();
        let s = self.config.stencil_size();

        // Forward pass, keeping every state and hidden activation.
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(n_steps + 2);
        z.push(self.normalize(&window.inputs[0])?.values);
        z.push(self.normalize(&window.inputs[1])?.values);
        let mut hidden: Vec<DMatrix<f64>> = Vec::with_capacity(n_steps);
        for step in 1..=n_steps {
            let t = window.valid + time::step() * (step as i32 - 1);
            let x = self.features(&z[step - 1], &z[step], t);
            let h = self.hidden(&x);
            let next = self.output(&h, &z[step]);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("rollout state at step {step}")));
            }
            z.push(next);
            hidden.push(h);
        }
        let pred: Vec<FieldState> = (0..n_steps)
            .map(|k| {
                let mut st = window.targets[k].clone();
                st.values = z[k + 2].clone();
                st.space = Space::Normalized;
                self.denormalize(&st)
            })
            .collect::<Result<_>>()?;
        let value = weighted_mse(&pred, &window.targets, loss, &self.grid)?;

        // Direct loss adjoints, expressed with respect to normalized states.
        let factors = loss.channel_factors();
        let mut adj: Vec<Vec<f64>> = vec![vec![0.0; nc * n]; n_steps + 2];
        let nlon = self.grid.nlon();
        for k in 0..n_steps {
            let a = &mut adj[k + 2];
            for c in 0..nc {
                let scale = 2.0 / n_steps as f64 * factors[c] * self.std[c];
                let p = pred[k].channel(c);
                let tgt = window.targets[k].channel(c);
                for cell in 0..n {
                    a[c * n + cell] = scale * self.grid.row_weight(cell / nlon) * (p[cell] - tgt[cell]);
                }
            }
        }

        // Segment start for each step: inputs of the segment's first step are cut.
        let mut seg_start = vec![0usize; n_steps + 1];
        let mut first = 1;
        for &len in split_points {
            seg_start[first..first + len].fill(first);
            first += len;
        }

        let mut dw1 = DMatrix::<f64>::zeros(self.w1.nrows(), self.w1.ncols());
        let mut db1 = vec![0.0; self.b1.len()];
        let mut dw2 = DMatrix::<f64>::zeros(self.w2.nrows(), self.w2.ncols());
        let mut db2 = vec![0.0; nc];
        for step in (1..=n_steps).rev() {
            let g = std::mem::take(&mut adj[step + 1]);
            let h = &hidden[step - 1];
            let mut ddelta = DMatrix::<f64>::zeros(nc, n);
            for c in 0..nc {
                for cell in 0..n {
                    let v = self.gain[c] * g[c * n + cell];
                    ddelta[(c, cell)] = v;
                    db2[c] += v;
                }
            }
            dw2.gemm(1.0, &ddelta, &h.transpose(), 1.0);
            let mut dpre = self.w2.tr_mul(&ddelta);
            if self.config.activation == Activation::Tanh {
                dpre.zip_apply(h, |d, hv| *d *= 1.0 - hv * hv);
            }
            for (k, row) in dpre.row_iter().enumerate() {
                db1[k] += row.sum();
            }
            let t = window.valid + time::step() * (step as i32 - 1);
            let x = self.features(&z[step - 1], &z[step], t);
            dw1.gemm(1.0, &dpre, &x.transpose(), 1.0);

            let start = seg_start[step];
            let to_prev = step - 1 > start;
            let to_cur = step > start;
            if to_prev || to_cur {
                let dx = self.w1.tr_mul(&dpre);
                for cell in 0..n {
                    let nb = &self.neighbors[cell * s..(cell + 1) * s];
                    let col = dx.column(cell);
                    for c in 0..nc {
                        for (o, &k) in nb.iter().enumerate() {
                            if to_prev {
                                adj[step - 1][c * n + k] += col[c * s + o];
                            }
                            if to_cur {
                                adj[step][c * n + k] += col[(nc + c) * s + o];
                            }
                        }
                    }
                }
            }
            if to_cur {
                for (a, gv) in adj[step].iter_mut().zip(&g) {
                    *a += gv;
                }
            }
        }

        let mut grads = ParamSets::zeros(&self.config);
        grads.get_mut(INPUT_WEIGHT).unwrap().values = dw1.transpose().as_slice().to_vec();
        grads.get_mut(INPUT_BIAS).unwrap().values = db1;
        grads.get_mut(OUTPUT_WEIGHT).unwrap().values = dw2.transpose().as_slice().to_vec();
        grads.get_mut(OUTPUT_BIAS).unwrap().values = db2;
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok((value, grads))
    }

    /// Loss of the rollout without gradients.
    pub fn rollout_loss(&self, window: &TrainingWindow, loss: &LossSpec) -> Result<f64> {
        let pred = self.forecast(&window.inputs[0], &window.inputs[1], window.n_steps())?;
        weighted_mse(&pred, &window.targets, loss, &self.grid)
    }
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub set: String,
    pub probes: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Relative step used for the main comparison.
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
    /// `(relative step, max relative error over all sets)` for each swept step.
    pub sweep: Vec<(f64, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative error with a floor proportional to the largest gradient in the
/// set, so coordinates with vanishing derivatives do not divide by zero.
fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare reverse-mode gradients with central differences at `probes`
/// random coordinates of every parameter set. The perturbation for
/// coordinate θ is `step · max(1, |θ|)`.
#[allow(clippy::too_many_arguments)]
pub fn grad_check<R: Rng>(
    config: &super::config::ModelConfig,
    params: &ParamSets,
    stats: &crate::data::NormalizationStats,
    window: &TrainingWindow,
    loss: &LossSpec,
    probes: usize,
    steps: &[f64],
    rng: &mut R,
) -> Result<GradCheckReport> {
    if probes == 0 || steps.is_empty() {
        return Err(Error::InvalidParameter("grad check needs probes ≥ 1 and a step".into()));
    }
    let model = Emulator::<f64>::new(config, params, stats)?;
    let (_, grads) = model.backprop_rollout(window, loss)?;
    let picks: Vec<Vec<usize>> = params
        .sets
        .iter()
        .map(|t| (0..probes).map(|_| rng.random_range(0..t.values.len())).collect())
        .collect();
    let eval = |p: &ParamSets| -> Result<f64> { Emulator::<f64>::new(config, p, stats)?.rollout_loss(window, loss) };
    let mut results: Vec<Vec<f64>> = Vec::new();
    for &h in steps {
        let mut per_set = Vec::new();
        for (si, idxs) in picks.iter().enumerate() {
            let gmax = grads.sets[si].values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let floor = (1e-7 * gmax).max(1e-300);
            let mut worst = 0.0f64;
            for &k in idxs {
                let theta = params.sets[si].values[k];
                let dh = h * theta.abs().max(1.0);
                let mut plus = params.clone();
                plus.sets[si].values[k] = theta + dh;
                let mut minus = params.clone();
                minus.sets[si].values[k] = theta - dh;
                // Use the actually representable step.
                let span = plus.sets[si].values[k] - minus.sets[si].values[k];
                let fd = (eval(&plus)? - eval(&minus)?) / span;
                worst = worst.max(rel_error(fd, grads.sets[si].values[k], floor));
            }
            per_set.push(worst);
        }
        results.push(per_set);
    }
    let entries = params
        .sets
        .iter()
        .enumerate()
        .map(|(si, t)| GradCheckEntry {
            set: t.name.clone(),
            probes,
            max_rel_error: results[0][si],
        })
        .collect();
    let sweep = steps
        .iter()
        .zip(&results)
        .map(|(&h, r)| (h, r.iter().copied().fold(0.0, f64::max)))
        .collect();
    Ok(GradCheckReport {
        step: steps[0],
        entries,
        sweep,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{Layout, LevelSet, NormalizationStats, VarKind, Variable};
    use crate::emulator::config::ModelConfig;
    use crate::grid::GridDims;
    use crate::loss::tests::toy_stats;
    use crate::loss::{pressure_level_weights, VariableWeights};
    use chrono::{TimeZone, Utc};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_problem(
        seed: u64,
        n_steps: usize,
        activation: Activation,
    ) -> (ModelConfig, ParamSets, NormalizationStats, TrainingWindow, LossSpec) {
        let layout = Layout::new(
            vec![
                Variable { name: "a".into(), kind: VarKind::Atmospheric },
                Variable { name: "t2m".into(), kind: VarKind::Surface },
            ],
            LevelSet::new(vec![500.0, 1000.0]).unwrap(),
        )
        .unwrap();
        let cfg = ModelConfig::new(layout.clone(), GridDims { nlat: 3, nlon: 4 }, 1, 4, activation);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSets::init(&cfg, &mut rng);
        for t in &mut params.sets {
            for v in &mut t.values {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let mut stats = toy_stats(&layout, vec![0.5, 0.8, 1.2]);
        stats.mean = vec![10.0, -2.0, 3.0];
        stats.std = vec![2.0, 1.5, 0.7];
        let t0 = Utc.with_ymd_and_hms(2020, 5, 1, 6, 0, 0).unwrap();
        let mk = |rng: &mut ChaCha8Rng, k: i32| {
            let v = (0..36)
                .map(|i| stats.mean[i / 12] + stats.std[i / 12] * rng.random_range(-1.0..1.0))
                .collect();
            FieldState::new(v, 3, 3, 4, t0 + time::step() * k, Space::Physical).unwrap()
        };
        let inputs = [mk(&mut rng, -1), mk(&mut rng, 0)];
        let targets = (1..=n_steps as i32).map(|k| mk(&mut rng, k)).collect();
        let window = TrainingWindow {
            valid: t0,
            inputs,
            targets,
        };
        let mut dstat = stats.clone();
        dstat.dstd = vec![0.9, 0.6, 1.1];
        let loss = LossSpec::new(
            pressure_level_weights(&layout.levels),
            VariableWeights::default_for(&layout),
            dstat,
            n_steps,
        )
        .unwrap();
        (cfg, params, stats, window, loss)
    }

    #[test]
    fn loss_matches_loss_module() {
        let (cfg, params, stats, window, loss) = tiny_problem(1, 4, Activation::Tanh);
        let m = Emulator::<f64>::new(&cfg, &params, &stats).unwrap();
        let (l, _) = m.backprop_rollout(&window, &loss).unwrap();
        let pred = m.forecast(&window.inputs[0], &window.inputs[1], 4).unwrap();
        let direct = weighted_mse(&pred, &window.targets, &loss, m.grid()).unwrap();
        assert!((l - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn perfect_forecast_has_zero_gradient() {
        let (cfg, params, stats, mut window, loss) = tiny_problem(2, 3, Activation::Tanh);
        let m = Emulator::<f64>::new(&cfg, &params, &stats).unwrap();
        window.targets = m.forecast(&window.inputs[0], &window.inputs[1], 3).unwrap();
        let (l, g) = m.backprop_rollout(&window, &loss).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_differences_agree() {
        // Along one coordinate a linear one-step model has a quadratic loss, so
        // central differences are exact and a large step minimizes round-off.
        for (steps, act, h, tol) in [
            (1, Activation::Tanh, 1e-5, 1e-5),
            (4, Activation::Tanh, 1e-5, 1e-5),
            (1, Activation::Linear, 1e-2, 1e-9),
        ] {
            let (cfg, params, stats, window, loss) = tiny_problem(3, steps, act);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let report = grad_check(&cfg, &params, &stats, &window, &loss, 8, &[h], &mut rng).unwrap();
            assert!(report.max_rel_error() < tol, "{steps} steps {act:?}: {report:?}");
        }
    }

    #[test]
    fn step_sweep_is_v_shaped() {
        let (cfg, params, stats, window, loss) = tiny_problem(4, 2, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = grad_check(&cfg, &params, &stats, &window, &loss, 6, &[1e-3, 1e-5, 1e-7], &mut rng).unwrap();
        let e: Vec<f64> = r.sweep.iter().map(|s| s.1).collect();
        assert!(e[1] < e[0] && e[1] < e[2], "{e:?}");
    }

    #[test]
    fn splits_preserve_loss_and_degenerate_split_is_identical() {
        let (cfg, params, stats, window, loss) = tiny_problem(5, 6, Activation::Tanh);
        let m = Emulator::<f64>::new(&cfg, &params, &stats).unwrap();
        let (l, g) = m.backprop_rollout(&window, &loss).unwrap();
        let (l2, g2) = m.backprop_segments(&window, &loss, &[6]).unwrap();
        assert_eq!(l, l2);
        assert_eq!(g, g2);
        let (l3, g3) = m.backprop_segments(&window, &loss, &[2, 4]).unwrap();
        assert!((l3 - l).abs() <= 1e-10 * l);
        assert_ne!(g3, g);
        assert!(matches!(
            m.backprop_segments(&window, &loss, &[2, 3]),
            Err(Error::SplitMismatch { .. })
        ));
    }

    #[test]
    fn single_step_segments_match_independent_steps() {
        // With every step in its own segment, each step's gradient is that of
        // a one-step loss from the (detached) model states.
        let (cfg, params, stats, window, loss) = tiny_problem(6, 3, Activation::Tanh);
        let m = Emulator::<f64>::new(&cfg, &params, &stats).unwrap();
        let (_, g) = m.backprop_segments(&window, &loss, &[1, 1, 1]).unwrap();
        let traj = m.forecast(&window.inputs[0], &window.inputs[1], 3).unwrap();
        let mut states = vec![window.inputs[0].clone(), window.inputs[1].clone()];
        states.extend(traj);
        let mut sum = g.zeros_like();
        for k in 0..3 {
            let w = TrainingWindow {
                valid: states[k + 1].time,
                inputs: [states[k].clone(), states[k + 1].clone()],
                targets: vec![window.targets[k].clone()],
            };
            let (_, gk) = m.backprop_rollout(&w, &loss.with_steps(1)).unwrap();
            sum.axpy(1.0 / 3.0, &gk);
        }
        for (a, b) in g.flatten().iter().zip(sum.flatten()) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-8));
        }
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let (cfg, params, stats, window, loss) = tiny_problem(7, 2, Activation::Tanh);
        let m = Emulator::<f64>::new(&cfg, &params, &stats).unwrap();
        let (l, g) = m.backprop_rollout(&window, &loss).unwrap();
        let mut scaled = loss.clone();
        scaled.variable_weights.weights.iter_mut().for_each(|w| *w *= 3.0);
        let (l3, g3) = m.backprop_rollout(&window, &scaled).unwrap();
        assert!((l3 - 3.0 * l).abs() <= 1e-12 * l3);
        for (a, b) in g.flatten().iter().zip(g3.flatten()) {
            assert!((b - 3.0 * a).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }
}
