//! AdamW with decoupled weight decay, the warmup + half-cosine learning-rate
//! schedule, and deterministic gradient aggregation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::emulator::{GradientSet, ModelParams, ParamSets};
use crate::error::{Error, Result};

/// Terminal learning rate used for every stage of the reference curriculum.
pub const PAPER_TERMINAL_LR: f64 = 3.75e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamSets,
    pub v: ParamSets,
    pub t: u64,
    pub hyper: AdamWConfig,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, hyper: AdamWConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            hyper,
        }
    }
}

/// One bias-corrected AdamW update, in place:
/// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
///
/// A learning rate of exactly zero is accepted (the first warmup batch) and
/// still advances the moments and step counter.
pub fn adamw_step(params: &mut ModelParams, grads: &GradientSet, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidParameter(format!("learning rate {lr} must be finite and ≥ 0")));
    }
    params.check_congruent(grads)?;
    params.check_congruent(&state.m)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient passed to the optimizer".into()));
    }
    let h = state.hyper;
    let t = state.t + 1;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    let mut next = params.clone();
    for (si, p) in next.sets.iter_mut().enumerate() {
        let g = &grads.sets[si].values;
        let m = &mut state.m.sets[si].values;
        let v = &mut state.v.sets[si].values;
        for k in 0..p.values.len() {
            m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
            v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            let theta = p.values[k];
            p.values[k] = theta * (1.0 - lr * h.weight_decay) - lr * (mhat / (vhat.sqrt() + h.eps));
        }
    }
    if !next.is_finite() {
        return Err(Error::NonFinite("parameter after optimizer step".into()));
    }
    *params = next;
    state.t = t;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub terminal: f64,
    pub warmup_fraction: f64,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, terminal: f64, warmup_fraction: f64, total: usize) -> Result<Self> {
        let s = Self {
            peak,
            terminal,
            warmup_fraction,
            total,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.terminal > 0.0 && self.peak >= self.terminal) {
            return Err(Error::InvalidParameter("schedule needs peak ≥ terminal > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidParameter("warmup fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Number of warmup batches, `⌊fraction · total⌋`.
    pub fn warmup_batches(&self) -> usize {
        (self.warmup_fraction * self.total as f64).floor() as usize
    }

    /// Linear ramp from 0 to peak over the warmup batches, then a half cosine
    /// from peak (at the first post-warmup batch) to terminal (at the last batch).
    pub fn lr_at(&self, batch: usize) -> Result<f64> {
        if batch >= self.total {
            return Err(Error::IndexOutOfRange {
                index: batch,
                len: self.total,
            });
        }
        let w = self.warmup_batches();
        if batch < w {
            return Ok(self.peak * batch as f64 / w as f64);
        }
        let span = self.total - 1 - w;
        if span == 0 {
            return Ok(self.peak);
        }
        let s = (batch - w) as f64 / span as f64;
        let cos = (std::f64::consts::PI * s).cos();
        let range = self.peak - self.terminal;
        // Anchor each half on its own endpoint so both ends are exact.
        Ok(if s <= 0.5 {
            self.peak - range * (1.0 - cos) / 2.0
        } else {
            self.terminal + range * (1.0 + cos) / 2.0
        })
    }
}

/// Elementwise mean computed in a fixed order: inputs are sorted by content
/// and reduced with a pairwise tree, so the result does not depend on the
/// order in which workers delivered their gradients.
pub fn aggregate_gradients(per_sample: &[GradientSet]) -> Result<GradientSet> {
    let first = per_sample
        .first()
        .ok_or_else(|| Error::InvalidParameter("no gradients to aggregate".into()))?;
    for g in per_sample {
        first.check_congruent(g)?;
    }
    let flats: Vec<Vec<f64>> = per_sample.iter().map(|g| g.flatten()).collect();
    let mut order: Vec<usize> = (0..flats.len()).collect();
    order.sort_by(|&a, &b| {
        flats[a]
            .iter()
            .zip(&flats[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let sorted: Vec<&[f64]> = order.iter().map(|&k| flats[k].as_slice()).collect();
    let sum = pairwise_sum(&sorted);
    let n = per_sample.len() as f64;
    let mut out = first.zeros_like();
    let mut it = sum.into_iter();
    for t in &mut out.sets {
        for v in &mut t.values {
            *v = it.next().unwrap() / n;
        }
    }
    Ok(out)
}

fn pairwise_sum(items: &[&[f64]]) -> Vec<f64> {
    match items.len() {
        1 => items[0].to_vec(),
        n => {
            let (a, b) = items.split_at(n / 2);
            let (mut x, y) = (pairwise_sum(a), pairwise_sum(b));
            x.iter_mut().zip(y).for_each(|(u, v)| *u += v);
            x
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineSimilarity {
    /// `(set name, similarity)`; `None` when either side has zero norm.
    pub per_set: Vec<(String, Option<f64>)>,
    /// Minimum over defined sets.
    pub min: Option<f64>,
}

/// `⟨a, b⟩ / (‖a‖·‖b‖)` for each named parameter set.
pub fn gradient_cosine_similarity(a: &GradientSet, b: &GradientSet) -> Result<CosineSimilarity> {
    a.check_congruent(b)?;
    let per_set: Vec<(String, Option<f64>)> = a
        .sets
        .iter()
        .zip(&b.sets)
        .map(|(x, y)| {
            let dot: f64 = x.values.iter().zip(&y.values).map(|(p, q)| p * q).sum();
            let nx: f64 = x.values.iter().map(|p| p * p).sum();
            let ny: f64 = y.values.iter().map(|q| q * q).sum();
            // One square root of the product keeps cos(v, v) exactly 1.
            let cos = (nx > 0.0 && ny > 0.0).then(|| (dot / (nx * ny).sqrt()).clamp(-1.0, 1.0));
            (x.name.clone(), cos)
        })
        .collect();
    let min = per_set
        .iter()
        .filter_map(|(_, c)| *c)
        .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.min(c))));
    Ok(CosineSimilarity { per_set, min })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::ParamTensor;
    use proptest::prelude::*;

    fn scalar(v: f64) -> ParamSets {
        ParamSets {
            sets: vec![ParamTensor {
                name: "theta".into(),
                shape: vec![1],
                values: vec![v],
            }],
        }
    }

    fn two_sets(a: Vec<f64>, b: Vec<f64>) -> ParamSets {
        ParamSets {
            sets: vec![
                ParamTensor { name: "w".into(), shape: vec![a.len()], values: a },
                ParamTensor { name: "b".into(), shape: vec![b.len()], values: b },
            ],
        }
    }

    #[test]
    fn decay_only_step() {
        let mut p = two_sets(vec![1.0, -2.0, 3.5], vec![0.25]);
        let orig = p.clone();
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        adamw_step(&mut p, &orig.zeros_like(), &mut st, 1e-2).unwrap();
        for (a, b) in p.flatten().iter().zip(orig.flatten()) {
            assert_eq!(*a, b - 1e-2 * (0.0 + 0.1 * b));
            assert!((a - b * (1.0 - 1e-3)).abs() <= 1e-15 * b.abs());
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_is_sign_like() {
        let hyper = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for g in [3.0, -0.02, 1e3] {
            let mut p = scalar(0.5);
            let mut st = OptimizerState::new(&p, hyper);
            adamw_step(&mut p, &scalar(g), &mut st, 1e-3).unwrap();
            let delta = p.sets[0].values[0] - 0.5;
            assert!((delta + 1e-3 * g / (g.abs() + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_oracle() {
        let hyper = AdamWConfig::default();
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p, hyper);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = p.sets[0].values[0];
            adamw_step(&mut p, &scalar(g), &mut st, 1e-2).unwrap();
            let go = theta;
            m = 0.9 * m + 0.1 * go;
            v = 0.95 * v + 0.05 * go * go;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            theta -= 1e-2 * (mh / (vh.sqrt() + 1e-8) + 0.1 * theta);
            assert!((p.sets[0].values[0] - theta).abs() <= 1e-12);
        }
        assert_eq!(st.t, 100);
    }

    #[test]
    fn optimizer_rejects_bad_input() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        assert!(adamw_step(&mut p, &scalar(f64::NAN), &mut st, 1e-3).is_err());
        assert!(adamw_step(&mut p, &two_sets(vec![1.0], vec![1.0]), &mut st, 1e-3).is_err());
        assert!(adamw_step(&mut p, &scalar(1.0), &mut st, -1.0).is_err());
        assert_eq!(st.t, 0);
        adamw_step(&mut p, &scalar(1.0), &mut st, 0.0).unwrap();
        assert_eq!(p, scalar(1.0));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn schedule_anchors() {
        let s = LrSchedule::new(1.25e-4, PAPER_TERMINAL_LR, 0.1, 2560).unwrap();
        let w = s.warmup_batches();
        assert_eq!(w, 256);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(w).unwrap(), 1.25e-4);
        assert_eq!(s.lr_at(2559).unwrap(), PAPER_TERMINAL_LR);
        assert!((s.lr_at(w - 1).unwrap() - 1.25e-4 * 255.0 / 256.0).abs() < 1e-18);
        assert!(s.lr_at(2560).is_err());
        assert!(LrSchedule::new(1e-6, 1e-5, 0.1, 10).is_err());
        assert!(LrSchedule::new(1e-5, 1e-6, 1.0, 10).is_err());
        let flat = LrSchedule::new(1e-3, 1e-3, 0.0, 1).unwrap();
        assert_eq!(flat.lr_at(0).unwrap(), 1e-3);
    }

    #[test]
    fn aggregation_examples() {
        let g = two_sets(vec![1.0, 2.0], vec![-3.0]);
        let agg = aggregate_gradients(&[g.clone(), g.clone(), g.clone(), g.clone()]).unwrap();
        assert_eq!(agg, g);
        let mut neg = g.clone();
        neg.scale(-1.0);
        let agg = aggregate_gradients(&[g.clone(), neg]).unwrap();
        assert!(agg.flatten().iter().all(|&v| v == 0.0));
        assert!(aggregate_gradients(&[]).is_err());
        assert!(aggregate_gradients(&[g, scalar(1.0)]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let v = two_sets(vec![1.0, 2.0], vec![3.0]);
        let mut neg = v.clone();
        neg.scale(-1.0);
        assert_eq!(gradient_cosine_similarity(&v, &v).unwrap().min, Some(1.0));
        assert_eq!(gradient_cosine_similarity(&v, &neg).unwrap().min, Some(-1.0));
        let orth = two_sets(vec![2.0, -1.0], vec![0.0]);
        let c = gradient_cosine_similarity(&v, &orth).unwrap();
        assert_eq!(c.per_set[0].1, Some(0.0));
        assert_eq!(c.per_set[1].1, None);
        assert_eq!(c.min, Some(0.0));
    }

    proptest! {
        #[test]
        fn schedule_is_continuous_and_monotone(total in 11usize..3000, frac in 0.0f64..0.5) {
            let s = LrSchedule::new(1e-3, 1e-6, frac, total).unwrap();
            let w = s.warmup_batches();
            let mut prev = f64::INFINITY;
            for b in w..total {
                let lr = s.lr_at(b).unwrap();
                prop_assert!(lr <= prev);
                prev = lr;
            }
            if w > 0 {
                // The ramp, extended to batch w, meets the cosine segment at peak.
                let ramp_end = s.peak * w as f64 / w as f64;
                prop_assert!((ramp_end - s.lr_at(w).unwrap()).abs() <= 1e-12);
            }
            prop_assert_eq!(s.lr_at(total - 1).unwrap(), 1e-6);
        }

        #[test]
        fn aggregation_is_permutation_invariant(
            vals in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 4), 1..9),
            rot in 0usize..9,
        ) {
            let gs: Vec<ParamSets> = vals.iter().map(|v| two_sets(v[..3].to_vec(), v[3..].to_vec())).collect();
            let mut perm = gs.clone();
            let k = rot % perm.len();
            perm.rotate_left(k);
            perm.reverse();
            let a = aggregate_gradients(&gs).unwrap();
            let b = aggregate_gradients(&perm).unwrap();
            prop_assert_eq!(a.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn cosine_is_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            c in 0.01f64..100.0,
        ) {
            let x = two_sets(a[..3].to_vec(), a[3..].to_vec());
            let y = two_sets(b[..3].to_vec(), b[3..].to_vec());
            let mut ys = y.clone();
            ys.scale(c);
            let s1 = gradient_cosine_similarity(&x, &y).unwrap();
            let s2 = gradient_cosine_similarity(&x, &ys).unwrap();
            for ((_, p), (_, q)) in s1.per_set.iter().zip(&s2.per_set) {
                match (p, q) {
                    (Some(p), Some(q)) => prop_assert!((p - q).abs() < 1e-12),
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
        }

        #[test]
        fn first_step_independent_of_gradient_scale(g in 0.1f64..10.0, c in 0.5f64..100.0) {
            let hyper = AdamWConfig { weight_decay: 0.0, ..Default::default() };
            let run = |grad: f64| {
                let mut p = scalar(0.0);
                let mut st = OptimizerState::new(&p, hyper);
                adamw_step(&mut p, &scalar(grad), &mut st, 1e-3).unwrap();
                p.sets[0].values[0]
            };
            prop_assert!((run(g) - run(c * g)).abs() < 1e-3 * 1e-8 / g * 2.0);
        }
    }
}
