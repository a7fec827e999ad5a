//! Student-to-teacher parameter updates.
//!
//! Three rules over fragment-partitioned parameter sets: a plain exponential
//! moving average, a per-unit stochastic replacement ("segment" update), and
//! their combination — per unit, either keep the teacher's previous value or
//! EMA-blend it with the student's. Setting `sigma2 = 0` recovers the EMA
//! rule exactly; setting `m = 0` recovers the segment rule exactly.
//!
//! One uniform draw is consumed per unit per call, in fragment order, from a
//! dedicated stream so the pattern is reproducible independent of batch
//! order. A unit is preserved when its draw `P_i` is strictly below
//! `sigma2`; draws live in `[0, 1)`, so `sigma2 = 1` preserves every unit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagger::{Fragment, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// EMA smoothing coefficient.
    pub m: f64,
    /// Per-unit preservation threshold.
    pub sigma2: f64,
    /// Seed of the dedicated unit-draw stream.
    pub rng_seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            m: 0.995,
            sigma2: 0.8,
            rng_seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::config("m", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.sigma2) {
            return Err(Error::config("sigma2", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// The dedicated random stream for unit draws, separate from any data
/// shuffling. Single consumer.
#[derive(Debug, Clone)]
pub struct EnsembleRng(ChaCha8Rng);

impl EnsembleRng {
    pub fn new(seed: u64) -> Self {
        EnsembleRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Next uniform draw in `[0, 1)`.
    pub fn draw(&mut self) -> f64 {
        crate::corpus::unit_draw(&mut self.0)
    }
}

fn check_layout(teacher: &ParamSet, student: &ParamSet) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::Shape(
            "teacher and student parameter layouts differ".into(),
        ));
    }
    Ok(())
}

fn blend_fragment(t: &Fragment, s: &Fragment, m: f64) -> Fragment {
    Fragment {
        name: t.name.clone(),
        unit: t.unit.clone(),
        values: t
            .values
            .iter()
            .zip(&s.values)
            .map(|(&tv, &sv)| m * tv + (1.0 - m) * sv)
            .collect(),
    }
}

/// `θ ← m·θ_teacher + (1-m)·θ_student` for every parameter. Functional:
/// returns the new teacher, inputs untouched.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, m: f64) -> Result<ParamSet> {
    check_layout(teacher, student)?;
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config("m", "must be in [0, 1]"));
    }
    let fragments = teacher
        .fragments()
        .iter()
        .zip(student.fragments())
        .map(|(t, s)| blend_fragment(t, s, m))
        .collect();
    ParamSet::from_fragments(fragments)
}

/// Draws `P_i` per unit; units with `P_i < sigma2` keep the teacher's
/// parameters, the rest take the student's.
pub fn segment_update(
    teacher: &ParamSet,
    student: &ParamSet,
    sigma2: f64,
    rng: &mut EnsembleRng,
) -> Result<ParamSet> {
    fine_grained(teacher, student, 0.0, sigma2, rng)
}

/// Combined rule: per unit, keep the teacher when `P_i < sigma2`, otherwise
/// EMA-blend that unit with the student.
pub fn fine_grained_update(
    teacher: &ParamSet,
    student: &ParamSet,
    cfg: &EnsembleConfig,
    rng: &mut EnsembleRng,
) -> Result<ParamSet> {
    cfg.validate()?;
    fine_grained(teacher, student, cfg.m, cfg.sigma2, rng)
}

fn fine_grained(
    teacher: &ParamSet,
    student: &ParamSet,
    m: f64,
    sigma2: f64,
    rng: &mut EnsembleRng,
) -> Result<ParamSet> {
    check_layout(teacher, student)?;
    if !(0.0..=1.0).contains(&sigma2) {
        return Err(Error::config("sigma2", "must be in [0, 1]"));
    }
    // One draw per unit, consumed in fragment order.
    let mut preserved: Vec<(String, bool)> = Vec::new();
    for f in teacher.fragments() {
        if preserved.iter().all(|(u, _)| u != &f.unit) {
            preserved.push((f.unit.clone(), rng.draw() < sigma2));
        }
    }
    let keep = |unit: &str| preserved.iter().find(|(u, _)| u == unit).map(|(_, k)| *k).unwrap();
    let fragments = teacher
        .fragments()
        .iter()
        .zip(student.fragments())
        .map(|(t, s)| {
            if keep(&t.unit) {
                t.clone()
            } else {
                blend_fragment(t, s, m)
            }
        })
        .collect();
    ParamSet::from_fragments(fragments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagger::{init, TaggerConfig};

    fn pair(seed_t: u64, seed_s: u64) -> (ParamSet, ParamSet) {
        let cfg = |seed| TaggerConfig {
            token_vocab_size: 5,
            embed_dim: 2,
            hidden_dim: 3,
            tag_count: 3,
            init_seed: seed,
            init_scale: 1.0,
        };
        (init(&cfg(seed_t)).unwrap(), init(&cfg(seed_s)).unwrap())
    }

    #[test]
    fn ema_endpoints_and_arithmetic() {
        let (t, s) = pair(1, 2);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);

        let ones = t.from_flat_like(&vec![1.0; t.total_len()]).unwrap();
        let zeros = s.from_flat_like(&vec![0.0; s.total_len()]).unwrap();
        let out = ema_update(&ones, &zeros, 0.9).unwrap();
        for f in out.fragments() {
            for &v in &f.values {
                assert!((v - 0.9).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn segment_boundaries() {
        let (t, s) = pair(3, 4);
        let mut rng = EnsembleRng::new(5);
        let out = segment_update(&t, &s, 0.0, &mut rng).unwrap();
        assert_eq!(out, s, "sigma2 = 0 can never preserve a unit");
        let mut rng = EnsembleRng::new(5);
        let out = segment_update(&t, &s, 1.0, &mut rng).unwrap();
        assert_eq!(out, t, "sigma2 = 1 preserves every unit (draws are in [0,1))");
    }

    #[test]
    fn segment_follows_the_replayed_draw_sequence() {
        let (t, s) = pair(6, 7);
        let sigma2 = 0.6;
        let seed = 91;
        // Replay the stream to learn the per-unit draws.
        let mut probe = EnsembleRng::new(seed);
        let draws: Vec<f64> = (0..t.units().len()).map(|_| probe.draw()).collect();
        let mut rng = EnsembleRng::new(seed);
        let out = segment_update(&t, &s, sigma2, &mut rng).unwrap();
        let units = t.units().iter().map(|u| u.to_string()).collect::<Vec<_>>();
        for f in out.fragments() {
            let unit_idx = units.iter().position(|u| u == &f.unit).unwrap();
            let expected = if draws[unit_idx] < sigma2 {
                t.fragment(&f.name).unwrap()
            } else {
                s.fragment(&f.name).unwrap()
            };
            assert_eq!(f.values, expected.values, "unit {} draw {}", f.unit, draws[unit_idx]);
        }
    }

    #[test]
    fn fine_grained_degenerates_to_ema_and_segment() {
        let (t, s) = pair(8, 9);
        let seed = 1234;

        let cfg = EnsembleConfig { m: 0.95, sigma2: 0.0, rng_seed: seed };
        let mut rng = EnsembleRng::new(seed);
        let fg = fine_grained_update(&t, &s, &cfg, &mut rng).unwrap();
        assert_eq!(fg, ema_update(&t, &s, 0.95).unwrap(), "sigma2 = 0 is exactly EMA");

        let cfg = EnsembleConfig { m: 0.0, sigma2: 0.55, rng_seed: seed };
        let mut rng_a = EnsembleRng::new(seed);
        let fg = fine_grained_update(&t, &s, &cfg, &mut rng_a).unwrap();
        let mut rng_b = EnsembleRng::new(seed);
        let seg = segment_update(&t, &s, 0.55, &mut rng_b).unwrap();
        assert_eq!(fg, seg, "m = 0 is exactly the segment update");
    }

    #[test]
    fn fine_grained_unit_arithmetic() {
        let (t0, s0) = pair(10, 11);
        let ones = t0.from_flat_like(&vec![1.0; t0.total_len()]).unwrap();
        let zeros = s0.from_flat_like(&vec![0.0; s0.total_len()]).unwrap();
        let seed = 17;
        let mut probe = EnsembleRng::new(seed);
        let draws: Vec<f64> = (0..t0.units().len()).map(|_| probe.draw()).collect();
        let sigma2 = 0.5;
        let cfg = EnsembleConfig { m: 0.9, sigma2, rng_seed: seed };
        let mut rng = EnsembleRng::new(seed);
        let out = fine_grained_update(&ones, &zeros, &cfg, &mut rng).unwrap();
        let units: Vec<String> = ones.units().iter().map(|u| u.to_string()).collect();
        for f in out.fragments() {
            let idx = units.iter().position(|u| u == &f.unit).unwrap();
            let expected = if draws[idx] < sigma2 { 1.0 } else { 0.9 };
            for &v in &f.values {
                assert!((v - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn updates_are_convex_and_preserve_layout() {
        let (t, s) = pair(12, 13);
        let cfg = EnsembleConfig { m: 0.7, sigma2: 0.4, rng_seed: 3 };
        let mut rng = EnsembleRng::new(cfg.rng_seed);
        let out = fine_grained_update(&t, &s, &cfg, &mut rng).unwrap();
        assert!(out.same_layout(&t));
        for ((o, tv), sv) in out.to_flat().iter().zip(t.to_flat()).zip(s.to_flat()) {
            assert!(*o >= tv.min(sv) - 1e-15 && *o <= tv.max(sv) + 1e-15);
        }
    }

    #[test]
    fn determinism_for_fixed_seed() {
        let (t, s) = pair(14, 15);
        let cfg = EnsembleConfig { m: 0.99, sigma2: 0.75, rng_seed: 77 };
        let mut r1 = EnsembleRng::new(cfg.rng_seed);
        let mut r2 = EnsembleRng::new(cfg.rng_seed);
        let a = fine_grained_update(&t, &s, &cfg, &mut r1).unwrap();
        let b = fine_grained_update(&t, &s, &cfg, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layout_mismatch_is_shape_error() {
        let (t, _) = pair(16, 17);
        let other = init(&TaggerConfig {
            token_vocab_size: 5,
            embed_dim: 2,
            hidden_dim: 4, // different hidden width
            tag_count: 3,
            init_seed: 0,
            init_scale: 1.0,
        })
        .unwrap();
        assert!(matches!(ema_update(&t, &other, 0.5), Err(Error::Shape(_))));
        let mut rng = EnsembleRng::new(0);
        assert!(matches!(
            segment_update(&t, &other, 0.5, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn direct_copy_configuration() {
        // sigma2 = 0 and m = 0 together turn the teacher into a copy of the
        // student, which is the plain self-training update.
        let (t, s) = pair(18, 19);
        let cfg = EnsembleConfig { m: 0.0, sigma2: 0.0, rng_seed: 4 };
        let mut rng = EnsembleRng::new(cfg.rng_seed);
        let out = fine_grained_update(&t, &s, &cfg, &mut rng).unwrap();
        assert_eq!(out, s);
    }
}
