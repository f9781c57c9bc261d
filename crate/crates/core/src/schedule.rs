//! Clock of the three-level recurrent hierarchy.
//!
//! Level `l` with period `p` is clocked at every `t` (1-based) with
//! `(t - 1) % p == 0`. During a rollout a level stops ticking after its
//! last prediction, `C + p * N`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickSchedule {
    pub periods: [usize; LEVELS],
    /// Number of seed frames `C`.
    pub seed_frames: usize,
    /// Prediction iterations per level `N`.
    pub iterations: usize,
}

impl TickSchedule {
    pub fn new(periods: [usize; LEVELS], seed_frames: usize, iterations: usize) -> Result<Self> {
        if periods[0] != 1 {
            return Err(Error::Config(format!("lowest level period must be 1, got {}", periods[0])));
        }
        if !(periods[0] <= periods[1] && periods[1] <= periods[2]) {
            return Err(Error::Config(format!("periods must be non-decreasing, got {periods:?}")));
        }
        if seed_frames == 0 || iterations == 0 {
            return Err(Error::Config("seed frames and iterations must be positive".into()));
        }
        Ok(TickSchedule { periods, seed_frames, iterations })
    }

    /// 17 seed frames, periods (1, 4, 8), five iterations per level.
    pub fn reference() -> Self {
        TickSchedule { periods: [1, 4, 8], seed_frames: 17, iterations: 5 }
    }

    /// Pure clock law, ignoring rollout bounds.
    pub fn clocked(&self, level: usize, t: usize) -> bool {
        t >= 1 && (t - 1) % self.periods[level] == 0
    }

    /// Last timestep at which `level` runs during a rollout.
    pub fn horizon(&self, level: usize) -> usize {
        self.seed_frames + self.periods[level] * self.iterations
    }

    /// Final timestep of a rollout; also the minimum sequence length.
    pub fn total_steps(&self) -> usize {
        (0..LEVELS).map(|l| self.horizon(l)).max().unwrap_or(0)
    }

    pub fn active(&self, level: usize, t: usize) -> bool {
        self.clocked(level, t) && t <= self.horizon(level)
    }

    pub fn is_seed(&self, t: usize) -> bool {
        t <= self.seed_frames
    }

    pub fn ticks(&self, level: usize) -> Vec<usize> {
        (1..=self.total_steps()).filter(|&t| self.active(level, t)).collect()
    }

    pub fn tick_count(&self, level: usize) -> usize {
        self.ticks(level).len()
    }

    /// Timesteps at which the head of `level` emits: the level's
    /// prediction-phase ticks, `C + p * k` for the upper levels and
    /// `C + k` for frames.
    pub fn emissions(&self, level: usize) -> Vec<usize> {
        match level {
            0 => (1..=self.iterations).map(|k| self.seed_frames + k).collect(),
            _ => (1..=self.total_steps())
                .filter(|&t| !self.is_seed(t) && self.active(level, t))
                .collect(),
        }
    }

    /// Errors when a sequence cannot feed every scheduled target.
    pub fn check_sequence_length(&self, len: usize) -> Result<()> {
        let need = self.total_steps();
        if len < need {
            return Err(Error::Config(format!(
                "sequence_length {len} is too short: the schedule needs at least {need} frames"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_ticks() {
        let s = TickSchedule::reference();
        assert_eq!(s.ticks(0), (1..=22).collect::<Vec<_>>());
        assert_eq!(s.ticks(1), vec![1, 5, 9, 13, 17, 21, 25, 29, 33, 37]);
        assert_eq!(s.ticks(2), vec![1, 9, 17, 25, 33, 41, 49, 57]);
        assert_eq!(s.emissions(0), vec![18, 19, 20, 21, 22]);
        assert_eq!(s.emissions(1), vec![21, 25, 29, 33, 37]);
        assert_eq!(s.emissions(2), vec![25, 33, 41, 49, 57]);
        assert_eq!(s.total_steps(), 57);
    }

    #[test]
    fn three_seed_ticks_on_top_level() {
        let s = TickSchedule::reference();
        assert_eq!(s.ticks(2).iter().filter(|&&t| s.is_seed(t)).count(), 3);
    }

    #[test]
    fn period_one_is_always_clocked() {
        let s = TickSchedule::reference();
        assert!((1..100).all(|t| s.clocked(0, t)));
    }

    #[test]
    fn first_timestep_clocks_every_level() {
        let s = TickSchedule::new([1, 3, 7], 1, 1).unwrap();
        assert!((0..LEVELS).all(|l| s.clocked(l, 1)));
    }

    #[test]
    fn single_iteration_emissions() {
        let s = TickSchedule::new([1, 4, 8], 17, 1).unwrap();
        assert_eq!(s.emissions(0), vec![18]);
        assert_eq!(s.emissions(1), vec![21]);
        assert_eq!(s.emissions(2), vec![25]);
    }

    #[test]
    fn length_check_names_minimum() {
        let err = TickSchedule::reference().check_sequence_length(40).unwrap_err();
        assert!(err.to_string().contains("57"), "{err}");
        TickSchedule::reference().check_sequence_length(57).unwrap();
    }

    #[test]
    fn rejects_bad_periods() {
        assert!(TickSchedule::new([2, 4, 8], 17, 5).is_err());
        assert!(TickSchedule::new([1, 8, 4], 17, 5).is_err());
    }
}
