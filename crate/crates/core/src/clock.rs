//! Session time: microseconds since session start, virtual or wall-clock.

use std::fmt;
use std::ops::Add;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        SimTime((secs.max(0.0) * 1e6).round() as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_since(self, earlier: SimTime) -> Duration {
        Duration::from_micros(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: Duration) -> SimTime {
        SimTime(self.0 + rhs.as_micros() as u64)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Virtual,
    Real,
}

/// Virtual time only moves when told to; real time follows the wall clock.
#[derive(Debug, Clone)]
pub enum Clock {
    Virtual(SimTime),
    Real(Instant),
}

impl Clock {
    pub fn new(mode: ClockMode) -> Self {
        match mode {
            ClockMode::Virtual => Clock::Virtual(SimTime::ZERO),
            ClockMode::Real => Clock::Real(Instant::now()),
        }
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            Clock::Virtual(_) => ClockMode::Virtual,
            Clock::Real(_) => ClockMode::Real,
        }
    }

    pub fn now(&self) -> SimTime {
        match self {
            Clock::Virtual(t) => *t,
            Clock::Real(origin) => SimTime::from_micros(origin.elapsed().as_micros() as u64),
        }
    }

    /// Moves virtual time forward to `t`. No effect on a real clock or on earlier `t`.
    pub fn advance_to(&mut self, t: SimTime) {
        if let Clock::Virtual(now) = self {
            if t > *now {
                *now = t;
            }
        }
    }
}
