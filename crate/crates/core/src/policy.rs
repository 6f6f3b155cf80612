//! Retry, timeout and fan-out tolerance decisions.

use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::template::StepDef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(default)]
    pub max_retries_on_transient: u32,
    #[serde(default)]
    pub timeout_is_transient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Transient,
    Fatal,
    Timeout,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Transient => "transient",
            FailureKind::Fatal => "fatal",
            FailureKind::Timeout => "timeout",
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An exact rational in `(0, 1]`.
///
/// Written in documents as a decimal (`0.5`) or a fraction (`"1/3"`). Kept
/// exact so `ceil(ratio * n)` never drifts from float rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    numer: u64,
    denom: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid ratio `{0}`: expected a decimal or fraction in (0, 1]")]
pub struct RatioError(pub String);

impl Ratio {
    pub fn new(numer: u64, denom: u64) -> Result<Self, RatioError> {
        if denom == 0 || numer == 0 || numer > denom {
            return Err(RatioError(format!("{numer}/{denom}")));
        }
        let g = gcd(numer, denom);
        Ok(Ratio {
            numer: numer / g,
            denom: denom / g,
        })
    }

    pub fn numer(self) -> u64 {
        self.numer
    }

    pub fn denom(self) -> u64 {
        self.denom
    }

    /// `ceil(self * n)`.
    pub fn ceil_mul(self, n: u64) -> u64 {
        let p = self.numer as u128 * n as u128;
        p.div_ceil(self.denom as u128) as u64
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl FromStr for Ratio {
    type Err = RatioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RatioError(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Ratio::new(n, d).map_err(|_| bad());
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if (int.is_empty() && frac.is_empty())
            || !int.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
            || frac.len() > 18
        {
            return Err(bad());
        }
        let denom = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let numer = int
            .checked_mul(denom)
            .and_then(|v| v.checked_add(frac_v))
            .ok_or_else(bad)?;
        Ratio::new(numer, denom).map_err(|_| bad())
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Prefer the decimal form whenever the denominator is a power of ten.
        let mut d = self.denom;
        let mut places = 0u32;
        while d.is_multiple_of(10) {
            d /= 10;
            places += 1;
        }
        if d == 1 {
            if places == 0 {
                return write!(f, "{}", self.numer);
            }
            let scale = 10u64.pow(places);
            let frac = format!("{:0width$}", self.numer % scale, width = places as usize);
            return write!(f, "{}.{}", self.numer / scale, frac);
        }
        // 1/2, 1/4, 1/5 … are decimals too once the denominator is scaled up.
        for p in 1..=18u32 {
            let scale = 10u64.pow(p);
            if scale % self.denom == 0 {
                let n = self.numer * (scale / self.denom);
                let frac = format!("{:0width$}", n % scale, width = p as usize);
                return write!(f, "{}.{}", n / scale, frac);
            }
        }
        write!(f, "{}/{}", self.numer, self.denom)
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        // f64 Display is the shortest round-tripping decimal, so `0.1` stays 1/10.
        let text = match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => match n.as_f64() {
                Some(f) => format!("{f}"),
                None => n.to_string(),
            },
            other => return Err(serde::de::Error::custom(format!("invalid ratio {other}"))),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Success threshold for a sliced group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupTolerance {
    /// Every instance must succeed.
    All,
    Ratio(Ratio),
    Count(u64),
}

impl GroupTolerance {
    pub fn for_step(step: &StepDef) -> Self {
        match (step.continue_on_success_ratio, step.continue_on_num_success) {
            (Some(r), _) => GroupTolerance::Ratio(r),
            (None, Some(n)) => GroupTolerance::Count(n),
            (None, None) => GroupTolerance::All,
        }
    }

    /// Number of successful instances needed out of `total`.
    pub fn required(self, total: u64) -> u64 {
        match self {
            GroupTolerance::All => total,
            GroupTolerance::Ratio(r) => r.ceil_mul(total),
            GroupTolerance::Count(n) => n,
        }
    }

    pub fn group_succeeds(self, total: u64, succeeded: u64) -> bool {
        succeeded >= self.required(total)
    }
}

/// What the scheduler observed for one attempt or one finished group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttemptResult {
    /// `attempt` counts from 1.
    Attempt {
        attempt: u32,
        outcome: Result<(), FailureKind>,
    },
    Group { total: u64, succeeded: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultDecision {
    Retry,
    Fail,
    Succeed,
    SucceedGroup,
    FailGroup,
}

/// Decides what happens after an attempt (or a whole slice group) finishes.
pub fn apply_fault_policy(step: &StepDef, result: AttemptResult) -> FaultDecision {
    match result {
        AttemptResult::Attempt { attempt, outcome } => {
            decide_attempt(&step.retry, attempt, outcome)
        }
        AttemptResult::Group { total, succeeded } => {
            if GroupTolerance::for_step(step).group_succeeds(total, succeeded) {
                FaultDecision::SucceedGroup
            } else {
                FaultDecision::FailGroup
            }
        }
    }
}

pub fn decide_attempt(
    policy: &RetryPolicy,
    attempt: u32,
    outcome: Result<(), FailureKind>,
) -> FaultDecision {
    let transient = match outcome {
        Ok(()) => return FaultDecision::Succeed,
        Err(FailureKind::Fatal) => false,
        Err(FailureKind::Transient) => true,
        Err(FailureKind::Timeout) => policy.timeout_is_transient,
    };
    if transient && attempt <= policy.max_retries_on_transient {
        FaultDecision::Retry
    } else {
        FaultDecision::Fail
    }
}
