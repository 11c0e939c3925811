//! Closed-form hit ratios for the prefetching families and a check of
//! those numbers against simulated runs.

use std::fmt;

use num_rational::Ratio;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::strategies::Strategy;

pub type Q = Ratio<u64>;

/// Inputs of the hit-ratio model. `V`, `V_i` and `S` are set sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnalyticParams {
    /// Segments one peer can hold prefetched.
    pub s: u64,
    /// Distinct segments the whole session can hold prefetched.
    pub big_s: u64,
    /// Segments reachable by a seek.
    pub v: u64,
    /// Size of the peer's own candidate set under mining.
    pub v_i: u64,
    /// Chance that a seek target lies in the candidate set.
    pub p_i: Q,
}

impl AnalyticParams {
    pub fn new(s: u64, big_s: u64, v: u64, v_i: u64, p_i: Q) -> Result<Self> {
        let p = AnalyticParams { s, big_s, v, v_i, p_i };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.v == 0 {
            return Err(Error::Domain("V must be positive"));
        }
        if self.p_i > Q::from_integer(1) {
            return Err(Error::Domain("P_i must lie in [0, 1]"));
        }
        if self.s > self.big_s {
            return Err(Error::Domain("s must not exceed S"));
        }
        if self.v_i > self.v {
            return Err(Error::Domain("V_i must not exceed V"));
        }
        Ok(())
    }
}

/// Turns a decimal probability into an exact fraction over 10^9.
pub fn probability(p: f64) -> Result<Q> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain("P_i must lie in [0, 1]"));
    }
    const DEN: u64 = 1_000_000_000;
    Ok(Q::new((p * DEN as f64).round() as u64, DEN))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HitRatios {
    pub hr_r: Q,
    pub hr_r_plus_g: Q,
    /// Set when a raw value exceeded one and was cut back.
    pub clamped: bool,
}

impl HitRatios {
    fn clamped(hr_r: Q, hr_r_plus_g: Q) -> Self {
        let one = Q::from_integer(1);
        HitRatios { hr_r: hr_r.min(one), hr_r_plus_g: hr_r_plus_g.min(one), clamped: hr_r > one || hr_r_plus_g > one }
    }

    pub fn hr_g(&self) -> Q {
        self.hr_r_plus_g - self.hr_r.min(self.hr_r_plus_g)
    }
}

pub fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

pub fn hr_mining(p: &AnalyticParams) -> Result<HitRatios> {
    p.validate()?;
    if p.v_i == 0 {
        return Err(Error::Domain("V_i must be positive"));
    }
    let d = Q::from_integer(p.v_i);
    Ok(HitRatios::clamped(p.p_i * p.s / d, p.p_i * p.big_s / d))
}

/// No prefetching: nothing is ever local, and the combined ratio has no
/// stated value; it is reported as zero.
pub fn hr_none() -> HitRatios {
    HitRatios { hr_r: Q::from_integer(0), hr_r_plus_g: Q::from_integer(0), clamped: false }
}

pub fn hr_random(p: &AnalyticParams) -> Result<HitRatios> {
    p.validate()?;
    let d = Q::from_integer(p.v);
    Ok(HitRatios::clamped(Q::from_integer(p.s) / d, Q::from_integer(p.big_s) / d))
}

pub fn hr_popularity(p: &AnalyticParams) -> Result<HitRatios> {
    p.validate()?;
    let d = Q::from_integer(p.v);
    Ok(HitRatios::clamped(p.p_i * p.s / d, p.p_i * p.big_s / d))
}

/// Which closed form applies to a strategy; cooperative has none.
pub fn model_for(strategy: Strategy, p: &AnalyticParams) -> Option<Result<HitRatios>> {
    match strategy {
        Strategy::None => Some(Ok(hr_none())),
        Strategy::Random => Some(hr_random(p)),
        Strategy::Popularity => Some(hr_popularity(p)),
        Strategy::Mining => Some(hr_mining(p)),
        Strategy::Cooperative => None,
    }
}

/// Plain-text table of every formula for `p`.
pub fn formula_table(p: &AnalyticParams) -> Result<String> {
    p.validate()?;
    let mut out = format!(
        "s={} S={} V={} V_i={} P_i={:.6}\nstrategy     hr_r      hr_r+g    hr_g      clamped\n",
        p.s,
        p.big_s,
        p.v,
        p.v_i,
        to_f64(p.p_i)
    );
    for s in [Strategy::None, Strategy::Random, Strategy::Popularity, Strategy::Mining] {
        let line = match model_for(s, p).expect("closed form exists") {
            Ok(h) => format!(
                "{:<12} {:<9.6} {:<9.6} {:<9.6} {}\n",
                s.name(),
                to_f64(h.hr_r),
                to_f64(h.hr_r_plus_g),
                to_f64(h.hr_g()),
                if h.clamped { "yes" } else { "no" }
            ),
            Err(e) => format!("{:<12} {e}\n", s.name()),
        };
        out.push_str(&line);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationVerdict {
    pub strategy: Strategy,
    pub analytic_hr_r: f64,
    pub simulated_hr_r: f64,
    pub tolerance: f64,
    pub seeks: u64,
    pub pass: bool,
}

impl ValidationVerdict {
    pub fn diff(&self) -> f64 {
        (self.analytic_hr_r - self.simulated_hr_r).abs()
    }
}

impl fmt::Display for ValidationVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} hr_r analytic={:.4} simulated={:.4} |diff|={:.4} tol={:.4} seeks={} {}",
            self.strategy.name(),
            self.analytic_hr_r,
            self.simulated_hr_r,
            self.diff(),
            self.tolerance,
            self.seeks,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares the closed-form `HR_r` with a run of `config` that produced
/// `report`. Only `HR_r` is judged: the session-wide `S` is not pinned
/// down by a run. A strategy without a closed form, or a report from a
/// different run, is refused.
pub fn validate_against_sim(
    params: &AnalyticParams,
    config: &RunConfig,
    report: &MetricsReport,
    tolerance: f64,
) -> Result<ValidationVerdict> {
    if report.strategy != config.strategy {
        return Err(Error::Mismatch(format!(
            "report is for `{}` but the run was configured for `{}`",
            report.strategy, config.strategy
        )));
    }
    if report.seed != config.seed {
        return Err(Error::Mismatch(format!("report seed {} differs from run seed {}", report.seed, config.seed)));
    }
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::invalid("tolerance", "must be non-negative"));
    }
    let Some(model) = model_for(config.strategy, params) else {
        return Err(Error::Mismatch(format!("no closed form for `{}`", config.strategy)));
    };
    let analytic = to_f64(model?.hr_r);
    let Some(simulated) = report.hr_r else {
        return Err(Error::Mismatch("the run recorded no seeks".into()));
    };
    let diff = (analytic - simulated).abs();
    Ok(ValidationVerdict {
        strategy: config.strategy,
        analytic_hr_r: analytic,
        simulated_hr_r: simulated,
        tolerance,
        seeks: report.seeks,
        pass: diff <= tolerance,
    })
}
