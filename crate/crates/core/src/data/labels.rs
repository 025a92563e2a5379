use core::fmt;

use crate::error::{bail, Result};
use crate::model::NUM_GROUPS;

pub const MAX_CUMULATIVE: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Risk {
    Low,
    Moderate,
    High,
}

impl Risk {
    pub const ALL: [Risk; 3] = [Risk::Low, Risk::Moderate, Risk::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Risk::Low => "Low",
            Risk::Moderate => "Moderate",
            Risk::High => "High",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Risk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sum of eight segment scores, each in `0..=3`.
pub fn granular_to_cumulative(granular: &[i64]) -> Result<u32> {
    if granular.len() != NUM_GROUPS {
        bail!(
            Data,
            "expected {} segment scores, got {}",
            NUM_GROUPS,
            granular.len()
        );
    }
    let mut total = 0;
    for (i, &g) in granular.iter().enumerate() {
        if !(0..=3).contains(&g) {
            bail!(Data, "segment {} score {} outside 0..=3", i, g);
        }
        total += g as u32;
    }
    Ok(total)
}

/// Low for 0-1, Moderate for 2-5, High for 6 and above.
pub fn score_to_risk(cumulative: i64) -> Result<Risk> {
    match cumulative {
        0..=1 => Ok(Risk::Low),
        2..=5 => Ok(Risk::Moderate),
        6..=24 => Ok(Risk::High),
        _ => bail!(Data, "cumulative score {} outside 0..=24", cumulative),
    }
}

/// 0 for no calcification, then bands `(0, 1/3]`, `(1/3, 2/3]`, `(2/3, 1]`.
pub fn segment_score_from_extent(extent: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&extent) {
        bail!(Data, "calcification extent {} outside [0, 1]", extent);
    }
    Ok(if extent == 0.0 {
        0
    } else if extent <= 1.0 / 3.0 {
        1
    } else if extent <= 2.0 / 3.0 {
        2
    } else {
        3
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AacLabel {
    /// L1a, L2a, L3a, L4a, L1p, L2p, L3p, L4p.
    pub granular: [u8; NUM_GROUPS],
    pub cumulative: u8,
    pub risk: Risk,
}

impl AacLabel {
    pub fn from_granular(granular: [u8; NUM_GROUPS]) -> Result<Self> {
        let wide = granular.map(i64::from);
        let cumulative = granular_to_cumulative(&wide)?;
        Ok(Self {
            granular,
            cumulative: cumulative as u8,
            risk: score_to_risk(cumulative.into())?,
        })
    }

    /// Checks that stored cumulative and risk agree with the segment scores.
    pub fn validate(&self) -> Result<()> {
        let expect = Self::from_granular(self.granular)?;
        if expect.cumulative != self.cumulative {
            bail!(
                Data,
                "cumulative {} != sum of segment scores {}",
                self.cumulative,
                expect.cumulative
            );
        }
        if expect.risk != self.risk {
            bail!(
                Data,
                "risk {} does not match cumulative {} ({})",
                self.risk,
                self.cumulative,
                expect.risk
            );
        }
        Ok(())
    }

    /// Cumulative score scaled to `[0, 1]`.
    pub fn regression_target(&self) -> f64 {
        f64::from(self.cumulative) / f64::from(MAX_CUMULATIVE)
    }
}
