//! Per-pixel burn, soil and vegetation indices.
//!
//! All formulas take unit reflectance. Zero denominators and non-finite
//! results are reported as [`IndexError::Undefined`], never clamped, so that
//! temporal statistics can skip them.

mod unmix;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Band, Sensor};

pub use unmix::{unmix_char_fraction, EndmemberSet, Fractions, UnmixError, MAX_CONDITION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IndexId {
    Sr,
    Ndvi,
    Ci,
    Bai,
    Bsoi,
    Nbr,
    Nbr2,
    Mirbi,
    Bsi,
    BasmaChar,
    Msavi,
}

impl IndexId {
    pub const ALL: [IndexId; 11] = [
        IndexId::Sr,
        IndexId::Ndvi,
        IndexId::Ci,
        IndexId::Bai,
        IndexId::Bsoi,
        IndexId::Nbr,
        IndexId::Nbr2,
        IndexId::Mirbi,
        IndexId::Bsi,
        IndexId::BasmaChar,
        IndexId::Msavi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IndexId::Sr => "SR",
            IndexId::Ndvi => "NDVI",
            IndexId::Ci => "CI",
            IndexId::Bai => "BAI",
            IndexId::Bsoi => "BSoI",
            IndexId::Nbr => "NBR",
            IndexId::Nbr2 => "NBR2",
            IndexId::Mirbi => "MIRBI",
            IndexId::Bsi => "BSI",
            IndexId::BasmaChar => "BASMA",
            IndexId::Msavi => "MSAVI",
        }
    }

    pub fn required_bands(self) -> &'static [Band] {
        use Band::*;
        match self {
            IndexId::Sr | IndexId::Ndvi | IndexId::Bai | IndexId::Msavi => &[Red, Nir],
            IndexId::Ci => &[Blue, Green, Red],
            IndexId::Bsoi => &[Blue, Green, Red, Nir],
            IndexId::Nbr => &[Nir, Swir2],
            IndexId::Nbr2 => &[Swir1, Swir2],
            IndexId::Mirbi => &[Swir1, Swir2],
            IndexId::Bsi => &[Green, Red, Nir, Swir2],
            IndexId::BasmaChar => &Band::ALL,
        }
    }

    pub fn computable_from(self, sensor: Sensor) -> bool {
        self.required_bands()
            .iter()
            .all(|&b| sensor.band_slot(b).is_some())
    }
}

impl fmt::Display for IndexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IndexId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        IndexId::ALL
            .iter()
            .copied()
            .find(|i| {
                i.name().eq_ignore_ascii_case(t)
                    || (*i == IndexId::BasmaChar && t.eq_ignore_ascii_case("BASMA_CHAR"))
            })
            .ok_or_else(|| format!("unknown index {s:?}"))
    }
}

/// A feature source: a raw band or a derived index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Band(Band),
    Index(IndexId),
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Band(b) => b.name(),
            Source::Index(i) => i.name(),
        }
    }

    pub fn available_on(self, sensor: Sensor) -> bool {
        match self {
            Source::Band(b) => sensor.band_slot(b).is_some(),
            Source::Index(i) => i.computable_from(sensor),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(b) = s.parse::<Band>() {
            return Ok(Source::Band(b));
        }
        s.parse::<IndexId>().map(Source::Index)
    }
}

/// Reflectance of whichever bands are present at one pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BandValues([Option<f64>; 9]);

impl BandValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, band: Band, value: f64) -> Self {
        self.set(band, value);
        self
    }

    pub fn set(&mut self, band: Band, value: f64) {
        self.0[band.ordinal()] = Some(value);
    }

    pub fn get(&self, band: Band) -> Option<f64> {
        self.0[band.ordinal()]
    }

    /// Full nine-band spectrum, if every band is present.
    pub fn spectrum(&self) -> Option<[f64; 9]> {
        let mut out = [0.0; 9];
        for (slot, v) in out.iter_mut().zip(self.0.iter()) {
            *slot = (*v)?;
        }
        Some(out)
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum IndexError {
    #[error("{index} requires band {band}, which is not present")]
    MissingBand { index: IndexId, band: Band },
    #[error("band {0} is not present")]
    BandAbsent(Band),
    #[error("{0} is undefined for these band values")]
    Undefined(IndexId),
    #[error("BASMA requires an endmember set")]
    NoEndmembers,
    #[error(transparent)]
    Unmix(#[from] UnmixError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexParams {
    /// Exponent `m` on the green, red and NIR terms of BSI.
    pub bsi_exponent: f64,
    pub endmembers: Option<EndmemberSet>,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            bsi_exponent: 1.0,
            endmembers: None,
        }
    }
}

/// Value of a band or index at one pixel.
pub fn evaluate_source(
    source: Source,
    bands: &BandValues,
    params: &IndexParams,
) -> Result<f64, IndexError> {
    match source {
        Source::Band(b) => bands.get(b).ok_or(IndexError::BandAbsent(b)),
        Source::Index(id) => compute_index_with(id, bands, params),
    }
}

/// Evaluates `id` with default parameters (BSI exponent 1, no endmembers).
pub fn compute_index(id: IndexId, bands: &BandValues) -> Result<f64, IndexError> {
    compute_index_with(id, bands, &IndexParams::default())
}

fn ratio(id: IndexId, num: f64, den: f64) -> Result<f64, IndexError> {
    if den == 0.0 {
        return Err(IndexError::Undefined(id));
    }
    finite(id, num / den)
}

fn finite(id: IndexId, v: f64) -> Result<f64, IndexError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(IndexError::Undefined(id))
    }
}

pub fn compute_index_with(
    id: IndexId,
    bands: &BandValues,
    params: &IndexParams,
) -> Result<f64, IndexError> {
    let need = |band: Band| bands.get(band).ok_or(IndexError::MissingBand { index: id, band });
    match id {
        IndexId::Sr => {
            let (r, n) = (need(Band::Red)?, need(Band::Nir)?);
            ratio(id, n, r)
        }
        IndexId::Ndvi => {
            let (r, n) = (need(Band::Red)?, need(Band::Nir)?);
            ratio(id, n - r, n + r)
        }
        IndexId::Ci => {
            let (b, g, r) = (need(Band::Blue)?, need(Band::Green)?, need(Band::Red)?);
            let spread = (b - g).abs().max((b - r).abs()).max((r - g).abs());
            finite(id, (b + g + r) + 15.0 * spread)
        }
        IndexId::Bai => {
            let (r, n) = (need(Band::Red)?, need(Band::Nir)?);
            let d = (0.06 - n).powi(2) + (0.1 - r).powi(2);
            ratio(id, 1.0, d)
        }
        IndexId::Bsoi => {
            let (b, g, r, n) = (
                need(Band::Blue)?,
                need(Band::Green)?,
                need(Band::Red)?,
                need(Band::Nir)?,
            );
            Ok(ratio(id, (n + g) - (r + b), n + g + r + b)? * 100.0 + 100.0)
        }
        IndexId::Nbr => {
            let (n, s2) = (need(Band::Nir)?, need(Band::Swir2)?);
            ratio(id, n - s2, n + s2)
        }
        IndexId::Nbr2 => {
            let (s1, s2) = (need(Band::Swir1)?, need(Band::Swir2)?);
            ratio(id, s1 - s2, s1 + s2)
        }
        IndexId::Mirbi => {
            let (s1, s2) = (need(Band::Swir1)?, need(Band::Swir2)?);
            finite(id, 10.0 * s2 - 9.8 * s1 + 2.0)
        }
        IndexId::Bsi => {
            let (g, r, n, s2) = (
                need(Band::Green)?,
                need(Band::Red)?,
                need(Band::Nir)?,
                need(Band::Swir2)?,
            );
            let m = params.bsi_exponent;
            let den = (s2 + r) * (g.powf(m) + r.powf(m) + n.powf(m));
            ratio(id, s2 - r, den)
        }
        IndexId::BasmaChar => {
            let em = params.endmembers.as_ref().ok_or(IndexError::NoEndmembers)?;
            let mut spectrum = [0.0; 9];
            for (slot, band) in spectrum.iter_mut().zip(Band::ALL) {
                *slot = need(band)?;
            }
            Ok(unmix_char_fraction(&spectrum, em)?.char)
        }
        IndexId::Msavi => {
            let (r, n) = (need(Band::Red)?, need(Band::Nir)?);
            let a = 2.0 * n + 1.0;
            let disc = a * a - 8.0 * (n - r);
            if disc < 0.0 {
                return Err(IndexError::Undefined(id));
            }
            finite(id, (a - disc.sqrt()) / 2.0)
        }
    }
}
