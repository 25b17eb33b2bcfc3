//! Burned/unburned separability and its decay with time since burning.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indices::{evaluate_source, IndexParams, Source};
use crate::scene::{BandObservation, Plot, SceneCube};

/// Buckets with fewer samples than this on either side report no M value.
pub const MIN_BUCKET: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum SeparabilityError {
    #[error("both groups have zero spread but different means (infinite separability)")]
    Infinite,
    #[error("sample standard deviation needs at least two values, got {0}")]
    TooFewSamples(usize),
    #[error("source {name} cannot be computed from sensor {sensor} observations")]
    Unavailable { name: String, sensor: String },
    #[error("{0} group is empty")]
    EmptyGroup(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
}

impl SampleStats {
    pub fn from_values(values: &[f64]) -> Result<Self, SeparabilityError> {
        let n = values.len();
        if n < 2 {
            return Err(SeparabilityError::TooFewSamples(n));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        Ok(SampleStats {
            n,
            mean,
            sd: (ss / (n - 1) as f64).sqrt(),
        })
    }
}

/// `|mean_b - mean_u| / (sd_b + sd_u)`.
pub fn m_statistic(burned: &SampleStats, unburned: &SampleStats) -> Result<f64, SeparabilityError> {
    let diff = (burned.mean - unburned.mean).abs();
    let spread = burned.sd + unburned.sd;
    if spread == 0.0 {
        return if diff == 0.0 {
            Ok(0.0)
        } else {
            Err(SeparabilityError::Infinite)
        };
    }
    Ok(diff / spread)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeparabilityClass {
    Poor,
    /// M > 1.
    Some,
    /// M >= 2.
    Excellent,
}

pub fn classify_m(m: f64) -> SeparabilityClass {
    if m >= 2.0 {
        SeparabilityClass::Excellent
    } else if m > 1.0 {
        SeparabilityClass::Some
    } else {
        SeparabilityClass::Poor
    }
}

/// Mean of `source` over the plot's valid pixels, or `None` when fewer than
/// half the plot's pixels are valid or no pixel yields a defined value.
pub fn plot_source_mean(
    obs: &BandObservation,
    plot: &Plot,
    source: Source,
    params: &IndexParams,
) -> Option<f64> {
    if !plot.observed_in(obs) {
        return None;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for &cell in &plot.pixels {
        if let Some(bands) = obs.band_values(cell) {
            if let Ok(v) = evaluate_source(source, &bands, params) {
                sum += v;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// A plot together with its known burn (or till) date.
#[derive(Clone, Copy, Debug)]
pub struct Event<'a> {
    pub plot: &'a Plot,
    pub date: NaiveDate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityCurve {
    pub source: Source,
    pub offsets: Vec<i64>,
    pub m_values: Vec<Option<f64>>,
    pub n_burn: Vec<usize>,
    pub n_unburn: Vec<usize>,
}

impl SeparabilityCurve {
    pub fn m_at(&self, offset: i64) -> Option<f64> {
        let i = self.offsets.iter().position(|&o| o == offset)?;
        self.m_values[i]
    }
}

fn check_available(source: Source, cube: &SceneCube) -> Result<(), SeparabilityError> {
    if source.available_on(cube.sensor()) {
        Ok(())
    } else {
        Err(SeparabilityError::Unavailable {
            name: source.name().to_string(),
            sensor: cube.sensor().to_string(),
        })
    }
}

fn days_between(later: NaiveDate, earlier: NaiveDate) -> i64 {
    later.signed_duration_since(earlier).num_days()
}

/// M per whole-day offset `0..=max_offset` after each event, comparing
/// post-event plot means at that offset with the same events' nearest
/// pre-event plot means. Events without a usable pre-event observation are
/// skipped.
pub fn separability_curve(
    events: &[Event<'_>],
    cube: &SceneCube,
    source: Source,
    max_offset: i64,
    params: &IndexParams,
) -> Result<SeparabilityCurve, SeparabilityError> {
    check_available(source, cube)?;
    let mut post: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    let mut pre: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for ev in events {
        let obs = cube.observations();
        let split = obs.partition_point(|o| o.date() < ev.date);
        let Some(pre_value) = obs[..split]
            .iter()
            .rev()
            .find_map(|o| plot_source_mean(o, ev.plot, source, params))
        else {
            log::debug!("event on plot {} has no usable pre-event observation", ev.plot.id);
            continue;
        };
        for o in &obs[split..] {
            let d = days_between(o.date(), ev.date);
            if d > max_offset {
                break;
            }
            if let Some(v) = plot_source_mean(o, ev.plot, source, params) {
                post.entry(d).or_default().push(v);
                pre.entry(d).or_default().push(pre_value);
            }
        }
    }
    let mut curve = SeparabilityCurve {
        source,
        offsets: Vec::new(),
        m_values: Vec::new(),
        n_burn: Vec::new(),
        n_unburn: Vec::new(),
    };
    for d in 0..=max_offset {
        let b = post.get(&d).map(Vec::as_slice).unwrap_or(&[]);
        let u = pre.get(&d).map(Vec::as_slice).unwrap_or(&[]);
        let m = if b.len() < MIN_BUCKET || u.len() < MIN_BUCKET {
            None
        } else {
            let sb = SampleStats::from_values(b)?;
            let su = SampleStats::from_values(u)?;
            match m_statistic(&sb, &su) {
                Ok(m) => Some(m),
                Err(SeparabilityError::Infinite) => Some(f64::INFINITY),
                Err(e) => return Err(e),
            }
        };
        curve.offsets.push(d);
        curve.m_values.push(m);
        curve.n_burn.push(b.len());
        curve.n_unburn.push(u.len());
    }
    Ok(curve)
}

pub fn write_curves_csv<W: Write>(out: W, curves: &[SeparabilityCurve]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "offset_days", "m_value", "n_burn", "n_unburn"])?;
    for c in curves {
        for i in 0..c.offsets.len() {
            w.write_record([
                c.source.name().to_string(),
                c.offsets[i].to_string(),
                c.m_values[i].map(|m| m.to_string()).unwrap_or_default(),
                c.n_burn[i].to_string(),
                c.n_unburn[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean and sd of plot means per offset, for burned and tilled-unburned plots.
/// Entries are `None` where a group has fewer than two plot means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureProfile {
    pub source: Source,
    pub offsets: Vec<i64>,
    pub burned: Vec<Option<SampleStats>>,
    pub unburned: Vec<Option<SampleStats>>,
    pub n_burned_plots: usize,
    pub n_unburned_plots: usize,
}

/// Time-aligned profiles of `source` within `±window` days of each plot's
/// event (burn date for burned plots, till date for unburned ones).
pub fn signature_profile(
    burned: &[Event<'_>],
    unburned: &[Event<'_>],
    cube: &SceneCube,
    source: Source,
    window: i64,
    params: &IndexParams,
) -> Result<SignatureProfile, SeparabilityError> {
    check_available(source, cube)?;
    if burned.is_empty() {
        return Err(SeparabilityError::EmptyGroup("burned"));
    }
    if unburned.is_empty() {
        return Err(SeparabilityError::EmptyGroup("unburned"));
    }
    let collect = |events: &[Event<'_>]| {
        let mut by_offset: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for ev in events {
            for o in cube.observations() {
                let d = days_between(o.date(), ev.date);
                if d.abs() > window {
                    continue;
                }
                if let Some(v) = plot_source_mean(o, ev.plot, source, params) {
                    by_offset.entry(d).or_default().push(v);
                }
            }
        }
        (-window..=window)
            .map(|d| {
                by_offset
                    .get(&d)
                    .and_then(|v| SampleStats::from_values(v).ok())
            })
            .collect::<Vec<_>>()
    };
    Ok(SignatureProfile {
        source,
        offsets: (-window..=window).collect(),
        burned: collect(burned),
        unburned: collect(unburned),
        n_burned_plots: burned.len(),
        n_unburned_plots: unburned.len(),
    })
}

pub fn write_profile_csv<W: Write>(out: W, profile: &SignatureProfile) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "offset_days", "group", "n", "mean", "sd"])?;
    for (i, d) in profile.offsets.iter().enumerate() {
        for (group, stats) in [("burned", &profile.burned[i]), ("unburned", &profile.unburned[i])] {
            let (n, mean, sd) = match stats {
                Some(s) => (s.n.to_string(), s.mean.to_string(), s.sd.to_string()),
                None => ("0".into(), String::new(), String::new()),
            };
            w.write_record([profile.source.name().to_string(), d.to_string(), group.into(), n, mean, sd])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` for fewer than two pairs or zero rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Band, GridGeometry, Group, Label, Polygon, Sensor};
    use proptest::prelude::*;

    fn stats(n: usize, mean: f64, sd: f64) -> SampleStats {
        SampleStats { n, mean, sd }
    }

    #[test]
    fn identical_groups_have_zero_m() {
        let s = SampleStats::from_values(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m_statistic(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn hand_case() {
        assert_eq!(m_statistic(&stats(10, 2.0, 0.5), &stats(10, 0.0, 0.5)).unwrap(), 2.0);
        assert_eq!(classify_m(2.0), SeparabilityClass::Excellent);
        assert_eq!(classify_m(1.2), SeparabilityClass::Some);
        assert_eq!(classify_m(0.7), SeparabilityClass::Poor);
    }

    #[test]
    fn zero_spread() {
        assert_eq!(m_statistic(&stats(3, 1.0, 0.0), &stats(3, 1.0, 0.0)).unwrap(), 0.0);
        assert_eq!(
            m_statistic(&stats(3, 1.0, 0.0), &stats(3, 2.0, 0.0)),
            Err(SeparabilityError::Infinite)
        );
    }

    #[test]
    fn sample_sd_uses_n_minus_one() {
        let s = SampleStats::from_values(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert!((s.sd - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert!(SampleStats::from_values(&[1.0]).is_err());
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]), None);
    }

    proptest! {
        #[test]
        fn m_is_symmetric_and_affine_invariant(
            b in prop::collection::vec(-5.0f64..5.0, 3..30),
            u in prop::collection::vec(-5.0f64..5.0, 3..30),
            a in prop::sample::select(vec![-3.0, -0.5, 0.25, 2.0, 7.5]),
            shift in -10.0f64..10.0,
        ) {
            let sb = SampleStats::from_values(&b).unwrap();
            let su = SampleStats::from_values(&u).unwrap();
            prop_assume!(sb.sd + su.sd > 1e-6);
            let m = m_statistic(&sb, &su).unwrap();
            prop_assert!((m - m_statistic(&su, &sb).unwrap()).abs() < 1e-12);
            let tb: Vec<f64> = b.iter().map(|v| a * v + shift).collect();
            let tu: Vec<f64> = u.iter().map(|v| a * v + shift).collect();
            let mt = m_statistic(
                &SampleStats::from_values(&tb).unwrap(),
                &SampleStats::from_values(&tu).unwrap(),
            ).unwrap();
            prop_assert!((m - mt).abs() < 1e-12 * m.max(1.0));
        }
    }

    // One-pixel plots on a strip; NIR steps down by 5 units at the event and
    // never recovers.
    #[test]
    fn persistent_drop_gives_flat_high_curve() {
        let n_plots = 12;
        let g = GridGeometry::new(n_plots, 1, 0.0, 0.0, 1.0);
        let plots: Vec<Plot> = (0..n_plots)
            .map(|i| {
                let x = i as f64;
                Plot::new(
                    format!("p{i}"),
                    Polygon::rectangle(x, 0.0, x + 1.0, 1.0),
                    &g,
                    Label::Burned,
                    Group::None,
                )
                .unwrap()
            })
            .collect();
        let start = NaiveDate::from_ymd_opt(2019, 10, 1).unwrap();
        let event = start + chrono::Days::new(5);
        let obs: Vec<BandObservation> = (0..15)
            .map(|day| {
                let date = start + chrono::Days::new(day);
                let nir: Vec<f64> = (0..n_plots)
                    .map(|i| {
                        let jitter = 0.002 * ((i * 7 + day as usize * 3) % 5) as f64;
                        if date >= event { 0.2 + jitter } else { 0.3 + jitter }
                    })
                    .collect();
                let mut planes = vec![vec![0.1; n_plots]; 4];
                planes[3] = nir;
                BandObservation::from_reflectance(Sensor::A, date, g, planes, vec![true; n_plots])
                    .unwrap()
            })
            .collect();
        let cube = SceneCube::new(Sensor::A, g, obs).unwrap();
        let events: Vec<Event> = plots.iter().map(|p| Event { plot: p, date: event }).collect();
        let curve =
            separability_curve(&events, &cube, Source::Band(Band::Nir), 9, &IndexParams::default())
                .unwrap();
        assert_eq!(curve.offsets, (0..=9).collect::<Vec<_>>());
        for m in &curve.m_values {
            assert!(m.unwrap() > 2.0);
        }
        assert!(separability_curve(
            &events,
            &cube,
            Source::Band(Band::Swir1),
            3,
            &IndexParams::default()
        )
        .is_err());
    }
}
