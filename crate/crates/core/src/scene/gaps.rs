use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{Plot, SceneCube, Sensor};

/// Observation windows for one plot and sensor. `mean`/`max` are `None` when
/// the plot has fewer than two usable observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotGaps {
    pub plot_id: String,
    pub n_observations: usize,
    pub mean: Option<f64>,
    pub max: Option<f64>,
}

impl PlotGaps {
    pub fn from_days(plot_id: &str, days: &[i64]) -> Self {
        let (mean, max) = if days.len() < 2 {
            (None, None)
        } else {
            let diffs: Vec<i64> = days.windows(2).map(|w| w[1] - w[0]).collect();
            let sum: i64 = diffs.iter().sum();
            (
                Some(sum as f64 / diffs.len() as f64),
                diffs.iter().max().map(|&m| m as f64),
            )
        };
        PlotGaps {
            plot_id: plot_id.to_string(),
            n_observations: days.len(),
            mean,
            max,
        }
    }

    pub fn is_flagged(&self) -> bool {
        self.mean.is_none()
    }
}

/// Cross-plot summary rows: mean and max across plots of the per-plot mean and
/// max window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub mean_of_means: f64,
    pub mean_of_maxes: f64,
    pub max_of_means: f64,
    pub max_of_maxes: f64,
    pub n_plots: usize,
}

impl GapSummary {
    /// Summarises non-flagged plots, in the order given.
    pub fn from_plots(plots: &[PlotGaps]) -> Option<Self> {
        let usable: Vec<(f64, f64)> = plots
            .iter()
            .filter_map(|p| Some((p.mean?, p.max?)))
            .collect();
        if usable.is_empty() {
            return None;
        }
        let n = usable.len() as f64;
        let mut s = GapSummary {
            mean_of_means: 0.0,
            mean_of_maxes: 0.0,
            max_of_means: f64::NEG_INFINITY,
            max_of_maxes: f64::NEG_INFINITY,
            n_plots: usable.len(),
        };
        for &(mean, max) in &usable {
            s.mean_of_means += mean;
            s.mean_of_maxes += max;
            s.max_of_means = s.max_of_means.max(mean);
            s.max_of_maxes = s.max_of_maxes.max(max);
        }
        s.mean_of_means /= n;
        s.mean_of_maxes /= n;
        Some(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorGaps {
    pub sensor: Sensor,
    pub plots: Vec<PlotGaps>,
    pub summary: Option<GapSummary>,
}

impl SensorGaps {
    pub fn from_plots(sensor: Sensor, plots: Vec<PlotGaps>) -> Self {
        let summary = GapSummary::from_plots(&plots);
        SensorGaps {
            sensor,
            plots,
            summary,
        }
    }

    pub fn n_flagged(&self) -> usize {
        self.plots.iter().filter(|p| p.is_flagged()).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub sensors: Vec<SensorGaps>,
}

impl GapReport {
    pub fn sensor(&self, sensor: Sensor) -> Option<&SensorGaps> {
        self.sensors.iter().find(|s| s.sensor == sensor)
    }

    /// Per-plot rows followed by the summary block.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sensor", "plot_id", "n_observations", "mean_gap_days", "max_gap_days"])?;
        for s in &self.sensors {
            for p in &s.plots {
                w.write_record([
                    s.sensor.tag().to_string(),
                    p.plot_id.clone(),
                    p.n_observations.to_string(),
                    p.mean.map(|v| v.to_string()).unwrap_or_default(),
                    p.max.map(|v| v.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        for s in &self.sensors {
            if let Some(sum) = &s.summary {
                for (label, value) in [
                    ("SUMMARY:mean_of_means", sum.mean_of_means),
                    ("SUMMARY:mean_of_maxes", sum.mean_of_maxes),
                    ("SUMMARY:max_of_means", sum.max_of_means),
                    ("SUMMARY:max_of_maxes", sum.max_of_maxes),
                ] {
                    w.write_record([
                        s.sensor.tag().to_string(),
                        label.to_string(),
                        sum.n_plots.to_string(),
                        value.to_string(),
                        String::new(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Dates at which at least half of the plot's pixels are valid.
pub fn observed_dates(cube: &SceneCube, plot: &Plot) -> Vec<NaiveDate> {
    cube.observations()
        .iter()
        .filter(|o| plot.observed_in(o))
        .map(|o| o.date())
        .collect()
}

/// Windows between consecutive usable observations, per plot and sensor.
pub fn gap_statistics(cubes: &[&SceneCube], plots: &[Plot]) -> GapReport {
    let sensors = cubes
        .iter()
        .map(|cube| {
            let per_plot = plots
                .iter()
                .map(|plot| {
                    let dates = observed_dates(cube, plot);
                    let days: Vec<i64> = dates
                        .iter()
                        .map(|d| d.signed_duration_since(dates[0]).num_days())
                        .collect();
                    let gaps = PlotGaps::from_days(&plot.id, &days);
                    if gaps.is_flagged() {
                        log::warn!(
                            "plot {} has {} usable {} observations; excluded from gap summary",
                            plot.id,
                            gaps.n_observations,
                            cube.sensor()
                        );
                    }
                    gaps
                })
                .collect();
            SensorGaps::from_plots(cube.sensor(), per_plot)
        })
        .collect();
    GapReport { sensors }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn daily_observations() {
        let days: Vec<i64> = (0..10).collect();
        let g = PlotGaps::from_days("p", &days);
        assert_eq!(g.mean, Some(1.0));
        assert_eq!(g.max, Some(1.0));
    }

    #[test]
    fn uneven_observations() {
        let g = PlotGaps::from_days("p", &[0, 2, 10]);
        assert_eq!(g.mean, Some(5.0));
        assert_eq!(g.max, Some(8.0));
    }

    #[test]
    fn single_observation_is_flagged() {
        let flagged = PlotGaps::from_days("p", &[4]);
        assert!(flagged.is_flagged());
        let ok = PlotGaps::from_days("q", &[0, 3]);
        let s = GapSummary::from_plots(&[flagged, ok]).unwrap();
        assert_eq!(s.n_plots, 1);
        assert_eq!(s.mean_of_means, 3.0);
    }

    #[test]
    fn summary_ordering() {
        let plots = vec![
            PlotGaps::from_days("a", &[0, 1, 2, 9]),
            PlotGaps::from_days("b", &[0, 5, 6, 7, 20]),
            PlotGaps::from_days("c", &[0, 2, 4, 6]),
        ];
        let s = GapSummary::from_plots(&plots).unwrap();
        assert!(s.mean_of_means <= s.mean_of_maxes);
        assert!(s.mean_of_means <= s.max_of_means);
        assert!(s.max_of_means <= s.max_of_maxes);
        assert!(s.mean_of_maxes <= s.max_of_maxes);
    }
}
