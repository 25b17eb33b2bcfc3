use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::Band;

/// Endmember sets whose 9x3 matrix exceeds this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum UnmixError {
    #[error("endmember matrix is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("endmember {0} has a component outside [0, 1]")]
    OutOfRange(&'static str),
    #[error("endmember file: {0}")]
    Format(String),
}

/// Green vegetation, soil and char spectra over the nine sensor-B bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndmemberSet {
    veg: [f64; 9],
    soil: [f64; 9],
    char: [f64; 9],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fractions {
    pub veg: f64,
    pub soil: f64,
    pub char: f64,
}

impl EndmemberSet {
    pub fn new(veg: [f64; 9], soil: [f64; 9], char: [f64; 9]) -> Result<Self, UnmixError> {
        for (name, s) in [("veg", &veg), ("soil", &soil), ("char", &char)] {
            if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(UnmixError::OutOfRange(name));
            }
        }
        let set = EndmemberSet { veg, soil, char };
        let cond = set.condition_number();
        if !(cond <= MAX_CONDITION) {
            return Err(UnmixError::IllConditioned(cond));
        }
        Ok(set)
    }

    pub fn veg(&self) -> &[f64; 9] {
        &self.veg
    }

    pub fn soil(&self) -> &[f64; 9] {
        &self.soil
    }

    pub fn char(&self) -> &[f64; 9] {
        &self.char
    }

    /// Ratio of largest to smallest singular value of the band x endmember matrix.
    pub fn condition_number(&self) -> f64 {
        let m = DMatrix::from_fn(9, 3, |r, c| [&self.veg, &self.soil, &self.char][c][r]);
        let sv = m.singular_values();
        let max = sv.max();
        let min = sv.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Reads three rows (`veg`, `soil`, `char`, in that order) with one column
    /// per sensor-B band. A leading non-numeric column is treated as a row name.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, UnmixError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| UnmixError::Format(e.to_string()))?
            .clone();
        let mut cols = [usize::MAX; 9];
        for (i, h) in headers.iter().enumerate() {
            if let Ok(b) = h.parse::<Band>() {
                cols[b.ordinal()] = i;
            }
        }
        if let Some(missing) = cols.iter().position(|&c| c == usize::MAX) {
            return Err(UnmixError::Format(format!(
                "missing column for band {}",
                Band::ALL[missing]
            )));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| UnmixError::Format(e.to_string()))?;
            let mut s = [0.0; 9];
            for (slot, &c) in s.iter_mut().zip(&cols) {
                let field = rec.get(c).unwrap_or("");
                *slot = field
                    .trim()
                    .parse()
                    .map_err(|_| UnmixError::Format(format!("bad value {field:?}")))?;
            }
            rows.push(s);
        }
        if rows.len() != 3 {
            return Err(UnmixError::Format(format!(
                "expected 3 endmember rows, found {}",
                rows.len()
            )));
        }
        EndmemberSet::new(rows[0], rows[1], rows[2])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("endmember");
        for b in Band::ALL {
            out.push(',');
            out.push_str(b.name());
        }
        out.push('\n');
        for (name, s) in [("veg", &self.veg), ("soil", &self.soil), ("char", &self.char)] {
            out.push_str(name);
            for v in s {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

fn dot(a: &[f64; 9], b: &[f64; 9]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    std::array::from_fn(|i| a[i] - b[i])
}

fn residual(s: &[f64; 9], e: [&[f64; 9]; 3], f: [f64; 3]) -> f64 {
    (0..9)
        .map(|i| {
            let model = f[0] * e[0][i] + f[1] * e[1][i] + f[2] * e[2][i];
            (s[i] - model).powi(2)
        })
        .sum()
}

/// Fully constrained least squares (fractions non-negative, summing to one).
///
/// The feasible set is a triangle; the optimum lies either in its interior
/// (equality-constrained solution with all fractions non-negative) or on one of
/// its three edges, so every face is solved exactly and the best feasible
/// candidate wins.
pub fn unmix_char_fraction(
    spectrum: &[f64; 9],
    endmembers: &EndmemberSet,
) -> Result<Fractions, UnmixError> {
    let e = [&endmembers.veg, &endmembers.soil, &endmembers.char];
    let mut best: Option<([f64; 3], f64)> = None;
    let mut consider = |f: [f64; 3]| {
        let r = residual(spectrum, e, f);
        if best.map_or(true, |(_, br)| r < br) {
            best = Some((f, r));
        }
    };

    // Interior: f2 = 1 - f0 - f1.
    let a0 = sub(e[0], e[2]);
    let a1 = sub(e[1], e[2]);
    let b = sub(spectrum, e[2]);
    let (g00, g01, g11) = (dot(&a0, &a0), dot(&a0, &a1), dot(&a1, &a1));
    let (h0, h1) = (dot(&a0, &b), dot(&a1, &b));
    let det = g00 * g11 - g01 * g01;
    if det.abs() > 1e-300 {
        let f0 = (h0 * g11 - h1 * g01) / det;
        let f1 = (g00 * h1 - g01 * h0) / det;
        let f2 = 1.0 - f0 - f1;
        if f0 >= 0.0 && f1 >= 0.0 && f2 >= 0.0 {
            consider([f0, f1, f2]);
        }
    }

    // Edges: fraction t on endmember i, 1 - t on j, the third zero.
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let d = sub(e[i], e[j]);
        let dd = dot(&d, &d);
        let t = if dd > 0.0 {
            (dot(&sub(spectrum, e[j]), &d) / dd).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let mut f = [0.0; 3];
        f[i] = t;
        f[j] = 1.0 - t;
        consider(f);
    }

    let (f, _) = best.ok_or(UnmixError::IllConditioned(f64::INFINITY))?;
    Ok(Fractions {
        veg: f[0],
        soil: f[1],
        char: f[2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn set() -> EndmemberSet {
        EndmemberSet::new(
            [0.03, 0.07, 0.04, 0.12, 0.35, 0.45, 0.50, 0.25, 0.12],
            [0.12, 0.17, 0.22, 0.25, 0.28, 0.30, 0.32, 0.42, 0.38],
            [0.03, 0.035, 0.04, 0.045, 0.05, 0.055, 0.06, 0.07, 0.08],
        )
        .unwrap()
    }

    fn mix(s: &EndmemberSet, f: [f64; 3]) -> [f64; 9] {
        std::array::from_fn(|i| f[0] * s.veg[i] + f[1] * s.soil[i] + f[2] * s.char[i])
    }

    #[test]
    fn pure_char_pixel() {
        let s = set();
        let f = unmix_char_fraction(&s.char, &s).unwrap();
        assert_eq!((f.veg, f.soil, f.char), (0.0, 0.0, 1.0));
    }

    #[test]
    fn half_soil_half_veg() {
        let s = set();
        let f = unmix_char_fraction(&mix(&s, [0.5, 0.5, 0.0]), &s).unwrap();
        assert!((f.veg - 0.5).abs() < 1e-9);
        assert!((f.soil - 0.5).abs() < 1e-9);
        assert!(f.char.abs() < 1e-9);
    }

    #[test]
    fn noisy_mixtures_are_recovered() {
        let s = set();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.005).unwrap();
        for _ in 0..500 {
            let a: f64 = rng.gen();
            let b: f64 = rng.gen::<f64>() * (1.0 - a);
            let truth = [a, b, 1.0 - a - b];
            let mut spec = mix(&s, truth);
            for v in &mut spec {
                *v += noise.sample(&mut rng);
            }
            let f = unmix_char_fraction(&spec, &s).unwrap();
            for (got, want) in [f.veg, f.soil, f.char].iter().zip(truth) {
                assert!((got - want).abs() < 0.05, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn collinear_endmembers_are_rejected() {
        let veg = [0.1; 9];
        let soil = [0.2; 9];
        let char = [0.3; 9];
        assert!(matches!(
            EndmemberSet::new(veg, soil, char),
            Err(UnmixError::IllConditioned(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let s = set();
        let back = EndmemberSet::from_csv(s.to_csv().as_bytes()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn fractions_are_a_partition(spec in prop::array::uniform9(0.0f64..1.0)) {
            let f = unmix_char_fraction(&spec, &set()).unwrap();
            prop_assert!((f.veg + f.soil + f.char - 1.0).abs() < 1e-9);
            for v in [f.veg, f.soil, f.char] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn matches_dense_simplex_search(spec in prop::array::uniform9(0.0f64..0.6)) {
            let s = set();
            let e = [&s.veg, &s.soil, &s.char];
            let f = unmix_char_fraction(&spec, &s).unwrap();
            let got = residual(&spec, e, [f.veg, f.soil, f.char]);
            let n = 200;
            for i in 0..=n {
                for j in 0..=(n - i) {
                    let a = i as f64 / n as f64;
                    let b = j as f64 / n as f64;
                    prop_assert!(got <= residual(&spec, e, [a, b, 1.0 - a - b]) + 1e-12);
                }
            }
        }
    }
}
