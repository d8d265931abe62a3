//! Central finite-difference gradient checking in `f64`.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const STEP: f64 = 1e-5;
pub const MIN_SAMPLES: usize = 100;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct Coordinate {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Up to three coordinates with the largest relative error.
    pub worst: Vec<Coordinate>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {} max rel err {:.3e} (tol {:.0e})",
            self.label,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance
        )?;
        if !self.passed() {
            for t in self.tensors.iter().filter(|t| t.max_rel_error > self.tolerance) {
                for c in &t.worst {
                    writeln!(
                        f,
                        "    {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                        t.name, c.index, c.analytic, c.numeric, c.rel_error
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Named flat tensor under test.
#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub values: Vec<f64>,
}

impl Probe {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Probe {
            name: name.into(),
            values,
        }
    }
}

/// Compares `analytic[i]` against central differences of `loss` for at
/// least [`MIN_SAMPLES`] random coordinates of every probe (all of them when
/// the probe is smaller).
pub fn gradient_check(
    label: &str,
    probes: &mut [Probe],
    loss: impl Fn(&[Probe]) -> f64,
    analytic: &[Vec<f64>],
    tolerance: f64,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(probes.len(), analytic.len(), "one analytic gradient per probe");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(probes.len());
    for t in 0..probes.len() {
        let len = probes[t].values.len();
        assert_eq!(len, analytic[t].len(), "gradient length for {}", probes[t].name);
        let picks: Vec<usize> = if len <= MIN_SAMPLES {
            (0..len).collect()
        } else {
            sample(&mut rng, len, MIN_SAMPLES).into_vec()
        };
        let mut coords = Vec::with_capacity(picks.len());
        for idx in picks {
            let orig = probes[t].values[idx];
            probes[t].values[idx] = orig + STEP;
            let up = loss(probes);
            probes[t].values[idx] = orig - STEP;
            let down = loss(probes);
            probes[t].values[idx] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[t][idx];
            coords.push(Coordinate {
                index: idx,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
        coords.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        tensors.push(TensorCheck {
            name: probes[t].name.clone(),
            checked: coords.len(),
            max_rel_error: coords.first().map_or(0.0, |c| c.rel_error),
            worst: coords.into_iter().take(3).collect(),
        });
    }
    GradCheckReport {
        label: label.to_string(),
        tolerance,
        tensors,
    }
}
