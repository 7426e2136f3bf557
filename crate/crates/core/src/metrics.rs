//! Energy model, periodic samples and their CSV export.

use std::io::{self, Write};

use thiserror::Error;

use crate::fabric::Utilization;
use crate::sim::SimTime;

/// Linear energy model for a fixed reference workload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    /// Energy in mJ with a single accelerator.
    pub base_mj: f64,
    /// Additional mJ per extra accelerator.
    pub slope_mj: f64,
    pub dyn_nj_per_synop: f64,
}

impl Default for EnergyModel {
    /// 25 mJ at one accelerator rising to 45 mJ at twenty.
    fn default() -> Self {
        EnergyModel {
            base_mj: 25.0,
            slope_mj: 20.0 / 19.0,
            dyn_nj_per_synop: 1.0,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.base_mj.is_nan() || self.base_mj <= 0.0 {
            return Err("base_mj must be positive".into());
        }
        if self.slope_mj.is_nan() || self.slope_mj < 0.0 {
            return Err("slope_mj must be non-negative".into());
        }
        if self.dyn_nj_per_synop.is_nan() || self.dyn_nj_per_synop < 0.0 {
            return Err("dyn_nj_per_synop must be non-negative".into());
        }
        Ok(())
    }
}

pub fn energy_for_accelerators(n: u32, model: &EnergyModel) -> f64 {
    assert!(n >= 1, "at least one accelerator");
    model.base_mj + (n - 1) as f64 * model.slope_mj
}

/// Dynamic energy in mJ for `ops` synaptic operations.
pub fn task_energy(ops: u64, model: &EnergyModel) -> f64 {
    ops as f64 * model.dyn_nj_per_synop / 1e6
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSample {
    pub at: SimTime,
    pub utilization: Utilization,
    pub throughput_gibs: f64,
    pub energy_mj: f64,
    pub reconfig_full: SimTime,
    pub reconfig_partial: SimTime,
}

pub const SAMPLE_HEADER: &str =
    "tick,lut_pct,mem_pct,io_pct,dsp_pct,throughput_gibs,energy_mj,reconfig_full_ns,reconfig_partial_ns";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("failed to export samples: {0}")]
    ExportIoFailure(#[from] io::Error),
}

/// Formats `x` with six significant digits in positional notation.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0.00000".into() } else { format!("{x}") };
    }
    let decimals = |v: f64| (5 - v.abs().log10().floor() as i32).max(0) as usize;
    let d = decimals(x);
    let s = format!("{x:.d$}");
    // Rounding may carry into a new leading digit (9.999996 -> 10.00000).
    let rounded: f64 = s.parse().expect("formatted float");
    let d2 = decimals(rounded);
    if d2 < d {
        format!("{x:.d2$}")
    } else {
        s
    }
}

impl MetricSample {
    pub fn csv_row(&self) -> String {
        let u = &self.utilization;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.at.0,
            sig6(u.lut),
            sig6(u.memory),
            sig6(u.io),
            sig6(u.dsp),
            sig6(self.throughput_gibs),
            sig6(self.energy_mj),
            self.reconfig_full.0,
            self.reconfig_partial.0
        )
    }
}

/// Writes the header plus one row per sample, LF-terminated.
pub fn export<W: Write>(samples: &[MetricSample], mut out: W) -> Result<(), MetricsError> {
    writeln!(out, "{SAMPLE_HEADER}")?;
    for s in samples {
        writeln!(out, "{}", s.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_string(samples: &[MetricSample]) -> String {
    let mut buf = Vec::new();
    export(samples, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("ascii")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_endpoints() {
        let m = EnergyModel::default();
        assert_eq!(energy_for_accelerators(1, &m), 25.0);
        assert!((energy_for_accelerators(20, &m) - 45.0).abs() < 1e-12);
        // Linear interpolation between the endpoints: 25 + 9 * 20 / 19.
        let oracle = 25.0 + (45.0 - 25.0) * (10.0 - 1.0) / (20.0 - 1.0);
        assert!((energy_for_accelerators(10, &m) - oracle).abs() < 1e-12);
        assert!((energy_for_accelerators(10, &m) - 34.473_684).abs() < 1e-6);
    }

    #[test]
    fn energy_is_linear_and_increasing() {
        let m = EnergyModel::default();
        let e: Vec<f64> = (1..=20).map(|n| energy_for_accelerators(n, &m)).collect();
        for w in e.windows(3) {
            assert!((w[2] - 2.0 * w[1] + w[0]).abs() < 1e-9);
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn task_energy_units() {
        let m = EnergyModel::default();
        assert_eq!(task_energy(0, &m), 0.0);
        assert_eq!(task_energy(1_000_000, &m), 1.0);
        assert_eq!(task_energy(2_000_000, &m), 2.0 * task_energy(1_000_000, &m));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(30.0), "30.0000");
        assert_eq!(sig6(29.956_896_551), "29.9569");
        assert_eq!(sig6(5.099_968), "5.09997");
        assert_eq!(sig6(0.001_234_567), "0.00123457");
        assert_eq!(sig6(9.999_996), "10.0000");
        assert_eq!(sig6(1_234_567.0), "1234567");
        assert_eq!(sig6(0.0), "0.00000");
    }

    #[test]
    fn export_has_header_and_rows() {
        let s = MetricSample {
            at: SimTime(5),
            utilization: Utilization {
                lut: 30.0,
                memory: 30.0,
                io: 29.956_896_551,
                dsp: 29.976_851_85,
            },
            throughput_gibs: 1.5,
            energy_mj: 0.25,
            reconfig_full: SimTime(75_000_000),
            reconfig_partial: SimTime(0),
        };
        let csv = export_string(&[s]);
        assert_eq!(
            csv,
            format!("{SAMPLE_HEADER}\n5,30.0000,30.0000,29.9569,29.9769,1.50000,0.250000,75000000,0\n")
        );
        assert_eq!(export_string(&[]), format!("{SAMPLE_HEADER}\n"));
    }

    struct Broken;
    impl Write for Broken {
        fn write(&mut self, _: &[u8]) -> io::Result<usize> {
            Err(io::Error::other("disk gone"))
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn export_reports_io_failure() {
        assert!(matches!(export(&[], Broken), Err(MetricsError::ExportIoFailure(_))));
    }
}
