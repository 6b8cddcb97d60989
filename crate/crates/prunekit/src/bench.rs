//! Wall-clock inference benchmarking: warmup, timed single-image forwards,
//! median and IQR, throughput as MACs per second.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting;
use crate::error::{Error, Result};
use crate::kernels::{parallel_kernels, set_parallel_kernels};
use crate::net::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub network: String,
    pub params: u64,
    pub macs: u64,
    pub median_latency_seconds: f64,
    /// MACs divided by the median latency, exactly as recorded.
    pub throughput_macs_per_second: f64,
    pub warmup: usize,
    pub samples: usize,
    pub iqr_seconds: f64,
    /// Whether rayon-backed kernels were allowed inside the timed region.
    pub parallel_kernels: bool,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Time single-image eval-mode forwards on a fixed random input. The timed
/// region is single-threaded unless `parallel` is set; the flag used is
/// recorded in the report. Weights are never mutated.
pub fn bench_inference(
    network: &Network,
    resolution: usize,
    warmup: usize,
    samples: usize,
    parallel: bool,
) -> Result<BenchReport> {
    if warmup < 1 {
        return Err(Error::Config("bench needs warmup >= 1".into()));
    }
    if samples < 5 {
        return Err(Error::Config("bench needs samples >= 5".into()));
    }
    let cost = accounting::cost_report(&network.descriptor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE9C);
    let input = Tensor::randn(&[1, 3, resolution, resolution], 1.0, &mut rng);

    let was_parallel = parallel_kernels();
    set_parallel_kernels(parallel);
    let result = (|| -> Result<Vec<f64>> {
        for _ in 0..warmup {
            let out = network.forward_eval(&input)?;
            if !out.is_finite() {
                return Err(Error::Numeric("non-finite outputs during warmup".into()));
            }
        }
        let mut latencies = Vec::with_capacity(samples);
        for _ in 0..samples {
            let t0 = Instant::now();
            let out = network.forward_eval(&input)?;
            let dt = t0.elapsed().as_secs_f64();
            if !out.is_finite() {
                return Err(Error::Numeric("non-finite outputs during benchmark".into()));
            }
            latencies.push(dt);
        }
        Ok(latencies)
    })();
    set_parallel_kernels(was_parallel);
    let mut latencies = result?;

    latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = percentile(&latencies, 0.5);
    let iqr = percentile(&latencies, 0.75) - percentile(&latencies, 0.25);
    Ok(BenchReport {
        network: network.descriptor.name(),
        params: cost.params,
        macs: cost.macs,
        median_latency_seconds: median,
        throughput_macs_per_second: cost.macs as f64 / median,
        warmup,
        samples: latencies.len(),
        iqr_seconds: iqr,
        parallel_kernels: parallel,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub network: String,
    pub params: u64,
    pub macs: u64,
    pub error_percent: Option<f64>,
    pub median_latency_seconds: f64,
    pub throughput_macs_per_second: f64,
}

/// Merge reports with per-network error metadata into a table sorted by
/// latency, fastest first (stable for ties).
pub fn compare(reports: &[BenchReport], errors: &[Option<f64>]) -> Result<Vec<BenchRow>> {
    if reports.len() < 2 {
        return Err(Error::Config("compare needs at least two reports".into()));
    }
    if errors.len() != reports.len() {
        return Err(Error::Config(format!(
            "{} reports but {} error entries",
            reports.len(),
            errors.len()
        )));
    }
    let mut rows: Vec<BenchRow> = reports
        .iter()
        .zip(errors)
        .map(|(r, &e)| BenchRow {
            network: r.network.clone(),
            params: r.params,
            macs: r.macs,
            error_percent: e,
            median_latency_seconds: r.median_latency_seconds,
            throughput_macs_per_second: r.throughput_macs_per_second,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.median_latency_seconds
            .partial_cmp(&b.median_latency_seconds)
            .unwrap()
    });
    Ok(rows)
}

pub fn comparison_csv(rows: &[BenchRow]) -> String {
    let mut out =
        String::from("network,params,macs,error_percent,median_latency_seconds,throughput_macs_per_second\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.9},{:.3}\n",
            r.network,
            r.params,
            r.macs,
            r.error_percent.map(|e| format!("{e:.4}")).unwrap_or_default(),
            r.median_latency_seconds,
            r.throughput_macs_per_second
        ));
    }
    out
}
