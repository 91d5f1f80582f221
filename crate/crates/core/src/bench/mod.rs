//! Inversion timing: 11 runs with the first discarded as warm-up, summary
//! statistics with a Student-t confidence interval, and a CSV report.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::invconv::{wavefront, FincFlowUnit, MaskedKernel, PaddedConvBlock, DENSE_CAP};
use crate::scalar::Scalar;
use crate::tensor::{Orientation, Tensor};

pub const RUNS: usize = 11;
pub const CSV_HEADER: &str = "n,c,k,batch,workers,strategy,mean_s,std_s,ci95_s,phases,madds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Single-threaded raster back-substitution.
    Reference,
    /// Anti-diagonal solve on the configured workers.
    Wavefront,
    /// Forward substitution on the dense convolution matrix.
    Dense,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Reference, Strategy::Wavefront, Strategy::Dense];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Reference => "reference",
            Strategy::Wavefront => "wavefront",
            Strategy::Dense => "dense",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy {s:?}")))
    }
}

/// What gets inverted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// One top-left padded block; any channel count.
    Block,
    /// A four-block unit; channels divisible by 4.
    Unit,
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Target::Block),
            "unit" => Ok(Target::Unit),
            _ => Err(Error::InvalidConfig(format!("unknown bench target {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchCase {
    /// Image height and width.
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub batch: usize,
    pub workers: usize,
    pub strategy: Strategy,
    pub target: Target,
    pub seed: u64,
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        if !self.n.is_power_of_two() || !(8..=256).contains(&self.n) {
            return Err(Error::InvalidConfig(format!("size {} must be a power of two in [8, 256]", self.n)));
        }
        if self.c == 0 || self.k == 0 || self.batch == 0 || self.workers == 0 {
            return Err(Error::InvalidConfig("c, k, batch and workers must be positive".into()));
        }
        if self.target == Target::Unit && !self.c.is_multiple_of(4) {
            return Err(Error::IndivisibleChannels {
                channels: self.c,
                parts: 4,
            });
        }
        if self.strategy == Strategy::Dense {
            if self.target == Target::Unit {
                return Err(Error::InvalidConfig("dense strategy benchmarks single blocks only".into()));
            }
            let side = self.n * self.n * self.c;
            if side > DENSE_CAP {
                return Err(Error::TooLargeForDense { side, cap: DENSE_CAP });
            }
        }
        Ok(())
    }
}

/// Timings of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub case: BenchCase,
    /// Wall time of every run in seconds, warm-up included.
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Half-width of the 95% confidence interval of the mean.
    pub ci95: f64,
    /// Sequential phases of one inversion.
    pub phases: u64,
    /// Multiply-adds of one inversion.
    pub madds: u64,
}

impl BenchReport {
    /// Runs that enter the statistics.
    pub fn kept(&self) -> &[f64] {
        &self.runs[1..]
    }

    pub fn csv_row(&self) -> String {
        let c = &self.case;
        format!(
            "{},{},{},{},{},{},{:e},{:e},{:e},{},{}",
            c.n, c.c, c.k, c.batch, c.workers, c.strategy, self.mean, self.std, self.ci95, self.phases, self.madds
        )
    }

    /// Raw per-run times, one `index,seconds` line each; run 0 is the
    /// discarded warm-up.
    pub fn raw_csv(&self) -> String {
        let mut s = String::from("run,seconds\n");
        for (i, t) in self.runs.iter().enumerate() {
            s.push_str(&format!("{i},{t:e}\n"));
        }
        s
    }
}

/// Mean, sample standard deviation, and 95% CI half-width
/// `t(0.975, n-1) * std / sqrt(n)`.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, f64::NAN);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    (mean, std, t * std / (n as f64).sqrt())
}

fn time<F: FnMut()>(mut f: F) -> f64 {
    let start = Instant::now();
    f();
    start.elapsed().as_secs_f64()
}

/// Time `RUNS` inversions of a random masked block or unit on a random
/// input batch.
pub fn run_case<T: Scalar>(case: &BenchCase) -> Result<BenchReport> {
    run_case_with::<T>(case, RUNS)
}

pub fn run_case_with<T: Scalar>(case: &BenchCase, runs: usize) -> Result<BenchReport> {
    case.validate()?;
    if runs < 2 {
        return Err(Error::InvalidConfig("need at least two runs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let (n, c, k) = (case.n, case.c, case.k);
    let y: Tensor<T> = Tensor::from_fn([case.batch, c, n, n], |_| T::of(rng.random_range(-1.0..1.0)));
    let mut times = Vec::with_capacity(runs);
    let (phases, madds);
    match case.target {
        Target::Block => {
            let block = PaddedConvBlock::new(MaskedKernel::<T>::random(c, k, Orientation::TL, &mut rng));
            let stats = block.invert_wavefront_instrumented(&y, 1)?.1;
            match case.strategy {
                Strategy::Reference => {
                    phases = (n * n) as u64;
                    madds = stats.madds;
                    for _ in 0..runs {
                        times.push(time(|| drop(block.invert_reference(&y))));
                    }
                }
                Strategy::Wavefront => {
                    phases = stats.phases as u64;
                    madds = stats.madds;
                    for _ in 0..runs {
                        times.push(time(|| drop(block.invert_wavefront(&y, case.workers))));
                    }
                }
                Strategy::Dense => {
                    let m = block.conv_matrix(n, n)?;
                    let side = m.side() as u64;
                    phases = side;
                    madds = case.batch as u64 * side * (side - 1) / 2;
                    for _ in 0..runs {
                        times.push(time(|| drop(m.solve(&y))));
                    }
                }
            }
        }
        Target::Unit => {
            let unit = FincFlowUnit::<T>::random(c, k, &mut rng)?;
            let stats = unit.invert_instrumented(&y, 1)?.1;
            madds = stats.madds;
            match case.strategy {
                Strategy::Reference => {
                    phases = 4 * (n * n) as u64;
                    for _ in 0..runs {
                        times.push(time(|| drop(unit.invert_reference(&y))));
                    }
                }
                Strategy::Wavefront => {
                    phases = stats.phases as u64;
                    for _ in 0..runs {
                        times.push(time(|| drop(unit.invert(&y, case.workers))));
                    }
                }
                Strategy::Dense => unreachable!("rejected by validate"),
            }
        }
    }
    let (mean, std, ci95) = summarize(&times[1..]);
    Ok(BenchReport {
        case: *case,
        runs: times,
        mean,
        std,
        ci95,
        phases,
        madds,
    })
}

/// Whole-suite CSV: header plus one row per report.
pub fn csv(reports: &[BenchReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Gnuplot data file: one block per (strategy, workers) series with
/// columns `n mean ci95`, blocks separated by two blank lines so each can
/// be addressed with `index`.
pub fn gnuplot_data(reports: &[BenchReport]) -> String {
    let mut series: Vec<(Strategy, usize, Vec<&BenchReport>)> = Vec::new();
    for r in reports {
        match series
            .iter_mut()
            .find(|(s, w, _)| *s == r.case.strategy && *w == r.case.workers)
        {
            Some(entry) => entry.2.push(r),
            None => series.push((r.case.strategy, r.case.workers, vec![r])),
        }
    }
    let mut out = String::new();
    for (i, (strategy, workers, mut rows)) in series.into_iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        rows.sort_by_key(|r| r.case.n);
        out.push_str(&format!("# {strategy} workers={workers}\n# n mean_s ci95_s\n"));
        for r in rows {
            out.push_str(&format!("{} {:e} {:e}\n", r.case.n, r.mean, r.ci95));
        }
    }
    out
}

/// Outcome of the growth-rate comparison between raster and wavefront
/// inversion.
#[derive(Clone, Debug, PartialEq)]
pub enum Scaling {
    Skipped(String),
    Measured {
        /// `(n, 2n, reference ratio, wavefront ratio)`.
        ratios: Vec<(usize, usize, f64, f64)>,
        pass: bool,
    },
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

/// Doubling `n` should roughly quadruple single-worker raster time but
/// grow 8-worker wavefront time by at most 3.5x. Needs at least 4 cores.
pub fn scaling_check(c: usize, k: usize, batch: usize, cores: usize) -> Result<Scaling> {
    if cores < 4 {
        return Ok(Scaling::Skipped(format!(
            "{cores} core(s) available, scaling check needs at least 4"
        )));
    }
    let median_of = |n: usize, strategy: Strategy, workers: usize| -> Result<f64> {
        let case = BenchCase {
            n,
            c,
            k,
            batch,
            workers,
            strategy,
            target: Target::Block,
            seed: 0,
        };
        Ok(median(run_case_with::<f32>(&case, RUNS)?.kept()))
    };
    let mut ratios = Vec::new();
    let mut pass = true;
    for (a, b) in [(32, 64), (64, 128)] {
        let r = median_of(b, Strategy::Reference, 1)? / median_of(a, Strategy::Reference, 1)?;
        let w = median_of(b, Strategy::Wavefront, 8)? / median_of(a, Strategy::Wavefront, 8)?;
        pass &= r >= 3.5 && w <= 3.5;
        ratios.push((a, b, r, w));
    }
    Ok(Scaling::Measured { ratios, pass })
}

/// Cores usable by this process.
pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Exact multiply-add count of a full inversion, for cross-checking the
/// instrumented counters.
pub fn expected_madds(case: &BenchCase) -> u64 {
    let group = match case.target {
        Target::Block => case.c,
        Target::Unit => case.c / 4,
    };
    wavefront::expected_madds(case.batch, case.c, group, case.n, case.n, case.k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(n: usize, strategy: Strategy) -> BenchCase {
        BenchCase {
            n,
            c: 2,
            k: 3,
            batch: 1,
            workers: 1,
            strategy,
            target: Target::Block,
            seed: 1,
        }
    }

    #[test]
    fn summary_matches_hand_computation() {
        let (m, s, ci) = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((ci - 3.182_446_305_284_263 * s / 2.0).abs() < 1e-9);
    }

    #[test]
    fn t_quantile_nine_dof() {
        let t = StudentsT::new(0.0, 1.0, 9.0).unwrap().inverse_cdf(0.975);
        assert!((t - 2.262_157_162_740_992).abs() < 1e-9);
    }

    #[test]
    fn wavefront_phases_are_2n_minus_1() {
        for n in [8, 16] {
            let r = run_case::<f32>(&case(n, Strategy::Wavefront)).unwrap();
            assert_eq!(r.runs.len(), RUNS);
            assert_eq!(r.phases, 2 * n as u64 - 1);
            assert_eq!(r.madds, expected_madds(&r.case));
            let (m, s, ci) = summarize(r.kept());
            assert_eq!((m, s, ci), (r.mean, r.std, r.ci95));
        }
    }

    #[test]
    fn dense_refused_above_cap() {
        let mut c = case(64, Strategy::Dense);
        assert!(matches!(c.validate(), Err(Error::TooLargeForDense { .. })));
        c.n = 32;
        c.c = 4;
        assert!(c.validate().is_ok());
        c.target = Target::Unit;
        assert!(c.validate().is_err());
    }

    #[test]
    fn bad_sizes_rejected() {
        assert!(case(12, Strategy::Wavefront).validate().is_err());
        assert!(case(4, Strategy::Wavefront).validate().is_err());
        assert!(case(512, Strategy::Wavefront).validate().is_err());
        let mut c = case(8, Strategy::Wavefront);
        c.target = Target::Unit;
        assert!(matches!(c.validate(), Err(Error::IndivisibleChannels { .. })));
    }

    #[test]
    fn csv_and_gnuplot_layout() {
        let a = run_case_with::<f64>(&case(8, Strategy::Reference), 3).unwrap();
        let b = run_case_with::<f64>(&case(8, Strategy::Dense), 3).unwrap();
        let text = csv(&[a.clone(), b.clone()]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("8,2,3,1,1,reference,"));
        assert_eq!(lines[2].split(',').count(), 11);
        let g = gnuplot_data(&[a, b]);
        assert_eq!(g.matches("\n\n\n").count(), 1);
    }

    #[test]
    fn scaling_skips_on_small_machines() {
        assert!(matches!(scaling_check(2, 3, 1, 1).unwrap(), Scaling::Skipped(_)));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("fast".parse::<Strategy>().is_err());
    }
}
