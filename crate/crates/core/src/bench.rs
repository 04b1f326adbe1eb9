//! Local-window versus all-pairs cost of the affinity pipeline
//! (distances, distance MLP, softmax, reconstruction).
//!
//! Global mode is the same pipeline with a window wide enough to cover the
//! whole map, so both modes share one instrumented code path.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{RaaError, Result};
use crate::par;
use crate::raa::{affinity_pipeline, build_neighborhoods, OpCounter, RaaConfig, RaaParams};
use crate::tensor::Tensor;

/// Global mode runs only up to this many pixels.
pub const GLOBAL_MAX_PIXELS: usize = 1024;
pub const LOCAL_FLOP_RATIO: (f64, f64) = (3.6, 4.4);
pub const LOCAL_TIME_BAND: (f64, f64) = (2.5, 6.5);
pub const GLOBAL_TIME_BAND: (f64, f64) = (10.0, 24.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Local,
    Global,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Local => "local",
            BenchMode::Global => "global",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub windows: Vec<usize>,
    pub repeats: usize,
    pub d_proj: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![8, 16, 32, 64],
            windows: vec![3, 5],
            repeats: 11,
            d_proj: 32,
            mlp_hidden: 16,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    /// Local window side; for global rows, the covering window `2·size − 1`.
    pub window: usize,
    pub mode: BenchMode,
    pub pairs: usize,
    pub flops: u64,
    pub median_secs: f64,
    /// Bytes held by the map, per-pair intermediates and the output.
    pub working_set_bytes: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn measure(fm: &Tensor, params: &RaaParams, config: &RaaConfig, window: usize, mode: BenchMode, repeats: usize) -> Result<BenchRow> {
    let size = fm.shape()[0];
    let nb = build_neighborhoods(size, size, window, config.include_self)?;
    let mut ops = OpCounter::default();
    // warm-up doubles as the counted run
    affinity_pipeline(fm, params, config.mlp_activation, &nb, &mut ops)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let out = affinity_pipeline(fm, params, config.mlp_activation, &nb, &mut OpCounter::default())?;
        times.push(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let pairs = nb.pair_count();
    let per_pair = 3 + config.mlp_hidden;
    Ok(BenchRow {
        size,
        window,
        mode,
        pairs,
        flops: ops.flops,
        median_secs: median(times).max(f64::MIN_POSITIVE),
        working_set_bytes: 8 * (2 * fm.len() + pairs * per_pair),
    })
}

/// Local rows for every (size, window); one global row per size within
/// [`GLOBAL_MAX_PIXELS`]. Runs with parallelism disabled.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if config.repeats == 0 || config.sizes.is_empty() || config.windows.is_empty() {
        return Err(RaaError::Config("bench needs sizes, windows and repeats >= 1".into()));
    }
    let was_parallel = par::parallel_enabled();
    par::set_parallel(false);
    let result = run_sequential(config);
    par::set_parallel(was_parallel);
    result
}

fn run_sequential(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut raa = RaaConfig::new(config.d_proj, config.d_proj);
    raa.mlp_hidden = config.mlp_hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = RaaParams::init(&raa, &mut rng)?;
    let mut rows = Vec::new();
    for &size in &config.sizes {
        if size == 0 {
            return Err(RaaError::Config("bench sizes must be >= 1".into()));
        }
        let data = (0..size * size * config.d_proj).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fm = Tensor::new(vec![size, size, config.d_proj], data)?;
        for &window in &config.windows {
            rows.push(measure(&fm, &params, &raa, window, BenchMode::Local, config.repeats)?);
        }
        if size * size <= GLOBAL_MAX_PIXELS {
            rows.push(measure(&fm, &params, &raa, 2 * size - 1, BenchMode::Global, config.repeats)?);
        }
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str = "size,window,mode,pairs,flops,median_secs,working_set_bytes";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{BENCH_HEADER}");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.size,
            r.window,
            r.mode.as_str(),
            r.pairs,
            r.flops,
            r.median_secs,
            r.working_set_bytes
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioCheck {
    pub label: String,
    pub observed: f64,
    pub lo: f64,
    pub hi: f64,
}

impl RatioCheck {
    pub fn passed(&self) -> bool {
        self.lo <= self.observed && self.observed <= self.hi
    }
}

/// Border truncation is small when interior pixels make up at least half the grid.
pub fn interior_dominated(size: usize, window: usize) -> bool {
    size + 1 > window && 2 * (size + 1 - window).pow(2) >= size * size
}

fn find(rows: &[BenchRow], size: usize, mode: BenchMode, window: Option<usize>) -> Option<&BenchRow> {
    rows.iter()
        .find(|r| r.size == size && r.mode == mode && window.is_none_or(|w| r.window == w))
}

/// Scaling checks between sizes `s` and `2s`:
/// local FLOPs 4× ± 10% on interior-dominated grids, global FLOPs exactly
/// 16×, local wall time 32→64 and global wall time 16→32 within their bands.
pub fn ratio_checks(rows: &[BenchRow]) -> Vec<RatioCheck> {
    let mut checks = Vec::new();
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut windows: Vec<usize> = rows.iter().filter(|r| r.mode == BenchMode::Local).map(|r| r.window).collect();
    windows.sort_unstable();
    windows.dedup();
    for &s in &sizes {
        let t = 2 * s;
        for &w in &windows {
            let (Some(a), Some(b)) = (find(rows, s, BenchMode::Local, Some(w)), find(rows, t, BenchMode::Local, Some(w))) else {
                continue;
            };
            if interior_dominated(s, w) {
                checks.push(RatioCheck {
                    label: format!("local flops k={w} {s}->{t}"),
                    observed: b.flops as f64 / a.flops as f64,
                    lo: LOCAL_FLOP_RATIO.0,
                    hi: LOCAL_FLOP_RATIO.1,
                });
            }
            if s == 32 {
                checks.push(RatioCheck {
                    label: format!("local time k={w} {s}->{t}"),
                    observed: b.median_secs / a.median_secs,
                    lo: LOCAL_TIME_BAND.0,
                    hi: LOCAL_TIME_BAND.1,
                });
            }
        }
        if let (Some(a), Some(b)) = (find(rows, s, BenchMode::Global, None), find(rows, t, BenchMode::Global, None)) {
            checks.push(RatioCheck {
                label: format!("global flops {s}->{t}"),
                observed: b.flops as f64 / a.flops as f64,
                lo: 16.0,
                hi: 16.0,
            });
            if s == 16 {
                checks.push(RatioCheck {
                    label: format!("global time {s}->{t}"),
                    observed: b.median_secs / a.median_secs,
                    lo: GLOBAL_TIME_BAND.0,
                    hi: GLOBAL_TIME_BAND.1,
                });
            }
        }
    }
    checks
}
