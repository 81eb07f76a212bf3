//! Inference benchmarking: warmup, a strictly sequential timed loop, peak
//! memory sampled by an observer thread, and the comparison table.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RegenError, Result};
use crate::fsio::{read_json, write_json};
use crate::runtime::OnnxSession;
use crate::scalar::Scalar;
use crate::student::{Generator, StudentModel};
use crate::teacher::Teacher;
use crate::tensor::{Shape, Tensor};

pub const MIN_WARMUP: usize = 5;
pub const MIN_TIMED: usize = 30;
pub const DEFAULT_RESOLUTION: (usize, usize) = (960, 512);
/// Allowed relative disagreement between `fps` and `1000 / ms_per_iter`.
pub const FPS_TOLERANCE: f64 = 0.01;

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method_name: String,
    pub kid_x100: Option<f64>,
    pub fid: Option<f64>,
    /// Median wall time per inference call.
    pub ms_per_iter: f64,
    pub ms_p99: f64,
    /// Peak resident memory of the benchmarking process in GB, when the
    /// platform exposes it.
    pub memory_gb: Option<f64>,
    pub fps: f64,
    /// `(width, height)`.
    pub resolution: (usize, usize),
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub environment: String,
}

impl BenchReport {
    /// Check the definitional invariants of a report.
    pub fn validate(&self) -> Result<()> {
        if !(self.ms_per_iter > 0.0 && self.ms_per_iter.is_finite()) {
            return Err(RegenError::invalid(format!(
                "{}: ms_per_iter must be positive, got {}",
                self.method_name, self.ms_per_iter
            )));
        }
        let expected = 1000.0 / self.ms_per_iter;
        if (self.fps - expected).abs() > FPS_TOLERANCE * expected {
            return Err(RegenError::invalid(format!(
                "{}: fps {} disagrees with 1000 / {} ms = {expected:.4}",
                self.method_name, self.fps, self.ms_per_iter
            )));
        }
        if self.timed_iters < MIN_TIMED {
            return Err(RegenError::invalid(format!(
                "{}: {} timed iterations, need at least {MIN_TIMED}",
                self.method_name, self.timed_iters
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: BenchReport = read_json(path)?;
        r.validate().map_err(|e| RegenError::Schema(format!("{}: {e}", path.display())))?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Something that enhances one `1 x 3 x h x w` frame per call.
pub trait BenchTarget {
    /// Run one synchronous inference; the call must not return before the
    /// output is fully computed.
    fn run(&mut self, frame: &Tensor<f32>) -> Result<Tensor<f32>>;

    /// Bytes the target expects to allocate for one call, if known.
    fn estimated_bytes(&self, _frame: Shape) -> Option<u64> {
        None
    }
}

/// The in-framework student, at its native scalar type.
pub struct StudentTarget<'a, T: Scalar>(pub &'a StudentModel<T>);

impl<T: Scalar> BenchTarget for StudentTarget<'_, T> {
    fn run(&mut self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.0.infer(&frame.cast::<T>())?.cast())
    }

    fn estimated_bytes(&self, frame: Shape) -> Option<u64> {
        let arch = &self.0.config.arch;
        let elems = Generator::<T>::peak_activation_len(arch, frame).ok()? + Generator::<T>::param_count(arch);
        Some((elems * std::mem::size_of::<T>()) as u64)
    }
}

impl BenchTarget for OnnxSession {
    fn run(&mut self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        OnnxSession::run(self, frame)
    }
}

/// A teacher run frame by frame as the slow enhancer.
pub struct TeacherTarget<'a>(pub &'a dyn Teacher<f32>);

impl BenchTarget for TeacherTarget<'_> {
    fn run(&mut self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.0.enhance(frame, "bench")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub method_name: String,
    /// `(width, height)`.
    pub resolution: (usize, usize),
    pub warmup: usize,
    pub iters: usize,
    /// Seed of the synthetic input frame.
    pub seed: u64,
    pub kid_x100: Option<f64>,
    pub fid: Option<f64>,
    /// Extra text appended to the detected environment descriptor.
    pub environment_note: Option<String>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            method_name: "model".into(),
            resolution: DEFAULT_RESOLUTION,
            warmup: 20,
            iters: 200,
            seed: 0,
            kid_x100: None,
            fid: None,
            environment_note: None,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < MIN_WARMUP {
            return Err(RegenError::config("warmup", format!("must be at least {MIN_WARMUP}")));
        }
        if self.iters < MIN_TIMED {
            return Err(RegenError::config("iters", format!("must be at least {MIN_TIMED}")));
        }
        let (w, h) = self.resolution;
        if w == 0 || h == 0 {
            return Err(RegenError::config("resolution", "both sides must be positive"));
        }
        Ok(())
    }
}

/// Median of a sample; the mean of the two middle values for even sizes.
pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "median of an empty sample");
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Nearest-rank percentile, `q` in `(0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "percentile of an empty sample");
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Resident set size of this process in bytes, where available.
pub fn current_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn available_memory_bytes() -> Option<u64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Samples RSS on its own thread until dropped; never touches the timed loop.
struct MemoryObserver {
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<Option<u64>>>,
}

impl MemoryObserver {
    fn start() -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            let mut peak = current_rss_bytes();
            while !flag.load(Ordering::Relaxed) {
                if let Some(v) = current_rss_bytes() {
                    peak = Some(peak.map_or(v, |p| p.max(v)));
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            peak
        });
        MemoryObserver {
            stop,
            handle: Some(handle),
        }
    }

    fn finish(mut self) -> Option<u64> {
        self.stop.store(true, Ordering::Relaxed);
        let last = current_rss_bytes();
        let peak = self.handle.take().and_then(|h| h.join().ok()).flatten();
        match (peak, last) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        }
    }
}

impl Drop for MemoryObserver {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Short description of the machine the benchmark ran on.
pub fn environment_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{} {} cpu ({model}, {cpus} threads available)",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Deterministic benchmark input in `[-1, 1]`.
pub fn bench_frame((w, h): (usize, usize), seed: u64) -> Tensor<f32> {
    Tensor::uniform(Shape::new(1, 3, h, w), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Time `target` on a fixed frame. Refuses to start, with
/// [`RegenError::OutOfMemory`], when the target's own estimate exceeds the
/// memory currently available.
pub fn bench(target: &mut dyn BenchTarget, opts: &BenchOptions) -> Result<BenchReport> {
    opts.validate()?;
    let frame = bench_frame(opts.resolution, opts.seed);
    if let (Some(need), Some(avail)) = (target.estimated_bytes(frame.shape()), available_memory_bytes()) {
        if need > avail {
            return Err(RegenError::OutOfMemory {
                needed_bytes: need,
                available_bytes: avail,
            });
        }
    }
    let observer = MemoryObserver::start();
    for _ in 0..opts.warmup {
        std::hint::black_box(target.run(&frame)?);
    }
    let mut times = Vec::with_capacity(opts.iters);
    for _ in 0..opts.iters {
        let t0 = Instant::now();
        let out = target.run(std::hint::black_box(&frame))?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let peak = observer.finish();
    times.sort_by(f64::total_cmp);
    let ms = median(&times);
    let mut environment = environment_descriptor();
    if let Some(note) = &opts.environment_note {
        environment.push_str("; ");
        environment.push_str(note);
    }
    let report = BenchReport {
        method_name: opts.method_name.clone(),
        kid_x100: opts.kid_x100,
        fid: opts.fid,
        ms_per_iter: ms,
        ms_p99: percentile(&times, 99.0),
        memory_gb: peak.map(|b| b as f64 / 1e9),
        fps: 1000.0 / ms,
        resolution: opts.resolution,
        warmup_iters: opts.warmup,
        timed_iters: opts.iters,
        environment,
    };
    report.validate()?;
    Ok(report)
}

/// `slow.ms_per_iter / fast.ms_per_iter` between two named rows.
pub fn speedup(reports: &[BenchReport], slow: &str, fast: &str) -> Result<f64> {
    let find = |name: &str| {
        reports
            .iter()
            .find(|r| r.method_name == name)
            .ok_or_else(|| RegenError::invalid(format!("no report named {name:?}")))
    };
    Ok(find(slow)?.ms_per_iter / find(fast)?.ms_per_iter)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "--".to_string(), |x| format!("{x:.2}"))
}

/// Rendered comparison table plus the requested speedup ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub text: String,
    /// `(slow, fast, ratio)` for each requested pair.
    pub speedups: Vec<(String, String, f64)>,
}

/// Markdown table `Method | KID×100 | FID | ms/iter | Memory (GB) | FPS`,
/// followed by one `Speedup` line per `(slow, fast)` pair.
pub fn compare_table(reports: &[BenchReport], pairs: &[(String, String)]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(RegenError::invalid("comparison table needs at least one report"));
    }
    let mut seen = std::collections::HashSet::new();
    for r in reports {
        if !seen.insert(r.method_name.as_str()) {
            return Err(RegenError::DuplicateMethod(r.method_name.clone()));
        }
    }
    let mut text = String::from("| Method | KID×100 | FID | ms/iter | Memory (GB) | FPS |\n");
    text.push_str("|---|---|---|---|---|---|\n");
    for r in reports {
        text.push_str(&format!(
            "| {} | {} | {} | {:.2} | {} | {:.2} |\n",
            r.method_name,
            cell(r.kid_x100),
            cell(r.fid),
            r.ms_per_iter,
            cell(r.memory_gb),
            r.fps
        ));
    }
    let mut speedups = Vec::new();
    for (slow, fast) in pairs {
        let ratio = speedup(reports, slow, fast)?;
        text.push_str(&format!("\nSpeedup {fast} vs {slow}: {ratio:.2}x"));
        speedups.push((slow.clone(), fast.clone(), ratio));
    }
    if !pairs.is_empty() {
        text.push('\n');
    }
    Ok(ComparisonTable { text, speedups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, ms: f64) -> BenchReport {
        BenchReport {
            method_name: name.into(),
            kid_x100: None,
            fid: None,
            ms_per_iter: ms,
            ms_p99: ms,
            memory_gb: None,
            fps: 1000.0 / ms,
            resolution: (960, 512),
            warmup_iters: 20,
            timed_iters: 200,
            environment: "test".into(),
        }
    }

    struct Sleeper(Duration);

    impl BenchTarget for Sleeper {
        fn run(&mut self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
            std::thread::sleep(self.0);
            Ok(frame.clone())
        }
    }

    struct Greedy;

    impl BenchTarget for Greedy {
        fn run(&mut self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(frame.clone())
        }

        fn estimated_bytes(&self, _: Shape) -> Option<u64> {
            Some(u64::MAX)
        }
    }

    #[test]
    fn table_one_rows_are_fps_consistent() {
        for (ms, fps) in [(33.53, 29.83), (1110.0, 0.9), (47.7, 20.96)] {
            let mut r = row("m", ms);
            assert!((r.fps - fps).abs() < 0.01, "{} vs {fps}", r.fps);
            r.fps = fps;
            r.validate().unwrap();
        }
    }

    #[test]
    fn median_and_percentile() {
        assert_eq!(median(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 99.0), 99.0);
        assert_eq!(percentile(&xs, 100.0), 100.0);
        assert_eq!(percentile(&[5.0], 99.0), 5.0);
    }

    #[test]
    fn bench_measures_sleep_and_is_consistent() {
        let opts = BenchOptions {
            method_name: "sleep".into(),
            resolution: (8, 8),
            warmup: 5,
            iters: 30,
            ..BenchOptions::default()
        };
        let r = bench(&mut Sleeper(Duration::from_millis(2)), &opts).unwrap();
        assert!(r.ms_per_iter >= 2.0, "{r:?}");
        assert!(r.ms_p99 >= r.ms_per_iter);
        assert!((r.fps * r.ms_per_iter - 1000.0).abs() < 1e-6);
        assert_eq!((r.warmup_iters, r.timed_iters), (5, 30));
    }

    #[test]
    fn protocol_minimums_enforced() {
        let mut opts = BenchOptions {
            resolution: (8, 8),
            warmup: 4,
            ..BenchOptions::default()
        };
        assert!(matches!(bench(&mut Greedy, &opts), Err(RegenError::Config { .. })));
        opts.warmup = 5;
        opts.iters = 29;
        assert!(matches!(bench(&mut Greedy, &opts), Err(RegenError::Config { .. })));
    }

    #[test]
    fn oversized_target_reports_out_of_memory() {
        let opts = BenchOptions {
            resolution: (8, 8),
            ..BenchOptions::default()
        };
        if available_memory_bytes().is_some() {
            assert!(matches!(bench(&mut Greedy, &opts), Err(RegenError::OutOfMemory { .. })));
        }
    }

    #[test]
    fn table_speedup_and_placeholders() {
        let mut regen = row("REGEN", 33.53);
        regen.kid_x100 = Some(3.38);
        regen.fid = Some(39.62);
        let rows = vec![row("EPE", 1110.0), regen];
        let t = compare_table(&rows, &[("EPE".into(), "REGEN".into())]).unwrap();
        assert!((t.speedups[0].2 - 33.105).abs() < 1e-3);
        assert!(t.text.contains("| EPE | -- | -- | 1110.00 | -- | 0.90 |"));
        assert!(t.text.contains("| REGEN | 3.38 | 39.62 | 33.53 | -- | 29.82 |"));
        assert!(t.text.contains("33.10x"));
        let single = compare_table(&rows[..1], &[]).unwrap();
        assert_eq!(single.text.lines().count(), 3);
    }

    #[test]
    fn duplicate_names_rejected() {
        let rows = vec![row("A", 1.0), row("A", 2.0)];
        assert!(matches!(compare_table(&rows, &[]), Err(RegenError::DuplicateMethod(n)) if n == "A"));
    }

    #[test]
    fn inconsistent_fps_rejected() {
        let mut r = row("x", 10.0);
        r.fps = 98.9;
        assert!(r.validate().is_err());
        r.fps = 100.5;
        assert!(r.validate().is_ok());
    }

    #[test]
    fn report_json_uses_exact_field_names() {
        let v = serde_json::to_value(row("m", 10.0)).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            [
                "environment",
                "fid",
                "fps",
                "kid_x100",
                "memory_gb",
                "method_name",
                "ms_p99",
                "ms_per_iter",
                "resolution",
                "timed_iters",
                "warmup_iters"
            ]
        );
    }
}
