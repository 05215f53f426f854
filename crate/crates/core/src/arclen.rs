//! Arc-length estimation from a Cartesian position.
//!
//! The centerline is sampled on a uniform arc-length grid. A query first picks
//! the nearest grid sample (within a window around the previous estimate, or
//! globally through the k-d tree when there is no prior) and then refines the
//! closest point by golden-section search over the two adjacent bins.

use nalgebra::Vector3;

use crate::error::ConfigError;
use crate::kdtree::{nearest_linear, KdTree};
use crate::track::Centerline;

/// Defaults used when building an index from configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcIndexOptions {
    /// Target bin width [m]; the sample count is derived from the track length.
    pub bin_width: f64,
    /// Half-width of the search window around the previous estimate, in bins.
    pub window: usize,
}

impl Default for ArcIndexOptions {
    fn default() -> Self {
        Self { bin_width: 0.05, window: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct ArcIndex {
    samples: Vec<f64>,
    positions: Vec<[f64; 3]>,
    tree: KdTree<3>,
    bin_width: f64,
    window: usize,
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;
const S_TOL: f64 = 1e-6;
const MAX_EVALS: usize = 50;

impl ArcIndex {
    /// Uniform samples over the full centerline domain.
    pub fn build(cl: &Centerline, n_samples: usize, window: usize) -> Result<Self, ConfigError> {
        if n_samples < 2 {
            return Err(ConfigError::range("arclen.n_samples", "must be >= 2"));
        }
        let (lo, hi) = cl.domain();
        let bin_width = (hi - lo) / (n_samples - 1) as f64;
        let samples: Vec<f64> = (0..n_samples).map(|i| lo + bin_width * i as f64).collect();
        let positions: Vec<[f64; 3]> = samples.iter().map(|&s| cl.position(s).into()).collect();
        let tree = KdTree::new(positions.clone());
        Ok(Self { samples, positions, tree, bin_width, window: window.max(1) })
    }

    pub fn with_options(cl: &Centerline, opts: ArcIndexOptions) -> Result<Self, ConfigError> {
        if !(opts.bin_width > 0.0) {
            return Err(ConfigError::range("arclen.bin_width", "must be > 0"));
        }
        let (lo, hi) = cl.domain();
        let n = ((hi - lo) / opts.bin_width).ceil() as usize + 1;
        Self::build(cl, n.max(2), opts.window)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Nearest sample over the whole track through the k-d tree.
    pub fn nearest_sample(&self, p: &Vector3<f64>) -> usize {
        self.tree.nearest(&(*p).into()).expect("index has >= 2 samples").index
    }

    /// Nearest sample over the whole track by linear scan.
    pub fn nearest_sample_linear(&self, p: &Vector3<f64>) -> usize {
        nearest_linear(&self.positions, &(*p).into()).expect("index has >= 2 samples").index
    }

    fn sample_index(&self, s: f64) -> usize {
        let i = ((s - self.samples[0]) / self.bin_width).round();
        (i.max(0.0) as usize).min(self.samples.len() - 1)
    }

    /// Nearest sample among those within `window` bins of `s_prev`.
    pub fn nearest_sample_near(&self, p: &Vector3<f64>, s_prev: f64) -> usize {
        let c = self.sample_index(s_prev);
        let lo = c.saturating_sub(self.window);
        let hi = (c + self.window).min(self.samples.len() - 1);
        let q: [f64; 3] = (*p).into();
        let local = nearest_linear(&self.positions[lo..=hi], &q).expect("window is non-empty");
        lo + local.index
    }

    /// Closest-point arc length for `p`. `s_prev = None` searches the whole track.
    pub fn estimate(&self, cl: &Centerline, p: &Vector3<f64>, s_prev: Option<f64>) -> f64 {
        let i = match s_prev {
            Some(s) => self.nearest_sample_near(p, s),
            None => self.nearest_sample(p),
        };
        let a = self.samples[i.saturating_sub(1)];
        let b = self.samples[(i + 1).min(self.samples.len() - 1)];
        golden_section(|s| (cl.position(s) - p).norm_squared(), a, b)
    }
}

/// Minimize a unimodal function on `[a, b]`; endpoints are candidates too.
fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let (a0, b0) = (a, b);
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut evals = 2;
    while (b - a) > S_TOL && evals < MAX_EVALS - 2 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
        evals += 1;
    }
    let mid = 0.5 * (a + b);
    // boundary minimizers: the bracket collapses onto an endpoint
    let candidates = [(mid, f(mid)), (a0, f(a0)), (b0, f(b0))];
    candidates.iter().min_by(|x, y| x.1.total_cmp(&y.1)).map(|c| c.0).unwrap_or(mid)
}
