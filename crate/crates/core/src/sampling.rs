//! Bottleneck token selection.
//!
//! Spatial samplers (`avg_pool`, `conv`) slide a non-overlapping `k × k`
//! window over the token grid and emit one token per window, in row-major
//! window order. Index samplers (`random`, `biased`) pick `m` existing
//! tokens.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::kernel::TokenSequence;
use crate::matcore::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    AvgPool,
    Conv,
    Random,
    Biased,
}

impl SamplerMethod {
    pub const ALL: [SamplerMethod; 4] = [
        SamplerMethod::AvgPool,
        SamplerMethod::Conv,
        SamplerMethod::Random,
        SamplerMethod::Biased,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerMethod::AvgPool => "avg_pool",
            SamplerMethod::Conv => "conv",
            SamplerMethod::Random => "random",
            SamplerMethod::Biased => "biased",
        }
    }

    pub fn is_spatial(self) -> bool {
        matches!(self, SamplerMethod::AvgPool | SamplerMethod::Conv)
    }
}

impl fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SamplerMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| domain_err!("unknown sampler '{s}' (avg_pool, conv, random, biased)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub method: SamplerMethod,
    /// Window size and stride for spatial methods.
    #[serde(default = "one")]
    pub kernel: usize,
    pub target_m: usize,
    #[serde(default)]
    pub seed: u64,
    /// `k²·d × d` convolution weights, required by `conv`.
    #[serde(skip)]
    pub conv_weights: Option<Matrix>,
}

fn one() -> usize {
    1
}

impl SamplerSpec {
    pub fn avg_pool(kernel: usize, target_m: usize) -> Self {
        SamplerSpec {
            method: SamplerMethod::AvgPool,
            kernel,
            target_m,
            seed: 0,
            conv_weights: None,
        }
    }

    pub fn conv(kernel: usize, target_m: usize, weights: Matrix) -> Self {
        SamplerSpec {
            method: SamplerMethod::Conv,
            kernel,
            target_m,
            seed: 0,
            conv_weights: Some(weights),
        }
    }

    pub fn random(target_m: usize, seed: u64) -> Self {
        SamplerSpec {
            method: SamplerMethod::Random,
            kernel: 1,
            target_m,
            seed,
            conv_weights: None,
        }
    }

    pub fn biased(target_m: usize) -> Self {
        SamplerSpec {
            method: SamplerMethod::Biased,
            kernel: 1,
            target_m,
            seed: 0,
            conv_weights: None,
        }
    }

    /// Spec for `method` producing `target_m` tokens from an `h × w` grid;
    /// spatial methods derive the window size from the grid.
    pub fn for_grid(
        method: SamplerMethod,
        grid: (usize, usize),
        target_m: usize,
        seed: u64,
    ) -> Result<Self> {
        let kernel = if method.is_spatial() {
            spatial_kernel_for(grid, target_m)?
        } else {
            1
        };
        Ok(SamplerSpec {
            method,
            kernel,
            target_m,
            seed,
            conv_weights: None,
        })
    }

    /// Check the spec against a grid and return the bottleneck grid shape.
    pub fn output_grid(&self, grid: (usize, usize)) -> Result<(usize, usize)> {
        let (h, w) = grid;
        let n = h * w;
        if self.target_m == 0 {
            return Err(domain_err!("target_m must be positive"));
        }
        if self.method.is_spatial() {
            let k = self.kernel;
            if k == 0 || h % k != 0 || w % k != 0 {
                return Err(shape_err!("grid {h}x{w} is not divisible by window {k}"));
            }
            let (oh, ow) = (h / k, w / k);
            if oh * ow != self.target_m {
                return Err(shape_err!(
                    "window {k} on grid {h}x{w} yields {} tokens, not {}; valid m: {:?}",
                    oh * ow,
                    self.target_m,
                    valid_spatial_m(grid)
                ));
            }
            Ok((oh, ow))
        } else {
            if self.target_m > n {
                return Err(domain_err!("cannot pick {} of {n} tokens", self.target_m));
            }
            Ok((self.target_m, 1))
        }
    }
}

/// Bottleneck sizes reachable by a square window on `grid`, ascending.
pub fn valid_spatial_m(grid: (usize, usize)) -> Vec<usize> {
    let (h, w) = grid;
    (1..=h.min(w))
        .rev()
        .filter(|k| h % k == 0 && w % k == 0)
        .map(|k| (h / k) * (w / k))
        .collect()
}

/// Window size giving exactly `target_m` tokens on `grid`.
pub fn spatial_kernel_for(grid: (usize, usize), target_m: usize) -> Result<usize> {
    let (h, w) = grid;
    (1..=h.min(w))
        .find(|&k| h % k == 0 && w % k == 0 && (h / k) * (w / k) == target_m)
        .ok_or_else(|| {
            shape_err!(
                "no square window yields m = {target_m} on grid {h}x{w}; valid m: {:?}",
                valid_spatial_m(grid)
            )
        })
}

/// Weights that make `conv` reproduce `avg_pool`: each output channel
/// averages its own input channel over the window.
pub fn averaging_stencil(kernel: usize, d: usize) -> Matrix {
    let k2 = kernel * kernel;
    let w = 1.0 / k2 as Real;
    Matrix::from_fn(k2 * d, d, |r, c| if r % d == c { w } else { 0.0 })
}

/// Sorted indices of an `m`-subset of `0..n`, reproducible from `seed`.
pub fn random_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    idx
}

/// Row indices an index sampler would pick, or `None` for spatial methods.
pub fn sampled_indices(spec: &SamplerSpec, n: usize) -> Option<Vec<usize>> {
    match spec.method {
        SamplerMethod::Random => Some(random_indices(n, spec.target_m, spec.seed)),
        SamplerMethod::Biased => Some((0..spec.target_m).collect()),
        _ => None,
    }
}

/// Produce the bottleneck tokens `Q̃` for `q`.
pub fn sample(q: &TokenSequence, spec: &SamplerSpec) -> Result<TokenSequence> {
    let (oh, ow) = spec.output_grid(q.grid())?;
    let feats = match spec.method {
        SamplerMethod::AvgPool => avg_pool(q, spec.kernel)?,
        SamplerMethod::Conv => return conv_sample(q, spec),
        SamplerMethod::Random | SamplerMethod::Biased => {
            let idx = sampled_indices(spec, q.len()).expect("index sampler");
            q.features().select_rows(&idx)?
        }
    };
    TokenSequence::new(feats, oh, ow)
}

fn avg_pool(q: &TokenSequence, k: usize) -> Result<Matrix> {
    let (h, w) = q.grid();
    let d = q.dim();
    let (oh, ow) = (h / k, w / k);
    let x = q.features();
    let inv = 1.0 / (k * k) as Real;
    let mut out = Matrix::zeros(oh * ow, d);
    for by in 0..oh {
        for bx in 0..ow {
            let o = out.row_mut(by * ow + bx);
            for dy in 0..k {
                for dx in 0..k {
                    let t = (by * k + dy) * w + bx * k + dx;
                    for (oc, &xc) in o.iter_mut().zip(x.row(t)) {
                        *oc += xc;
                    }
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(out)
}

/// Token indices of each `k × k` window, windows row-major and tokens
/// row-major within a window.
pub fn window_groups(grid: (usize, usize), k: usize) -> Vec<Vec<usize>> {
    let (h, w) = grid;
    let (oh, ow) = (h / k, w / k);
    let mut groups = Vec::with_capacity(oh * ow);
    for by in 0..oh {
        for bx in 0..ow {
            let g = (0..k * k)
                .map(|i| (by * k + i / k) * w + bx * k + i % k)
                .collect();
            groups.push(g);
        }
    }
    groups
}

/// Gather each `k × k` window into one row of `k²·d` values
/// (window row-major, channels fastest).
pub fn unfold_windows(x: &Matrix, grid: (usize, usize), k: usize) -> Result<Matrix> {
    let (h, w) = grid;
    if h * w != x.rows() || k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err!("cannot tile {h}x{w} grid with window {k}"));
    }
    let d = x.cols();
    let (oh, ow) = (h / k, w / k);
    let mut out = Matrix::zeros(oh * ow, k * k * d);
    for by in 0..oh {
        for bx in 0..ow {
            let o = out.row_mut(by * ow + bx);
            for dy in 0..k {
                for dx in 0..k {
                    let t = (by * k + dy) * w + bx * k + dx;
                    let off = (dy * k + dx) * d;
                    o[off..off + d].copy_from_slice(x.row(t));
                }
            }
        }
    }
    Ok(out)
}

/// Strided `k × k` convolution without bias.
pub fn conv_sample(q: &TokenSequence, spec: &SamplerSpec) -> Result<TokenSequence> {
    let (oh, ow) = SamplerSpec {
        method: SamplerMethod::Conv,
        conv_weights: None,
        ..spec.clone()
    }
    .output_grid(q.grid())?;
    let d = q.dim();
    let k = spec.kernel;
    let w = spec
        .conv_weights
        .as_ref()
        .ok_or_else(|| shape_err!("conv sampler needs weights"))?;
    if w.shape() != (k * k * d, d) {
        return Err(shape_err!(
            "conv weights are {}x{}, expected {}x{d}",
            w.rows(),
            w.cols(),
            k * k * d
        ));
    }
    let patches = unfold_windows(q.features(), q.grid(), k)?;
    TokenSequence::new(patches.matmul(w)?, oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(n_h: usize, n_w: usize, d: usize, seed: u64) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenSequence::new(Matrix::random_normal(n_h * n_w, d, 1.0, &mut rng), n_h, n_w).unwrap()
    }

    #[test]
    fn avg_pool_identity_window() {
        let q = seq(4, 6, 3, 1);
        let out = sample(&q, &SamplerSpec::avg_pool(1, 24)).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn avg_pool_mean_of_four() {
        let x = Matrix::from_rows(&[[1.0], [3.0], [5.0], [7.0]]).unwrap();
        let q = TokenSequence::new(x, 2, 2).unwrap();
        let out = sample(&q, &SamplerSpec::avg_pool(2, 1)).unwrap();
        assert_eq!(out.features().as_slice(), &[4.0]);
        assert_eq!(out.grid(), (1, 1));
    }

    #[test]
    fn biased_takes_leading_rows() {
        let q = seq(10, 10, 4, 2);
        let out = sample(&q, &SamplerSpec::biased(49)).unwrap();
        assert_eq!(out.features(), &q.features().row_block(0, 49).unwrap());
        assert_eq!(out.grid(), (49, 1));
    }

    #[test]
    fn random_is_reproducible_subset() {
        let q = seq(10, 10, 2, 3);
        let spec = SamplerSpec::random(20, 77);
        let a = sample(&q, &spec).unwrap();
        let b = sample(&q, &spec).unwrap();
        assert_eq!(a, b);
        let idx = random_indices(100, 20, 77);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.features(), &q.features().select_rows(&idx).unwrap());
        assert_ne!(idx, random_indices(100, 20, 78));
    }

    #[test]
    fn sampler_errors() {
        let q = seq(4, 6, 2, 4);
        assert!(matches!(
            sample(&q, &SamplerSpec::avg_pool(4, 1)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            sample(&q, &SamplerSpec::avg_pool(2, 5)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            sample(&q, &SamplerSpec::random(25, 0)),
            Err(Error::Domain(_))
        ));
        let missing = SamplerSpec {
            conv_weights: None,
            ..SamplerSpec::conv(2, 6, Matrix::zeros(1, 1))
        };
        assert!(matches!(conv_sample(&q, &missing), Err(Error::Shape(_))));
        let wrong = SamplerSpec::conv(2, 6, Matrix::zeros(7, 2));
        assert!(matches!(conv_sample(&q, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_with_stencil_equals_avg_pool() {
        let q = seq(6, 4, 3, 5);
        let pooled = sample(&q, &SamplerSpec::avg_pool(2, 6)).unwrap();
        let conv = sample(&q, &SamplerSpec::conv(2, 6, averaging_stencil(2, 3))).unwrap();
        assert!(conv.features().max_abs_diff(pooled.features()).unwrap() <= 1e-12);
        assert_eq!(conv.grid(), pooled.grid());
    }

    #[test]
    fn conv_with_zero_weights() {
        let q = seq(4, 4, 3, 6);
        let out = sample(&q, &SamplerSpec::conv(2, 4, Matrix::zeros(12, 3))).unwrap();
        assert_eq!(out.features(), &Matrix::zeros(4, 3));
    }

    #[test]
    fn conv_matches_window_loop() {
        let q = seq(4, 4, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::random_normal(12, 3, 1.0, &mut rng);
        let out = sample(&q, &SamplerSpec::conv(2, 4, w.clone())).unwrap();
        let x = q.features();
        let oracle = Matrix::from_fn(4, 3, |o, c| {
            let (by, bx) = (o / 2, o % 2);
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let t = (2 * by + dy) * 4 + 2 * bx + dx;
                    for ch in 0..3 {
                        s += x[(t, ch)] * w[((dy * 2 + dx) * 3 + ch, c)];
                    }
                }
            }
            s
        });
        assert!(out.features().max_abs_diff(&oracle).unwrap() <= 1e-10);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in SamplerMethod::ALL {
            assert_eq!(m.name().parse::<SamplerMethod>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("pool".parse::<SamplerMethod>().is_err());
    }

    #[test]
    fn kernel_derivation() {
        assert_eq!(spatial_kernel_for((8, 8), 16).unwrap(), 2);
        assert_eq!(valid_spatial_m((8, 8)), vec![1, 4, 16, 64]);
        assert!(spatial_kernel_for((8, 8), 49).is_err());
    }

    proptest! {
        #[test]
        fn avg_pool_stays_in_window_hull(seed in 0u64..1000, k in 1usize..4) {
            let q = seq(3 * k, 2 * k, 2, seed);
            let out = sample(&q, &SamplerSpec::avg_pool(k, 6)).unwrap();
            let w = 2 * k;
            for by in 0..3 {
                for bx in 0..2 {
                    for c in 0..2 {
                        let vals: Vec<Real> = (0..k * k)
                            .map(|i| q.features()[((by * k + i / k) * w + bx * k + i % k, c)])
                            .collect();
                        let lo = vals.iter().cloned().fold(Real::INFINITY, Real::min);
                        let hi = vals.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                        let v = out.features()[(by * 2 + bx, c)];
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
