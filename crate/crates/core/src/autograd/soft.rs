//! Differentiable SOFT attention: Gaussian kernel, bottleneck sampling and
//! the unrolled Newton-Raphson pseudoinverse.

use super::{Tape, Var};
use crate::attention::AttentionConfig;
use crate::error::{shape_err, Error, Result};
use crate::kernel::gaussian_coeff;
use crate::pinv::{newton_start, NewtonConfig};
use crate::sampling::{sampled_indices, window_groups, SamplerMethod, SamplerSpec};

/// `exp(−‖q_i − k_j‖² / (2√d))`.
pub fn gaussian_kernel(t: &mut Tape, q: Var, k: Var, d: usize) -> Result<Var> {
    if d == 0 {
        return Err(Error::Domain("kernel width must be positive".into()));
    }
    let dist = t.pairwise_sq_dist(q, k)?;
    let scaled = t.scalar_mul(dist, gaussian_coeff(d))?;
    t.exp(scaled)
}

/// `cfg.max_iters` unrolled steps of `A_{k+1} = 2A_k − A_k·A·A_k` from
/// `A_0 = α·A`. The step size is a frozen scalar: it carries no gradient.
pub fn newton_pinv(t: &mut Tape, a: Var, cfg: &NewtonConfig) -> Result<Var> {
    cfg.validate()?;
    let av = t.value(a).clone();
    let alpha = t.frozen_scalar(|| Ok(newton_start(&av, cfg)?.0.alpha))?;
    let mut a_k = t.scalar_mul(a, alpha)?;
    for step in 0..cfg.max_iters {
        a_k = t.newton_step(a_k, a)?;
        if !t.value(a_k).is_finite() {
            return Err(Error::Numeric {
                step: step + 1,
                msg: "non-finite Newton iterate".into(),
            });
        }
    }
    Ok(a_k)
}

/// Bottleneck tokens `Q̃` from `q` laid out on `grid`. `conv` needs
/// `conv_weights` (`k²·d × d`).
pub fn sample_bottleneck(
    t: &mut Tape,
    q: Var,
    grid: (usize, usize),
    spec: &SamplerSpec,
    conv_weights: Option<Var>,
) -> Result<Var> {
    if t.value(q).rows() != grid.0 * grid.1 {
        return Err(shape_err!(
            "{} tokens on a {}x{} grid",
            t.value(q).rows(),
            grid.0,
            grid.1
        ));
    }
    spec.output_grid(grid)?;
    match spec.method {
        SamplerMethod::AvgPool => t.row_mean(q, window_groups(grid, spec.kernel)),
        SamplerMethod::Conv => {
            let w = conv_weights.ok_or_else(|| shape_err!("conv sampler needs weights"))?;
            let patches = t.unfold(q, window_groups(grid, spec.kernel))?;
            t.matmul(patches, w)
        }
        SamplerMethod::Random | SamplerMethod::Biased => {
            let idx = sampled_indices(spec, grid.0 * grid.1).expect("index sampler");
            t.row_mean(q, idx.into_iter().map(|i| vec![i]).collect())
        }
    }
}

/// One head: `Pᵀ·(NR(A)·(P·v))` with `A = exp(Q̃ ⊖ Q̃)`, `P = exp(Q̃ ⊖ Q)`.
pub fn soft_head(
    t: &mut Tape,
    q_tilde: Var,
    q: Var,
    v: Var,
    d_h: usize,
    newton: &NewtonConfig,
) -> Result<Var> {
    let a = gaussian_kernel(t, q_tilde, q_tilde, d_h)?;
    let p = gaussian_kernel(t, q_tilde, q, d_h)?;
    let a_pinv = newton_pinv(t, a, newton)?;
    let pv = t.matmul(p, v)?;
    let w = t.matmul(a_pinv, pv)?;
    t.matmul_tn(p, w)
}

/// Everything besides `q` and `v` that one attention call needs.
#[derive(Debug, Clone, Copy)]
pub struct SoftInputs<'a> {
    pub grid: (usize, usize),
    pub cfg: &'a AttentionConfig,
    pub conv_weights: Option<Var>,
}

/// Multi-head SOFT attention; sampling runs once before the head split.
pub fn soft_attention(t: &mut Tape, q: Var, v: Var, inputs: SoftInputs<'_>) -> Result<Var> {
    let cfg = inputs.cfg;
    cfg.validate()?;
    let (qv, vv) = (t.value(q), t.value(v));
    if qv.cols() != cfg.d_e || vv.shape() != qv.shape() {
        return Err(shape_err!(
            "attention on {}x{} queries and {}x{} values with d_e = {}",
            qv.rows(),
            qv.cols(),
            vv.rows(),
            vv.cols(),
            cfg.d_e
        ));
    }
    let q_tilde = sample_bottleneck(t, q, inputs.grid, &cfg.sampler, inputs.conv_weights)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let off = h * cfg.d_h;
        let qt = t.col_slice(q_tilde, off, cfg.d_h)?;
        let qh = t.col_slice(q, off, cfg.d_h)?;
        let vh = t.col_slice(v, off, cfg.d_h)?;
        heads.push(soft_head(t, qt, qh, vh, cfg.d_h, &cfg.newton)?);
    }
    if heads.len() == 1 {
        return Ok(heads[0]);
    }
    t.hcat(&heads)
}
