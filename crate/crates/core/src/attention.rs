//! Linear-cost Gaussian attention through a Nyström factorisation, and
//! the dense oracles it approximates.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::kernel::{
    gaussian_attention_matrix, softmax_attention_matrix, ExactKernel, TokenSequence,
};
use crate::matcore::{Matrix, Real};
use crate::pinv::{newton_pinv, NewtonConfig, PinvReport};
use crate::sampling::{sample, SamplerSpec};

/// Largest `n` for which the dense `n × n` matrices may be materialised by
/// [`approximation_error`] and the debug path.
pub const DENSE_GUARD: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_e: usize,
    pub heads: usize,
    pub d_h: usize,
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub newton: NewtonConfig,
    /// Materialise `Ŝ` per head. Quadratic in `n`; for inspection only.
    #[serde(default)]
    pub keep_s_hat: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d_e: 64,
            heads: 2,
            d_h: 32,
            sampler: SamplerSpec::avg_pool(2, 49),
            newton: NewtonConfig::default(),
            keep_s_hat: false,
        }
    }
}

impl AttentionConfig {
    pub fn new(d_e: usize, heads: usize, sampler: SamplerSpec) -> Result<Self> {
        if heads == 0 || !d_e.is_multiple_of(heads) {
            return Err(domain_err!("d_e = {d_e} does not split into {heads} heads"));
        }
        Ok(AttentionConfig {
            d_e,
            heads,
            d_h: d_e / heads,
            sampler,
            newton: NewtonConfig::default(),
            keep_s_hat: false,
        })
    }

    pub fn with_newton(mut self, newton: NewtonConfig) -> Self {
        self.newton = newton;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_h == 0 || self.heads * self.d_h != self.d_e {
            return Err(domain_err!(
                "d_e = {} must equal heads ({}) x d_h ({})",
                self.d_e,
                self.heads,
                self.d_h
            ));
        }
        self.newton.validate()
    }

    pub fn m(&self) -> usize {
        self.sampler.target_m
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `n × d_e`, heads in column blocks.
    pub values_out: Matrix,
    pub pinv_reports: Vec<PinvReport>,
    /// Per-head `n × n` reconstruction, present only with `keep_s_hat`.
    pub s_hat: Option<Vec<Matrix>>,
}

fn check_inputs(q: &TokenSequence, v: &Matrix, cfg: &AttentionConfig) -> Result<()> {
    cfg.validate()?;
    if q.dim() != cfg.d_e {
        return Err(shape_err!(
            "queries have {} features, config says d_e = {}",
            q.dim(),
            cfg.d_e
        ));
    }
    if v.rows() != q.len() || v.cols() != cfg.d_e {
        return Err(shape_err!(
            "values are {}x{}, expected {}x{}",
            v.rows(),
            v.cols(),
            q.len(),
            cfg.d_e
        ));
    }
    Ok(())
}

/// Landmark blocks of one head.
#[derive(Debug, Clone)]
pub struct NystromHead {
    /// `m × m` landmark Gram `exp(Q̃ ⊖ Q̃)`.
    pub a: Matrix,
    /// `m × n` landmark-token block `exp(Q̃ ⊖ Q)`.
    pub p: Matrix,
    pub a_pinv: Matrix,
    pub report: PinvReport,
}

impl NystromHead {
    fn build(q_tilde: &Matrix, q: &Matrix, d_h: usize, newton: &NewtonConfig) -> Result<Self> {
        let a = gaussian_attention_matrix(q_tilde, q_tilde, d_h)?;
        let p = gaussian_attention_matrix(q_tilde, q, d_h)?;
        let (a_pinv, report) = newton_pinv(&a, newton)?;
        Ok(NystromHead {
            a,
            p,
            a_pinv,
            report,
        })
    }

    /// `Pᵀ·(A†·(P·V))`, never forming an `n × n` product.
    pub fn apply(&self, v: &Matrix) -> Result<Matrix> {
        let pv = self.p.matmul(v)?;
        let w = self.a_pinv.matmul(&pv)?;
        self.p.matmul_tn(&w)
    }

    /// Dense `Ŝ = Pᵀ·A†·P`.
    pub fn s_hat(&self) -> Result<Matrix> {
        self.p.matmul_tn(&self.a_pinv.matmul(&self.p)?)
    }
}

/// Build every head's landmark blocks. Sampling runs once on the full
/// `d_e`-wide queries; heads then take column blocks of `Q̃` and `Q`.
pub fn nystrom_heads(q: &TokenSequence, cfg: &AttentionConfig) -> Result<Vec<NystromHead>> {
    cfg.validate()?;
    if q.dim() != cfg.d_e {
        return Err(shape_err!(
            "queries have {} features, config says d_e = {}",
            q.dim(),
            cfg.d_e
        ));
    }
    let q_tilde = sample(q, &cfg.sampler)?;
    (0..cfg.heads)
        .map(|h| {
            let off = h * cfg.d_h;
            let qt = q_tilde.features().col_block(off, cfg.d_h)?;
            let qh = q.features().col_block(off, cfg.d_h)?;
            NystromHead::build(&qt, &qh, cfg.d_h, &cfg.newton)
        })
        .collect()
}

/// SOFT attention: per head `Pᵀ·(NR(A)·(P·V_h))`, heads concatenated.
pub fn soft_attention(
    q: &TokenSequence,
    v: &TokenSequence,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    check_inputs(q, v.features(), cfg)?;
    let n = q.len();
    if cfg.keep_s_hat && n > DENSE_GUARD {
        return Err(domain_err!(
            "refusing to materialise Ŝ for n = {n} > {DENSE_GUARD}"
        ));
    }
    let q_tilde = sample(q, &cfg.sampler)?;
    let mut out = Matrix::zeros(n, cfg.d_e);
    let mut reports = Vec::with_capacity(cfg.heads);
    let mut s_hats = cfg.keep_s_hat.then(Vec::new);
    for h in 0..cfg.heads {
        let off = h * cfg.d_h;
        let head = {
            let qt = q_tilde.features().col_block(off, cfg.d_h)?;
            let qh = q.features().col_block(off, cfg.d_h)?;
            NystromHead::build(&qt, &qh, cfg.d_h, &cfg.newton)?
        };
        let vh = v.features().col_block(off, cfg.d_h)?;
        out.set_col_block(off, &head.apply(&vh)?)?;
        if let Some(s) = s_hats.as_mut() {
            s.push(head.s_hat()?);
        }
        reports.push(head.report);
    }
    Ok(AttentionOutput {
        values_out: out,
        pinv_reports: reports,
        s_hat: s_hats,
    })
}

/// Dense `S·V` with `S = exp(Q ⊖ Q)`.
pub fn exact_gaussian_attention(q: &Matrix, v: &Matrix, d_e: usize) -> Result<Matrix> {
    if v.rows() != q.rows() {
        return Err(shape_err!("{} queries but {} values", q.rows(), v.rows()));
    }
    gaussian_attention_matrix(q, q, d_e)?.matmul(v)
}

/// Dense multi-head attention with the chosen kernel, heads split like
/// [`soft_attention`]. Quadratic in `n`.
pub fn exact_attention(
    q: &Matrix,
    v: &Matrix,
    heads: usize,
    kernel: ExactKernel,
) -> Result<Matrix> {
    if heads == 0 || !q.cols().is_multiple_of(heads) || v.cols() != q.cols() || v.rows() != q.rows()
    {
        return Err(shape_err!(
            "exact attention on {}x{} queries, {}x{} values, {heads} heads",
            q.rows(),
            q.cols(),
            v.rows(),
            v.cols()
        ));
    }
    let d_h = q.cols() / heads;
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for h in 0..heads {
        let qh = q.col_block(h * d_h, d_h)?;
        let vh = v.col_block(h * d_h, d_h)?;
        let s = match kernel {
            ExactKernel::Gaussian => gaussian_attention_matrix(&qh, &qh, d_h)?,
            ExactKernel::Softmax => softmax_attention_matrix(&qh, &qh, d_h)?,
        };
        out.set_col_block(h * d_h, &s.matmul(&vh)?)?;
    }
    Ok(out)
}

/// `‖Ŝ − S‖_F / ‖S‖_F`, accumulated over heads.
pub fn approximation_error(q: &TokenSequence, cfg: &AttentionConfig) -> Result<Real> {
    let n = q.len();
    if n > DENSE_GUARD {
        return Err(domain_err!(
            "approximation_error needs n ≤ {DENSE_GUARD}, got {n}"
        ));
    }
    let heads = nystrom_heads(q, cfg)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (h, head) in heads.iter().enumerate() {
        let qh = q.features().col_block(h * cfg.d_h, cfg.d_h)?;
        let s = gaussian_attention_matrix(&qh, &qh, cfg.d_h)?;
        let diff = head.s_hat()?.sub(&s)?;
        num += diff.frobenius_norm().powi(2);
        den += s.frobenius_norm().powi(2);
    }
    Ok((num / den).sqrt())
}
