//! A small classifier built from stacked SOFT layers, a synthetic task to
//! train it on, and the training loop.
//!
//! Each layer is pre-norm: `x + W_out·attn(LN(x))`, then
//! `x + FFN(LN(x))` with a ReLU feed-forward of expansion `e`. Tokens get a
//! learned additive position embedding, and the classifier mean-pools the
//! final normalised tokens before a linear head.

mod io;
mod task;
mod train;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::autograd::{soft_attention, SoftInputs, Tape, Var};
use crate::error::{domain_err, shape_err, Result};
use crate::kernel::TokenSequence;
use crate::matcore::{Matrix, Real};
use crate::pinv::NewtonConfig;
use crate::sampling::{averaging_stencil, SamplerMethod, SamplerSpec};

pub use io::{read_tensors, write_tensors};
pub use task::{make_synthetic_task, Dataset, Placement, TaskConfig};
pub use train::{accuracy, train, TrainConfig, TrainReport};

pub const LN_EPS: Real = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_e: usize,
    pub heads: usize,
    pub layers: usize,
    pub m: usize,
    pub classes: usize,
    pub ffn_expansion: usize,
    pub sampler: SamplerMethod,
    /// Seed of the `random` sampler's index draw.
    pub sampler_seed: u64,
    pub newton: NewtonConfig,
    /// Parameter initialisation seed.
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            grid_h: 8,
            grid_w: 8,
            d_e: 64,
            heads: 2,
            layers: 2,
            m: 16,
            classes: 4,
            ffn_expansion: 4,
            sampler: SamplerMethod::AvgPool,
            sampler_seed: 0,
            newton: NewtonConfig::default(),
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn n(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        if self.classes < 2 {
            return Err(domain_err!("need at least two classes"));
        }
        if self.layers == 0 || self.ffn_expansion == 0 {
            return Err(domain_err!("layers and ffn_expansion must be positive"));
        }
        let spec = SamplerSpec::for_grid(self.sampler, self.grid(), self.m, self.sampler_seed)?;
        spec.output_grid(self.grid())?;
        let cfg =
            AttentionConfig::new(self.d_e, self.heads, spec)?.with_newton(self.newton.clone());
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Weights of one SOFT layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLayerParams {
    pub w_qk: Matrix,
    pub w_v: Matrix,
    pub w_out: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    /// `k²·d_e × d_e`, present when the sampler is `conv`.
    pub conv_w: Option<Matrix>,
}

fn init_w<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0 / (rows as Real).sqrt(), rng)
}

impl SoftLayerParams {
    pub fn init<R: Rng>(
        d_e: usize,
        expansion: usize,
        conv_kernel: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let hidden = expansion * d_e;
        let w_qk = init_w(d_e, d_e, rng);
        let w_v = init_w(d_e, d_e, rng);
        let w_out = init_w(d_e, d_e, rng);
        let ffn_w1 = init_w(d_e, hidden, rng);
        let ffn_w2 = init_w(hidden, d_e, rng);
        let conv_w = conv_kernel.map(|k| {
            let noise = Matrix::random_normal(k * k * d_e, d_e, 0.01, rng);
            averaging_stencil(k, d_e).add(&noise).expect("same shape")
        });
        SoftLayerParams {
            w_qk,
            w_v,
            w_out,
            ffn_w1,
            ffn_b1: Matrix::zeros(1, hidden),
            ffn_w2,
            ffn_b2: Matrix::zeros(1, d_e),
            ln1_gamma: Matrix::filled(1, d_e, 1.0),
            ln1_beta: Matrix::zeros(1, d_e),
            ln2_gamma: Matrix::filled(1, d_e, 1.0),
            ln2_beta: Matrix::zeros(1, d_e),
            conv_w,
        }
    }

    fn named(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = vec![
            ("w_qk", &self.w_qk),
            ("w_v", &self.w_v),
            ("w_out", &self.w_out),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ];
        if let Some(c) = &self.conv_w {
            v.push(("conv_w", c));
        }
        v
    }

    fn named_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![
            &mut self.w_qk,
            &mut self.w_v,
            &mut self.w_out,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ];
        if let Some(c) = &mut self.conv_w {
            v.push(c);
        }
        v
    }

    fn register(&self, t: &mut Tape, trainable: bool) -> LayerVars {
        let mut put = |m: &Matrix| {
            if trainable {
                t.leaf(m.clone())
            } else {
                t.constant(m.clone())
            }
        };
        LayerVars {
            w_qk: put(&self.w_qk),
            w_v: put(&self.w_v),
            w_out: put(&self.w_out),
            ffn_w1: put(&self.ffn_w1),
            ffn_b1: put(&self.ffn_b1),
            ffn_w2: put(&self.ffn_w2),
            ffn_b2: put(&self.ffn_b2),
            ln1_gamma: put(&self.ln1_gamma),
            ln1_beta: put(&self.ln1_beta),
            ln2_gamma: put(&self.ln2_gamma),
            ln2_beta: put(&self.ln2_beta),
            conv_w: self.conv_w.as_ref().map(&mut put),
        }
    }
}

/// Tape handles for a [`SoftLayerParams`], in the same field order.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_qk: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub conv_w: Option<Var>,
}

impl LayerVars {
    fn all(&self) -> Vec<Var> {
        let mut v = vec![
            self.w_qk,
            self.w_v,
            self.w_out,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln1_gamma,
            self.ln1_beta,
            self.ln2_gamma,
            self.ln2_beta,
        ];
        v.extend(self.conv_w);
        v
    }
}

/// One SOFT layer on a stack of `batch` sequences of `grid` tokens each
/// (rows `b·n .. (b+1)·n` belong to sequence `b`).
pub fn soft_layer_tape(
    t: &mut Tape,
    x: Var,
    p: &LayerVars,
    cfg: &AttentionConfig,
    grid: (usize, usize),
    batch: usize,
) -> Result<Var> {
    let n = grid.0 * grid.1;
    if t.value(x).rows() != batch * n {
        return Err(shape_err!(
            "{} rows for {batch} sequences of {n} tokens",
            t.value(x).rows()
        ));
    }
    let h = t.layer_norm(x, p.ln1_gamma, p.ln1_beta, LN_EPS)?;
    let q = t.matmul(h, p.w_qk)?;
    let v = t.matmul(h, p.w_v)?;
    let inputs = SoftInputs {
        grid,
        cfg,
        conv_weights: p.conv_w,
    };
    let mut outs = Vec::with_capacity(batch);
    for b in 0..batch {
        let (qb, vb) = if batch == 1 {
            (q, v)
        } else {
            (t.row_slice(q, b * n, n)?, t.row_slice(v, b * n, n)?)
        };
        outs.push(soft_attention(t, qb, vb, inputs)?);
    }
    let att = if batch == 1 { outs[0] } else { t.vcat(&outs)? };
    let o = t.matmul(att, p.w_out)?;
    let x = t.add(x, o)?;

    let h = t.layer_norm(x, p.ln2_gamma, p.ln2_beta, LN_EPS)?;
    let f = t.matmul(h, p.ffn_w1)?;
    let f = t.add_row(f, p.ffn_b1)?;
    let f = t.relu(f)?;
    let f = t.matmul(f, p.ffn_w2)?;
    let f = t.add_row(f, p.ffn_b2)?;
    t.add(x, f)
}

/// Untaped forward of one layer on a single sequence.
pub fn soft_layer_forward(
    x: &TokenSequence,
    params: &SoftLayerParams,
    cfg: &AttentionConfig,
) -> Result<TokenSequence> {
    let mut t = Tape::new();
    let xv = t.constant(x.features().clone());
    let p = params.register(&mut t, false);
    let out = soft_layer_tape(&mut t, xv, &p, cfg, x.grid(), 1)?;
    TokenSequence::new(t.value(out).clone(), x.grid().0, x.grid().1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub cfg: ToyModelConfig,
    pub pos_emb: Matrix,
    pub layers: Vec<SoftLayerParams>,
    pub ln_f_gamma: Matrix,
    pub ln_f_beta: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub ln_f_gamma: Var,
    pub ln_f_beta: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// All handles in [`ToyModel::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.pos_emb];
        for l in &self.layers {
            v.extend(l.all());
        }
        v.extend([self.ln_f_gamma, self.ln_f_beta, self.head_w, self.head_b]);
        v
    }
}

impl ToyModel {
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        let att = cfg.attention_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_e;
        let pos_emb = Matrix::random_normal(cfg.n(), d, 0.02, &mut rng);
        let conv_k = (cfg.sampler == SamplerMethod::Conv).then_some(att.sampler.kernel);
        let layers = (0..cfg.layers)
            .map(|_| SoftLayerParams::init(d, cfg.ffn_expansion, conv_k, &mut rng))
            .collect();
        let head_w = init_w(d, cfg.classes, &mut rng);
        Ok(ToyModel {
            pos_emb,
            layers,
            ln_f_gamma: Matrix::filled(1, d, 1.0),
            ln_f_beta: Matrix::zeros(1, d),
            head_w,
            head_b: Matrix::zeros(1, cfg.classes),
            cfg,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut v = vec![("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(
                l.named()
                    .into_iter()
                    .map(|(n, m)| (format!("layer{i}.{n}"), m)),
            );
        }
        v.push(("ln_f_gamma".into(), &self.ln_f_gamma));
        v.push(("ln_f_beta".into(), &self.ln_f_beta));
        v.push(("head_w".into(), &self.head_w));
        v.push(("head_b".into(), &self.head_b));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.pos_emb];
        for l in &mut self.layers {
            v.extend(l.named_mut());
        }
        v.extend([
            &mut self.ln_f_gamma,
            &mut self.ln_f_beta,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        v
    }

    pub fn register(&self, t: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |m: &Matrix| {
            if trainable {
                t.leaf(m.clone())
            } else {
                t.constant(m.clone())
            }
        };
        let pos_emb = put(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| l.register(t, trainable))
            .collect();
        let mut put = |m: &Matrix| {
            if trainable {
                t.leaf(m.clone())
            } else {
                t.constant(m.clone())
            }
        };
        ModelVars {
            pos_emb,
            layers,
            ln_f_gamma: put(&self.ln_f_gamma),
            ln_f_beta: put(&self.ln_f_beta),
            head_w: put(&self.head_w),
            head_b: put(&self.head_b),
        }
    }

    /// Logits (`batch × classes`) for stacked inputs `x` (`batch·n × d_e`).
    /// `layer_norms`, when given, receives `‖out‖_F / ‖in‖_F` per layer.
    pub fn forward(
        &self,
        t: &mut Tape,
        vars: &ModelVars,
        x: Var,
        batch: usize,
        mut layer_norms: Option<&mut Vec<Real>>,
    ) -> Result<Var> {
        let att = self.cfg.attention_config()?;
        let grid = self.cfg.grid();
        let mut h = t.add_tiled(x, vars.pos_emb)?;
        for lv in &vars.layers {
            let before = t.value(h).frobenius_norm();
            h = soft_layer_tape(t, h, lv, &att, grid, batch)?;
            if let Some(ns) = layer_norms.as_deref_mut() {
                ns.push(t.value(h).frobenius_norm() / before);
            }
        }
        let h = t.layer_norm(h, vars.ln_f_gamma, vars.ln_f_beta, LN_EPS)?;
        let pooled = t.mean_pool_rows(h, self.cfg.n())?;
        let z = t.matmul(pooled, vars.head_w)?;
        t.add_row(z, vars.head_b)
    }

    /// Stack sequences into one `batch·n × d_e` matrix.
    pub fn stack(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        if let Some(bad) = inputs
            .iter()
            .find(|x| x.shape() != (self.cfg.n(), self.cfg.d_e))
        {
            return Err(shape_err!(
                "input is {}x{}, model expects {}x{}",
                bad.rows(),
                bad.cols(),
                self.cfg.n(),
                self.cfg.d_e
            ));
        }
        Matrix::vcat(inputs)
    }

    pub fn logits(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let mut t = Tape::new();
        let x = t.constant(self.stack(inputs)?);
        let vars = self.register(&mut t, false);
        let z = self.forward(&mut t, &vars, x, inputs.len(), None)?;
        Ok(t.value(z).clone())
    }

    pub fn predict(&self, inputs: &[&Matrix]) -> Result<Vec<usize>> {
        let z = self.logits(inputs)?;
        Ok((0..z.rows())
            .map(|i| {
                z.row(i)
                    .iter()
                    .enumerate()
                    .fold((0, Real::NEG_INFINITY), |best, (c, &v)| {
                        if v > best.1 {
                            (c, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    pub fn save(&self, w: &mut impl std::io::Write) -> Result<()> {
        write_tensors(w, &self.named_params())
    }

    /// Replace parameters with tensors read by [`read_tensors`]; names and
    /// shapes must match this model exactly.
    pub fn load(&mut self, r: &mut impl std::io::Read) -> Result<()> {
        let tensors = read_tensors(r)?;
        let expect: Vec<(String, (usize, usize))> = self
            .named_params()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        if tensors.len() != expect.len() {
            return Err(shape_err!(
                "file has {} tensors, model has {}",
                tensors.len(),
                expect.len()
            ));
        }
        for ((name, m), (en, es)) in tensors.iter().zip(&expect) {
            if name != en || m.shape() != *es {
                return Err(shape_err!(
                    "tensor '{name}' {}x{} does not match '{en}' {}x{}",
                    m.rows(),
                    m.cols(),
                    es.0,
                    es.1
                ));
            }
        }
        for (dst, (_, src)) in self.params_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        Ok(())
    }
}
