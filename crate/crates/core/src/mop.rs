//! Mixture of Projectors: a bias-free softmax gate over `M` two-layer
//! projectors whose gated outputs are added residually to the task-specific
//! feature.
//!
//! ```text
//! g = softmax(W_g · f)
//! z = f + Σ_m g_m · P_m(f),   P_m(f) = W2_m · relu(W1_m · f + b1_m) + b2_m
//! ```

use crate::encoders::{cosine_row, TextEmbeddingTable};
use crate::error::{invalid, Result};
use crate::numerics::{softmax, GradTape, Matrix, NodeId, ProbVector, SeededRng};
use crate::ParamSet;

pub const PROJECTOR_INIT_STD: f64 = 0.02;
pub const GATE_INIT_STD: f64 = 0.02;

/// Default projector hidden width for embedding dimension `dim`.
pub fn default_hidden(dim: usize) -> usize {
    (dim / 4).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ProjectorParams {
    pub fn new(dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            w1: Matrix::random_normal(hidden, dim, PROJECTOR_INIT_STD, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(dim, hidden),
            b2: vec![0.0; dim],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn forward(&self, f: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.w1.matvec(f)?;
        for (hi, b) in h.iter_mut().zip(&self.b1) {
            *hi = (*hi + b).max(0.0);
        }
        let out = self.w2.matvec(&h)?;
        Ok(out.iter().zip(&self.b2).map(|(o, b)| o + b).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoPParams {
    /// `M × D` gating weights.
    pub gate: Matrix,
    pub projectors: Vec<ProjectorParams>,
}

impl MoPParams {
    /// Random gate and first layers, zero output layers: identity at init.
    pub fn new(dim: usize, num_projectors: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        if num_projectors == 0 || dim == 0 || hidden == 0 {
            return Err(invalid(format!("MoP needs M ≥ 1, D ≥ 1, H ≥ 1; got M={num_projectors} D={dim} H={hidden}")));
        }
        let gate = Matrix::random_normal(num_projectors, dim, GATE_INIT_STD, rng);
        let projectors = (0..num_projectors).map(|_| ProjectorParams::new(dim, hidden, rng)).collect();
        Ok(Self { gate, projectors })
    }

    /// All-zero parameters; used when the MoP stage is ablated away.
    pub fn identity(dim: usize, num_projectors: usize) -> Self {
        let p =
            ProjectorParams { w1: Matrix::zeros(1, dim), b1: vec![0.0], w2: Matrix::zeros(dim, 1), b2: vec![0.0; dim] };
        Self { gate: Matrix::zeros(num_projectors.max(1), dim), projectors: vec![p; num_projectors.max(1)] }
    }

    pub fn dim(&self) -> usize {
        self.gate.cols()
    }

    pub fn num_projectors(&self) -> usize {
        self.projectors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.projectors.is_empty() || self.gate.rows() != self.projectors.len() {
            return Err(invalid("gate rows must equal projector count (≥ 1)"));
        }
        for p in &self.projectors {
            let h = p.hidden();
            if p.w1.cols() != d || p.b1.len() != h || p.w2.rows() != d || p.w2.cols() != h || p.b2.len() != d {
                return Err(invalid("projector shapes are inconsistent with the gate"));
            }
        }
        if self.param_slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(invalid("MoP parameters must be finite"));
        }
        Ok(())
    }

    fn check_dim(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(invalid(format!("MoP expects dim {}, got {}", self.dim(), f.len())));
        }
        Ok(())
    }

    /// Records the MoP over batch node `x` and returns the calibrated batch.
    /// Parameters are registered in [`ParamSet`] order.
    pub fn record<'a>(&'a self, tape: &mut GradTape<'a>, x: NodeId) -> Result<NodeId> {
        let wg = tape.param_matrix(&self.gate)?;
        let gate_logits = tape.matmul_nt(x, wg)?;
        let g = tape.row_softmax(gate_logits)?;
        let mut z = x;
        for (m, p) in self.projectors.iter().enumerate() {
            let w1 = tape.param_matrix(&p.w1)?;
            let b1 = tape.param_row(&p.b1)?;
            let w2 = tape.param_matrix(&p.w2)?;
            let b2 = tape.param_row(&p.b2)?;
            let h = tape.affine(x, w1, b1)?;
            let h = tape.relu(h)?;
            let out = tape.affine(h, w2, b2)?;
            let gated = tape.scale_rows_by_column(out, g, m)?;
            z = tape.add(z, gated)?;
        }
        Ok(z)
    }
}

impl ParamSet for MoPParams {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = vec![self.gate.data()];
        for p in &self.projectors {
            v.extend([p.w1.data(), &p.b1[..], p.w2.data(), &p.b2[..]]);
        }
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.gate.data_mut()];
        for p in &mut self.projectors {
            v.push(p.w1.data_mut());
            v.push(&mut p.b1[..]);
            v.push(p.w2.data_mut());
            v.push(&mut p.b2[..]);
        }
        v
    }
}

/// Gating distribution `softmax(W_g · f)` over the projectors.
pub fn gate_forward(f: &[f64], params: &MoPParams) -> Result<ProbVector> {
    params.check_dim(f)?;
    softmax(&params.gate.matvec(f)?)
}

/// Calibrated feature `f + Σ_m g_m · P_m(f)`.
pub fn mop_forward(f: &[f64], params: &MoPParams) -> Result<Vec<f64>> {
    let g = gate_forward(f, params)?;
    let mut z = f.to_vec();
    for (gm, p) in g.values().iter().zip(&params.projectors) {
        let out = p.forward(f)?;
        for (zi, o) in z.iter_mut().zip(&out) {
            *zi += gm * o;
        }
    }
    Ok(z)
}

/// Class probabilities `softmax(cos(z, text_c)/τ)` over `class_ids`, ordered
/// by ascending class id.
pub fn mop_classify(z: &[f64], table: &TextEmbeddingTable, class_ids: &[u32], tau: f64) -> Result<ProbVector> {
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    let text = table.matrix_for(&ids)?;
    let (_, probs) = classify_with_text(z, &text, tau)?;
    Ok(probs)
}

/// Cosines and probabilities against a prebuilt text matrix.
pub(crate) fn classify_with_text(z: &[f64], text: &Matrix, tau: f64) -> Result<(Vec<f64>, ProbVector)> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if text.rows() == 0 {
        return Err(invalid("no classes to score against"));
    }
    if z.len() != text.cols() {
        return Err(invalid(format!("feature dim {} does not match table dim {}", z.len(), text.cols())));
    }
    let cos = cosine_row(z, text)?;
    let logits: Vec<f64> = cos.iter().map(|c| c / tau).collect();
    let probs = softmax(&logits)?;
    Ok((cos, probs))
}
