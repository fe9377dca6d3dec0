//! Task-adapted encoders: frozen backbone embedding plus a per-task residual
//! bottleneck adapter, and the class text-embedding table they are scored
//! against.

use std::collections::BTreeMap;

use crate::error::{invalid, CilError, Result};
use crate::numerics::{self, GradTape, Matrix, NodeId, SeededRng};
use crate::ParamSet;

/// Init scale of the down-projection.
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Residual bottleneck `e + W_up·relu(W_down·e + b_down) + b_up` for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub task_id: usize,
    pub w_down: Matrix,
    pub b_down: Vec<f64>,
    pub w_up: Matrix,
    pub b_up: Vec<f64>,
}

impl AdapterParams {
    /// Random down-projection, zero up-projection: the adapter starts as the
    /// identity on the backbone embedding.
    pub fn new(task_id: usize, dim: usize, bottleneck: usize, rng: &mut SeededRng) -> Result<Self> {
        if dim == 0 || bottleneck == 0 {
            return Err(invalid(format!("adapter needs dim ≥ 1 and bottleneck ≥ 1, got {dim}/{bottleneck}")));
        }
        Ok(Self {
            task_id,
            w_down: Matrix::random_normal(bottleneck, dim, ADAPTER_INIT_STD, rng),
            b_down: vec![0.0; bottleneck],
            w_up: Matrix::zeros(dim, bottleneck),
            b_up: vec![0.0; dim],
        })
    }

    /// An all-zero adapter, used when task adapters are ablated away.
    pub fn identity(task_id: usize, dim: usize) -> Self {
        Self {
            task_id,
            w_down: Matrix::zeros(1, dim),
            b_down: vec![0.0],
            w_up: Matrix::zeros(dim, 1),
            b_up: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w_down.cols()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, r) = (self.dim(), self.bottleneck());
        if r == 0 || self.b_down.len() != r || self.w_up.rows() != d || self.w_up.cols() != r || self.b_up.len() != d {
            return Err(invalid(format!("adapter {} has inconsistent shapes", self.task_id)));
        }
        if self.param_slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(invalid(format!("adapter {} has non-finite parameters", self.task_id)));
        }
        Ok(())
    }

    pub fn forward(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.dim() {
            return Err(invalid(format!("adapter expects dim {}, got {}", self.dim(), e.len())));
        }
        let mut h = self.w_down.matvec(e)?;
        for (hi, b) in h.iter_mut().zip(&self.b_down) {
            *hi = (*hi + b).max(0.0);
        }
        let up = self.w_up.matvec(&h)?;
        Ok(e.iter().zip(up.iter().zip(&self.b_up)).map(|(x, (u, b))| x + (u + b)).collect())
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), self.dim());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.forward(x.row(r))?);
        }
        Ok(out)
    }

    /// Records the adapter on `tape` over batch node `x`. Parameters are
    /// registered in [`ParamSet`] order.
    pub fn record<'a>(&'a self, tape: &mut GradTape<'a>, x: NodeId) -> Result<NodeId> {
        let wd = tape.param_matrix(&self.w_down)?;
        let bd = tape.param_row(&self.b_down)?;
        let wu = tape.param_matrix(&self.w_up)?;
        let bu = tape.param_row(&self.b_up)?;
        let h = tape.affine(x, wd, bd)?;
        let h = tape.relu(h)?;
        let up = tape.affine(h, wu, bu)?;
        tape.add(x, up)
    }
}

impl ParamSet for AdapterParams {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.w_down.data(), &self.b_down, self.w_up.data(), &self.b_up]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w_down.data_mut(), &mut self.b_down, self.w_up.data_mut(), &mut self.b_up]
    }
}

/// Backbone embeddings (one per row) with their global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    pub embeddings: Matrix,
    pub labels: Vec<u32>,
}

impl LabeledEmbeddings {
    pub fn new(embeddings: Matrix, labels: Vec<u32>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(invalid(format!("{} embeddings but {} labels", embeddings.rows(), labels.len())));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Rows whose label is `class_id`.
    pub fn rows_of_class(&self, class_id: u32) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class_id)
            .map(|(r, _)| self.embeddings.row(r).to_vec())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEntry {
    pub class_id: u32,
    pub task_id: usize,
    pub vector: Vec<f64>,
}

/// Unit-norm class text embeddings keyed by global class id. The vectors as
/// supplied are kept alongside so that a table can be written back unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingTable {
    dim: usize,
    entries: BTreeMap<u32, TextEntry>,
    raw: BTreeMap<u32, Vec<f64>>,
}

impl TextEmbeddingTable {
    /// Normalizes every vector; rejects duplicate ids, zero vectors and
    /// dimension mismatches.
    pub fn new(dim: usize, entries: Vec<TextEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut raw = BTreeMap::new();
        for mut e in entries {
            if e.vector.len() != dim {
                return Err(invalid(format!(
                    "text embedding for class {} has dim {}, expected {dim}",
                    e.class_id,
                    e.vector.len()
                )));
            }
            let normalized = numerics::normalize(&e.vector)
                .map_err(|_| invalid(format!("text embedding for class {} is zero", e.class_id)))?;
            let id = e.class_id;
            raw.insert(id, std::mem::replace(&mut e.vector, normalized));
            if map.insert(id, e).is_some() {
                return Err(CilError::ContractViolation(format!("class id {id} appears twice in the text table")));
            }
        }
        Ok(Self { dim, entries: map, raw })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.entries.contains_key(&class_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &TextEntry> {
        self.entries.values()
    }

    /// The vector for `class_id` as it was supplied, before normalization.
    pub fn raw_vector(&self, class_id: u32) -> Result<&[f64]> {
        self.raw.get(&class_id).map(Vec::as_slice).ok_or(CilError::IncompleteTable(class_id))
    }

    pub fn vector(&self, class_id: u32) -> Result<&[f64]> {
        self.entries.get(&class_id).map(|e| e.vector.as_slice()).ok_or(CilError::IncompleteTable(class_id))
    }

    /// Class ids owned by `task_id`, ascending.
    pub fn classes_of_task(&self, task_id: usize) -> Vec<u32> {
        self.entries.values().filter(|e| e.task_id == task_id).map(|e| e.class_id).collect()
    }

    /// Rows for `class_ids` in the order given.
    pub fn matrix_for(&self, class_ids: &[u32]) -> Result<Matrix> {
        let mut m = Matrix::zeros(class_ids.len(), self.dim);
        for (r, &c) in class_ids.iter().enumerate() {
            m.row_mut(r).copy_from_slice(self.vector(c)?);
        }
        Ok(m)
    }

    pub fn checksum(&self) -> u64 {
        let slices: Vec<&[f64]> = self.entries.values().map(|e| e.vector.as_slice()).collect();
        crate::param_checksum(&slices)
    }
}

/// Cosine similarity of `z` against each unit-norm row of `text`.
pub(crate) fn cosine_row(z: &[f64], text: &Matrix) -> Result<Vec<f64>> {
    let zn = numerics::norm(z);
    if zn == 0.0 || !zn.is_finite() {
        return Err(invalid("cannot score a zero-norm or non-finite feature"));
    }
    Ok((0..text.rows()).map(|r| numerics::dot(z, text.row(r)) / zn).collect())
}

/// `cos(z, text_c) / τ` for each class of `class_subset`, in class-id order.
pub fn task_logits(z: &[f64], table: &TextEmbeddingTable, class_subset: &[u32], tau: f64) -> Result<Vec<f64>> {
    if class_subset.is_empty() {
        return Err(invalid("task_logits needs a non-empty class subset"));
    }
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if z.len() != table.dim() {
        return Err(invalid(format!("feature dim {} does not match table dim {}", z.len(), table.dim())));
    }
    let mut ids = class_subset.to_vec();
    ids.sort_unstable();
    let text = table.matrix_for(&ids)?;
    Ok(cosine_row(z, &text)?.into_iter().map(|c| c / tau).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_3d() -> TextEmbeddingTable {
        TextEmbeddingTable::new(
            3,
            vec![
                TextEntry { class_id: 7, task_id: 0, vector: vec![0.0, 0.0, 2.0] },
                TextEntry { class_id: 2, task_id: 0, vector: vec![1.0, 0.0, 0.0] },
                TextEntry { class_id: 5, task_id: 1, vector: vec![0.0, 3.0, 0.0] },
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_up_projection_is_exact_identity() {
        let mut rng = SeededRng::new(1);
        let a = AdapterParams::new(0, 16, 4, &mut rng).unwrap();
        let e = rng.normal_vec(16);
        let out = a.forward(&e).unwrap();
        assert!(out.iter().zip(&e).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn hand_evaluated_adapter() {
        let a = AdapterParams {
            task_id: 0,
            w_down: Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            b_down: vec![0.0],
            w_up: Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            b_up: vec![0.0, 0.0],
        };
        assert_eq!(a.forward(&[2.0, 3.0]).unwrap(), vec![4.0, 3.0]);
        assert!(a.forward(&[1.0]).is_err());
    }

    #[test]
    fn adapter_matches_straight_line_reimplementation() {
        let mut rng = SeededRng::new(2);
        let (d, r) = (6, 3);
        let a = AdapterParams {
            task_id: 0,
            w_down: Matrix::random_normal(r, d, 1.0, &mut rng),
            b_down: rng.normal_vec(r),
            w_up: Matrix::random_normal(d, r, 1.0, &mut rng),
            b_up: rng.normal_vec(d),
        };
        let e = rng.normal_vec(d);
        let mut expected = e.clone();
        for i in 0..d {
            let mut acc = a.b_up[i];
            for j in 0..r {
                let mut pre = a.b_down[j];
                for k in 0..d {
                    pre += a.w_down.get(j, k) * e[k];
                }
                acc += a.w_up.get(i, j) * if pre > 0.0 { pre } else { 0.0 };
            }
            expected[i] += acc;
        }
        for (x, y) in a.forward(&e).unwrap().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_direct_forward_bitwise() {
        let mut rng = SeededRng::new(3);
        let mut a = AdapterParams::new(0, 5, 3, &mut rng).unwrap();
        a.w_up = Matrix::random_normal(5, 3, 0.5, &mut rng);
        a.b_down = rng.normal_vec(3);
        let x = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let mut tape = GradTape::new();
        let xn = tape.constant_matrix(&x).unwrap();
        let out = a.record(&mut tape, xn).unwrap();
        let direct = a.forward_batch(&x).unwrap();
        assert_eq!(tape.value(out), direct.data());
    }

    #[test]
    fn table_normalizes_and_orders() {
        let t = table_3d();
        assert_eq!(t.entries().map(|e| e.class_id).collect::<Vec<_>>(), vec![2, 5, 7]);
        for e in t.entries() {
            assert!((numerics::norm(&e.vector) - 1.0).abs() < 1e-12);
        }
        assert_eq!(t.classes_of_task(0), vec![2, 7]);
        assert!(matches!(t.vector(9), Err(CilError::IncompleteTable(9))));
        let dup = vec![
            TextEntry { class_id: 1, task_id: 0, vector: vec![1.0] },
            TextEntry { class_id: 1, task_id: 1, vector: vec![1.0] },
        ];
        assert!(TextEmbeddingTable::new(1, dup).is_err());
    }

    #[test]
    fn task_logits_examples() {
        let t = table_3d();
        let l = task_logits(&[5.0, 0.0, 0.0], &t, &[2, 5, 7], 1.0).unwrap();
        assert_eq!(l, vec![1.0, 0.0, 0.0]);
        let scaled = task_logits(&[1.0, 2.0, 3.0], &t, &[7, 2, 5], 0.01).unwrap();
        let unscaled = task_logits(&[1.0, 2.0, 3.0], &t, &[2, 5, 7], 1.0).unwrap();
        for (s, u) in scaled.iter().zip(&unscaled) {
            assert!((s - 100.0 * u).abs() < 1e-12);
        }
        assert!(task_logits(&[1.0, 0.0, 0.0], &t, &[], 1.0).is_err());
        assert!(task_logits(&[0.0, 0.0, 0.0], &t, &[2], 1.0).is_err());
        assert!(task_logits(&[1.0, 0.0, 0.0], &t, &[2], 0.0).is_err());
    }

    #[test]
    fn task_logits_match_one_by_one_oracle() {
        let mut rng = SeededRng::new(4);
        let entries = (0..3).map(|c| TextEntry { class_id: c, task_id: 0, vector: rng.normal_vec(8) }).collect();
        let t = TextEmbeddingTable::new(8, entries).unwrap();
        let z = rng.normal_vec(8);
        let l = task_logits(&z, &t, &[0, 1, 2], 0.05).unwrap();
        for c in 0..3u32 {
            let oracle = numerics::cosine_similarity(&z, t.vector(c).unwrap()).unwrap() / 0.05;
            assert!((l[c as usize] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_invariant_to_positive_rescaling() {
        let mut rng = SeededRng::new(6);
        let entries = (0..5).map(|c| TextEntry { class_id: c, task_id: 0, vector: rng.normal_vec(4) }).collect();
        let t = TextEmbeddingTable::new(4, entries).unwrap();
        for _ in 0..50 {
            let z = rng.normal_vec(4);
            let k = 0.01 + 10.0 * rng.uniform();
            let zs: Vec<f64> = z.iter().map(|v| v * k).collect();
            let a = numerics::argmax(&task_logits(&z, &t, &[0, 1, 2, 3, 4], 0.01).unwrap());
            let b = numerics::argmax(&task_logits(&zs, &t, &[0, 1, 2, 3, 4], 0.01).unwrap());
            assert_eq!(a, b);
        }
    }
}
