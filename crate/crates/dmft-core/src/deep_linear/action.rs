use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::saddle::{error_coupling, ones, DeepLinearState};
use crate::error::{DmftError, Result};

/// One coordinate block of the flat action argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// `H^ℓ`, upper triangle.
    Feature(usize),
    /// `G^ℓ`, upper triangle.
    Gradient(usize),
    /// `F(t) = ⟨g^L(t) h^L(t)⟩ = γ (y - Δ(t))`.
    Output,
    FeatureDual(usize),
    GradientDual(usize),
    OutputDual,
    /// `R^ℓ`, all `T²` entries row-major.
    ForwardResponse(usize),
    /// `Q^ℓ`, all `T²` entries row-major.
    BackwardResponse(usize),
}

/// Flat ordering of the action argument.
///
/// Primal kernels `[H¹..H^L, G¹..G^L, F]` come first, then their duals in the same order,
/// then `[R¹..R^{L-1}, Q¹..Q^{L-1}]`. Layer-major, time-minor throughout.
/// Symmetric kernels store `(a, b)` with `a <= b`, row by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionLayout {
    pub layers: usize,
    pub steps: usize,
}

impl ActionLayout {
    pub fn new(layers: usize, steps: usize) -> Self {
        Self { layers, steps }
    }

    pub fn sym_len(&self) -> usize {
        self.steps * (self.steps + 1) / 2
    }

    /// Kernels and output.
    pub fn num_primal(&self) -> usize {
        2 * self.layers * self.sym_len() + self.steps
    }

    /// Primal and dual coordinates.
    pub fn num_kernel(&self) -> usize {
        2 * self.num_primal()
    }

    pub fn num_response(&self) -> usize {
        2 * (self.layers - 1) * self.steps * self.steps
    }

    pub fn dim(&self) -> usize {
        self.num_kernel() + self.num_response()
    }

    /// Offset of a block; layers are 1-based.
    pub fn offset(&self, block: Block) -> usize {
        let (l, sym, t2) = (self.layers, self.sym_len(), self.steps * self.steps);
        let np = self.num_primal();
        let primal = |b: Block| match b {
            Block::Feature(k) | Block::FeatureDual(k) => (k - 1) * sym,
            Block::Gradient(k) | Block::GradientDual(k) => (l + k - 1) * sym,
            _ => 2 * l * sym,
        };
        match block {
            Block::Feature(_) | Block::Gradient(_) | Block::Output => primal(block),
            Block::FeatureDual(_) | Block::GradientDual(_) | Block::OutputDual => np + primal(block),
            Block::ForwardResponse(k) => 2 * np + (k - 1) * t2,
            Block::BackwardResponse(k) => 2 * np + (l - 1 + k - 1) * t2,
        }
    }

    /// Position of `(a, b)` in a symmetric block.
    pub fn sym_index(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        // rows before `a` hold T + (T-1) + ... + (T-a+1) entries
        a * self.steps - a * a.saturating_sub(1) / 2 + (b - a)
    }

    pub fn sym_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.steps).flat_map(move |a| (a..self.steps).map(move |b| (a, b)))
    }

    pub fn read_sym(&self, x: &DVector<f64>, block: Block) -> DMatrix<f64> {
        let off = self.offset(block);
        let mut m = DMatrix::zeros(self.steps, self.steps);
        for (i, (a, b)) in self.sym_pairs().enumerate() {
            m[(a, b)] = x[off + i];
            m[(b, a)] = x[off + i];
        }
        m
    }

    pub fn read_full(&self, x: &DVector<f64>, block: Block) -> DMatrix<f64> {
        let off = self.offset(block);
        let t = self.steps;
        DMatrix::from_fn(t, t, |a, b| x[off + a * t + b])
    }

    pub fn read_vec(&self, x: &DVector<f64>, block: Block) -> Vec<f64> {
        let off = self.offset(block);
        (0..self.steps).map(|t| x[off + t]).collect()
    }

    fn write_sym(&self, x: &mut DVector<f64>, block: Block, m: &DMatrix<f64>) {
        let off = self.offset(block);
        for (i, (a, b)) in self.sym_pairs().enumerate() {
            x[off + i] = m[(a, b)];
        }
    }

    fn write_full(&self, x: &mut DVector<f64>, block: Block, m: &DMatrix<f64>) {
        let off = self.offset(block);
        let t = self.steps;
        for a in 0..t {
            for b in 0..t {
                x[off + a * t + b] = m[(a, b)];
            }
        }
    }
}

/// Sparse `∂Q/∂x_i` as `(row, col, value)` triplets.
type Entries = Vec<(usize, usize, f64)>;

/// Quadratic form of one layer's single-site integral and its sparse derivatives.
struct LayerForm {
    q: DMatrix<f64>,
    first: Vec<(usize, Entries)>,
    second: Vec<(usize, usize, Entries)>,
}

/// `S = ½ Σ_ℓ ⟨Ĥ^ℓ, H^ℓ⟩ + ½ Σ_ℓ ⟨Ĝ^ℓ, G^ℓ⟩ - Σ_ℓ Tr Q^ℓ R^ℓ + F̂·F - ½ Σ_ℓ ln det Q_ℓ`
/// for a depth `L + 1` linear network on one point, with `Z = ∫ exp(N S)`.
///
/// `Q_ℓ` is the `4T x 4T` quadratic form over `(h, g, ĥ, ĝ)` of layer `ℓ`:
/// `[[Ĥ, F̂, -I, Dᵀ], [F̂, Ĝ, Cᵀ, -I], [-I, C, -Σ_u, 0], [D, -I, 0, -Σ_r]]`,
/// with `C = Θ_Δ∘H^{ℓ-1} + R^{ℓ-1}`, `D = Θ_Δ∘G^{ℓ+1} + Q^ℓ`, `Σ_u = H^{ℓ-1}`, `Σ_r = G^{ℓ+1}`
/// and `F̂` present only in the last layer.
#[derive(Debug, Clone, Copy)]
pub struct DeepLinearAction {
    pub layout: ActionLayout,
    pub gamma: f64,
    pub target: f64,
    pub step: f64,
}

impl DeepLinearAction {
    pub fn new(state: &DeepLinearState) -> Self {
        Self {
            layout: ActionLayout::new(state.hidden_layers(), state.num_steps()),
            gamma: state.config.gamma,
            target: state.config.target,
            step: state.grid.step_size(),
        }
    }

    /// Saddle point as a flat argument: duals and acausal responses are zero.
    pub fn saddle_point(&self, state: &DeepLinearState) -> DVector<f64> {
        let lay = &self.layout;
        let mut x = DVector::zeros(lay.dim());
        for k in 1..=lay.layers {
            lay.write_sym(&mut x, Block::Feature(k), &state.feature[k - 1]);
            lay.write_sym(&mut x, Block::Gradient(k), &state.gradient[k - 1]);
        }
        let off = lay.offset(Block::Output);
        for (t, d) in state.errors.iter().enumerate() {
            x[off + t] = self.gamma * (self.target - d);
        }
        for k in 1..lay.layers {
            lay.write_full(&mut x, Block::ForwardResponse(k), &state.forward_response[k - 1]);
            lay.write_full(&mut x, Block::BackwardResponse(k), &state.backward_response[k - 1]);
        }
        x
    }

    fn errors(&self, x: &DVector<f64>) -> Vec<f64> {
        self.layout
            .read_vec(x, Block::Output)
            .iter()
            .map(|f| self.target - f / self.gamma)
            .collect()
    }

    fn below(&self, x: &DVector<f64>, layer: usize) -> DMatrix<f64> {
        if layer == 1 {
            ones(self.layout.steps)
        } else {
            self.layout.read_sym(x, Block::Feature(layer - 1))
        }
    }

    fn above(&self, x: &DVector<f64>, layer: usize) -> DMatrix<f64> {
        if layer == self.layout.layers {
            ones(self.layout.steps)
        } else {
            self.layout.read_sym(x, Block::Gradient(layer + 1))
        }
    }

    fn layer_form(&self, x: &DVector<f64>, layer: usize) -> LayerForm {
        let lay = &self.layout;
        let (t_len, l) = (lay.steps, lay.layers);
        let (h, g, hh, gh) = (0, t_len, 2 * t_len, 3 * t_len);
        let errors = self.errors(x);
        let theta = error_coupling(&errors, self.gamma, self.step);
        let sigma_u = self.below(x, layer);
        let sigma_r = self.above(x, layer);
        let mut c = theta.component_mul(&sigma_u);
        let mut d = theta.component_mul(&sigma_r);
        if layer > 1 {
            c += lay.read_full(x, Block::ForwardResponse(layer - 1));
        }
        if layer < l {
            d += lay.read_full(x, Block::BackwardResponse(layer));
        }
        let h_dual = lay.read_sym(x, Block::FeatureDual(layer));
        let g_dual = lay.read_sym(x, Block::GradientDual(layer));

        let mut q = DMatrix::zeros(4 * t_len, 4 * t_len);
        q.view_mut((h, h), (t_len, t_len)).copy_from(&h_dual);
        q.view_mut((g, g), (t_len, t_len)).copy_from(&g_dual);
        q.view_mut((hh, hh), (t_len, t_len)).copy_from(&(-&sigma_u));
        q.view_mut((gh, gh), (t_len, t_len)).copy_from(&(-&sigma_r));
        q.view_mut((hh, g), (t_len, t_len)).copy_from(&c);
        q.view_mut((g, hh), (t_len, t_len)).copy_from(&c.transpose());
        q.view_mut((gh, h), (t_len, t_len)).copy_from(&d);
        q.view_mut((h, gh), (t_len, t_len)).copy_from(&d.transpose());
        for t in 0..t_len {
            q[(h + t, hh + t)] = -1.0;
            q[(hh + t, h + t)] = -1.0;
            q[(g + t, gh + t)] = -1.0;
            q[(gh + t, g + t)] = -1.0;
        }
        if layer == l {
            let off = lay.offset(Block::OutputDual);
            for t in 0..t_len {
                q[(h + t, g + t)] += x[off + t];
                q[(g + t, h + t)] += x[off + t];
            }
        }

        let push = |e: &mut Entries, p: usize, r: usize, v: f64| {
            e.push((p, r, v));
            if p != r {
                e.push((r, p, v));
            }
        };
        let mut first: Vec<(usize, Entries)> = Vec::new();
        let mut second: Vec<(usize, usize, Entries)> = Vec::new();
        let out = lay.offset(Block::Output);
        let coupling = |s: usize| self.gamma * self.step * errors[s];

        for (block, base) in [(Block::FeatureDual(layer), h), (Block::GradientDual(layer), g)] {
            let off = lay.offset(block);
            for (i, (a, b)) in lay.sym_pairs().enumerate() {
                let mut e = Entries::new();
                push(&mut e, base + a, base + b, 1.0);
                first.push((off + i, e));
            }
        }
        if layer > 1 {
            let off = lay.offset(Block::Feature(layer - 1));
            for (i, (a, b)) in lay.sym_pairs().enumerate() {
                let mut e = Entries::new();
                push(&mut e, hh + a, hh + b, -1.0);
                if a < b {
                    push(&mut e, hh + b, g + a, coupling(a));
                    let mut e2 = Entries::new();
                    push(&mut e2, hh + b, g + a, -self.step);
                    second.push((out + a, off + i, e2));
                }
                first.push((off + i, e));
            }
            let off = lay.offset(Block::ForwardResponse(layer - 1));
            for a in 0..t_len {
                for b in 0..t_len {
                    let mut e = Entries::new();
                    push(&mut e, hh + a, g + b, 1.0);
                    first.push((off + a * t_len + b, e));
                }
            }
        }
        if layer < l {
            let off = lay.offset(Block::Gradient(layer + 1));
            for (i, (a, b)) in lay.sym_pairs().enumerate() {
                let mut e = Entries::new();
                push(&mut e, gh + a, gh + b, -1.0);
                if a < b {
                    push(&mut e, gh + b, h + a, coupling(a));
                    let mut e2 = Entries::new();
                    push(&mut e2, gh + b, h + a, -self.step);
                    second.push((out + a, off + i, e2));
                }
                first.push((off + i, e));
            }
            let off = lay.offset(Block::BackwardResponse(layer));
            for a in 0..t_len {
                for b in 0..t_len {
                    let mut e = Entries::new();
                    push(&mut e, gh + a, h + b, 1.0);
                    first.push((off + a * t_len + b, e));
                }
            }
        }
        for s in 0..t_len {
            let mut e = Entries::new();
            for t in s + 1..t_len {
                push(&mut e, hh + t, g + s, -self.step * sigma_u[(t, s)]);
                push(&mut e, gh + t, h + s, -self.step * sigma_r[(t, s)]);
            }
            first.push((out + s, e));
        }
        if layer == l {
            let off = lay.offset(Block::OutputDual);
            for t in 0..t_len {
                let mut e = Entries::new();
                push(&mut e, h + t, g + t, 1.0);
                first.push((off + t, e));
            }
        }
        LayerForm { q, first, second }
    }

    fn explicit_value(&self, x: &DVector<f64>) -> f64 {
        let lay = &self.layout;
        let mut s = 0.0;
        for k in 1..=lay.layers {
            s += 0.5 * lay.read_sym(x, Block::FeatureDual(k)).dot(&lay.read_sym(x, Block::Feature(k)));
            s += 0.5 * lay.read_sym(x, Block::GradientDual(k)).dot(&lay.read_sym(x, Block::Gradient(k)));
        }
        for k in 1..lay.layers {
            let r = lay.read_full(x, Block::ForwardResponse(k));
            let q = lay.read_full(x, Block::BackwardResponse(k));
            s -= (q * r).trace();
        }
        let (f, fd) = (lay.read_vec(x, Block::Output), lay.read_vec(x, Block::OutputDual));
        s + f.iter().zip(&fd).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Sparse second derivatives of the explicit terms, as `(i, j, value)` with `i < j`.
    fn explicit_pairs(&self) -> Vec<(usize, usize, f64)> {
        let lay = &self.layout;
        let np = lay.num_primal();
        let mut out = Vec::new();
        for (i, (a, b)) in lay.sym_pairs().enumerate() {
            let w = if a == b { 0.5 } else { 1.0 };
            for k in 1..=lay.layers {
                out.push((lay.offset(Block::Feature(k)) + i, np + lay.offset(Block::Feature(k)) + i, w));
                out.push((lay.offset(Block::Gradient(k)) + i, np + lay.offset(Block::Gradient(k)) + i, w));
            }
        }
        let out_off = lay.offset(Block::Output);
        for t in 0..lay.steps {
            out.push((out_off + t, np + out_off + t, 1.0));
        }
        let t_len = lay.steps;
        for k in 1..lay.layers {
            let (ro, qo) = (lay.offset(Block::ForwardResponse(k)), lay.offset(Block::BackwardResponse(k)));
            for a in 0..t_len {
                for b in 0..t_len {
                    // Tr QR pairs R(a,b) with Q(b,a)
                    out.push((ro + a * t_len + b, qo + b * t_len + a, -1.0));
                }
            }
        }
        out
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.layout.dim() {
            return Err(DmftError::Dimension(format!(
                "action argument has {} entries, layout needs {}",
                x.len(),
                self.layout.dim()
            )));
        }
        Ok(())
    }

    fn layer_inverse(&self, form: &LayerForm, layer: usize) -> Result<DMatrix<f64>> {
        form.q.clone().lu().try_inverse().ok_or_else(|| DmftError::Singular {
            condition: f64::INFINITY,
            context: format!("single-site form of layer {layer}"),
        })
    }

    /// `ln Z_ℓ = -½ ln det Q_ℓ`, the log single-site partition function of a 1-based layer.
    pub fn log_partition(&self, x: &DVector<f64>, layer: usize) -> Result<f64> {
        self.check(x)?;
        let det = self.layer_form(x, layer).q.lu().determinant();
        if !(det > 0.0) {
            return Err(DmftError::Singular {
                condition: f64::INFINITY,
                context: format!("determinant of layer {layer} is {det}"),
            });
        }
        Ok(-0.5 * det.ln())
    }

    pub fn value(&self, x: &DVector<f64>) -> Result<f64> {
        self.check(x)?;
        let mut s = self.explicit_value(x);
        for k in 1..=self.layout.layers {
            s += self.log_partition(x, k)?;
        }
        Ok(s)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        let lay = &self.layout;
        let mut grad = DVector::zeros(lay.dim());
        // explicit terms are bilinear, so their gradient is the pair table applied to x
        for (i, j, v) in self.explicit_pairs() {
            grad[i] += v * x[j];
            grad[j] += v * x[i];
        }
        let parts = (1..=lay.layers)
            .into_par_iter()
            .map(|k| {
                let form = self.layer_form(x, k);
                let w = self.layer_inverse(&form, k)?;
                Ok(form
                    .first
                    .iter()
                    .map(|(i, e)| (*i, -0.5 * e.iter().map(|&(p, q, v)| v * w[(q, p)]).sum::<f64>()))
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        for part in parts {
            for (i, v) in part {
                grad[i] += v;
            }
        }
        Ok(grad)
    }

    /// Exact Hessian: `∂²(-½ ln det Q) = ½ tr(W ∂_i Q W ∂_j Q) - ½ tr(W ∂_ij Q)` with `W = Q⁻¹`.
    pub fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let lay = &self.layout;
        let n = lay.dim();
        let mut hess = DMatrix::zeros(n, n);
        for (i, j, v) in self.explicit_pairs() {
            hess[(i, j)] += v;
            hess[(j, i)] += v;
        }
        let parts = (1..=lay.layers)
            .into_par_iter()
            .map(|k| {
                let form = self.layer_form(x, k);
                let w = self.layer_inverse(&form, k)?;
                let m = w.nrows();
                let nv = form.first.len();
                let mut local = DMatrix::zeros(nv, nv);
                let mut z = DMatrix::zeros(m, m);
                for (a, (_, ea)) in form.first.iter().enumerate() {
                    // z = W ∂_a Q W
                    z.fill(0.0);
                    for &(p, q, v) in ea {
                        z.ger(v, &w.column(p), &w.row(q).transpose(), 1.0);
                    }
                    for (b, (_, eb)) in form.first.iter().enumerate().skip(a) {
                        let t: f64 = eb.iter().map(|&(p, q, v)| v * z[(q, p)]).sum();
                        local[(a, b)] = 0.5 * t;
                        local[(b, a)] = 0.5 * t;
                    }
                }
                let idx: Vec<usize> = form.first.iter().map(|(i, _)| *i).collect();
                let second: Vec<(usize, usize, f64)> = form
                    .second
                    .iter()
                    .map(|(i, j, e)| (*i, *j, -0.5 * e.iter().map(|&(p, q, v)| v * w[(q, p)]).sum::<f64>()))
                    .collect();
                Ok((idx, local, second))
            })
            .collect::<Result<Vec<_>>>()?;
        for (idx, local, second) in parts {
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    hess[(i, j)] += local[(a, b)];
                }
            }
            for (i, j, v) in second {
                hess[(i, j)] += v;
                hess[(j, i)] += v;
            }
        }
        Ok(hess)
    }

    /// Hessian by central differences of the gradient with one Richardson step.
    pub fn hessian_finite_difference(&self, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let n = self.layout.dim();
        let cols = (0..n)
            .into_par_iter()
            .map(|i| {
                let diff = |step: f64| -> Result<DVector<f64>> {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += step;
                    xm[i] -= step;
                    Ok((self.gradient(&xp)? - self.gradient(&xm)?) / (2.0 * step))
                };
                let coarse = diff(h)?;
                let fine = diff(0.5 * h)?;
                Ok((fine * 4.0 - coarse) / 3.0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_columns(&cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deep_linear::{layer_moments, solve_deep_linear_saddle, DeepLinearConfig};
    use crate::grid::TimeGrid;

    fn setup(depth: usize, gamma: f64, steps: usize) -> (DeepLinearState, DeepLinearAction, DVector<f64>) {
        let grid = TimeGrid::gradient_flow(0.1, steps).unwrap();
        let state = solve_deep_linear_saddle(&DeepLinearConfig::new(depth, gamma, 1.0), &grid).unwrap();
        let action = DeepLinearAction::new(&state);
        let x = action.saddle_point(&state);
        (state, action, x)
    }

    #[test]
    fn layout_indices_cover_blocks() {
        let lay = ActionLayout::new(3, 5);
        for (i, (a, b)) in lay.sym_pairs().enumerate() {
            assert_eq!(lay.sym_index(a, b), i);
            assert_eq!(lay.sym_index(b, a), i);
        }
        assert_eq!(lay.offset(Block::FeatureDual(1)), lay.num_primal());
        assert_eq!(lay.offset(Block::BackwardResponse(2)) + 25, lay.dim());
    }

    #[test]
    fn saddle_is_stationary() {
        for depth in [2, 4] {
            let (_, action, x) = setup(depth, 1.2, 8);
            let g = action.gradient(&x).unwrap();
            assert!(g.amax() < 1e-8, "depth {depth}: {}", g.amax());
            assert!(action.value(&x).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_value_differences() {
        let (_, action, mut x) = setup(3, 0.8, 5);
        for (i, v) in x.iter_mut().enumerate() {
            *v += 0.01 * ((i as f64) * 0.7).sin();
        }
        let g = action.gradient(&x).unwrap();
        let h = 1e-5;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (action.value(&xp).unwrap() - action.value(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "coordinate {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn exact_hessian_agrees_with_differences() {
        let (_, action, x) = setup(4, 1.0, 8);
        let exact = action.hessian(&x).unwrap();
        let fd = action.hessian_finite_difference(&x, 1e-3).unwrap();
        let scale = exact.amax();
        let worst = (&exact - &fd).amax();
        assert!(worst < 1e-4 * scale, "worst {worst} vs scale {scale}");
        assert!((&exact - exact.transpose()).amax() < 1e-12 * scale);
    }

    #[test]
    fn log_partition_is_gaussian_normalization() {
        let (state, action, mut x) = setup(2, 1.3, 4);
        let lay = action.layout;
        let t_len = lay.steps;
        for block in [Block::FeatureDual(1), Block::GradientDual(1)] {
            let off = lay.offset(block);
            for i in 0..lay.sym_len() {
                x[off + i] = 0.05 * ((i + off) as f64 * 1.3).cos();
            }
        }
        let (c, d) = state.couplings(1);
        let ones_t = DMatrix::from_element(t_len, t_len, 1.0);
        let m = (DMatrix::identity(t_len, t_len) - &c * &d).try_inverse().unwrap();
        let mut ph = DMatrix::zeros(t_len, 2 * t_len);
        ph.view_mut((0, 0), (t_len, t_len)).copy_from(&m);
        ph.view_mut((0, t_len), (t_len, t_len)).copy_from(&(&m * &c));
        let mut pg = DMatrix::zeros(t_len, 2 * t_len);
        pg.view_mut((0, 0), (t_len, t_len)).copy_from(&(&d * &m));
        pg.view_mut((0, t_len), (t_len, t_len))
            .copy_from(&(DMatrix::identity(t_len, t_len) + &d * &m * &c));
        let hd = lay.read_sym(&x, Block::FeatureDual(1));
        let gd = lay.read_sym(&x, Block::GradientDual(1));
        let a = ph.transpose() * hd * &ph + pg.transpose() * gd * &pg;
        let mut src = DMatrix::zeros(2 * t_len, 2 * t_len);
        src.view_mut((0, 0), (t_len, t_len)).copy_from(&ones_t);
        src.view_mut((t_len, t_len), (t_len, t_len)).copy_from(&ones_t);
        let direct = -0.5 * (DMatrix::identity(2 * t_len, 2 * t_len) + src * a).determinant().ln();
        let from_form = action.log_partition(&x, 1).unwrap();
        assert!((direct - from_form).abs() < 1e-12, "{direct} vs {from_form}");
        // and the moments it generates are the layer moments
        let lm = layer_moments(&c, &d, &ones_t, &ones_t).unwrap();
        assert!((lm.feature - &state.feature[0]).amax() < 1e-10);
    }

    #[test]
    fn weak_coupling_decouples_output() {
        let (_, action, x) = setup(3, 1e-9, 6);
        let base = action.value(&x).unwrap();
        let mut moved = x.clone();
        let off = action.layout.offset(Block::Output);
        for t in 0..6 {
            // shift Δ by 0.3 at every step
            moved[off + t] -= action.gamma * 0.3;
        }
        assert!((action.value(&moved).unwrap() - base).abs() < 1e-8);
    }
}
