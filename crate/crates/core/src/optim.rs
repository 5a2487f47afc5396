//! Adam candidate updates and the projected parameter step.
//!
//! Adam produces a candidate update per tensor; for every trunk layer the
//! candidate is then projected onto the layer's null-space basis (when one
//! exists) before being applied as `w <- w - lr * dw`. The active task's
//! head is never projected, and frozen heads are never touched.

use crate::error::{Error, Result};
use crate::linalg::{scale_add, Matrix};
use crate::net::{Gradients, NetworkState};
use crate::nullspace::{project_update, NullSpaceBasis};

/// Adam moment hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Step-size schedule: the rate is multiplied by `factor` at each epoch in
/// `decay_epochs` (epochs are 1-based) and stays there.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 5e-5, decay_epochs: vec![30, 60], factor: 0.5 }
    }
}

impl LrSchedule {
    pub fn new(initial: f64, decay_epochs: Vec<usize>, factor: f64) -> Self {
        Self { initial, decay_epochs, factor }
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.initial * self.factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone)]
struct TensorState {
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl TensorState {
    fn new(rows: usize, cols: usize) -> Self {
        Self { m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols), step: 0 }
    }

    fn advance(&mut self, grad: &Matrix, p: &AdamParams) -> Matrix {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - p.beta1.powi(t);
        let bc2 = 1.0 - p.beta2.powi(t);
        let mut out = Matrix::zeros(grad.rows(), grad.cols());
        for i in 0..grad.data().len() {
            let g = grad.data()[i];
            let m = p.beta1 * self.m.data()[i] + (1.0 - p.beta1) * g;
            let v = p.beta2 * self.v.data()[i] + (1.0 - p.beta2) * g * g;
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = v;
            out.data_mut()[i] = (m / bc1) / ((v / bc2).sqrt() + p.epsilon);
        }
        out
    }
}

/// Adam moments for the trunk layers plus the active task's head.
///
/// One state is created per task: the head is new for each task, and the
/// trunk moments restart with it.
#[derive(Debug, Clone)]
pub struct AdamState {
    shared: Vec<TensorState>,
    head: TensorState,
    pub params: AdamParams,
}

/// Candidate update per tensor, before projection.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub shared: Vec<Matrix>,
    pub head: Matrix,
}

impl AdamState {
    pub fn new(net: &NetworkState, task: usize, params: AdamParams) -> Result<Self> {
        let shared = net
            .weights()
            .iter()
            .map(|w| TensorState::new(w.rows(), w.cols()))
            .collect();
        let head = net.head(task)?;
        Ok(Self {
            shared,
            head: TensorState::new(head.rows(), head.cols()),
            params,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.head.step
    }

    /// Advances the moments and returns the bias-corrected candidate
    /// `m_hat / (sqrt(v_hat) + eps)` per tensor.
    ///
    /// A non-finite gradient aborts the step before any state changes.
    pub fn candidate(&mut self, grads: &Gradients) -> Result<Candidate> {
        if grads.shared.len() != self.shared.len() {
            return Err(Error::Shape(format!(
                "adam: {} gradients for {} tensors",
                grads.shared.len(),
                self.shared.len()
            )));
        }
        for (l, (g, s)) in grads.shared.iter().zip(&self.shared).enumerate() {
            if (g.rows(), g.cols()) != (s.m.rows(), s.m.cols()) {
                return Err(Error::Shape(format!(
                    "adam: layer {l} gradient {}x{} vs moments {}x{}",
                    g.rows(),
                    g.cols(),
                    s.m.rows(),
                    s.m.cols()
                )));
            }
        }
        if (grads.head.rows(), grads.head.cols()) != (self.head.m.rows(), self.head.m.cols()) {
            return Err(Error::Shape("adam: head gradient shape mismatch".into()));
        }
        let finite = grads.shared.iter().all(Matrix::is_finite) && grads.head.is_finite();
        if !finite {
            return Err(Error::Numeric("non-finite gradient; step aborted".into()));
        }
        let shared = grads
            .shared
            .iter()
            .zip(&mut self.shared)
            .map(|(g, s)| s.advance(g, &self.params))
            .collect();
        let head = self.head.advance(&grads.head, &self.params);
        Ok(Candidate { shared, head })
    }
}

/// What one projected step did, for diagnostics.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Applied update per trunk layer (after projection).
    pub delta_shared: Vec<Matrix>,
    /// `<dw, g>` over the flattened trunk parameters.
    pub dot_candidate: f64,
    /// Frobenius norm of the trunk candidate.
    pub g_norm: f64,
    /// Frobenius norm of the applied trunk update.
    pub dw_norm: f64,
    /// Layers whose null space was empty this step (weights unchanged).
    pub empty_null_layers: Vec<usize>,
}

/// Applies one training step: project the candidate layer by layer (when a
/// basis is given), update the trunk and the active head as
/// `w <- w - lr * dw`.
pub fn projected_step(
    net: &mut NetworkState,
    candidate: &Candidate,
    basis: Option<&NullSpaceBasis>,
    lr: f64,
    task: usize,
) -> Result<StepOutcome> {
    if let Some(b) = basis {
        if b.layers.len() != net.linear_layer_count() {
            return Err(Error::Shape(format!(
                "basis covers {} layers, network has {}",
                b.layers.len(),
                net.linear_layer_count()
            )));
        }
    }
    let mut delta_shared = Vec::with_capacity(candidate.shared.len());
    let mut empty_null_layers = Vec::new();
    for (l, g) in candidate.shared.iter().enumerate() {
        let dw = match basis {
            Some(b) => {
                if b.layers[l].k() == 0 {
                    empty_null_layers.push(l);
                }
                project_update(&b.layers[l], g)?
            }
            None => g.clone(),
        };
        delta_shared.push(dw);
    }

    let mut dot = 0.0;
    let mut g_norm2 = 0.0;
    let mut dw_norm2 = 0.0;
    for (dw, g) in delta_shared.iter().zip(&candidate.shared) {
        for (d, c) in dw.data().iter().zip(g.data()) {
            dot += d * c;
            g_norm2 += c * c;
            dw_norm2 += d * d;
        }
    }

    for (w, dw) in net.weights_mut().iter_mut().zip(&delta_shared) {
        *w = scale_add(w, 1.0, dw, -lr)?;
    }
    let head = net.head_mut(task)?;
    *head = scale_add(head, 1.0, &candidate.head, -lr)?;

    Ok(StepOutcome {
        delta_shared,
        dot_candidate: dot,
        g_norm: g_norm2.sqrt(),
        dw_norm: dw_norm2.sqrt(),
        empty_null_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{
        backward, forward, BiasMode, FeatureBatch, InputShape, LayerSpec, NetConfig, NetworkState,
    };
    use crate::nullspace::compute_null_basis;

    fn tiny_net() -> NetworkState {
        let cfg = NetConfig {
            input: InputShape::Flat(2),
            layers: vec![LayerSpec::Dense { in_dim: 2, out_dim: 2, bias: BiasMode::None }],
            head_bias: BiasMode::None,
        };
        let mut net = NetworkState::new(&cfg, 17).unwrap();
        net.add_head(0, 2).unwrap();
        net
    }

    fn grads_of(net: &NetworkState, x: &FeatureBatch, y: &[usize]) -> Gradients {
        backward(net, &forward(net, x, 0).unwrap(), y).unwrap()
    }

    fn const_grads(net: &NetworkState, shared_val: f64) -> Gradients {
        Gradients {
            shared: net
                .weights()
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()).map(|_| shared_val))
                .collect(),
            head: {
                let h = net.head(0).unwrap();
                Matrix::zeros(h.rows(), h.cols())
            },
            loss: 1.0,
        }
    }

    #[test]
    fn zero_gradient_gives_zero_candidate() {
        let net = tiny_net();
        let mut adam = AdamState::new(&net, 0, AdamParams::default()).unwrap();
        let c = adam.candidate(&const_grads(&net, 0.0)).unwrap();
        assert_eq!(c.shared[0], Matrix::zeros(2, 2));
        assert_eq!(c.head, Matrix::zeros(2, 2));
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let net = tiny_net();
        let mut adam = AdamState::new(&net, 0, AdamParams::default()).unwrap();
        let mut grads = const_grads(&net, 0.0);
        grads.shared[0] = Matrix::from_rows(&[&[0.5, -0.25], &[2.0, -1.0]]);
        let c = adam.candidate(&grads).unwrap();
        for (g, cand) in grads.shared[0].data().iter().zip(c.shared[0].data()) {
            let expected = g / (g.abs() + 1e-8);
            assert!((cand - expected).abs() < 1e-12, "{cand} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_converges_to_sign() {
        let net = tiny_net();
        let mut adam = AdamState::new(&net, 0, AdamParams::default()).unwrap();
        let mut grads = const_grads(&net, 0.0);
        grads.shared[0] = Matrix::from_rows(&[&[0.7, -0.3], &[1.9, -0.01]]);
        let mut last = None;
        for _ in 0..200 {
            last = Some(adam.candidate(&grads).unwrap());
        }
        let c = last.unwrap();
        for (g, cand) in grads.shared[0].data().iter().zip(c.shared[0].data()) {
            assert!((cand - g.signum()).abs() < 1e-3, "{cand} vs sign {}", g.signum());
        }
        assert_eq!(adam.step_count(), 200);
    }

    #[test]
    fn non_finite_gradient_aborts_without_state_change() {
        let net = tiny_net();
        let mut adam = AdamState::new(&net, 0, AdamParams::default()).unwrap();
        let mut grads = const_grads(&net, 1.0);
        grads.shared[0].set(0, 0, f64::NAN);
        assert!(matches!(adam.candidate(&grads), Err(Error::Numeric(_))));
        assert_eq!(adam.step_count(), 0);
        // A clean step afterwards behaves like the very first step.
        let clean = const_grads(&net, 0.5);
        let c = adam.candidate(&clean).unwrap();
        let expected = 0.5 / (0.5 + 1e-8);
        assert!((c.shared[0].get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn unprojected_step_equals_plain_adam() {
        let x = FeatureBatch::Flat(Matrix::from_rows(&[&[0.4, -0.8], &[1.2, 0.3]]));
        let y = [0usize, 1];

        let mut net_a = tiny_net();
        let mut net_b = tiny_net();
        let mut adam_a = AdamState::new(&net_a, 0, AdamParams::default()).unwrap();
        let mut adam_b = AdamState::new(&net_b, 0, AdamParams::default()).unwrap();

        for _ in 0..5 {
            let ga = grads_of(&net_a, &x, &y);
            let ca = adam_a.candidate(&ga).unwrap();
            projected_step(&mut net_a, &ca, None, 1e-3, 0).unwrap();

            let gb = grads_of(&net_b, &x, &y);
            let cb = adam_b.candidate(&gb).unwrap();
            // Full-space basis: zero covariance retains every direction.
            let basis = crate::nullspace::NullSpaceBasis {
                layers: vec![compute_null_basis(&Matrix::zeros(2, 2), 1.0).unwrap()],
                a: 1.0,
            };
            projected_step(&mut net_b, &cb, Some(&basis), 1e-3, 0).unwrap();
        }
        for (wa, wb) in net_a.weights().iter().zip(net_b.weights()) {
            for (a, b) in wa.data().iter().zip(wb.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rank_one_covariance_projects_out_first_component() {
        // Single 2 -> 1 layer so the candidate is a 2x1 column.
        let cfg = NetConfig {
            input: InputShape::Flat(2),
            layers: vec![LayerSpec::Dense { in_dim: 2, out_dim: 1, bias: BiasMode::None }],
            head_bias: BiasMode::None,
        };
        let mut net = NetworkState::new(&cfg, 3).unwrap();
        net.add_head(0, 2).unwrap();
        // cov = e1 e1^T: null space is span(e2).
        let mut cov = Matrix::zeros(2, 2);
        cov.set(0, 0, 1.0);
        let basis = crate::nullspace::NullSpaceBasis {
            layers: vec![compute_null_basis(&cov, 1.0).unwrap()],
            a: 1.0,
        };
        let candidate = Candidate {
            shared: vec![Matrix::from_rows(&[&[1.0], &[1.0]])],
            head: Matrix::zeros(1, 2),
        };
        let out = projected_step(&mut net, &candidate, Some(&basis), 1.0, 0).unwrap();
        let dw = &out.delta_shared[0];
        assert!(dw.get(0, 0).abs() <= 1e-12);
        assert!((dw.get(1, 0) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn empty_null_space_leaves_layer_unchanged() {
        let mut net = tiny_net();
        let before = net.weights()[0].clone();
        // Covariance with two well-separated eigenvalues and a = 1 retains
        // only lambda_min; shrink further by zeroing the basis by hand.
        let mut basis = crate::nullspace::NullSpaceBasis {
            layers: vec![compute_null_basis(&Matrix::identity(2), 1.0).unwrap()],
            a: 1.0,
        };
        basis.layers[0].u2 = Matrix::zeros(2, 0);
        basis.layers[0].lambda2.clear();
        let candidate = Candidate {
            shared: vec![Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]])],
            head: Matrix::zeros(2, 2),
        };
        let out = projected_step(&mut net, &candidate, Some(&basis), 0.5, 0).unwrap();
        assert_eq!(out.empty_null_layers, vec![0]);
        assert_eq!(net.weights()[0], before);
    }

    #[test]
    fn frozen_heads_stay_bit_identical_across_steps() {
        let cfg = NetConfig {
            input: InputShape::Flat(2),
            layers: vec![LayerSpec::Dense { in_dim: 2, out_dim: 3, bias: BiasMode::Augmented }],
            head_bias: BiasMode::Augmented,
        };
        let mut net = NetworkState::new(&cfg, 9).unwrap();
        net.add_head(0, 2).unwrap();
        net.freeze_head(0).unwrap();
        net.add_head(1, 2).unwrap();
        let frozen_bits: Vec<u64> = net.head(0).unwrap().data().iter().map(|v| v.to_bits()).collect();

        let x = FeatureBatch::Flat(Matrix::from_rows(&[&[0.4, -0.8], &[1.2, 0.3]]));
        let mut adam = AdamState::new(&net, 1, AdamParams::default()).unwrap();
        for _ in 0..20 {
            let trace = forward(&net, &x, 1).unwrap();
            let grads = backward(&net, &trace, &[0, 1]).unwrap();
            let cand = adam.candidate(&grads).unwrap();
            projected_step(&mut net, &cand, None, 1e-2, 1).unwrap();
        }
        let after: Vec<u64> = net.head(0).unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(frozen_bits, after);
    }

    #[test]
    fn descent_on_positive_inner_product_steps() {
        // Seeded toy run at a small fixed rate: nearly every step with a
        // positive raw inner product must decrease its own batch loss.
        let cfg = NetConfig {
            input: InputShape::Flat(3),
            layers: vec![
                LayerSpec::Dense { in_dim: 3, out_dim: 6, bias: BiasMode::Augmented },
                LayerSpec::Relu,
            ],
            head_bias: BiasMode::Augmented,
        };
        let mut net = NetworkState::new(&cfg, interp_seed()).unwrap();
        net.add_head(0, 3).unwrap();
        let x = FeatureBatch::Flat(Matrix::from_rows(&[
            &[0.9, 0.1, -0.3],
            &[-0.8, 0.5, 0.2],
            &[0.2, -0.9, 0.7],
            &[0.1, 0.8, 0.9],
            &[-0.5, -0.5, -0.1],
            &[0.7, -0.2, -0.8],
        ]));
        let y = [0usize, 1, 2, 0, 1, 2];
        // Weight rows = 3 inputs + bias; partial null space (k = 2 of 4).
        let mut cov = Matrix::zeros(4, 4);
        for (i, lam) in [1.0, 0.5, 0.1, 0.02].into_iter().enumerate() {
            cov.set(i, i, lam);
        }
        let basis = crate::nullspace::NullSpaceBasis {
            layers: vec![compute_null_basis(&cov, 10.0).unwrap()],
            a: 10.0,
        };
        let mut adam = AdamState::new(&net, 0, AdamParams::default()).unwrap();
        let lr = 1e-4;
        let mut positive = 0u64;
        let mut decreased = 0u64;
        for _ in 0..400 {
            let trace = forward(&net, &x, 0).unwrap();
            let grads = backward(&net, &trace, &y).unwrap();
            let before = grads.loss;
            let cand = adam.candidate(&grads).unwrap();
            // Raw-gradient inner product including the head term.
            let mut dot_raw = 0.0;
            let out = projected_step(&mut net, &cand, Some(&basis), lr, 0).unwrap();
            for (dw, g) in out.delta_shared.iter().zip(&grads.shared) {
                dot_raw += dw.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>();
            }
            dot_raw += cand.head.data().iter().zip(grads.head.data()).map(|(a, b)| a * b).sum::<f64>();
            let after = crate::net::batch_loss(&net, &x, &y, 0).unwrap();
            if dot_raw > 0.0 {
                positive += 1;
                if after < before {
                    decreased += 1;
                }
            }
        }
        assert!(positive > 300, "too few informative steps: {positive}");
        let ratio = decreased as f64 / positive as f64;
        assert!(ratio >= 0.99, "descent ratio {ratio:.4}");
    }

    fn interp_seed() -> u64 {
        424242
    }

    #[test]
    fn lr_schedule_decays_at_epochs() {
        let s = LrSchedule::new(1e-3, vec![8, 15], 0.5);
        assert_eq!(s.rate_at(1), 1e-3);
        assert_eq!(s.rate_at(7), 1e-3);
        assert_eq!(s.rate_at(8), 5e-4);
        assert_eq!(s.rate_at(14), 5e-4);
        assert_eq!(s.rate_at(15), 2.5e-4);
        let d = LrSchedule::default();
        assert_eq!(d.initial, 5e-5);
        assert_eq!(d.decay_epochs, vec![30, 60]);
    }
}
