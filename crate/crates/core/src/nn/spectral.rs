//! Spectral normalization by power iteration.

use tch::Tensor;

const EPS: f64 = 1e-12;

/// Left singular-vector estimate carried between calls.
#[derive(Debug)]
pub struct PowerState {
    pub u: Tensor,
}

impl PowerState {
    pub fn new(u: Tensor) -> Self {
        Self { u }
    }
}

#[derive(Debug)]
pub struct SpectralOutput {
    /// `weight / sigma`, shaped like the input weight; differentiable in the weight.
    pub weight: Tensor,
    pub state: PowerState,
    pub sigma: f64,
    /// The weight was (numerically) zero; it is returned unnormalized.
    pub degenerate: bool,
}

/// One power-iteration step on the `(out, -1)` matrix view of `weight`,
/// then division by the resulting singular-value estimate.
///
/// The singular vectors are treated as constants for differentiation, so
/// gradients reach the weight only through `sigma = u^T W v`.
pub fn spectral_normalize(weight: &Tensor, state: &PowerState) -> SpectralOutput {
    let rows = weight.size()[0];
    let mat = weight.reshape([rows, -1]);
    let (u, v) = tch::no_grad(|| {
        let m = mat.detach();
        let v = m.tr().mv(&state.u);
        let v = &v / (v.norm().double_value(&[]) + EPS);
        let u = m.mv(&v);
        let u = &u / (u.norm().double_value(&[]) + EPS);
        (u, v)
    });
    let sigma_t = u.dot(&mat.mv(&v));
    let sigma = sigma_t.double_value(&[]);
    if !(sigma.abs() > 1e-10) {
        return SpectralOutput {
            weight: weight.shallow_clone(),
            state: PowerState::new(state.u.shallow_clone()),
            sigma: 0.0,
            degenerate: true,
        };
    }
    SpectralOutput {
        weight: weight / sigma_t,
        state: PowerState::new(u),
        sigma,
        degenerate: false,
    }
}
