//! The tracking step in log-rate coordinates `θ = log(δλ)`.
//!
//! In these coordinates the innovation step is a mirror-descent step on
//! `ℓ̃(θ) = ⟨e^θ, 1⟩ - ⟨x, θ⟩` under the Bregman divergence of
//! `ψ(θ) = ⟨e^θ, 1⟩`, and the dynamics become `Φ̃(θ) = log(A e^θ + b)`.

use nalgebra::DVector;

/// `D(θ₁‖θ₂) = Σ e^θ₁ - e^θ₂ - e^θ₂ (θ₁ - θ₂)`.
pub fn bregman(theta1: &DVector<f64>, theta2: &DVector<f64>) -> f64 {
    theta1
        .iter()
        .zip(theta2.iter())
        .map(|(&a, &b)| {
            let eb = b.exp();
            a.exp() - eb - eb * (a - b)
        })
        .sum()
}

/// `log(a ∘ e^θ + b)` for diagonal `A = diag(a)`.
pub fn dual_map(theta: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(theta.len(), |k, _| (a[k] * theta[k].exp() + b[k]).ln())
}

/// `∇ℓ̃(θ) = e^θ - x`.
pub fn dual_gradient(theta: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    theta.zip_map(x, |t, c| t.exp() - c)
}

/// `η⟨∇ℓ̃(θ̂), θ⟩ + D(θ‖θ̂)`.
pub fn dual_objective(theta: &DVector<f64>, theta_hat: &DVector<f64>, x: &DVector<f64>, eta: f64) -> f64 {
    eta * dual_gradient(theta_hat, x).dot(theta) + bregman(theta, theta_hat)
}

/// Minimizer of [`dual_objective`]: `e^θ̃ = (1-η) e^θ̂ + η x`.
pub fn closed_form_step(theta_hat: &DVector<f64>, x: &DVector<f64>, eta: f64) -> DVector<f64> {
    theta_hat.zip_map(x, |t, c| ((1.0 - eta) * t.exp() + eta * c).ln())
}
