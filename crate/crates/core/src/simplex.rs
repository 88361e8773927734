//! Maps from unconstrained logits to mixture weights on the probability
//! simplex, with their vector-Jacobian products.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frechet::WeightVector;
use crate::scalar::Real;

/// Euclidean projection of `z` onto the probability simplex.
///
/// Logits are shifted by their maximum before thresholding, so adding a
/// constant to every entry leaves the output bitwise unchanged whenever the
/// shifted inputs are computed exactly.
pub fn sparsemax<T: Real>(z: &[T]) -> Result<Vec<T>> {
    check(z)?;
    let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
    let u: Vec<T> = z.iter().map(|&x| x - zmax).collect();
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&i, &j| {
        u[j].partial_cmp(&u[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut cum = T::zero();
    let mut support_sum = T::zero();
    let mut k_star = 0usize;
    for (k0, &i) in order.iter().enumerate() {
        cum += u[i];
        let k = T::from_usize(k0 + 1).expect("usize to float");
        // strict: an exact tie at the threshold leaves the entry out
        if T::one() + k * u[i] > cum {
            k_star = k0 + 1;
            support_sum = cum;
        }
    }
    let k = T::from_usize(k_star).expect("usize to float");
    let tau = (support_sum - T::one()) / k;
    Ok(u.iter()
        .map(|&x| if x > tau { x - tau } else { T::zero() })
        .collect())
}

/// Gradient of `⟨adjoint, sparsemax(z)⟩` with respect to `z`, given the
/// forward output: the adjoint centred on the support, zero elsewhere.
pub fn sparsemax_vjp<T: Real>(output: &[T], adjoint: &[T]) -> Vec<T> {
    let support: Vec<usize> = (0..output.len()).filter(|&i| output[i] > T::zero()).collect();
    if support.is_empty() {
        return vec![T::zero(); output.len()];
    }
    let mean = support.iter().map(|&i| adjoint[i]).sum::<T>()
        / T::from_usize(support.len()).expect("usize to float");
    let mut g = vec![T::zero(); output.len()];
    for &i in &support {
        g[i] = adjoint[i] - mean;
    }
    g
}

pub fn softmax<T: Real>(z: &[T]) -> Result<Vec<T>> {
    check(z)?;
    let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&x| (x - zmax).exp()).collect();
    let s: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

pub fn softmax_vjp<T: Real>(output: &[T], adjoint: &[T]) -> Vec<T> {
    let inner: T = output.iter().zip(adjoint).map(|(&y, &v)| y * v).sum();
    output
        .iter()
        .zip(adjoint)
        .map(|(&y, &v)| y * (v - inner))
        .collect()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `σ(zᵢ) / Σⱼ σ(zⱼ)`
pub fn normalized_sigmoid<T: Real>(z: &[T]) -> Result<Vec<T>> {
    check(z)?;
    let s: Vec<T> = z.iter().map(|&x| sigmoid(x)).collect();
    let total: T = s.iter().copied().sum();
    Ok(s.into_iter().map(|x| x / total).collect())
}

pub fn normalized_sigmoid_vjp<T: Real>(z: &[T], output: &[T], adjoint: &[T]) -> Vec<T> {
    let total: T = z.iter().map(|&x| sigmoid(x)).sum();
    let inner: T = output.iter().zip(adjoint).map(|(&y, &v)| y * v).sum();
    z.iter()
        .zip(adjoint)
        .map(|(&x, &v)| {
            let s = sigmoid(x);
            s * (T::one() - s) * (v - inner) / total
        })
        .collect()
}

fn check<T: Real>(z: &[T]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::contract("activation of an empty logit vector"));
    }
    if let Some(i) = z.iter().position(|x| !x.is_finite()) {
        return Err(Error::contract(format!("logit #{i} is not finite")));
    }
    Ok(())
}

/// Activation used to turn edge logits into mixture weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Sparsemax,
    Softmax,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(&self, z: &[T]) -> Result<Vec<T>> {
        match self {
            Activation::Sparsemax => sparsemax(z),
            Activation::Softmax => softmax(z),
            Activation::Sigmoid => normalized_sigmoid(z),
        }
    }

    pub fn weights<T: Real>(&self, z: &[T]) -> Result<WeightVector<T>> {
        WeightVector::new(self.apply(z)?)
    }

    pub fn vjp<T: Real>(&self, z: &[T], output: &[T], adjoint: &[T]) -> Vec<T> {
        match self {
            Activation::Sparsemax => sparsemax_vjp(output, adjoint),
            Activation::Softmax => softmax_vjp(output, adjoint),
            Activation::Sigmoid => normalized_sigmoid_vjp(z, output, adjoint),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Sparsemax => "sparsemax",
            Activation::Softmax => "softmax",
            Activation::Sigmoid => "sigmoid",
        }
    }
}
