use crate::manifold::MatFn;
use crate::scalar::Real;

/// Eigenvalue gaps below this use `f'` at the midpoint.
pub const DEGENERATE_GAP: f64 = 1e-12;

/// First divided difference `(f(a) − f(b)) / (a − b)`, evaluated with
/// cancellation-free forms where the function allows it.
pub fn divided_difference<T: Real>(f: MatFn<T>, a: T, b: T) -> T {
    let d = a - b;
    if d.abs() < T::lit(DEGENERATE_GAP) {
        return f.derivative((a + b) * T::half());
    }
    match f {
        MatFn::Exp => b.exp() * d.exp_m1() / d,
        MatFn::Log => (d / b).ln_1p() / d,
        MatFn::Sqrt => T::one() / (a.sqrt() + b.sqrt()),
        MatFn::InvSqrt => {
            let (sa, sb) = (a.sqrt(), b.sqrt());
            -T::one() / (sa * sb * (sa + sb))
        }
        MatFn::Power(p) => {
            let x = d / b;
            b.powf(p - T::one()) * (p * x.ln_1p()).exp_m1() / x
        }
        MatFn::Rectify(_) => (f.apply(a) - f.apply(b)) / d,
    }
}
