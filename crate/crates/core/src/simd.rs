//! Branch-free helpers for the kernel inner loops.
//!
//! Everything here is written so that the compiler can keep four lanes in
//! flight; [`avx2_dispatch!`] compiles a loop a second time with AVX2
//! enabled and picks that copy at run time when the CPU supports it. No
//! fused multiply-adds are emitted, so both copies round identically.

/// Number of independent accumulators in the reduction loops.
pub(crate) const LANES: usize = 4;

/// `exp(x)` for `x ≤ 0`, within a few ulp of `f64::exp`. Arguments below
/// `−708`, including `−∞`, give exactly 0.
#[inline(always)]
pub(crate) fn exp_nonpos(x: f64) -> f64 {
    const SHIFT: f64 = 6755399441055744.0; // 1.5 · 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const INV_FACT: [f64; 13] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
    ];
    let xc = x.max(-708.0);
    let kf = xc * std::f64::consts::LOG2_E + SHIFT;
    let n = kf - SHIFT;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    let mut p = INV_FACT[12];
    for c in INV_FACT[..12].iter().rev() {
        p = p * r + c;
    }
    // The low bits of `kf` hold n; adding the bias and shifting builds 2^n.
    let scale = f64::from_bits(kf.to_bits().wrapping_add(1023) << 52);
    if x < -708.0 {
        0.0
    } else {
        p * scale
    }
}

/// Logistic function `1/(1 + e^{−z})`, evaluated without overflow.
#[inline(always)]
pub(crate) fn sigmoid(z: f64) -> f64 {
    let e = exp_nonpos(-z.abs());
    let r = 1.0 / (1.0 + e);
    if z >= 0.0 {
        r
    } else {
        e * r
    }
}

/// Largest element, `−∞` for an empty slice.
#[inline(always)]
pub(crate) fn max_of(v: &[f64]) -> f64 {
    let mut lanes = [f64::NEG_INFINITY; LANES];
    let mut chunks = v.chunks_exact(LANES);
    for c in &mut chunks {
        for k in 0..LANES {
            lanes[k] = lanes[k].max(c[k]);
        }
    }
    let tail = chunks
        .remainder()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    lanes.iter().fold(tail, |m, &x| m.max(x))
}

/// Defines `$name` as a wrapper around the `#[inline(always)]` function
/// `$body` that runs an AVX2 build of it when available.
macro_rules! avx2_dispatch {
    ($(#[$meta:meta])* fn $name:ident => $body:ident($($arg:ident: $ty:ty),*) -> $ret:ty) => {
        $(#[$meta])*
        fn $name($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) -> $ret {
                    $body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the required CPU feature was detected above.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

pub(crate) use avx2_dispatch;
