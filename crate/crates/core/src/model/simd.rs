//! Runtime dispatch to AVX2/FMA code generation for the scalar kernels below
//! it. The kernels are written with explicit 8-wide lanes so that results do
//! not depend on which path runs.

/// Defines `fn $name` that calls an AVX2+FMA compilation of `$body` when the
/// CPU supports it and the portable compilation otherwise.
macro_rules! dispatch {
    ($(#[$m:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block) => {
        $(#[$m])*
        #[allow(clippy::too_many_arguments)]
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            #[allow(clippy::too_many_arguments)]
            fn portable($($arg: $ty),*) $(-> $ret)? $body

            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                #[allow(clippy::too_many_arguments)]
                unsafe fn wide($($arg: $ty),*) $(-> $ret)? {
                    portable($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            portable($($arg),*)
        }
    };
}

pub(crate) use dispatch;

pub(crate) const LANES: usize = 8;

dispatch! {
    /// `y += a * x`.
    pub(crate) fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
        for (d, &v) in y.iter_mut().zip(x) {
            *d += a * v;
        }
    }
}

dispatch! {
    /// Accumulates `a · b` into eight independent lanes.
    pub(crate) fn dot_into(acc: &mut [f32; LANES], a: &[f32], b: &[f32]) {
        let mut ca = a.chunks_exact(LANES);
        let mut cb = b.chunks_exact(LANES);
        for (x, y) in (&mut ca).zip(&mut cb) {
            for i in 0..LANES {
                acc[i] += x[i] * y[i];
            }
        }
        for (i, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
            acc[i] += x * y;
        }
    }
}
