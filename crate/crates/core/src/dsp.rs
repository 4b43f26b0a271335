//! FFT plumbing shared by augmentation and feature extraction.

use std::any::{Any, TypeId};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

type PlanKey = (TypeId, usize, bool);

fn plans() -> &'static Mutex<HashMap<PlanKey, Box<dyn Any + Send + Sync>>> {
    static PLANS: OnceLock<Mutex<HashMap<PlanKey, Box<dyn Any + Send + Sync>>>> = OnceLock::new();
    PLANS.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Returns a cached FFT plan of the given length and direction.
pub fn fft_plan<T: Scalar>(len: usize, inverse: bool) -> Arc<dyn Fft<T>> {
    let key = (TypeId::of::<T>(), len, inverse);
    let mut map = plans().lock().expect("fft plan cache poisoned");
    if let Some(plan) = map.get(&key) {
        return plan
            .downcast_ref::<Arc<dyn Fft<T>>>()
            .expect("plan type matches key")
            .clone();
    }
    let mut planner = FftPlanner::<T>::new();
    let plan = if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    };
    map.insert(key, Box::new(plan.clone()));
    plan
}

/// Full linear convolution (`x.len() + h.len() - 1` samples).
pub fn convolve_full<T: Scalar>(x: &[T], h: &[T]) -> Vec<T> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    if x.len().min(h.len()) <= 32 {
        let mut out = vec![T::zero(); out_len];
        for (i, &xi) in x.iter().enumerate() {
            for (j, &hj) in h.iter().enumerate() {
                out[i + j] += xi * hj;
            }
        }
        return out;
    }
    let n = fast_fft_len(out_len);
    let fwd = fft_plan::<T>(n, false);
    let inv = fft_plan::<T>(n, true);
    // Both real inputs share one complex transform: z = x + i·h.
    let mut z = vec![Complex::new(T::zero(), T::zero()); n];
    for (zi, &xi) in z.iter_mut().zip(x) {
        zi.re = xi;
    }
    for (zi, &hi) in z.iter_mut().zip(h) {
        zi.im = hi;
    }
    fwd.process(&mut z);
    let half = T::of(0.5);
    let mut prod = vec![Complex::new(T::zero(), T::zero()); n];
    for k in 0..n {
        let a = z[k];
        let b = z[(n - k) % n].conj();
        let xk = (a + b) * half;
        // (a − b) / 2i
        let d = (a - b) * half;
        let hk = Complex::new(d.im, -d.re);
        prod[k] = xk * hk;
    }
    inv.process(&mut prod);
    let scale = T::one() / T::of(n as f64);
    prod[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Smallest `2^a·3^b·5^c` that is at least `n`.
pub fn fast_fft_len(n: usize) -> usize {
    let mut best = n.next_power_of_two();
    let mut p5 = 1;
    while p5 < best {
        let mut p35 = p5;
        while p35 < best {
            let mut m = p35;
            while m < n {
                m *= 2;
            }
            best = best.min(m);
            p35 *= 3;
        }
        p5 *= 5;
    }
    best
}
