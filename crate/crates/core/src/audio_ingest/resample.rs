//! Band-limited windowed-sinc resampling.

use std::f64::consts::PI;

use super::Recording;

/// Zero crossings of the sinc kernel on each side, in units of the (possibly
/// widened) kernel period.
const KERNEL_ZEROS: f64 = 16.0;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;
/// Above this many phases the kernel is evaluated on the fly.
const MAX_TABLE_PHASES: u64 = 4096;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(t: f64) -> f64 {
    // t in [-1, 1]
    if t.abs() >= 1.0 {
        return 0.0;
    }
    let x = PI * (t + 1.0);
    0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
}

struct Kernel {
    cutoff: f64,
    half_width: f64,
    taps: i64,
}

impl Kernel {
    fn new(src_hz: u64, dst_hz: u64) -> Self {
        let cutoff = ROLLOFF * (dst_hz as f64 / src_hz as f64).min(1.0);
        let half_width = KERNEL_ZEROS / cutoff;
        Kernel {
            cutoff,
            half_width,
            taps: half_width.ceil() as i64,
        }
    }

    fn eval(&self, tau: f64) -> f64 {
        self.cutoff * sinc(self.cutoff * tau) * blackman(tau / self.half_width)
    }

    /// Normalized taps for offsets `j = -taps+1 ..= taps`, where output time
    /// sits `frac` input samples after input index `q` and tap `j` weighs
    /// input sample `q - j`.
    fn phase(&self, frac: f64) -> Vec<f64> {
        let mut h: Vec<f64> = (-self.taps + 1..=self.taps)
            .map(|j| self.eval(j as f64 + frac))
            .collect();
        let sum: f64 = h.iter().sum();
        if sum.abs() > 1e-12 {
            h.iter_mut().for_each(|v| *v /= sum);
        }
        h
    }
}

/// Resamples to `target_hz`. The output length is
/// `round(len * target_hz / sample_rate_hz)`; metadata is carried over and a
/// recording already at the target rate is returned unchanged.
pub fn resample(r: &Recording, target_hz: u32) -> Recording {
    assert!(target_hz > 0, "target rate must be positive");
    if r.sample_rate_hz == target_hz {
        return r.clone();
    }
    let src = r.sample_rate_hz as u64;
    let dst = target_hz as u64;
    let g = gcd(src, dst);
    let (up, down) = (dst / g, src / g);

    let n_in = r.samples.len() as u64;
    let n_out = (n_in * dst + src / 2) / src;
    let kernel = Kernel::new(src, dst);
    let table: Option<Vec<Vec<f64>>> = (up <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|p| kernel.phase(p as f64 / up as f64)).collect());

    let x = &r.samples;
    let mut out = Vec::with_capacity(n_out as usize);
    for n in 0..n_out {
        // Output time in input samples is n * down / up = q + p / up.
        let num = n * down;
        let q = (num / up) as i64;
        let p = num % up;
        let owned;
        let taps: &[f64] = match &table {
            Some(t) => &t[p as usize],
            None => {
                owned = kernel.phase(p as f64 / up as f64);
                &owned
            }
        };
        let mut acc = 0.0;
        for (idx, &h) in taps.iter().enumerate() {
            let j = idx as i64 - kernel.taps + 1;
            let k = q - j;
            if k >= 0 && (k as u64) < n_in {
                acc += x[k as usize] * h;
            }
        }
        out.push(acc);
    }
    r.with_samples(out, target_hz)
}
