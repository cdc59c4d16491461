use std::time::{Duration, Instant};

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// `‖A − B‖_F² / ‖B‖_F²`.
pub fn nmse(a: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64> {
    if a.dim() != reference.dim() {
        return Err(Error::DimensionMismatch {
            what: "nmse operand",
            expected: reference.len(),
            actual: a.len(),
        });
    }
    let (err, total) = a
        .iter()
        .zip(reference.iter())
        .fold((0.0, 0.0), |(e, t), (&x, &y)| {
            (e + (x - y) * (x - y), t + y * y)
        });
    if total == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(err / total)
}

/// Median wall-clock duration of `f` over `repeats` runs, after `warmups`
/// untimed runs. Uses the monotonic clock.
pub fn time_op<F: FnMut()>(mut f: F, warmups: usize, repeats: usize) -> Duration {
    for _ in 0..warmups {
        f();
    }
    let mut samples: Vec<Duration> = (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed()
        })
        .collect();
    samples.sort_unstable();
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2
    }
}

/// Centered moving average with a window of `2 * radius + 1`, shrunk at the ends.
/// Display only; stored results are never smoothed.
pub fn moving_average(values: &[f64], radius: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::hint::black_box;

    #[test]
    fn nmse_examples() {
        let b = array![[1.0, -2.0], [0.5, 3.0]];
        assert_eq!(nmse(b.view(), b.view()).unwrap(), 0.0);
        assert!((nmse((&b * 2.0).view(), b.view()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nmse((&b * 0.0).view(), b.view()).unwrap(), 1.0);
    }

    #[test]
    fn nmse_errors() {
        let z = array![[0.0, 0.0]];
        assert!(matches!(
            nmse(z.view(), z.view()),
            Err(Error::ZeroReference)
        ));
        let b = array![[1.0, 2.0, 3.0]];
        assert!(nmse(z.view(), b.view()).is_err());
    }

    #[test]
    fn noop_timing_is_small() {
        let t = time_op(|| {}, 2, 20);
        assert!(t <= Duration::from_millis(1));
    }

    #[test]
    fn medians_are_stable_across_repeat_counts() {
        let work = || {
            let mut acc = 0u64;
            for i in 0..20_000u64 {
                acc = acc.wrapping_add(black_box(i * i));
            }
            black_box(acc);
        };
        let a = time_op(work, 3, 5).as_secs_f64();
        let b = time_op(work, 3, 50).as_secs_f64();
        assert!(a > 0.0 && b > 0.0);
        assert!(a / b < 3.0 && b / a < 3.0, "{a} vs {b}");
    }

    #[test]
    fn moving_average_edges() {
        assert_eq!(
            moving_average(&[1.0, 2.0, 3.0, 4.0], 1),
            vec![1.5, 2.0, 3.0, 3.5]
        );
        assert_eq!(moving_average(&[5.0], 3), vec![5.0]);
        assert_eq!(moving_average(&[1.0, 3.0], 0), vec![1.0, 3.0]);
    }
}
