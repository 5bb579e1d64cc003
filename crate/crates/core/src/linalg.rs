//! Dense kernels over `f32` rows with `f64` accumulation.

/// Dot product accumulated in four `f64` lanes. The summation order is fixed,
/// so results are identical on every run and thread count.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] as f64 * y[0] as f64;
        acc[1] += x[1] as f64 * y[1] as f64;
        acc[2] += x[2] as f64 * y[2] as f64;
        acc[3] += x[3] as f64 * y[3] as f64;
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Index and value of the best-matching centroid; ties go to the smallest index.
#[inline]
pub fn argmax_dot(row: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(row, c);
        if s > best.1 {
            best = (k, s);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f32> = (1..=7).map(|v| v as f32).collect();
        assert_eq!(dot(&a, &a), 140.0);
        assert_eq!(norm(&[3.0, 4.0]), 5.0);
    }

    #[test]
    fn argmax_prefers_smallest_index_on_ties() {
        let c = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(argmax_dot(&[1.0, 0.0], &c, 2), (0, 1.0));
        assert_eq!(argmax_dot(&[0.6, 0.8], &c, 2), (1, 0.8f32 as f64));
    }
}
