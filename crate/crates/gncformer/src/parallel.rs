//! Data-parallel fan-out over independent work items.
//!
//! Every call site maps a pure function over a slice and consumes the
//! results in index order, so the parallel and sequential paths produce
//! bit-identical output. The `parallel` feature (default) routes
//! [`batch_map`] through rayon; without it the sequential loop is used.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn batch_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn batch_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    batch_map_seq(items, f)
}

/// Sequential fallback, always available. [`batch_map`] must agree with
/// this bit-for-bit.
pub fn batch_map_seq<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let items: Vec<u64> = (0..100).collect();
        let f = |x: &u64| (*x as f64).sqrt().sin();
        let par = batch_map(&items, f);
        let seq = batch_map_seq(&items, f);
        assert_eq!(par.len(), seq.len());
        for (a, b) in par.iter().zip(&seq) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
