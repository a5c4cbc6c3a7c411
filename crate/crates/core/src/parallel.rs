//! Deterministic fan-out over independent work items.
//!
//! Results land in a slot indexed by item position, so the output (and any
//! fold over it) is identical for every thread count — parallelism never
//! changes summation order.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Apply `f` to `0..count`, returning results in index order.
/// `threads == 1` runs inline; otherwise work is striped over scoped threads.
pub fn par_map<T, F>(count: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if threads <= 1 || count <= 1 {
        return (0..count).map(f).collect();
    }
    let workers = threads.min(count);
    let mut slots: Vec<Option<T>> = (0..count).map(|_| None).collect();
    let next = AtomicUsize::new(0);
    let slot_ptr = SendPtr(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let f = &f;
            let next = &next;
            let slot_ptr = &slot_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let v = f(i);
                // Safety: each index is claimed by exactly one worker, so the
                // writes target disjoint slots and the vec outlives the scope.
                unsafe { *slot_ptr.0.add(i) = Some(v) };
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled every slot")).collect()
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Sync for SendPtr<T> {}
unsafe impl<T> Send for SendPtr<T> {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_index_order() {
        let out = par_map(100, 4, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn single_thread_matches_parallel() {
        let seq = par_map(37, 1, |i| (i as f64).sin());
        let par = par_map(37, 8, |i| (i as f64).sin());
        assert_eq!(seq, par);
    }
}
