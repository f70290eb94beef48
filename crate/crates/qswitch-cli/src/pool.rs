//! Tiny scoped worker pool for independent replications.
//!
//! Jobs are indexed `0..count` and results come back in index order no
//! matter how the workers interleave, so threaded and single-threaded
//! runs produce identical artifacts. Simulations already use
//! counter-based draws, which makes the jobs embarrassingly parallel.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Run `job(i)` for `i in 0..count` on up to `threads` workers and
/// collect the results in index order.
pub fn run_jobs<T, F>(count: usize, threads: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = threads.max(1).min(count);
    if workers <= 1 {
        return (0..count).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..count).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = job(i);
                *slots[i].lock().expect("result slot poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("result slot poisoned")
                .expect("worker finished every claimed job")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_come_back_in_index_order() {
        for threads in [1, 2, 5] {
            let got = run_jobs(17, threads, |i| i * i);
            let want: Vec<usize> = (0..17).map(|i| i * i).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn zero_jobs_is_empty() {
        let got: Vec<u32> = run_jobs(0, 4, |_| unreachable!("no jobs to run"));
        assert!(got.is_empty());
    }
}
