//! Data-parallel map over independent work items (ensemble members, evaluation cases).
//!
//! With the `parallel` feature the map runs on rayon's pool; without it, or
//! when [`set_execution`] selects [`Execution::Sequential`], it is a plain
//! iterator. Output order always matches input order, so results are
//! bit-identical either way.

use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

pub fn set_execution(mode: Execution) {
    FORCE_SEQUENTIAL.store(mode == Execution::Sequential, Ordering::SeqCst);
}

pub fn execution() -> Execution {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst) {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match execution() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_in_both_modes() {
        let xs: Vec<u64> = (0..100).collect();
        let par = par_map(&xs, |x| x * x);
        set_execution(Execution::Sequential);
        let seq = par_map(&xs, |x| x * x);
        set_execution(Execution::Parallel);
        assert_eq!(par, seq);
    }
}
