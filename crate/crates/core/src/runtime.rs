//! Process-wide thread control for the numeric kernels.
//!
//! One thread (the default) runs every kernel sequentially and is the
//! deterministic reference mode. More threads parallelize matmul and
//! convolution forward passes over output elements; each element is still
//! accumulated in a fixed order, so both modes produce identical bits.

use std::sync::{Arc, RwLock};

static POOL: RwLock<Option<Arc<rayon::ThreadPool>>> = RwLock::new(None);

/// Sets the kernel thread count. `n == 1` selects the sequential path.
pub fn set_threads(n: usize) -> Result<(), String> {
    if n == 0 {
        return Err("threads must be at least 1".into());
    }
    let pool = if n == 1 {
        None
    } else {
        Some(Arc::new(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| format!("failed to build thread pool: {e}"))?,
        ))
    };
    *POOL.write().unwrap() = pool;
    Ok(())
}

pub fn threads() -> usize {
    POOL.read()
        .unwrap()
        .as_ref()
        .map_or(1, |p| p.current_num_threads())
}

pub(crate) fn pool() -> Option<Arc<rayon::ThreadPool>> {
    POOL.read().unwrap().clone()
}
