//! Reuse of the large unfolded-input buffers.
//!
//! A 3×3 convolution over a 128×128 map with 32 input channels unfolds to
//! ~38 MB. The allocator serves blocks that size straight from fresh pages,
//! so without reuse every training step pays for page faults on each one.

use std::cell::RefCell;

/// Blocks below this size are left to the allocator.
const MIN_POOLED: usize = 1 << 18;
const MAX_POOLED: usize = 6;

thread_local! {
    static FREE: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A buffer of `len` values, recycled when one is available. A recycled
/// buffer keeps whatever it held, so callers must overwrite every element.
pub(crate) fn take(len: usize) -> Vec<f64> {
    if len < MIN_POOLED {
        return vec![0.0; len];
    }
    let reused = FREE.with_borrow_mut(|free| {
        let best = free
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= len)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i);
        best.map(|i| free.swap_remove(i))
    });
    match reused {
        Some(mut v) => {
            v.truncate(len);
            v.resize(len, 0.0);
            v
        }
        None => vec![0.0; len],
    }
}

/// Hand a buffer back for reuse on this thread.
pub(crate) fn give(v: Vec<f64>) {
    if v.capacity() < MIN_POOLED {
        return;
    }
    FREE.with_borrow_mut(|free| {
        if free.len() == MAX_POOLED {
            // keep the larger blocks
            if let Some((i, _)) = free.iter().enumerate().min_by_key(|(_, b)| b.capacity()) {
                if free[i].capacity() < v.capacity() {
                    free[i] = v;
                }
            }
        } else {
            free.push(v);
        }
    });
}
