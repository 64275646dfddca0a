//! Thread-local FLOP counters.
//!
//! Every matmul and convolution in [`crate::ndcore`] reports `2 × multiply-adds`
//! here. Matmuls are filed under the innermost [`with_category`] scope
//! (projection by default); convolutions always land in [`Category::Conv`] and
//! softmax/normalization/rotation work in [`Category::Elementwise`], which the
//! closed-form comparison ignores.
//!
//! Counters are per thread, so [`instrument_flops`] only sees work executed
//! on the calling thread.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    /// Linear maps of token rows (q/k/v/o projections, down/up-projections).
    Projection,
    /// `q kᵀ` and `p v` products.
    Attention,
    /// MLA decoupled-RoPE work, which the closed forms omit.
    RopeExtra,
    Conv,
    Elementwise,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub projection: u64,
    pub attention: u64,
    pub rope_extra: u64,
    pub conv: u64,
    pub elementwise: u64,
}

impl FlopCount {
    /// Matmul and convolution FLOPs (everything except elementwise work).
    pub fn matmul_and_conv(&self) -> u64 {
        self.projection + self.attention + self.rope_extra + self.conv
    }

    pub fn total(&self) -> u64 {
        self.matmul_and_conv() + self.elementwise
    }

    fn slot(&mut self, cat: Category) -> &mut u64 {
        match cat {
            Category::Projection => &mut self.projection,
            Category::Attention => &mut self.attention,
            Category::RopeExtra => &mut self.rope_extra,
            Category::Conv => &mut self.conv,
            Category::Elementwise => &mut self.elementwise,
        }
    }
}

impl Add for FlopCount {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            projection: self.projection + o.projection,
            attention: self.attention + o.attention,
            rope_extra: self.rope_extra + o.rope_extra,
            conv: self.conv + o.conv,
            elementwise: self.elementwise + o.elementwise,
        }
    }
}

impl Sub for FlopCount {
    type Output = Self;

    fn sub(self, o: Self) -> Self {
        Self {
            projection: self.projection - o.projection,
            attention: self.attention - o.attention,
            rope_extra: self.rope_extra - o.rope_extra,
            conv: self.conv - o.conv,
            elementwise: self.elementwise - o.elementwise,
        }
    }
}

thread_local! {
    static COUNTS: RefCell<FlopCount> = RefCell::new(FlopCount::default());
    static MATMUL_CATEGORY: Cell<Category> = const { Cell::new(Category::Projection) };
}

/// Run `f` with matmuls filed under `cat`.
pub fn with_category<R>(cat: Category, f: impl FnOnce() -> R) -> R {
    let prev = MATMUL_CATEGORY.with(|c| c.replace(cat));
    struct Restore(Category);
    impl Drop for Restore {
        fn drop(&mut self) {
            MATMUL_CATEGORY.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

/// Run `f` and return the FLOPs it executed on this thread.
pub fn instrument_flops<R>(f: impl FnOnce() -> R) -> (R, FlopCount) {
    let before = snapshot();
    let out = f();
    (out, snapshot() - before)
}

pub fn snapshot() -> FlopCount {
    COUNTS.with(|c| *c.borrow())
}

pub(crate) fn record_matmul(flops: u64) {
    let cat = MATMUL_CATEGORY.with(Cell::get);
    record(cat, flops);
}

pub(crate) fn record(cat: Category, flops: u64) {
    COUNTS.with(|c| *c.borrow_mut().slot(cat) += flops);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_nest_and_restore() {
        let (_, n) = instrument_flops(|| {
            record_matmul(1);
            with_category(Category::Attention, || {
                record_matmul(10);
                with_category(Category::RopeExtra, || record_matmul(100));
                record_matmul(1000);
            });
            record_matmul(10000);
            record(Category::Conv, 7);
        });
        assert_eq!(n.projection, 10001);
        assert_eq!(n.attention, 1010);
        assert_eq!(n.rope_extra, 100);
        assert_eq!(n.conv, 7);
        assert_eq!(n.total(), 11118);
    }
}
