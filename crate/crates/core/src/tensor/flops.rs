//! Exact FLOP accounting.
//!
//! One convention is shared by every counted kernel and by the analytical
//! formulas in [`crate::cost`]:
//!
//! | kernel                     | mul_adds        | exps | divs        | adds          |
//! |----------------------------|-----------------|------|-------------|---------------|
//! | matmul `m×k · k×n`         | `2mkn`          |      |             |               |
//! | elementwise add / bias add |                 |      |             | `n`           |
//! | scale (divide by scalar)   |                 |      | `n`         |               |
//! | softmax, per row of `L`    |                 | `L`  | `L`         | `3L`          |
//! | layer norm, per row of `C` | `4C`            |      | `C + 2`     | `2C`          |
//! | GELU, per element          | `8`             | `1`  | `1`         | `2`           |
//!
//! A multiply-add counts as two FLOPs, which is why `mul_adds` is incremented
//! by `2mkn` for a product. Softmax rows are charged their full length even
//! when entries are masked. Gathers, concatenations, transposes and embedding
//! lookups are free.

use serde::{Deserialize, Serialize};

/// Plain FLOP tally split by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flops {
    pub mul_adds: u64,
    pub exps: u64,
    pub divs: u64,
    pub adds: u64,
}

impl Flops {
    pub const ZERO: Flops = Flops {
        mul_adds: 0,
        exps: 0,
        divs: 0,
        adds: 0,
    };

    pub fn mul_adds(n: u64) -> Self {
        Flops {
            mul_adds: n,
            ..Self::ZERO
        }
    }

    pub fn total(&self) -> u64 {
        self.mul_adds + self.exps + self.divs + self.adds
    }

    pub fn scaled(self, k: u64) -> Self {
        Flops {
            mul_adds: self.mul_adds * k,
            exps: self.exps * k,
            divs: self.divs * k,
            adds: self.adds * k,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }
}

impl std::ops::Add for Flops {
    type Output = Flops;
    fn add(self, o: Flops) -> Flops {
        Flops {
            mul_adds: self.mul_adds + o.mul_adds,
            exps: self.exps + o.exps,
            divs: self.divs + o.divs,
            adds: self.adds + o.adds,
        }
    }
}

impl std::ops::AddAssign for Flops {
    fn add_assign(&mut self, o: Flops) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Flops {
    fn sum<I: Iterator<Item = Flops>>(iter: I) -> Flops {
        iter.fold(Flops::ZERO, |a, b| a + b)
    }
}

/// Counter threaded explicitly through every counted kernel.
///
/// Besides the four running totals it keeps an insertion-ordered breakdown
/// keyed by the current tag, so a forward pass can be compared term by term
/// against the analytical model.
#[derive(Clone, Debug, Default)]
pub struct FlopCounter {
    totals: Flops,
    current: Option<usize>,
    breakdown: Vec<(String, Flops)>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mul_adds(&self) -> u64 {
        self.totals.mul_adds
    }

    pub fn exps(&self) -> u64 {
        self.totals.exps
    }

    pub fn divs(&self) -> u64 {
        self.totals.divs
    }

    pub fn adds(&self) -> u64 {
        self.totals.adds
    }

    pub fn total(&self) -> u64 {
        self.totals.total()
    }

    pub fn totals(&self) -> Flops {
        self.totals
    }

    /// Routes subsequent counts to `tag` in the breakdown. Re-using a tag
    /// accumulates into the existing entry.
    pub fn set_tag(&mut self, tag: impl Into<String>) {
        let tag = tag.into();
        let idx = match self.breakdown.iter().position(|(t, _)| *t == tag) {
            Some(i) => i,
            None => {
                self.breakdown.push((tag, Flops::ZERO));
                self.breakdown.len() - 1
            }
        };
        self.current = Some(idx);
    }

    pub fn clear_tag(&mut self) {
        self.current = None;
    }

    /// Tagged entries in first-seen order. Counts made with no tag set appear
    /// only in the totals.
    pub fn breakdown(&self) -> &[(String, Flops)] {
        &self.breakdown
    }

    pub fn record(&mut self, f: Flops) {
        self.totals += f;
        if let Some(i) = self.current {
            self.breakdown[i].1 += f;
        }
    }

    pub(crate) fn matmul(&mut self, m: usize, k: usize, n: usize) {
        self.record(Flops::mul_adds(2 * (m * k * n) as u64));
    }

    pub(crate) fn adds_n(&mut self, n: usize) {
        self.record(Flops {
            adds: n as u64,
            ..Flops::ZERO
        });
    }

    pub(crate) fn divs_n(&mut self, n: usize) {
        self.record(Flops {
            divs: n as u64,
            ..Flops::ZERO
        });
    }

    pub(crate) fn softmax(&mut self, rows: usize, len: usize) {
        let n = (rows * len) as u64;
        self.record(Flops {
            mul_adds: 0,
            exps: n,
            divs: n,
            adds: 3 * n,
        });
    }

    pub(crate) fn layer_norm(&mut self, rows: usize, cols: usize) {
        let (r, c) = (rows as u64, cols as u64);
        self.record(Flops {
            mul_adds: 4 * r * c,
            exps: 0,
            divs: r * (c + 2),
            adds: 2 * r * c,
        });
    }

    pub(crate) fn gelu(&mut self, n: usize) {
        let n = n as u64;
        self.record(Flops {
            mul_adds: 8 * n,
            exps: n,
            divs: n,
            adds: 2 * n,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_equal_sum_of_kinds() {
        let mut c = FlopCounter::new();
        c.matmul(2, 3, 4);
        c.softmax(2, 5);
        c.layer_norm(1, 4);
        c.gelu(3);
        assert_eq!(c.total(), c.mul_adds() + c.exps() + c.divs() + c.adds());
        assert_eq!(c.mul_adds(), 48 + 16 + 24);
    }

    #[test]
    fn tagged_breakdown_preserves_first_seen_order() {
        let mut c = FlopCounter::new();
        c.set_tag("b");
        c.adds_n(1);
        c.set_tag("a");
        c.adds_n(2);
        c.set_tag("b");
        c.adds_n(3);
        c.clear_tag();
        c.adds_n(100);
        let tags: Vec<_> = c
            .breakdown()
            .iter()
            .map(|(t, f)| (t.as_str(), f.adds))
            .collect();
        assert_eq!(tags, vec![("b", 4), ("a", 2)]);
        assert_eq!(c.adds(), 106);
    }
}
