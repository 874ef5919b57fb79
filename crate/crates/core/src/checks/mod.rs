//! Self-checks behind the `gradcheck` and `divcheck` commands.

pub mod div;
pub mod grad;

/// One named check: passes when `error < tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckCase {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckCase {
    pub fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tolerance,
        }
    }

    /// NaN errors fail.
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}
