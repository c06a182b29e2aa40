//! Shared domain types for temporal action localization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A ground-truth action segment: start/end in seconds plus a class index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

impl ActionInstance {
    pub fn new(start: f64, end: f64, label: usize) -> Result<Self> {
        let a = ActionInstance { start, end, label };
        a.validate()?;
        Ok(a)
    }

    /// Start must strictly precede end.
    pub fn validate(&self) -> Result<()> {
        if !(self.start < self.end) {
            return Err(Error::Validation(format!(
                "action start {} must precede end {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// A scored predicted segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub score: f64,
}

/// Temporal intersection-over-union of two segments given as (start, end).
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inverted_segments() {
        assert!(ActionInstance::new(2.0, 2.0, 0).is_err());
        assert!(ActionInstance::new(3.0, 1.0, 0).is_err());
        assert!(ActionInstance::new(1.0, 3.0, 0).is_ok());
    }

    #[test]
    fn tiou_cases() {
        assert_eq!(tiou((0.0, 2.0), (0.0, 2.0)), 1.0);
        assert_eq!(tiou((0.0, 2.0), (4.0, 6.0)), 0.0);
        assert!((tiou((0.0, 4.0), (2.0, 6.0)) - 2.0 / 6.0).abs() < 1e-12);
    }
}
