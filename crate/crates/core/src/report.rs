use serde::{Deserialize, Serialize};

/// Outcome of a verification routine.
///
/// `witness` holds whatever locates the worst case: a pair of grid points,
/// a state, or a time, depending on the check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub pass: bool,
    pub worst_margin: f64,
    pub witness: Vec<f64>,
    pub message: String,
}

impl CheckReport {
    pub fn new(check: impl Into<String>) -> Self {
        CheckReport {
            check: check.into(),
            pass: true,
            worst_margin: f64::INFINITY,
            witness: Vec::new(),
            message: String::new(),
        }
    }

    /// Marks the report failed. The first failure keeps its witness and
    /// message; later ones only lower the margin.
    pub fn fail(&mut self, margin: f64, witness: Vec<f64>, message: String) {
        if self.pass {
            self.witness = witness;
            self.message = message;
        } else if !message.is_empty() {
            self.message.push_str("; ");
            self.message.push_str(&message);
        }
        self.pass = false;
        self.worst_margin = self.worst_margin.min(margin);
    }
}
