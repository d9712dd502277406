//! Shared report types and serialization helpers.

use serde::{Serialize, Serializer};

pub(crate) fn finite_or_null<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_none()
    }
}

/// One line of a verification report.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub inputs: String,
    #[serde(serialize_with = "finite_or_null")]
    pub measured: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CheckResult {
    /// Passes when `|measured - expected| <= tolerance`.
    pub fn close(name: &str, inputs: String, measured: f64, expected: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            inputs,
            measured,
            expected,
            tolerance,
            pass: (measured - expected).abs() <= tolerance,
            error: None,
        }
    }

    /// Passes when `measured <= bound`.
    pub fn below(name: &str, inputs: String, measured: f64, bound: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            inputs,
            measured,
            expected: 0.0,
            tolerance: bound,
            pass: measured <= bound,
            error: None,
        }
    }

    pub fn failed(name: &str, inputs: String, err: impl std::fmt::Display) -> Self {
        CheckResult {
            name: name.to_string(),
            inputs,
            measured: f64::NAN,
            expected: f64::NAN,
            tolerance: 0.0,
            pass: false,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub suite: String,
    pub passed: usize,
    pub failed: usize,
    pub checks: Vec<CheckResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl VerificationReport {
    pub fn new(suite: &str, checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().filter(|c| c.pass).count();
        VerificationReport {
            suite: suite.to_string(),
            passed,
            failed: checks.len() - passed,
            checks,
            note: None,
        }
    }

    /// A suite that does not apply to the model.
    pub fn skipped(suite: &str, reason: &str) -> Self {
        let mut r = VerificationReport::new(suite, Vec::new());
        r.note = Some(reason.to_string());
        r
    }

    /// Concatenates several suites under one name.
    pub fn merge(suite: &str, parts: Vec<VerificationReport>) -> Self {
        let notes: Vec<String> = parts
            .iter()
            .filter_map(|p| p.note.as_ref().map(|n| format!("{}: {n}", p.suite)))
            .collect();
        let checks = parts.into_iter().flat_map(|p| p.checks).collect();
        let mut r = VerificationReport::new(suite, checks);
        if !notes.is_empty() {
            r.note = Some(notes.join("; "));
        }
        r
    }

    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}
