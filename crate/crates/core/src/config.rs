//! JSON model configuration.
//!
//! ```json
//! {
//!   "states": ["a", "b"],
//!   "rates": [[-1.0, 1.0], [1.0, -1.0]],
//!   "beta": [-1.0, -1.0],
//!   "sigma": [1.0, 1.0],
//!   "pi": [[{"u": 0.5, "w": 1.0}], []]
//! }
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Atom, BranchingMechanism, RateMatrix, StateSpace, SuperprocessModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub states: Vec<String>,
    pub rates: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub pi: Vec<Vec<Atom>>,
}

impl ModelConfig {
    pub fn into_model(self) -> SuperprocessModel {
        let n = self.states.len();
        let pi = if self.pi.is_empty() {
            vec![Vec::new(); n]
        } else {
            self.pi
        };
        SuperprocessModel::new(
            StateSpace::new(self.states),
            RateMatrix::new(self.rates),
            BranchingMechanism {
                beta: self.beta,
                sigma: self.sigma,
                pi,
            },
        )
    }

    pub fn from_model(m: &SuperprocessModel) -> Self {
        ModelConfig {
            states: m.space.labels.clone(),
            rates: m.rates.rows().to_vec(),
            beta: m.mech.beta.clone(),
            sigma: m.mech.sigma.clone(),
            pi: m.mech.pi.clone(),
        }
    }
}

/// Parses and validates a model config. Errors carry the 1-based line of
/// the offending JSON token or key.
pub fn parse_model(text: &str) -> Result<SuperprocessModel> {
    let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config {
        line: e.line(),
        message: e.to_string(),
    })?;
    let model = cfg.into_model();
    let report = model.validate();
    if let Some(v) = report.violations.first() {
        return Err(Error::Config {
            line: key_line(text, v.field).unwrap_or(1),
            message: format!("{}: {}", v.field, v.message),
        });
    }
    Ok(model)
}

pub fn load_model(path: &std::path::Path) -> Result<SuperprocessModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_model(&text)
}

fn key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
  "states": ["a", "b"],
  "rates": [[-1.0, 1.0], [1.0, -1.0]],
  "beta": [-1.0, -1.0],
  "sigma": [1.0, 1.0],
  "pi": [[{"u": 0.5, "w": 1.0}], []]
}"#;

    #[test]
    fn parses_reference_shape() {
        let m = parse_model(GOOD).unwrap();
        assert_eq!(m.n(), 2);
        assert_eq!(m.mech.pi[0][0], Atom { u: 0.5, w: 1.0 });
        let round = serde_json::to_string(&ModelConfig::from_model(&m)).unwrap();
        assert_eq!(parse_model(&round).unwrap(), m);
    }

    #[test]
    fn negative_sigma_is_line_anchored() {
        let bad = GOOD.replace("\"sigma\": [1.0, 1.0]", "\"sigma\": [1.0, -1.0]");
        match parse_model(&bad) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 5);
                assert!(message.contains("sigma[1]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_token_is_rejected_with_line() {
        let bad = GOOD.replace("\"beta\": [-1.0, -1.0]", "\"beta\": [NaN, -1.0]");
        match parse_model(&bad) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_pi_defaults_to_no_atoms() {
        let text = r#"{"states": ["x"], "rates": [[0.0]], "beta": [-1.0], "sigma": [1.0]}"#;
        assert_eq!(parse_model(text).unwrap(), SuperprocessModel::feller(1.0, 1.0));
    }
}
