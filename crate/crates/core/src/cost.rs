//! Token cost estimation from a per-model price table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("model {0:?} is not in the price table")]
pub struct UnknownModel(pub String);

/// Dollars per 1,000 tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    pub input: f64,
    pub output: f64,
}

pub type PriceTable = BTreeMap<String, Price>;

pub const DEFAULT_MODEL: &str = "reference";

/// A single placeholder entry; real deployments supply their own rates.
pub fn default_price_table() -> PriceTable {
    PriceTable::from([(
        DEFAULT_MODEL.to_string(),
        Price {
            input: 0.003,
            output: 0.015,
        },
    )])
}

/// Input-side cost of sending `tokens` tokens to `model`.
pub fn estimate_cost(tokens: usize, model: &str, table: &PriceTable) -> Result<f64, UnknownModel> {
    let price = table
        .get(model)
        .ok_or_else(|| UnknownModel(model.to_string()))?;
    Ok(tokens as f64 / 1000.0 * price.input)
}
