use std::fmt;

use serde::{Deserialize, Serialize};

/// Scalar attribute value carried by events and traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Decimal(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Decimal(d) => Some(*d),
            _ => None,
        }
    }

    pub fn value_type(&self) -> ValueType {
        match self {
            Value::Bool(_) => ValueType::Bool,
            Value::Int(_) => ValueType::Int,
            Value::Decimal(_) => ValueType::Decimal,
            Value::Text(_) => ValueType::Text,
        }
    }

    /// Parse a cell as the given column type.
    pub fn parse_as(cell: &str, ty: ValueType) -> Option<Value> {
        match ty {
            ValueType::Bool => parse_bool(cell).map(Value::Bool),
            ValueType::Int => cell.parse().ok().map(Value::Int),
            ValueType::Decimal => parse_decimal(cell).map(Value::Decimal),
            ValueType::Text => Some(Value::Text(cell.to_string())),
        }
    }

    /// CSV cell representation. Decimals always carry a fractional part or an
    /// exponent so that the column type survives a write/parse cycle.
    pub fn to_cell(&self) -> String {
        match self {
            Value::Bool(b) => b.to_string(),
            Value::Int(i) => i.to_string(),
            Value::Decimal(d) => format!("{d:?}"),
            Value::Text(s) => s.clone(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_cell())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Bool,
    Int,
    Decimal,
    Text,
}

impl ValueType {
    /// Narrowest type that accepts every non-empty cell of a column.
    pub fn infer<'a>(cells: impl IntoIterator<Item = &'a str>) -> Option<ValueType> {
        let (mut any, mut int, mut dec, mut boolean) = (false, true, true, true);
        for cell in cells {
            any = true;
            int &= cell.parse::<i64>().is_ok();
            dec &= parse_decimal(cell).is_some();
            boolean &= parse_bool(cell).is_some();
        }
        match (any, int, dec, boolean) {
            (false, ..) => None,
            (_, true, _, _) => Some(ValueType::Int),
            (_, _, true, _) => Some(ValueType::Decimal),
            (_, _, _, true) => Some(ValueType::Bool),
            _ => Some(ValueType::Text),
        }
    }
}

fn parse_bool(cell: &str) -> Option<bool> {
    match cell {
        "true" | "TRUE" | "True" => Some(true),
        "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

fn parse_decimal(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|d| d.is_finite())
}

/// Discrete feature value used in derived attributes and MDP states.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Feature {
    Bool(bool),
    Int(i64),
    Text(String),
}

impl Feature {
    pub fn text(s: impl Into<String>) -> Feature {
        Feature::Text(s.into())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Feature::Int(i) => Some(*i),
            Feature::Bool(b) => Some(*b as i64),
            Feature::Text(_) => None,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feature::Bool(b) => write!(f, "{b}"),
            Feature::Int(i) => write!(f, "{i}"),
            Feature::Text(s) => f.write_str(s),
        }
    }
}
