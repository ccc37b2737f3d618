//! Flat `key = value` text documents (a TOML subset) used for parameter
//! files, bounds files, metrics reports and fit results.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvDocument {
    table: toml::Table,
}

impl KvDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Format {
            offset: e.span().map(|s| s.start as u64).unwrap_or(0),
            reason: e.message().to_string(),
        })?;
        for (key, value) in &table {
            if value.is_table() {
                return Err(Error::param(key, "nested tables are not allowed"));
            }
        }
        Ok(KvDocument { table })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &toml::Value)> {
        self.table.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.table.contains_key(key)
    }

    pub fn number(&self, key: &str) -> Result<Option<f64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => as_number(v)
                .map(Some)
                .ok_or_else(|| Error::param(key, "expected a number")),
        }
    }

    pub fn integer(&self, key: &str) -> Result<Option<u64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(_) => Err(Error::param(key, "expected a non-negative integer")),
        }
    }

    pub fn string(&self, key: &str) -> Result<Option<&str>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(Error::param(key, "expected a string")),
        }
    }

    /// A two-element numeric array `[lo, hi]`.
    pub fn range(&self, key: &str) -> Result<Option<(f64, f64)>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Array(a)) if a.len() == 2 => match (as_number(&a[0]), as_number(&a[1])) {
                (Some(lo), Some(hi)) => Ok(Some((lo, hi))),
                _ => Err(Error::param(key, "expected [lo, hi] numbers")),
            },
            Some(_) => Err(Error::param(key, "expected [lo, hi]")),
        }
    }
}

fn as_number(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

/// Shortest round-trip representation that is also a valid TOML float.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_toml() {
        for x in [0.0, 1.0, 1e-6, 0.25, 6.02e23, -3.5e-300, 0.1 + 0.2] {
            let doc = KvDocument::parse(&format!("x = {}", format_float(x))).unwrap();
            assert_eq!(doc.number("x").unwrap(), Some(x));
        }
    }

    #[test]
    fn ranges_and_errors() {
        let doc = KvDocument::parse("a = [1, 2.5]\nb = \"s\"").unwrap();
        assert_eq!(doc.range("a").unwrap(), Some((1.0, 2.5)));
        assert!(doc.number("b").is_err());
        assert!(KvDocument::parse("[t]\nx = 1").is_err());
    }
}
