//! Named user-defined functions that filters and converts can reference.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::record::{Record, Value};

pub type FilterFn = Arc<dyn Fn(&Record) -> bool + Send + Sync>;
/// Returns the computed fields for each emitted record, or `None` to drop.
pub type ConvertFn = Arc<dyn Fn(&Record) -> Option<Vec<BTreeMap<String, Value>>> + Send + Sync>;

const NEAR_MIT: &[&str] = &[
    "cambridge",
    "somerville",
    "back bay",
    "beacon hill",
    "charlestown",
    "allston",
    "brighton",
];

pub const PRICE_RANGE: (f64, f64) = (100_000.0, 2_000_000.0);

#[derive(Clone, Default)]
pub struct UdfRegistry {
    filters: BTreeMap<String, FilterFn>,
    converts: BTreeMap<String, ConvertFn>,
}

impl fmt::Debug for UdfRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UdfRegistry")
            .field("filters", &self.filters.keys().collect::<Vec<_>>())
            .field("converts", &self.converts.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl UdfRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry preloaded with the builtin functions.
    pub fn with_builtins() -> Self {
        let mut reg = Self::default();
        reg.register_filter("within_two_miles_of_mit", |r| {
            r.get("address")
                .and_then(Value::as_str)
                .map(|a| {
                    let a = a.to_ascii_lowercase();
                    NEAR_MIT.iter().any(|n| a.contains(n))
                })
                .unwrap_or(false)
        });
        reg.register_filter("in_price_range", |r| {
            r.get("price")
                .and_then(Value::as_f64)
                .map(|p| (PRICE_RANGE.0..=PRICE_RANGE.1).contains(&p))
                .unwrap_or(false)
        });
        reg.register_convert("identity", |_| Some(vec![BTreeMap::new()]));
        reg.register_convert("extract_email_headers", |r| {
            let text = r.get("contents")?.as_str()?;
            let header = |prefix: &str| {
                text.lines()
                    .find_map(|l| l.strip_prefix(prefix))
                    .map(|v| Value::String(v.trim().to_string()))
            };
            let mut m = BTreeMap::new();
            m.insert("sender".to_string(), header("From:")?);
            m.insert("subject".to_string(), header("Subject:")?);
            Some(vec![m])
        });
        reg
    }

    pub fn register_filter<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&Record) -> bool + Send + Sync + 'static,
    {
        self.filters.insert(name.to_string(), Arc::new(f));
    }

    pub fn register_convert<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&Record) -> Option<Vec<BTreeMap<String, Value>>> + Send + Sync + 'static,
    {
        self.converts.insert(name.to_string(), Arc::new(f));
    }

    pub fn filter(&self, name: &str) -> Result<FilterFn> {
        self.filters
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownUdf(name.to_string()))
    }

    pub fn convert(&self, name: &str) -> Result<ConvertFn> {
        self.converts
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownUdf(name.to_string()))
    }

    pub fn has_filter(&self, name: &str) -> bool {
        self.filters.contains_key(name)
    }

    pub fn has_convert(&self, name: &str) -> bool {
        self.converts.contains_key(name)
    }
}
