//! Name-keyed registries for interchangeable strategies.
//!
//! A strategy spec is `name` or `name:argument`, e.g. `threshold:0.4` or
//! `topk:0.3`. Each registry maps the name to a factory that receives the
//! optional argument.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Factory<T> = Box<dyn Fn(Option<&str>) -> Result<Box<T>> + Send + Sync>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &'static str,
        factory: impl Fn(Option<&str>) -> Result<Box<T>> + Send + Sync + 'static,
    ) -> &mut Self {
        self.entries.insert(name, Box::new(factory));
        self
    }

    pub fn create(&self, spec: &str) -> Result<Box<T>> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (spec.trim(), None),
        };
        let factory = self.entries.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_owned(),
        })?;
        factory(arg)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }
}

/// Parses a numeric strategy argument, falling back to `default` when absent.
pub fn parse_arg(kind: &'static str, arg: Option<&str>, default: f64) -> Result<f64> {
    match arg {
        None | Some("") => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| Error::Config(format!("{kind}: cannot parse argument {s:?}"))),
    }
}
