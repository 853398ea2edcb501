//! Name-keyed registries for interchangeable strategies.
//!
//! Each strategy family (pair miners, PCA solvers, chat backends, zero-shot
//! templates) exposes a `Registry` of constructors so the pipeline can pick an
//! implementation from a config string at runtime.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub struct Registry<C> {
    family: &'static str,
    entries: BTreeMap<&'static str, C>,
}

impl<C> Registry<C> {
    pub fn new(family: &'static str) -> Self {
        Self {
            family,
            entries: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &'static str, constructor: C) -> Self {
        self.register(name, constructor);
        self
    }

    pub fn register(&mut self, name: &'static str, constructor: C) {
        self.entries.insert(name, constructor);
    }

    pub fn get(&self, name: &str) -> Result<&C> {
        self.entries.get(name).ok_or_else(|| Error::UnknownStrategy {
            family: self.family,
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn family(&self) -> &'static str {
        self.family
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    struct Hello;
    impl Greeter for Hello {
        fn greet(&self) -> String {
            "hello".into()
        }
    }

    #[test]
    fn lookup_and_unknown_name() {
        let reg: Registry<fn() -> Box<dyn Greeter>> =
            Registry::new("greeter").with("hello", || Box::new(Hello));
        assert_eq!(reg.get("hello").unwrap()().greet(), "hello");
        let err = reg.get("bonjour").err().unwrap().to_string();
        assert!(err.contains("unknown greeter 'bonjour'"), "{err}");
        assert!(err.contains("hello"));
        assert_eq!(reg.names(), vec!["hello"]);
    }
}
