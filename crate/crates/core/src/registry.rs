//! Name-keyed registries of interchangeable strategies.
//!
//! Pooling modes, activation-map renderers and verification checks are all
//! trait objects looked up by the name a config file or command line gives.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub trait Named {
    fn name(&self) -> &str;
}

pub struct Registry<T: ?Sized + Named> {
    kind: &'static str,
    entries: Vec<Arc<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry { kind, entries: Vec::new() }
    }

    /// Add a strategy; names must be unique.
    pub fn register(&mut self, entry: Arc<T>) -> Result<()> {
        if self.entries.iter().any(|e| e.name() == entry.name()) {
            return Err(Error::config(format!("duplicate {} '{}'", self.kind, entry.name())));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Swap in a different strategy under an existing name.
    pub fn replace(&mut self, entry: Arc<T>) -> Result<()> {
        let slot = self
            .entries
            .iter_mut()
            .find(|e| e.name() == entry.name())
            .ok_or_else(|| Error::config(format!("no {} named '{}'", self.kind, entry.name())))?;
        *slot = entry;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries.iter().find(|e| e.name() == name).cloned().ok_or_else(|| {
            Error::config(format!("unknown {} '{}' (known: {})", self.kind, name, self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<T>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: ?Sized + Named> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("kind", &self.kind).field("entries", &self.names()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Thing(&'static str, u32);

    impl Named for Thing {
        fn name(&self) -> &str {
            self.0
        }
    }

    #[test]
    fn register_lookup_replace() {
        let mut r: Registry<Thing> = Registry::new("thing");
        r.register(Arc::new(Thing("a", 1))).unwrap();
        r.register(Arc::new(Thing("b", 2))).unwrap();
        assert!(r.register(Arc::new(Thing("a", 3))).is_err());
        assert_eq!(r.get("b").unwrap().1, 2);
        r.replace(Arc::new(Thing("b", 9))).unwrap();
        assert_eq!(r.get("b").unwrap().1, 9);
        let err = r.get("zzz").unwrap_err().to_string();
        assert!(err.contains("unknown thing 'zzz'") && err.contains("a, b"), "{err}");
        assert_eq!(r.names(), vec!["a", "b"]);
    }
}
