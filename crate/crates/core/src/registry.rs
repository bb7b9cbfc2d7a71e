//! Name-keyed registries of interchangeable strategies.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{CoreError, Result};

type Factory<T, A> = Box<dyn Fn(&A) -> Result<Box<T>> + Send + Sync>;

struct Entry<T: ?Sized, A> {
    description: &'static str,
    factory: Factory<T, A>,
}

/// Maps strategy names to constructors producing trait objects.
///
/// `A` is the construction argument handed to every factory (a config
/// struct, a path, or `()`).
pub struct Registry<T: ?Sized, A = ()> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Entry<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `factory` under `name`, replacing any previous entry.
    pub fn register<F>(&mut self, name: &'static str, description: &'static str, factory: F) -> &mut Self
    where
        F: Fn(&A) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.entries.insert(
            name,
            Entry {
                description,
                factory: Box::new(factory),
            },
        );
        self
    }

    pub fn create(&self, name: &str, args: &A) -> Result<Box<T>> {
        let entry = self.entries.get(name).ok_or_else(|| {
            CoreError::Config(format!(
                "unknown {} '{name}' (available: {})",
                self.kind,
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        (entry.factory)(args)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn describe(&self, name: &str) -> Option<&'static str> {
        self.entries.get(name).map(|e| e.description)
    }
}

impl<T: ?Sized, A> fmt::Debug for Registry<T, A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("entries", &self.entries.keys().collect::<Vec<_>>())
            .finish()
    }
}
