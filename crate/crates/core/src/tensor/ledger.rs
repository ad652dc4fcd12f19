use std::collections::BTreeMap;

use serde::Serialize;

/// Identity of an allocation. Views (reshape) share their source's storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct StorageId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub bytes: u64,
    pub scope: String,
}

/// Saved-for-backward bytes, deduplicated by storage and attributed to the
/// scope that saved each storage first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ActivationLedger {
    entries: BTreeMap<StorageId, LedgerEntry>,
    scope_totals: BTreeMap<String, u64>,
    total: u64,
    peak_total: u64,
}

impl ActivationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` when the storage was not already on the ledger.
    pub fn record(&mut self, storage: StorageId, bytes: u64, scope: &str) -> bool {
        if self.entries.contains_key(&storage) {
            return false;
        }
        self.entries.insert(
            storage,
            LedgerEntry {
                bytes,
                scope: scope.to_string(),
            },
        );
        *self.scope_totals.entry(scope.to_string()).or_default() += bytes;
        self.total += bytes;
        self.peak_total = self.peak_total.max(self.total);
        true
    }

    /// Drops every entry; the peak survives.
    pub fn release(&mut self) {
        self.entries.clear();
        self.scope_totals.clear();
        self.total = 0;
    }

    pub fn entries(&self) -> &BTreeMap<StorageId, LedgerEntry> {
        &self.entries
    }

    pub fn scope_totals(&self) -> &BTreeMap<String, u64> {
        &self.scope_totals
    }

    pub fn scope_bytes(&self, scope: &str) -> u64 {
        self.scope_totals.get(scope).copied().unwrap_or(0)
    }

    /// Sum over every scope whose label starts with `prefix`.
    pub fn prefix_bytes(&self, prefix: &str) -> u64 {
        self.scope_totals
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn peak_total(&self) -> u64 {
        self.peak_total
    }

    pub fn contains(&self, storage: StorageId) -> bool {
        self.entries.contains_key(&storage)
    }
}
