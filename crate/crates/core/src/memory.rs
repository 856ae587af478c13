//! Bounded sample store shared by both online learners.
//!
//! Initial-frame entries are pinned and never evicted. Each insertion decays
//! the existing sample weights by `1 - learning_rate`, gives the new sample
//! weight `learning_rate`, and renormalizes the weights to sum to one.

#[derive(Clone, Debug)]
pub struct MemoryEntry<T> {
    pub sample: T,
    pub weight: f64,
    pub frame_index: usize,
    pub pinned: bool,
}

#[derive(Clone, Debug)]
pub struct SampleMemory<T> {
    entries: Vec<MemoryEntry<T>>,
    capacity: usize,
    learning_rate: f64,
}

impl<T> SampleMemory<T> {
    pub fn new(capacity: usize, learning_rate: f64) -> Self {
        assert!(capacity >= 1, "memory capacity must be at least 1");
        Self {
            entries: Vec::new(),
            capacity,
            learning_rate,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry<T>] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryEntry<T>> {
        self.entries.iter()
    }

    /// Seed with the initial-frame samples, all pinned with equal weight.
    pub fn insert_initial(&mut self, samples: Vec<T>, frame_index: usize) {
        for sample in samples {
            if self.entries.len() == self.capacity {
                break;
            }
            self.entries.push(MemoryEntry {
                sample,
                weight: 1.0,
                frame_index,
                pinned: true,
            });
        }
        self.normalize();
    }

    /// Append a sample, evicting the oldest unpinned entry when full.
    ///
    /// A memory made only of pinned entries at capacity drops the new sample.
    pub fn insert(&mut self, sample: T, frame_index: usize) -> bool {
        if self.entries.len() == self.capacity {
            match self.entries.iter().position(|e| !e.pinned) {
                Some(oldest) => {
                    self.entries.remove(oldest);
                }
                None => return false,
            }
        }
        let lr = self.learning_rate;
        let weight = if self.entries.is_empty() { 1.0 } else { lr };
        for e in &mut self.entries {
            e.weight *= 1.0 - lr;
        }
        self.entries.push(MemoryEntry {
            sample,
            weight,
            frame_index,
            pinned: false,
        });
        self.normalize();
        true
    }

    fn normalize(&mut self) {
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        if total > 0.0 {
            for e in &mut self.entries {
                e.weight /= total;
            }
        } else if !self.entries.is_empty() {
            let w = 1.0 / self.entries.len() as f64;
            for e in &mut self.entries {
                e.weight = w;
            }
        }
    }

    pub fn has_pinned(&self) -> bool {
        self.entries.iter().any(|e| e.pinned)
    }

    pub fn map<U, F: FnMut(&T) -> U>(&self, mut f: F) -> SampleMemory<U> {
        SampleMemory {
            entries: self
                .entries
                .iter()
                .map(|e| MemoryEntry {
                    sample: f(&e.sample),
                    weight: e.weight,
                    frame_index: e.frame_index,
                    pinned: e.pinned,
                })
                .collect(),
            capacity: self.capacity,
            learning_rate: self.learning_rate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frames(m: &SampleMemory<&'static str>) -> Vec<&'static str> {
        m.iter().map(|e| e.sample).collect()
    }

    #[test]
    fn evicts_oldest_unpinned() {
        let mut m = SampleMemory::new(2, 0.1);
        m.insert_initial(vec!["init"], 0);
        m.insert("A", 1);
        m.insert("B", 2);
        assert_eq!(frames(&m), vec!["init", "B"]);
    }

    #[test]
    fn below_capacity_nothing_evicted() {
        let mut m = SampleMemory::new(32, 0.1);
        m.insert_initial(vec![0], 0);
        for i in 1..10 {
            m.insert(i, i);
        }
        assert_eq!(m.len(), 10);
        m.insert(10, 10);
        assert_eq!(m.len(), 11);
        assert_eq!(m.iter().map(|e| e.sample).collect::<Vec<_>>(), (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn forty_inserts_into_capacity_32() {
        let mut m = SampleMemory::new(32, 0.1);
        m.insert_initial(vec![0usize], 0);
        // Scripted oracle: the pinned entry followed by the newest 31 frames.
        let mut oracle: Vec<usize> = vec![0];
        for i in 1..=40 {
            m.insert(i, i);
            oracle.push(i);
            if oracle.len() > 32 {
                oracle.remove(1);
            }
        }
        assert_eq!(m.len(), 32);
        assert_eq!(m.iter().map(|e| e.sample).collect::<Vec<_>>(), oracle);
        assert!(m.entries()[0].pinned);
    }

    #[test]
    fn weights_follow_learning_rate() {
        let mut m = SampleMemory::new(8, 0.1);
        m.insert_initial(vec!["a"], 0);
        assert_eq!(m.entries()[0].weight, 1.0);
        m.insert("b", 1);
        let w: Vec<f64> = m.iter().map(|e| e.weight).collect();
        assert!((w[0] - 0.9).abs() < 1e-12 && (w[1] - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pinned_and_capacity_invariants(cap in 1usize..12, n_init in 1usize..4,
                                          script in proptest::collection::vec(0u8..3, 0..80)) {
            let mut m = SampleMemory::new(cap, 0.1);
            m.insert_initial((0..n_init).collect(), 0);
            let pinned = m.len();
            for (i, _) in script.iter().enumerate() {
                m.insert(100 + i, i + 1);
                prop_assert!(m.len() <= cap);
                prop_assert_eq!(m.iter().filter(|e| e.pinned).count(), pinned);
                let total: f64 = m.iter().map(|e| e.weight).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}
