//! Rolling per-chunk cache with oldest-first eviction.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Holds the entries of the most recent `window - 1` chunks: exactly the
/// context a new chunk may attend to. Entries are immutable once stored.
#[derive(Clone, Debug)]
pub struct RollingCache<E> {
    window: usize,
    entries: VecDeque<(usize, E)>,
    next: usize,
}

impl<E> RollingCache<E> {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Cache("window must be positive".into()));
        }
        Ok(Self {
            window,
            entries: VecDeque::new(),
            next: 0,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn capacity(&self) -> usize {
        self.window - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Absolute index the next pushed chunk must carry.
    pub fn next_chunk(&self) -> usize {
        self.next
    }

    pub fn chunks(&self) -> Vec<usize> {
        self.entries.iter().map(|(c, _)| *c).collect()
    }

    /// Stores the entry of chunk `chunk`; chunks must arrive in order.
    /// Returns the evicted chunk indices.
    pub fn push(&mut self, chunk: usize, entry: E) -> Result<Vec<usize>> {
        if chunk != self.next {
            return Err(Error::Cache(format!(
                "expected chunk {}, got {chunk}",
                self.next
            )));
        }
        self.next += 1;
        self.entries.push_back((chunk, entry));
        let mut evicted = Vec::new();
        while self.entries.len() > self.capacity() {
            if let Some((c, _)) = self.entries.pop_front() {
                evicted.push(c);
            }
        }
        Ok(evicted)
    }

    /// Advances past chunk `chunk` without caching anything for it.
    pub fn skip(&mut self, chunk: usize) -> Result<()> {
        if chunk != self.next {
            return Err(Error::Cache(format!(
                "expected chunk {}, got {chunk}",
                self.next
            )));
        }
        self.next += 1;
        Ok(())
    }

    /// Context for generating chunk `query`: cached chunks inside the
    /// window, without chunk 0 when `drop_first` is set.
    pub fn visible(&self, query: usize, drop_first: bool) -> Result<Vec<(usize, &E)>> {
        if query != self.next {
            return Err(Error::Cache(format!(
                "cache is positioned at chunk {}, asked for {query}",
                self.next
            )));
        }
        Ok(self
            .entries
            .iter()
            .filter(|(c, _)| query - c < self.window && !(drop_first && *c == 0))
            .map(|(c, e)| (*c, e))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evicts_oldest_first() {
        let mut c = RollingCache::new(3).unwrap();
        assert!(c.push(0, 'a').unwrap().is_empty());
        assert!(c.push(1, 'b').unwrap().is_empty());
        assert_eq!(c.push(2, 'c').unwrap(), vec![0]);
        assert_eq!(c.chunks(), vec![1, 2]);
        let vis: Vec<char> = c.visible(3, false).unwrap().into_iter().map(|(_, e)| *e).collect();
        assert_eq!(vis, vec!['b', 'c']);
    }

    #[test]
    fn rejects_out_of_order() {
        let mut c = RollingCache::new(2).unwrap();
        c.push(0, ()).unwrap();
        assert!(c.push(2, ()).is_err());
        assert!(c.visible(0, false).is_err());
    }

    #[test]
    fn window_one_keeps_nothing() {
        let mut c = RollingCache::new(1).unwrap();
        c.push(0, 1).unwrap();
        assert!(c.is_empty());
    }
}
