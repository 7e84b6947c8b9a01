//! Controller-side first-in-first-served queue: one negotiation in service
//! at a time, the rest waiting in negotiation-zone entry order.

use std::collections::VecDeque;

use thiserror::Error;

use crate::controller::CavId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("vehicle {0} is not the one in service")]
    NotInService(CavId),
    #[error("vehicle {0} is already queued or in service")]
    AlreadyQueued(CavId),
}

#[derive(Debug, Clone)]
pub struct ServingQueue<P> {
    waiting: VecDeque<(CavId, f64, P)>,
    in_service: Option<CavId>,
}

impl<P> Default for ServingQueue<P> {
    fn default() -> Self {
        ServingQueue {
            waiting: VecDeque::new(),
            in_service: None,
        }
    }
}

impl<P> ServingQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn in_service(&self) -> Option<CavId> {
        self.in_service
    }

    pub fn is_busy(&self) -> bool {
        self.in_service.is_some()
    }

    pub fn waiting_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn contains(&self, cav: CavId) -> bool {
        self.in_service == Some(cav) || self.waiting.iter().any(|(c, _, _)| *c == cav)
    }

    /// A first proposal arrives. Returns it back when it can be served
    /// immediately; otherwise it waits, ordered by `t_start`.
    pub fn arrive(&mut self, cav: CavId, t_start: f64, item: P) -> Result<Option<(CavId, P)>, QueueError> {
        if self.contains(cav) {
            return Err(QueueError::AlreadyQueued(cav));
        }
        if self.in_service.is_none() {
            self.in_service = Some(cav);
            return Ok(Some((cav, item)));
        }
        let pos = self.waiting.partition_point(|(_, t, _)| *t <= t_start);
        self.waiting.insert(pos, (cav, t_start, item));
        Ok(None)
    }

    /// A follow-up proposal from the vehicle in service.
    pub fn resume(&self, cav: CavId) -> Result<(), QueueError> {
        if self.in_service == Some(cav) {
            Ok(())
        } else {
            Err(QueueError::NotInService(cav))
        }
    }

    /// The negotiation in service ended; returns the next one to serve.
    pub fn finish(&mut self, cav: CavId) -> Result<Option<(CavId, P)>, QueueError> {
        if self.in_service != Some(cav) {
            return Err(QueueError::NotInService(cav));
        }
        self.in_service = None;
        Ok(self.next())
    }

    fn next(&mut self) -> Option<(CavId, P)> {
        let (cav, _, item) = self.waiting.pop_front()?;
        self.in_service = Some(cav);
        Some((cav, item))
    }

    /// Drops a vehicle wherever it is; returns the next one to serve if the
    /// dropped vehicle was in service.
    pub fn cancel(&mut self, cav: CavId) -> Option<(CavId, P)> {
        if self.in_service == Some(cav) {
            self.in_service = None;
            return self.next();
        }
        self.waiting.retain(|(c, _, _)| *c != cav);
        None
    }

    pub fn flush(&mut self) -> Vec<CavId> {
        let mut out: Vec<CavId> = self.in_service.take().into_iter().collect();
        out.extend(self.waiting.drain(..).map(|(c, _, _)| c));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_in_service() {
        let mut q = ServingQueue::new();
        assert_eq!(q.arrive(1, 0.0, "a").unwrap(), Some((1, "a")));
        assert_eq!(q.arrive(3, 0.2, "c").unwrap(), None);
        assert_eq!(q.arrive(2, 0.1, "b").unwrap(), None);
        assert!(q.resume(2).is_err());
        assert_eq!(q.finish(1).unwrap(), Some((2, "b")));
        assert_eq!(q.cancel(2), Some((3, "c")));
        assert_eq!(q.finish(3).unwrap(), None);
        assert!(!q.is_busy());
    }

    #[test]
    fn duplicates_rejected() {
        let mut q = ServingQueue::new();
        q.arrive(1, 0.0, ()).unwrap();
        assert_eq!(q.arrive(1, 0.0, ()), Err(QueueError::AlreadyQueued(1)));
        q.arrive(2, 0.0, ()).unwrap();
        assert_eq!(q.flush(), vec![1, 2]);
    }
}
