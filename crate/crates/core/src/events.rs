//! Event model: single polarity spikes, time-sorted streams on a fixed sensor
//! grid, and batches of streams sharing one geometry.

use std::fmt;

use crate::error::{Error, Result};

/// One brightness-change spike emitted by pixel `(x, y)` at time `t` (µs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: f64,
    pub p: i8,
}

impl Event {
    pub fn new(x: u16, y: u16, t: f64, p: i8) -> Self {
        Event { x, y, t, p }
    }
}

/// A single invariant violation found by [`EventStream::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    OutOfRange { index: usize, x: u16, y: u16 },
    Polarity { index: usize, p: i8 },
    /// Negative or non-finite timestamp.
    Timestamp { index: usize, t: f64 },
    Decreasing { index: usize, prev: f64, t: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::OutOfRange { index, x, y } => {
                write!(f, "event {index}: coordinate ({x}, {y}) outside the sensor")
            }
            Violation::Polarity { index, p } => {
                write!(f, "event {index}: polarity {p} is not -1 or +1")
            }
            Violation::Timestamp { index, t } => {
                write!(f, "event {index}: timestamp {t} is negative or not finite")
            }
            Violation::Decreasing { index, prev, t } => {
                write!(f, "event {index}: timestamp {t} precedes previous {prev}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.violations.len();
        write!(f, "{n} violation{}", if n == 1 { "" } else { "s" })?;
        for v in self.violations.iter().take(8) {
            write!(f, "\n  {v}")?;
        }
        if self.violations.len() > 8 {
            write!(f, "\n  ... and {} more", self.violations.len() - 8)?;
        }
        Ok(())
    }
}

/// Time-sorted events of one sensor of size `width × height`.
///
/// Fields are public so that raw (possibly invalid) data can be inspected
/// with [`validate`](Self::validate); the checked constructors are
/// [`new`](Self::new) and [`from_unsorted`](Self::from_unsorted).
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        let stream = EventStream { width, height, events };
        let report = stream.validate();
        if report.is_empty() {
            Ok(stream)
        } else {
            Err(Error::Validation(report))
        }
    }

    /// Sorts by timestamp (stable, so ties keep their input order) and validates.
    pub fn from_unsorted(width: u16, height: u16, mut events: Vec<Event>) -> Result<Self> {
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Self::new(width, height, events)
    }

    pub fn empty(width: u16, height: u16) -> Self {
        EventStream { width, height, events: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// `(t_first, t_last)`, or `None` for an empty stream.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let mut prev: Option<f64> = None;
        for (index, e) in self.events.iter().enumerate() {
            if e.x >= self.width || e.y >= self.height {
                violations.push(Violation::OutOfRange { index, x: e.x, y: e.y });
            }
            if e.p != 1 && e.p != -1 {
                violations.push(Violation::Polarity { index, p: e.p });
            }
            if !e.t.is_finite() || e.t < 0.0 {
                violations.push(Violation::Timestamp { index, t: e.t });
                continue;
            }
            if let Some(p) = prev {
                if e.t < p {
                    violations.push(Violation::Decreasing { index, prev: p, t: e.t });
                }
            }
            prev = Some(e.t);
        }
        ValidationReport { violations }
    }

    /// Events with `t0 <= t < t1`, order preserved.
    pub fn slice_time_window(&self, t0: f64, t1: f64) -> Result<EventStream> {
        if !(t0 <= t1) {
            return Err(Error::arg(format!("time window [{t0}, {t1}) has t0 > t1")));
        }
        let range = window_range(&self.events, t0, t1);
        Ok(EventStream {
            width: self.width,
            height: self.height,
            events: self.events[range].to_vec(),
        })
    }
}

/// Index range of the events of a sorted slice falling in `[t0, t1)`.
pub(crate) fn window_range(events: &[Event], t0: f64, t1: f64) -> std::ops::Range<usize> {
    let start = events.partition_point(|e| e.t < t0);
    let end = events.partition_point(|e| e.t < t1).max(start);
    start..end
}

/// `N` streams recorded on sensors of identical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct EventBatch {
    width: u16,
    height: u16,
    streams: Vec<EventStream>,
}

impl EventBatch {
    pub fn new(width: u16, height: u16, streams: Vec<EventStream>) -> Result<Self> {
        if let Some(s) = streams.iter().find(|s| s.width != width || s.height != height) {
            return Err(Error::arg(format!(
                "stream geometry {}x{} differs from batch geometry {width}x{height}",
                s.width, s.height
            )));
        }
        Ok(EventBatch { width, height, streams })
    }

    /// Batch of one or more streams; geometry taken from the first.
    pub fn from_streams(streams: Vec<EventStream>) -> Result<Self> {
        let first = streams
            .first()
            .ok_or_else(|| Error::arg("cannot infer geometry of an empty batch"))?;
        let (w, h) = (first.width, first.height);
        Self::new(w, h, streams)
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn streams(&self) -> &[EventStream] {
        &self.streams
    }

    pub fn into_streams(self) -> Vec<EventStream> {
        self.streams
    }

    pub fn total_events(&self) -> usize {
        self.streams.iter().map(EventStream::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64) -> Event {
        Event::new(0, 0, t, 1)
    }

    #[test]
    fn valid_stream_has_empty_report() {
        let s = EventStream {
            width: 4,
            height: 4,
            events: vec![Event::new(0, 0, 1.0, 1), Event::new(3, 3, 2.0, -1)],
        };
        assert!(s.validate().is_empty());
    }

    #[test]
    fn x_equal_to_width_is_out_of_range() {
        let s = EventStream { width: 4, height: 4, events: vec![Event::new(4, 0, 1.0, 1)] };
        let r = s.validate();
        assert_eq!(r.violations, vec![Violation::OutOfRange { index: 0, x: 4, y: 0 }]);
    }

    #[test]
    fn zero_polarity_is_reported() {
        let s = EventStream { width: 4, height: 4, events: vec![Event::new(1, 1, 1.0, 0)] };
        let r = s.validate();
        assert_eq!(r.violations, vec![Violation::Polarity { index: 0, p: 0 }]);
    }

    #[test]
    fn decreasing_timestamps_are_reported() {
        let s = EventStream { width: 4, height: 4, events: vec![ev(5.0), ev(3.0), ev(-1.0)] };
        let r = s.validate();
        assert_eq!(r.len(), 2);
        assert!(matches!(r.violations[0], Violation::Decreasing { index: 1, .. }));
        assert!(matches!(r.violations[1], Violation::Timestamp { index: 2, .. }));
        assert!(EventStream::new(4, 4, s.events.clone()).is_err());
    }

    #[test]
    fn from_unsorted_is_stable() {
        let events = vec![
            Event::new(1, 0, 7.0, 1),
            Event::new(0, 0, 3.0, 1),
            Event::new(2, 0, 7.0, -1),
        ];
        let s = EventStream::from_unsorted(4, 4, events).unwrap();
        let xs: Vec<u16> = s.events.iter().map(|e| e.x).collect();
        assert_eq!(xs, vec![0, 1, 2]);
    }

    #[test]
    fn slicing_is_half_open() {
        let s = EventStream::new(4, 4, vec![ev(10.0), ev(50.0), ev(60.0)]).unwrap();
        let ts = |s: &EventStream| s.events.iter().map(|e| e.t).collect::<Vec<_>>();
        assert_eq!(ts(&s.slice_time_window(0.0, 50.0).unwrap()), vec![10.0]);
        assert_eq!(ts(&s.slice_time_window(50.0, 61.0).unwrap()), vec![50.0, 60.0]);
        assert!(s.slice_time_window(0.0, 0.0).unwrap().is_empty());
        assert!(s.slice_time_window(2.0, 1.0).is_err());
    }

    #[test]
    fn batch_rejects_mixed_geometry() {
        let a = EventStream::empty(4, 4);
        let b = EventStream::empty(4, 5);
        assert!(EventBatch::new(4, 4, vec![a.clone(), b]).is_err());
        assert_eq!(EventBatch::new(4, 4, vec![a]).unwrap().len(), 1);
    }
}
