//! Event streams and their discretization into count bins.
//!
//! Time conventions used throughout the crate:
//!
//! * bin `t` (1-based) covers the half-open interval `(δ(t-1), δt]`;
//! * an event at time `τ` lands in bin `⌈τ/δ⌉`, so an event exactly on the
//!   edge `δt` closes bin `t`;
//! * events at `τ = 0` go to bin 1;
//! * a horizon that is not a multiple of `δ` is padded up to a whole bin.
//!
//! Bins keep the exact event times, not only the counts, because the
//! dynamics evaluate the influence function at the true `τ_n`.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used to snap `τ/δ` onto an integer bin edge.
const EDGE_SNAP: f64 = 1e-9;

/// A single observed action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Zero-based actor index.
    pub actor: usize,
    /// Event time in seconds.
    pub time: f64,
}

impl Event {
    pub fn new(actor: usize, time: f64) -> Self {
        Self { actor, time }
    }
}

/// Supported on-disk event formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// Header `time,actor`, one event per row.
    Csv,
    /// One `{"t": float, "k": int}` object per line.
    Jsonl,
}

impl EventFormat {
    /// Guess the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") | Some("json") => EventFormat::Jsonl,
            _ => EventFormat::Csv,
        }
    }
}

/// Time-ordered collection of events for `p` actors over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    p: usize,
    horizon: f64,
}

impl EventStream {
    /// Build a stream, validating every event and stably sorting by time.
    pub fn new(mut events: Vec<Event>, p: usize, horizon: f64) -> Result<Self> {
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::data(format!("horizon must be finite and >= 0, got {horizon}")));
        }
        for (i, e) in events.iter().enumerate() {
            validate_event(e, p).map_err(|msg| Error::data(format!("event {i}: {msg}")))?;
            if e.time > horizon {
                return Err(Error::data(format!(
                    "event {i}: time {} exceeds horizon {horizon}",
                    e.time
                )));
            }
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(Self { events, p, horizon })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Total number of events, `N_T`.
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `time <= t_end`, keeping `p`; the horizon becomes `t_end`.
    pub fn truncated(&self, t_end: f64) -> EventStream {
        let cut = self.events.partition_point(|e| e.time <= t_end);
        EventStream {
            events: self.events[..cut].to_vec(),
            p: self.p,
            horizon: t_end,
        }
    }

    /// Per-actor event counts.
    pub fn counts_per_actor(&self) -> Vec<usize> {
        let mut c = vec![0; self.p];
        for e in &self.events {
            c[e.actor] += 1;
        }
        c
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "actor"])?;
        for e in &self.events {
            w.write_record([e.time.to_string(), e.actor.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, &JsonEvent { t: e.time, k: e.actor })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn validate_event(e: &Event, p: usize) -> std::result::Result<(), String> {
    if !e.time.is_finite() {
        return Err(format!("non-finite time {}", e.time));
    }
    if e.time < 0.0 {
        return Err(format!("negative time {}", e.time));
    }
    if e.actor >= p {
        return Err(format!("actor {} out of range for p = {p}", e.actor));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonEvent {
    t: f64,
    k: usize,
}

/// Options controlling [`ingest`].
#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Actor count; inferred as `max(actor) + 1` when absent.
    pub p: Option<usize>,
    /// Observation horizon; defaults to the last event time.
    pub horizon: Option<f64>,
}

/// Parse an event stream. Rows may arrive out of order; the result is
/// stably sorted by time. Errors carry the 1-based line number.
pub fn ingest<R: BufRead>(source: R, format: EventFormat, opts: IngestOptions) -> Result<EventStream> {
    let raw = match format {
        EventFormat::Csv => parse_csv(source)?,
        EventFormat::Jsonl => parse_jsonl(source)?,
    };
    let p = match opts.p {
        Some(p) => p,
        None => raw.iter().map(|(_, e)| e.actor + 1).max().unwrap_or(0),
    };
    for (line, e) in &raw {
        validate_event(e, p).map_err(|msg| Error::Parse { line: *line, msg })?;
    }
    let last = raw.iter().map(|(_, e)| e.time).fold(0.0, f64::max);
    let horizon = opts.horizon.unwrap_or(last);
    if horizon < last {
        return Err(Error::data(format!("horizon {horizon} precedes last event at {last}")));
    }
    EventStream::new(raw.into_iter().map(|(_, e)| e).collect(), p, horizon)
}

fn parse_csv<R: BufRead>(source: R) -> Result<Vec<(usize, Event)>> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split(',').map(str::trim);
        let (a, b) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 2 fields `time,actor`, got `{trimmed}`"),
                })
            }
        };
        if !header_seen {
            header_seen = true;
            if a.eq_ignore_ascii_case("time") {
                if !b.eq_ignore_ascii_case("actor") {
                    return Err(Error::Parse { line: lineno, msg: format!("bad header `{trimmed}`") });
                }
                continue;
            }
        }
        let time: f64 = a.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("unparseable time `{a}`"),
        })?;
        let actor = parse_actor(b).map_err(|msg| Error::Parse { line: lineno, msg })?;
        out.push((lineno, Event { actor, time }));
    }
    Ok(out)
}

fn parse_actor(s: &str) -> std::result::Result<usize, String> {
    if let Ok(v) = s.parse::<usize>() {
        return Ok(v);
    }
    match s.parse::<i64>() {
        Ok(v) if v < 0 => Err(format!("negative actor id {v}")),
        _ => Err(format!("unparseable actor `{s}`")),
    }
}

fn parse_jsonl<R: BufRead>(source: R) -> Result<Vec<(usize, Event)>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let time = v.get("t").and_then(|t| t.as_f64()).ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "missing numeric field `t`".into(),
        })?;
        let k = v.get("k").ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "missing field `k`".into(),
        })?;
        let actor = match (k.as_u64(), k.as_i64()) {
            (Some(u), _) => u as usize,
            (None, Some(i)) => {
                return Err(Error::Parse { line: lineno, msg: format!("negative actor id {i}") })
            }
            _ => return Err(Error::Parse { line: lineno, msg: format!("unparseable actor `{k}`") }),
        };
        out.push((lineno, Event { actor, time }));
    }
    Ok(out)
}

/// Bin index (1-based) of an event at time `tau` for bin width `delta`.
pub fn bin_index(tau: f64, delta: f64) -> usize {
    let q = tau / delta;
    let r = q.round();
    let b = if (q - r).abs() <= EDGE_SNAP * r.abs().max(1.0) { r } else { q.ceil() };
    (b as usize).max(1)
}

/// Number of bins needed to cover `[0, horizon]`.
pub fn bins_for_horizon(horizon: f64, delta: f64) -> usize {
    if horizon <= 0.0 {
        0
    } else {
        bin_index(horizon, delta)
    }
}

/// Per-bin event data: counts `x_t` plus the exact times of each bin's events.
#[derive(Debug, Clone)]
pub struct BinnedCounts {
    delta: f64,
    p: usize,
    n_bins: usize,
    // offsets[t-1]..offsets[t] indexes bin t's events
    offsets: Vec<usize>,
    events: Vec<Event>,
}

impl BinnedCounts {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of bins, `⌈T/δ⌉`.
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Padded horizon `n_bins · δ`.
    pub fn horizon(&self) -> f64 {
        self.n_bins as f64 * self.delta
    }

    pub fn total(&self) -> usize {
        self.events.len()
    }

    pub fn all_events(&self) -> &[Event] {
        &self.events
    }

    /// Events of bin `t` (1-based), in time order.
    pub fn bin_events(&self, t: usize) -> &[Event] {
        assert!(t >= 1 && t <= self.n_bins, "bin {t} out of range 1..={}", self.n_bins);
        &self.events[self.offsets[t - 1]..self.offsets[t]]
    }

    /// Fill `out` with the count vector `x_t`.
    pub fn counts_into(&self, t: usize, out: &mut DVector<f64>) {
        out.fill(0.0);
        for e in self.bin_events(t) {
            out[e.actor] += 1.0;
        }
    }

    pub fn counts(&self, t: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.p);
        self.counts_into(t, &mut v);
        v
    }

    /// Number of bins containing at least one event.
    pub fn nonempty_bins(&self) -> usize {
        self.offsets.windows(2).filter(|w| w[1] > w[0]).count()
    }

    /// Largest per-actor count in any bin divided by `δ`: the empirical `x_max`.
    pub fn max_rate(&self) -> f64 {
        let mut best = 0usize;
        let mut counts = vec![0usize; self.p];
        for t in 1..=self.n_bins {
            let ev = self.bin_events(t);
            if ev.is_empty() {
                continue;
            }
            for e in ev {
                counts[e.actor] += 1;
                best = best.max(counts[e.actor]);
            }
            for e in ev {
                counts[e.actor] = 0;
            }
        }
        best as f64 / self.delta
    }

    /// First `n` bins only.
    pub fn prefix(&self, n: usize) -> BinnedCounts {
        let n = n.min(self.n_bins);
        let end = self.offsets[n];
        BinnedCounts {
            delta: self.delta,
            p: self.p,
            n_bins: n,
            offsets: self.offsets[..=n].to_vec(),
            events: self.events[..end].to_vec(),
        }
    }
}

/// Assign every event to its bin `⌈τ/δ⌉`.
pub fn discretize(stream: &EventStream, delta: f64) -> Result<BinnedCounts> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::config(format!("delta must be positive, got {delta}")));
    }
    let last_bin = stream.events().last().map(|e| bin_index(e.time, delta)).unwrap_or(0);
    let n_bins = bins_for_horizon(stream.horizon(), delta).max(last_bin);
    let mut offsets = vec![0usize; n_bins + 1];
    for e in stream.events() {
        offsets[bin_index(e.time, delta)] += 1;
    }
    for t in 1..=n_bins {
        offsets[t] += offsets[t - 1];
    }
    Ok(BinnedCounts {
        delta,
        p: stream.p(),
        n_bins,
        offsets,
        events: stream.events().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn csv(s: &str, p: Option<usize>) -> Result<EventStream> {
        ingest(s.as_bytes(), EventFormat::Csv, IngestOptions { p, horizon: None })
    }

    #[test]
    fn parses_two_rows() {
        let s = csv("0.05,0\n0.30,1", Some(2)).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.events()[1], Event::new(1, 0.30));
    }

    #[test]
    fn empty_input() {
        let s = csv("", None).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.p(), 0);
        let s = csv("time,actor\n", Some(3)).unwrap();
        assert_eq!(s.len(), 0);
    }

    #[test]
    fn out_of_order_rows_sort_stably() {
        let sorted = csv("time,actor\n0.1,0\n0.2,1\n0.2,0\n0.5,1", None).unwrap();
        let shuffled = csv("time,actor\n0.5,1\n0.2,1\n0.1,0\n0.2,0", None).unwrap();
        // equal timestamps keep their input order
        assert_eq!(shuffled.events()[1], Event::new(1, 0.2));
        assert_eq!(shuffled.events()[2], Event::new(0, 0.2));
        let mut a: Vec<_> = sorted.events().iter().map(|e| (e.time.to_bits(), e.actor)).collect();
        let mut b: Vec<_> = shuffled.events().iter().map(|e| (e.time.to_bits(), e.actor)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn rejections_carry_line_numbers() {
        let err = csv("time,actor\n0.1,0\n-0.5,1", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = csv("0.1,0\n0.2,5", Some(2)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = csv("0.1,0\nabc,1", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = ingest(
            "{\"t\":0.1,\"k\":0}\n{\"t\":0.2}".as_bytes(),
            EventFormat::Jsonl,
            IngestOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn jsonl_matches_csv() {
        let a = csv("0.05,0\n0.30,1", Some(2)).unwrap();
        let b = ingest(
            "{\"t\": 0.05, \"k\": 0}\n{\"t\": 0.30, \"k\": 1}\n".as_bytes(),
            EventFormat::Jsonl,
            IngestOptions { p: Some(2), horizon: None },
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.05, 0.1), 1);
        assert_eq!(bin_index(0.1, 0.1), 1);
        assert_eq!(bin_index(0.3, 0.1), 3);
        assert_eq!(bin_index(0.7, 0.1), 7);
        assert_eq!(bin_index(0.30000000000000004, 0.1), 3);
        assert_eq!(bin_index(0.0, 0.1), 1);
        assert_eq!(bin_index(0.1000001, 0.1), 2);
    }

    #[test]
    fn discretize_counts() {
        let s = EventStream::new(
            vec![Event::new(0, 0.01), Event::new(0, 0.02), Event::new(0, 0.09), Event::new(1, 0.15)],
            2,
            0.25,
        )
        .unwrap();
        let b = discretize(&s, 0.1).unwrap();
        assert_eq!(b.n_bins(), 3);
        assert_eq!(b.counts(1).as_slice(), &[3.0, 0.0]);
        assert_eq!(b.counts(2).as_slice(), &[0.0, 1.0]);
        assert_eq!(b.counts(3).as_slice(), &[0.0, 0.0]);
        assert_eq!(b.bin_events(2)[0].time, 0.15);
        assert_eq!(b.max_rate(), 30.0);
        assert!(discretize(&s, 0.0).is_err());
        assert!(discretize(&s, -1.0).is_err());
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        (1usize..5, 1.0f64..50.0).prop_flat_map(|(p, horizon)| {
            prop::collection::vec((0..p, 0.0..horizon), 0..200)
                .prop_map(move |ev| {
                    let events = ev.into_iter().map(|(k, t)| Event::new(k, t)).collect();
                    EventStream::new(events, p, horizon).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn conservation_and_refinement(stream in arb_stream(), delta in 0.01f64..2.0) {
            let coarse = discretize(&stream, delta).unwrap();
            let fine = discretize(&stream, delta / 2.0).unwrap();
            let total: f64 = (1..=coarse.n_bins()).map(|t| coarse.counts(t).sum()).sum();
            prop_assert_eq!(total as usize, stream.len());
            prop_assert_eq!(fine.total(), stream.len());
            prop_assert!(fine.nonempty_bins() >= coarse.nonempty_bins());
            for t in 1..=coarse.n_bins() {
                for e in coarse.bin_events(t) {
                    prop_assert!(e.time <= delta * t as f64 * (1.0 + 1e-9));
                    prop_assert!(t == 1 || e.time > delta * (t - 1) as f64 * (1.0 - 1e-9));
                }
            }
            // times are carried through untouched
            prop_assert_eq!(fine.all_events(), stream.events());
        }

        #[test]
        fn csv_round_trip(stream in arb_stream()) {
            let mut buf = Vec::new();
            stream.write_csv(&mut buf).unwrap();
            let back = ingest(&buf[..], EventFormat::Csv,
                IngestOptions { p: Some(stream.p()), horizon: Some(stream.horizon()) }).unwrap();
            prop_assert_eq!(back, stream.clone());
            let mut buf = Vec::new();
            stream.write_jsonl(&mut buf).unwrap();
            let back = ingest(&buf[..], EventFormat::Jsonl,
                IngestOptions { p: Some(stream.p()), horizon: Some(stream.horizon()) }).unwrap();
            prop_assert_eq!(back, stream);
        }
    }
}
