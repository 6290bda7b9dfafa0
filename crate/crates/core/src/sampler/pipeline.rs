use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread;

use crate::error::{Error, Result};

/// Bounded producer/consumer buffer settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefetchBuffer {
    pub producers: usize,
    pub capacity: usize,
}

/// An item as delivered to the consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineItem<T> {
    pub producer: usize,
    /// Per-producer sequence number, starting at 0.
    pub seq: u64,
    pub value: T,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineReport {
    pub produced: u64,
    pub consumed: u64,
    /// Items already built when the consumer stopped.
    pub discarded: u64,
}

enum Msg<T> {
    Item(PipelineItem<T>),
    Failed { producer: usize, seq: u64, error: Error },
}

/// Runs `producers` worker threads feeding a bounded FIFO of `capacity`.
///
/// Producer `w` builds its `k`-th item with `produce(w, k)`; returning
/// `Ok(None)` retires that worker. The consumer returns `false` to stop, after
/// which buffered and in-flight items are drained and counted as discarded.
/// A producer error stops the pipeline and is returned to the caller.
pub fn run_pipeline<T, P, C>(buf: PrefetchBuffer, produce: P, mut consume: C) -> Result<PipelineReport>
where
    T: Send,
    P: Fn(usize, u64) -> Result<Option<T>> + Sync,
    C: FnMut(PipelineItem<T>) -> bool,
{
    if buf.producers == 0 || buf.capacity == 0 {
        return Err(Error::Config(format!(
            "pipeline needs producers >= 1 and capacity >= 1, got {} and {}",
            buf.producers, buf.capacity
        )));
    }
    let stop = AtomicBool::new(false);
    let (tx, rx) = sync_channel::<Msg<T>>(buf.capacity);
    thread::scope(|scope| {
        let mut handles = Vec::with_capacity(buf.producers);
        for w in 0..buf.producers {
            let tx = tx.clone();
            let (stop, produce) = (&stop, &produce);
            handles.push(scope.spawn(move || {
                let mut dropped = 0u64;
                for seq in 0.. {
                    if stop.load(Ordering::Acquire) {
                        break;
                    }
                    let msg = match produce(w, seq) {
                        Ok(Some(value)) => Msg::Item(PipelineItem { producer: w, seq, value }),
                        Ok(None) => break,
                        Err(error) => Msg::Failed { producer: w, seq, error },
                    };
                    let failed = matches!(msg, Msg::Failed { .. });
                    if tx.send(msg).is_err() {
                        dropped += 1;
                        break;
                    }
                    if failed {
                        break;
                    }
                }
                dropped
            }));
        }
        drop(tx);
        let outcome = consume_all(&rx, &stop, &mut consume);
        stop.store(true, Ordering::Release);
        let mut report = outcome.report;
        // Unblock producers waiting on a full buffer.
        for msg in rx.iter() {
            if let Msg::Item(_) = msg {
                report.discarded += 1;
                report.produced += 1;
            }
        }
        for h in handles {
            let dropped = h.join().map_err(|_| Error::Pipeline("producer thread panicked".into()))?;
            report.discarded += dropped;
            report.produced += dropped;
        }
        match outcome.failure {
            Some(e) => Err(e),
            None => Ok(report),
        }
    })
}

struct Outcome {
    report: PipelineReport,
    failure: Option<Error>,
}

fn consume_all<T, C>(rx: &Receiver<Msg<T>>, stop: &AtomicBool, consume: &mut C) -> Outcome
where
    C: FnMut(PipelineItem<T>) -> bool,
{
    let mut report = PipelineReport::default();
    for msg in rx.iter() {
        match msg {
            Msg::Item(item) => {
                report.produced += 1;
                report.consumed += 1;
                if !consume(item) {
                    stop.store(true, Ordering::Release);
                    return Outcome { report, failure: None };
                }
            }
            Msg::Failed { producer, seq, error } => {
                stop.store(true, Ordering::Release);
                let failure = Error::Pipeline(format!("producer {producer} failed on item {seq}: {error}"));
                return Outcome { report, failure: Some(failure) };
            }
        }
    }
    Outcome { report, failure: None }
}
