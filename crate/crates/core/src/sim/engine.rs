//! List-scheduling discrete-event engine over serialized resources.
//!
//! Each task occupies at most one resource for a fixed duration and may
//! depend on other tasks. Whenever a resource is idle it starts the ready
//! task with the lowest id, so program order doubles as priority. Time only
//! advances to the next task completion.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

pub type TaskId = usize;

#[derive(Debug, Clone)]
pub struct Task<K> {
    pub resource: Option<usize>,
    pub duration: f64,
    pub deps: Vec<TaskId>,
    pub kind: K,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineError {
    /// Some tasks never became ready.
    Deadlock {
        finished: usize,
        total: usize,
    },
    BadDependency {
        task: TaskId,
        dep: TaskId,
    },
    BadResource {
        task: TaskId,
        resource: usize,
    },
    BadDuration {
        task: TaskId,
    },
}

#[derive(Debug, Clone, Copy)]
struct Completion {
    time: f64,
    task: TaskId,
}

impl PartialEq for Completion {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Completion {}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Completion {
    // Reversed so the max-heap pops the earliest completion first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.task.cmp(&self.task))
    }
}

/// Runs the task graph and returns the execution span of every task.
pub fn run<K>(tasks: &[Task<K>], n_resources: usize) -> Result<Vec<Span>, EngineError> {
    let n = tasks.len();
    let mut indegree = vec![0usize; n];
    let mut dependents: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    for (id, t) in tasks.iter().enumerate() {
        if !(t.duration >= 0.0 && t.duration.is_finite()) {
            return Err(EngineError::BadDuration { task: id });
        }
        if let Some(r) = t.resource {
            if r >= n_resources {
                return Err(EngineError::BadResource {
                    task: id,
                    resource: r,
                });
            }
        }
        for &d in &t.deps {
            if d >= n || d == id {
                return Err(EngineError::BadDependency { task: id, dep: d });
            }
            indegree[id] += 1;
            dependents[d].push(id);
        }
    }

    let mut spans = vec![
        Span {
            start: f64::NAN,
            end: f64::NAN,
        };
        n
    ];
    let mut ready: Vec<BinaryHeap<Reverse<TaskId>>> = vec![BinaryHeap::new(); n_resources];
    let mut busy = vec![false; n_resources];
    let mut pending: BinaryHeap<Completion> = BinaryHeap::new();
    let mut released: Vec<TaskId> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut touched: Vec<usize> = Vec::new();
    let mut finished = 0usize;
    let mut now = 0.0f64;

    loop {
        // Settle everything released at `now`; resource-less tasks finish
        // instantly and may release more.
        while let Some(id) = released.pop() {
            match tasks[id].resource {
                Some(r) => {
                    ready[r].push(Reverse(id));
                    touched.push(r);
                }
                None => {
                    spans[id] = Span {
                        start: now,
                        end: now,
                    };
                    finished += 1;
                    for &d in &dependents[id] {
                        indegree[d] -= 1;
                        if indegree[d] == 0 {
                            released.push(d);
                        }
                    }
                }
            }
        }
        touched.sort_unstable();
        touched.dedup();
        for r in touched.drain(..) {
            if busy[r] {
                continue;
            }
            if let Some(Reverse(id)) = ready[r].pop() {
                busy[r] = true;
                let end = now + tasks[id].duration;
                spans[id] = Span { start: now, end };
                pending.push(Completion {
                    time: end,
                    task: id,
                });
            }
        }

        let Some(first) = pending.pop() else { break };
        now = first.time;
        let mut batch = vec![first.task];
        while pending.peek().is_some_and(|c| c.time == now) {
            batch.push(pending.pop().expect("peeked").task);
        }
        for id in batch {
            finished += 1;
            let r = tasks[id].resource.expect("only resource tasks are pending");
            busy[r] = false;
            touched.push(r);
            for &d in &dependents[id] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    released.push(d);
                }
            }
        }
    }

    if finished != n {
        return Err(EngineError::Deadlock { finished, total: n });
    }
    Ok(spans)
}

/// Total length of the union of `intervals`.
pub fn union_length(intervals: &mut [Span]) -> f64 {
    intervals.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut total = 0.0;
    let mut cur: Option<Span> = None;
    for s in intervals.iter() {
        if s.end <= s.start {
            continue;
        }
        match cur.as_mut() {
            Some(c) if s.start <= c.end => c.end = c.end.max(s.end),
            _ => {
                if let Some(c) = cur {
                    total += c.end - c.start;
                }
                cur = Some(*s);
            }
        }
    }
    if let Some(c) = cur {
        total += c.end - c.start;
    }
    total
}
