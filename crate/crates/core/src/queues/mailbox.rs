use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

/// Topic-partitioned FIFO with blocking, closable receive.
pub(crate) struct Mailbox<T> {
    state: Mutex<State<T>>,
    cond: Condvar,
}

struct State<T> {
    queues: HashMap<String, VecDeque<T>>,
    closed: bool,
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) struct MailboxClosed;

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Mailbox {
            state: Mutex::new(State {
                queues: HashMap::new(),
                closed: false,
            }),
            cond: Condvar::new(),
        }
    }

    pub fn push(&self, topic: &str, item: T) -> Result<(), MailboxClosed> {
        let mut s = self.state.lock();
        if s.closed {
            return Err(MailboxClosed);
        }
        s.queues.entry(topic.to_owned()).or_default().push_back(item);
        drop(s);
        self.cond.notify_all();
        Ok(())
    }

    /// Pops the oldest item for `topic`, waiting up to `timeout`. Items
    /// already queued are still delivered after close; an empty, closed
    /// mailbox reports closed.
    pub fn pop(&self, topic: &str, timeout: Duration) -> Result<Option<T>, MailboxClosed> {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock();
        loop {
            if let Some(item) = s.queues.get_mut(topic).and_then(VecDeque::pop_front) {
                return Ok(Some(item));
            }
            if s.closed {
                return Err(MailboxClosed);
            }
            if self.cond.wait_until(&mut s, deadline).timed_out() {
                return Ok(s.queues.get_mut(topic).and_then(VecDeque::pop_front));
            }
        }
    }

    pub fn close(&self) {
        self.state.lock().closed = true;
        self.cond.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().closed
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;
    use std::thread;

    use super::*;

    #[test]
    fn fifo_per_topic() {
        let m = Mailbox::new();
        m.push("a", 1).unwrap();
        m.push("b", 2).unwrap();
        m.push("a", 3).unwrap();
        assert_eq!(m.pop("a", Duration::ZERO), Ok(Some(1)));
        assert_eq!(m.pop("a", Duration::ZERO), Ok(Some(3)));
        assert_eq!(m.pop("a", Duration::ZERO), Ok(None));
        assert_eq!(m.pop("b", Duration::ZERO), Ok(Some(2)));
    }

    #[test]
    fn close_wakes_waiters_and_drains() {
        let m = Arc::new(Mailbox::<u32>::new());
        let waiter = {
            let m = Arc::clone(&m);
            thread::spawn(move || {
                let t = Instant::now();
                let r = m.pop("a", Duration::from_secs(10));
                (r, t.elapsed())
            })
        };
        thread::sleep(Duration::from_millis(20));
        m.close();
        let (r, waited) = waiter.join().unwrap();
        assert_eq!(r, Err(MailboxClosed));
        assert!(waited < Duration::from_millis(500));

        let m = Mailbox::new();
        m.push("a", 9).unwrap();
        m.close();
        assert_eq!(m.pop("a", Duration::ZERO), Ok(Some(9)));
        assert_eq!(m.pop("a", Duration::ZERO), Err(MailboxClosed));
        assert_eq!(m.push("a", 1), Err(MailboxClosed));
    }
}
