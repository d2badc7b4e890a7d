//! TCP front end for the master.
//!
//! One reader thread per connection turns bytes into lines and forwards them,
//! in arrival order, to a single event loop that owns the [`Master`]. Replies
//! and dispatches are written from that loop after the ledger append for the
//! triggering event has completed.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use anyhow::{Context, Result};
use hepinfo_core::ledger::LedgerSink;
use hepinfo_core::master::{ConnId, Master, Outbound, ERR_BAD_REQUEST};
use hepinfo_core::protocol::{decode_bytes, encode, LineFramer, Message};
use hepinfo_core::{Clock, SystemClock};

enum Event {
    Opened(ConnId, TcpStream),
    Line(ConnId, Vec<u8>),
    /// The peer sent an over-long line; reply and hang up.
    Overflow(ConnId),
    Closed(ConnId),
}

fn spawn_reader(id: ConnId, mut stream: TcpStream, tx: Sender<Event>) {
    thread::spawn(move || {
        let mut framer = LineFramer::new();
        let mut buf = [0u8; 8192];
        loop {
            let n = match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            match framer.push(&buf[..n]) {
                Ok(lines) => {
                    for line in lines {
                        if tx.send(Event::Line(id, line)).is_err() {
                            return;
                        }
                    }
                }
                Err(_) => {
                    let _ = tx.send(Event::Overflow(id));
                    return;
                }
            }
        }
        let _ = tx.send(Event::Closed(id));
    });
}

fn spawn_acceptor(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    thread::spawn(move || {
        let mut next = 1u64;
        for stream in listener.incoming() {
            if stop.load(Ordering::Acquire) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let _ = stream.set_nodelay(true);
            let id = ConnId(next);
            next += 1;
            let Ok(writer) = stream.try_clone() else { continue };
            if tx.send(Event::Opened(id, writer)).is_err() {
                break;
            }
            spawn_reader(id, stream, tx.clone());
        }
    });
}

struct Loop<L> {
    master: Master<L>,
    writers: HashMap<ConnId, TcpStream>,
    clock: SystemClock,
}

impl<L: LedgerSink> Loop<L> {
    fn deliver(&mut self, out: Vec<Outbound>) -> Result<()> {
        for o in out {
            let Some(w) = self.writers.get_mut(&o.to) else {
                continue;
            };
            if w.write_all(encode(&o.msg).as_bytes()).is_err() {
                self.drop_conn(o.to)?;
            }
        }
        Ok(())
    }

    fn drop_conn(&mut self, id: ConnId) -> Result<()> {
        if let Some(w) = self.writers.remove(&id) {
            let _ = w.shutdown(Shutdown::Both);
        }
        self.master.on_disconnect(id, self.clock.now_ms())?;
        Ok(())
    }

    fn handle(&mut self, ev: Event) -> Result<()> {
        let now = self.clock.now_ms();
        match ev {
            Event::Opened(id, w) => {
                self.writers.insert(id, w);
            }
            Event::Line(id, bytes) => {
                let out = match decode_bytes(&bytes) {
                    Ok(msg) => self.master.process(id, msg, now)?,
                    Err(e) => vec![Outbound {
                        to: id,
                        msg: Message::err(ERR_BAD_REQUEST, e.to_string()),
                    }],
                };
                self.deliver(out)?;
            }
            Event::Overflow(id) => {
                self.deliver(vec![Outbound {
                    to: id,
                    msg: Message::err(ERR_BAD_REQUEST, "line too long"),
                }])?;
                self.drop_conn(id)?;
            }
            Event::Closed(id) => self.drop_conn(id)?,
        }
        Ok(())
    }
}

/// Runs the master until `stop` is set. Returns an error only when the ledger
/// can no longer be written.
pub fn serve<L: LedgerSink>(listener: TcpListener, master: Master<L>, stop: Arc<AtomicBool>) -> Result<()> {
    let interval = Duration::from_millis(master.config().heartbeat_interval_ms);
    let (tx, rx) = mpsc::channel();
    spawn_acceptor(listener, tx, stop.clone());
    let mut lp = Loop {
        master,
        writers: HashMap::new(),
        clock: SystemClock::new(),
    };
    // anything recovered from the ledger may be dispatchable as soon as
    // agents register, which already triggers a pass; this one covers the rest
    let mut next_tick = lp.clock.now_ms() + interval.as_millis() as u64;
    while !stop.load(Ordering::Acquire) {
        let now = lp.clock.now_ms();
        let wait = Duration::from_millis(next_tick.saturating_sub(now).max(1)).min(Duration::from_millis(200));
        match rx.recv_timeout(wait) {
            Ok(ev) => lp.handle(ev)?,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        let now = lp.clock.now_ms();
        if now >= next_tick {
            let out = lp.master.tick(now)?;
            lp.deliver(out)?;
            next_tick = now + interval.as_millis() as u64;
        }
    }
    for w in lp.writers.values() {
        let _ = w.shutdown(Shutdown::Both);
    }
    Ok(())
}

/// A master running on a background thread, for tests and embedding.
pub struct MasterHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<Result<()>>>,
}

impl MasterHandle {
    pub fn spawn<L: LedgerSink + Send + 'static>(addr: &str, master: Master<L>) -> Result<MasterHandle> {
        let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let join = thread::spawn(move || serve(listener, master, flag));
        Ok(MasterHandle {
            addr,
            stop,
            join: Some(join),
        })
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> Result<()> {
        self.stop.store(true, Ordering::Release);
        // wake the acceptor
        let _ = TcpStream::connect(self.addr);
        match self.join.take() {
            Some(j) => j.join().unwrap_or_else(|_| Err(anyhow::anyhow!("master thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for MasterHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}
