use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};
use parking_lot::Mutex;
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::{Message, WebSocket};

use crate::frame::{Reply, ReplyParser};

pub const CONSOLE_PATH: &str = "/console";

/// One console connection, line oriented.
pub trait Session: Send {
    /// Next line without its terminator; `None` once the peer is gone.
    fn read_line(&mut self) -> io::Result<Option<String>>;
    fn write(&mut self, text: &str) -> io::Result<()>;
}

pub struct TcpSession {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpSession {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }
}

impl Session for TcpSession {
    fn read_line(&mut self) -> io::Result<Option<String>> {
        let mut buf = Vec::new();
        if self.reader.read_until(b'\n', &mut buf)? == 0 {
            return Ok(None);
        }
        while matches!(buf.last(), Some(b'\n' | b'\r')) {
            buf.pop();
        }
        Ok(Some(String::from_utf8_lossy(&buf).into_owned()))
    }

    fn write(&mut self, text: &str) -> io::Result<()> {
        self.writer.write_all(text.as_bytes())?;
        self.writer.flush()
    }
}

/// Websocket variant: each incoming text message holds one or more lines;
/// each outgoing line (without `\n`) or frame is one text message.
pub struct WsSession {
    ws: WebSocket<TcpStream>,
    queue: VecDeque<String>,
}

impl WsSession {
    pub fn new(ws: WebSocket<TcpStream>) -> Self {
        Self { ws, queue: VecDeque::new() }
    }
}

fn ws_err(e: tungstenite::Error) -> io::Error {
    io::Error::other(e)
}

impl Session for WsSession {
    fn read_line(&mut self) -> io::Result<Option<String>> {
        loop {
            if let Some(l) = self.queue.pop_front() {
                return Ok(Some(l));
            }
            let text = match self.ws.read() {
                Ok(Message::Text(t)) => t.to_string(),
                Ok(Message::Binary(b)) => String::from_utf8_lossy(&b).into_owned(),
                Ok(Message::Close(_)) => return Ok(None),
                Ok(_) => continue,
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(None),
                Err(e) => return Err(ws_err(e)),
            };
            let body = text.strip_suffix('\n').unwrap_or(&text);
            self.queue.extend(body.split('\n').map(|l| l.trim_end_matches('\r').to_string()));
        }
    }

    fn write(&mut self, text: &str) -> io::Result<()> {
        let mut p = ReplyParser::new();
        p.feed(text.as_bytes());
        let mut messages = Vec::new();
        while let Some(r) = p.next_reply() {
            match r {
                Ok(Reply::Text(l)) => messages.push(l.trim_end_matches('\n').to_string()),
                Ok(frame) => messages.push(String::from_utf8_lossy(&frame.to_bytes()).into_owned()),
                Err(e) => messages.push(e.to_string()),
            }
        }
        match p.finish() {
            Ok(Some(tail)) => messages.push(String::from_utf8_lossy(&tail.to_bytes()).into_owned()),
            Ok(None) => {}
            Err(e) => messages.push(e.to_string()),
        }
        for m in messages {
            self.ws.send(Message::text(m)).map_err(ws_err)?;
        }
        Ok(())
    }
}

/// Console on the process's own stdin/stdout, used after the user signal.
pub struct StdioSession;

impl Session for StdioSession {
    fn read_line(&mut self) -> io::Result<Option<String>> {
        let mut line = String::new();
        if io::stdin().lock().read_line(&mut line)? == 0 {
            return Ok(None);
        }
        Ok(Some(line.trim_end_matches(['\n', '\r']).to_string()))
    }

    fn write(&mut self, text: &str) -> io::Result<()> {
        let mut out = io::stdout().lock();
        out.write_all(text.as_bytes())?;
        out.flush()
    }
}

#[derive(Default)]
struct State {
    /// Step in progress on the simulation side.
    step: u64,
    pending: bool,
    slot: Option<Box<dyn Session>>,
    connect_step: Option<u64>,
}

struct Shared {
    state: Mutex<State>,
    /// Set while a session is queued or running; extra connections get "busy".
    busy: AtomicBool,
    stop: AtomicBool,
    signal: Arc<AtomicBool>,
    transcript: Mutex<Vec<(String, String)>>,
}

/// Root-side listener state. Listener threads only queue a session and raise
/// the pending flag; everything else happens inside the collective console.
pub struct SteeringServer {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Default for SteeringServer {
    fn default() -> Self {
        Self::new()
    }
}

impl SteeringServer {
    pub fn new() -> Self {
        Self {
            shared: Arc::new(Shared {
                state: Mutex::new(State {
                    step: 1,
                    ..State::default()
                }),
                busy: AtomicBool::new(false),
                stop: AtomicBool::new(false),
                signal: Arc::new(AtomicBool::new(false)),
                transcript: Mutex::new(Vec::new()),
            }),
            threads: Vec::new(),
        }
    }

    /// Telnet-compatible line listener. Port 0 picks a free port.
    pub fn listen_tcp(&mut self, port: u16) -> io::Result<SocketAddr> {
        self.spawn(port, |stream, busy| {
            let mut s = TcpSession::new(stream)?;
            if busy {
                s.write("busy\n")?;
                return Ok(None);
            }
            Ok(Some(Box::new(s) as Box<dyn Session>))
        })
    }

    /// Websocket listener serving the console at [`CONSOLE_PATH`].
    pub fn listen_ws(&mut self, port: u16) -> io::Result<SocketAddr> {
        self.spawn(port, |stream, busy| {
            let check = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
                if req.uri().path() == CONSOLE_PATH {
                    Ok(resp)
                } else {
                    let mut r = ErrorResponse::new(Some("not found".into()));
                    *r.status_mut() = tungstenite::http::StatusCode::NOT_FOUND;
                    Err(r)
                }
            };
            let ws = tungstenite::accept_hdr(stream, check).map_err(io::Error::other)?;
            let mut s = WsSession::new(ws);
            if busy {
                s.write("busy\n")?;
                let _ = s.ws.close(None);
                let _ = s.ws.flush();
                return Ok(None);
            }
            Ok(Some(Box::new(s) as Box<dyn Session>))
        })
    }

    /// The user signal opens a console on stdin/stdout at the next step end.
    pub fn watch_signal(&mut self) -> io::Result<()> {
        signal_hook::flag::register(signal_hook::consts::SIGUSR1, self.shared.signal.clone())?;
        Ok(())
    }

    fn spawn(
        &mut self,
        port: u16,
        open: impl Fn(TcpStream, bool) -> io::Result<Option<Box<dyn Session>>> + Send + 'static,
    ) -> io::Result<SocketAddr> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = self.shared.clone();
        self.threads.push(std::thread::spawn(move || {
            while !shared.stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        if let Err(e) = stream.set_nonblocking(false) {
                            warn!("console connection from {peer}: {e}");
                            continue;
                        }
                        let busy = shared.busy.swap(true, Ordering::SeqCst);
                        match open(stream, busy) {
                            Ok(Some(session)) => {
                                let mut st = shared.state.lock();
                                st.slot = Some(session);
                                st.connect_step = Some(st.step);
                                st.pending = true;
                                debug!("console connection from {peer} during step {}", st.step);
                            }
                            Ok(None) => debug!("rejected {peer}: busy"),
                            Err(e) => {
                                if !busy {
                                    shared.busy.store(false, Ordering::SeqCst);
                                }
                                warn!("console connection from {peer}: {e}");
                            }
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        }));
        Ok(addr)
    }

    /// Called by root at the end of step `completed`: reports whether a
    /// session is waiting and marks step `completed + 1` as in progress.
    pub fn poll(&self, completed: u64) -> bool {
        let mut st = self.shared.state.lock();
        st.step = completed + 1;
        st.pending || self.shared.signal.load(Ordering::SeqCst)
    }

    pub fn is_pending(&self) -> bool {
        self.shared.state.lock().pending || self.shared.signal.load(Ordering::SeqCst)
    }

    /// Step that was in progress when the last session connected.
    pub fn last_connect_step(&self) -> Option<u64> {
        self.shared.state.lock().connect_step
    }

    pub(crate) fn take_session(&self) -> Box<dyn Session> {
        let mut st = self.shared.state.lock();
        match st.slot.take() {
            Some(s) => {
                st.pending = false;
                s
            }
            None => {
                self.shared.signal.store(false, Ordering::SeqCst);
                self.shared.busy.store(true, Ordering::SeqCst);
                Box::new(StdioSession)
            }
        }
    }

    pub(crate) fn end_session(&self, session: Option<Box<dyn Session>>) {
        drop(session);
        self.shared.busy.store(false, Ordering::SeqCst);
    }

    pub(crate) fn log(&self, direction: &str, text: &str) {
        self.shared.transcript.lock().push((direction.to_string(), text.to_string()));
    }

    /// Everything read from and written to sessions, as `(direction, text)`
    /// with direction `in` or `out`.
    pub fn transcript(&self) -> Vec<(String, String)> {
        self.shared.transcript.lock().clone()
    }
}

impl Drop for SteeringServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
