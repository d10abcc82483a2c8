use blockforge_core::comms::{broadcast_bytes, broadcast_line, CommError, Transport};
use log::{info, warn};

use crate::frame::FRAME_PREFIX;
use crate::server::{Session, SteeringServer};
use crate::SteeringError;

pub const PROMPT: &str = ">>> ";
pub const CONTINUATION_PROMPT: &str = "... ";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsoleAction {
    Continue,
    Resume,
    Shutdown,
}

impl ConsoleAction {
    fn to_byte(self) -> u8 {
        match self {
            ConsoleAction::Continue => 0,
            ConsoleAction::Resume => 1,
            ConsoleAction::Shutdown => 2,
        }
    }

    fn from_byte(b: u8) -> Self {
        match b {
            1 => ConsoleAction::Resume,
            2 => ConsoleAction::Shutdown,
            _ => ConsoleAction::Continue,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutcome {
    /// Text and frames produced by the command, already in wire form.
    pub output: String,
    pub action: ConsoleAction,
}

/// What the console needs from the embedded runtime of one worker.
pub trait CommandInterpreter {
    /// Needs-more-input probe.
    fn is_complete(&self, text: &str) -> bool;
    /// Runs one command. Script errors are reported in `output`, not returned.
    fn execute(&mut self, text: &str) -> CommandOutcome;
}

/// Fallback completeness rule: brackets balanced outside string literals and
/// comments, and the last line does not end in `\`.
pub fn heuristic_complete(text: &str) -> bool {
    if text.trim_end_matches([' ', '\t']).ends_with('\\') {
        return false;
    }
    let mut depth: i64 = 0;
    let mut chars = text.chars().peekable();
    let mut quote: Option<char> = None;
    while let Some(c) = chars.next() {
        if let Some(q) = quote {
            match c {
                '\\' => {
                    chars.next();
                }
                _ if c == q => quote = None,
                _ => {}
            }
            continue;
        }
        match c {
            '"' | '\'' | '`' => quote = Some(c),
            '/' if chars.peek() == Some(&'/') => {
                for c in chars.by_ref() {
                    if c == '\n' {
                        break;
                    }
                }
            }
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            _ => {}
        }
    }
    quote.is_none() && depth <= 0
}

/// Accumulates session lines into complete commands.
#[derive(Debug, Default)]
pub struct CommandAssembler {
    lines: Vec<String>,
}

impl CommandAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prompt(&self) -> &'static str {
        if self.lines.is_empty() {
            PROMPT
        } else {
            CONTINUATION_PROMPT
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Adds one line (CR and LF stripped). Returns the full command once
    /// `complete` accepts the accumulated text. A blank first line is ignored.
    pub fn push(&mut self, line: &str, complete: impl Fn(&str) -> bool) -> Option<String> {
        let line = line.trim_end_matches(['\n', '\r']);
        if self.lines.is_empty() && line.trim().is_empty() {
            return None;
        }
        self.lines.push(line.to_string());
        let text = self.lines.join("\n");
        if complete(&text) {
            self.lines.clear();
            Some(text)
        } else {
            None
        }
    }

    /// Drops a partial command, e.g. when the session closes mid-command.
    pub fn discard(&mut self) -> Vec<String> {
        std::mem::take(&mut self.lines)
    }
}

/// Collective: root tells every worker whether a console session is pending.
/// Call on all workers at the end of every timestep with the number of the
/// step that just completed.
pub fn check_interrupt<T: Transport + ?Sized>(
    server: Option<&SteeringServer>,
    t: &T,
    completed: u64,
) -> Result<bool, CommError> {
    let flag = if t.is_root() {
        Some(server.is_some_and(|s| s.poll(completed)))
    } else {
        None
    };
    let b = broadcast_bytes(t, flag.map(|f| [f as u8]).as_ref().map(|a| &a[..]))?;
    Ok(b.first() == Some(&1))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsoleReport {
    pub action: ConsoleAction,
    /// Commands executed on this worker, in order.
    pub commands: Vec<String>,
}

const CMD: char = 'C';
const END: char = 'E';

/// Collective console session between two timesteps. Root reads commands from
/// the pending session and broadcasts each complete one; every worker runs it
/// in its own interpreter. Only root's output reaches the session.
pub fn run_console<T: Transport + ?Sized, I: CommandInterpreter + ?Sized>(
    server: Option<&SteeringServer>,
    interp: &mut I,
    t: &T,
    step: u64,
) -> Result<ConsoleReport, SteeringError> {
    let mut session: Option<Box<dyn Session>> = None;
    if t.is_root() {
        let server = server.ok_or(SteeringError::NoServer)?;
        let mut s = server.take_session();
        let banner = format!("blockforge console | workers={} | step={}\n", t.size(), step);
        s.write(&banner)?;
        s.write(PROMPT)?;
        server.log("out", &banner);
        info!("console session opened after step {step}");
        session = Some(s);
    }
    let mut report = ConsoleReport {
        action: ConsoleAction::Continue,
        commands: Vec::new(),
    };
    let mut asm = CommandAssembler::new();
    loop {
        let msg = match session.as_mut() {
            Some(s) => Some(next_command(s.as_mut(), &mut asm, interp, server)),
            None => None,
        };
        let msg = broadcast_line(t, msg.as_deref())?;
        let action = if let Some(text) = msg.strip_prefix(CMD) {
            let out = interp.execute(text);
            report.commands.push(text.to_string());
            if let Some(s) = session.as_mut() {
                let mut reply = out.output;
                if !reply.is_empty() && !reply.ends_with('\n') {
                    reply.push('\n');
                }
                reply.push_str(match out.action {
                    ConsoleAction::Continue => PROMPT,
                    ConsoleAction::Resume => "resumed\n",
                    ConsoleAction::Shutdown => "shutting down\n",
                });
                if let Err(e) = s.write(&reply) {
                    warn!("console write failed: {e}");
                }
                if let Some(srv) = server {
                    srv.log("out", &reply);
                }
            }
            out.action
        } else {
            ConsoleAction::Resume
        };
        // root decides, so a command that fails on one worker cannot split the run
        let agreed = broadcast_bytes(t, t.is_root().then_some(&[action.to_byte()][..]))?;
        let action = ConsoleAction::from_byte(agreed[0]);
        if action != ConsoleAction::Continue {
            if let Some(srv) = server.filter(|_| t.is_root()) {
                srv.end_session(session.take());
                info!("console session closed: {action:?}");
            }
            report.action = action;
            return Ok(report);
        }
    }
}

/// Reads lines until a complete command; `E` when the session ends first.
fn next_command<I: CommandInterpreter + ?Sized>(
    s: &mut dyn Session,
    asm: &mut CommandAssembler,
    interp: &I,
    server: Option<&SteeringServer>,
) -> String {
    loop {
        let line = match s.read_line() {
            Ok(Some(l)) => l,
            Ok(None) | Err(_) => {
                asm.discard();
                return END.to_string();
            }
        };
        if let Some(srv) = server {
            srv.log("in", &line);
        }
        if line.starts_with(FRAME_PREFIX) {
            continue;
        }
        match asm.push(&line, |text| interp.is_complete(text)) {
            Some(cmd) => return format!("{CMD}{cmd}"),
            None => {
                if s.write(asm.prompt()).is_err() {
                    asm.discard();
                    return END.to_string();
                }
            }
        }
    }
}
