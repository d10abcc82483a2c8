//! Steering a running simulation between timesteps.
//!
//! A listener (TCP, websocket at `/console`, or the user signal) raises an
//! interrupt flag. At the end of every step all workers call
//! [`check_interrupt`]; when it reports a session they enter [`run_console`]
//! together, execute the broadcast commands, and continue after `resume()`.

mod console;
mod frame;
mod server;

use thiserror::Error;

pub use console::{
    check_interrupt, heuristic_complete, run_console, CommandAssembler, CommandInterpreter, CommandOutcome,
    ConsoleAction, ConsoleReport, CONTINUATION_PROMPT, PROMPT,
};
pub use frame::{frame_reply, parse_replies, FrameError, Reply, ReplyParser, FRAME_END, FRAME_PREFIX};
pub use server::{Session, SteeringServer, StdioSession, TcpSession, WsSession, CONSOLE_PATH};

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error(transparent)]
    Comm(#[from] blockforge_core::comms::CommError),
    #[error("console i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("root entered the console without a steering server")]
    NoServer,
}
