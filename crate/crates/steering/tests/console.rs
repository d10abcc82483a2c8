use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use blockforge_core::comms::{run_workers, LocalTransport, Transport};
use blockforge_steering::*;
use proptest::prelude::*;
use tungstenite::Message;

/// Echoes commands; `resume`, `quit` and `frame` have their obvious effects.
#[derive(Default)]
struct Echo {
    seen: Vec<String>,
}

impl CommandInterpreter for Echo {
    fn is_complete(&self, text: &str) -> bool {
        heuristic_complete(text)
    }

    fn execute(&mut self, text: &str) -> CommandOutcome {
        self.seen.push(text.to_string());
        let (output, action) = match text {
            "resume" => (String::new(), ConsoleAction::Resume),
            "quit" => (String::new(), ConsoleAction::Shutdown),
            "frame" => (
                String::from_utf8(frame_reply("slice/json", b"{\"values\":[1.5]}\n")).unwrap(),
                ConsoleAction::Continue,
            ),
            _ => (format!("ran {}", text.replace('\n', "|")), ConsoleAction::Continue),
        };
        CommandOutcome { output, action }
    }
}

/// Steps until a console session has run (at most `limit` steps).
fn simulate<T: Transport>(server: Option<&SteeringServer>, t: &T, limit: u64) -> (u64, ConsoleReport, Echo) {
    let mut echo = Echo::default();
    for step in 1..=limit {
        std::thread::sleep(Duration::from_millis(2));
        if check_interrupt(server, t, step).unwrap() {
            let report = run_console(server, &mut echo, t, step).unwrap();
            return (step, report, echo);
        }
    }
    panic!("no session within {limit} steps");
}

fn read_until(r: &mut impl BufRead, tail: &str) -> String {
    let mut got = Vec::new();
    while !got.ends_with(tail.as_bytes()) {
        let mut b = [0u8; 1];
        if r.read(&mut b).unwrap() == 0 {
            break;
        }
        got.push(b[0]);
    }
    String::from_utf8(got).unwrap()
}

/// Connects once the simulation is under way.
fn connect(addr: SocketAddr) -> (BufReader<TcpStream>, TcpStream) {
    std::thread::sleep(Duration::from_millis(50));
    let s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    (BufReader::new(s.try_clone().unwrap()), s)
}

#[test]
fn tcp_session_banner_multiline_and_busy() {
    let mut server = SteeringServer::new();
    let addr = server.listen_tcp(0).unwrap();
    let client = std::thread::spawn(move || {
        let (mut r, mut w) = connect(addr);
        let banner = read_until(&mut r, PROMPT);
        // a second client is turned away while the first holds the console
        let (mut r2, _w2) = connect(addr);
        let mut busy = String::new();
        r2.read_to_string(&mut busy).unwrap();
        w.write_all(b"x = (1\n").unwrap();
        let cont = read_until(&mut r, CONTINUATION_PROMPT);
        w.write_all(b"  + 2)\nframe\n").unwrap();
        let out = read_until(&mut r, "##END\n>>> ");
        w.write_all(b"resume\n").unwrap();
        let end = read_until(&mut r, "resumed\n");
        (banner, busy, cont, out, end)
    });
    let t = LocalTransport::solo();
    let (step, report, echo) = simulate(Some(&server), &t, 5000);
    let (banner, busy, cont, out, end) = client.join().unwrap();
    assert_eq!(banner, format!("blockforge console | workers=1 | step={step}\n>>> "));
    assert_eq!(server.last_connect_step(), Some(step));
    assert_eq!(busy, "busy\n");
    assert_eq!(cont, CONTINUATION_PROMPT);
    assert!(out.starts_with("ran x = (1|  + 2)\n>>> ##FRAME slice/json 17\n"), "{out:?}");
    assert_eq!(end, "resumed\n");
    assert_eq!(report.action, ConsoleAction::Resume);
    assert_eq!(report.commands, ["x = (1\n  + 2)", "frame", "resume"]);
    assert_eq!(echo.seen, report.commands);
    let transcript = server.transcript();
    assert!(transcript.iter().any(|(d, l)| d == "in" && l == "  + 2)"));
    // the console is free again afterwards
    assert!(!server.is_pending());
}

#[test]
fn disconnect_resumes_and_every_worker_runs_the_commands() {
    let mut server = SteeringServer::new();
    let addr = server.listen_tcp(0).unwrap();
    let client = std::thread::spawn(move || {
        let (mut r, mut w) = connect(addr);
        read_until(&mut r, PROMPT);
        w.write_all(b"a\nb\n").unwrap();
        read_until(&mut r, "ran b\n>>> ");
        // hang up without resume()
    });
    let server = &server;
    let out = run_workers(3, |t| {
        let s = t.is_root().then_some(server);
        let (step, report, _) = simulate(s, &t, 5000);
        (step, report)
    });
    client.join().unwrap();
    for (step, report) in &out {
        assert_eq!(*step, out[0].0);
        assert_eq!(report.commands, ["a", "b"]);
        assert_eq!(report.action, ConsoleAction::Resume);
    }
}

#[test]
fn shutdown_reaches_every_worker() {
    let mut server = SteeringServer::new();
    let addr = server.listen_tcp(0).unwrap();
    let client = std::thread::spawn(move || {
        let (mut r, mut w) = connect(addr);
        read_until(&mut r, PROMPT);
        w.write_all(b"quit\n").unwrap();
        read_until(&mut r, "shutting down\n")
    });
    let server = &server;
    let out = run_workers(2, |t| simulate(t.is_root().then_some(server), &t, 5000).1.action);
    assert_eq!(client.join().unwrap(), "shutting down\n");
    assert_eq!(out, [ConsoleAction::Shutdown, ConsoleAction::Shutdown]);
}

#[test]
fn websocket_console() {
    let mut server = SteeringServer::new();
    let addr = server.listen_ws(0).unwrap();
    // wrong path is refused during the handshake
    assert!(tungstenite::connect(format!("ws://{addr}/elsewhere")).is_err());
    let client = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(50));
        let (mut ws, _) = tungstenite::connect(format!("ws://{addr}{CONSOLE_PATH}")).unwrap();
        let mut next = || match ws.read().unwrap() {
            Message::Text(t) => t.to_string(),
            other => panic!("{other:?}"),
        };
        let mut got = vec![next(), next()];
        drop(next);
        ws.send(Message::text("frame\nresume")).unwrap();
        loop {
            match ws.read() {
                Ok(Message::Text(t)) => got.push(t.to_string()),
                Ok(_) => {}
                Err(_) => break,
            }
        }
        got
    });
    let t = LocalTransport::solo();
    let (step, report, _) = simulate(Some(&server), &t, 5000);
    let got = client.join().unwrap();
    assert_eq!(got[0], format!("blockforge console | workers=1 | step={step}"));
    assert_eq!(got[1], PROMPT);
    assert_eq!(got[2], "##FRAME slice/json 17\n{\"values\":[1.5]}\n##END\n");
    assert_eq!(got[3], PROMPT);
    assert_eq!(got[4], "resumed");
    assert_eq!(report.commands, ["frame", "resume"]);
}

#[test]
fn no_server_no_interrupt() {
    let t = LocalTransport::solo();
    assert!(!check_interrupt(None, &t, 1).unwrap());
    let mut echo = Echo::default();
    assert!(matches!(run_console(None, &mut echo, &t, 1), Err(SteeringError::NoServer)));
}

fn content_type() -> impl Strategy<Value = String> {
    "[a-z]{1,8}/[a-z0-9.+-]{1,12}"
}

fn reply() -> impl Strategy<Value = Reply> {
    prop_oneof![
        "[^\n#]{0,40}\n".prop_map(Reply::Text),
        (content_type(), proptest::collection::vec(any::<u8>(), 0..200))
            .prop_map(|(content_type, payload)| Reply::Frame { content_type, payload }),
    ]
}

proptest! {
    #[test]
    fn frame_round_trip(ct in content_type(), payload in proptest::collection::vec(any::<u8>(), 0..2000)) {
        let wire = frame_reply(&ct, &payload);
        let back = parse_replies(&wire).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(back[0].to_bytes(), wire);
        prop_assert_eq!(&back[0], &Reply::Frame { content_type: ct, payload });
    }

    #[test]
    fn reply_stream_round_trip(replies in proptest::collection::vec(reply(), 0..12), split in 0usize..4000) {
        let wire: Vec<u8> = replies.iter().flat_map(|r| r.to_bytes()).collect();
        prop_assert_eq!(&parse_replies(&wire).unwrap(), &replies);
        // arbitrary chunking of the stream gives the same replies
        let cut = split.min(wire.len());
        let mut p = ReplyParser::new();
        p.feed(&wire[..cut]);
        let mut got = Vec::new();
        while let Some(r) = p.next_reply() {
            got.push(r.unwrap());
        }
        p.feed(&wire[cut..]);
        while let Some(r) = p.next_reply() {
            got.push(r.unwrap());
        }
        if let Some(tail) = p.finish().unwrap() {
            got.push(tail);
        }
        prop_assert_eq!(got, replies);
    }
}
