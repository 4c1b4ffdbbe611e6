//! Console service: one live session streamed over a websocket.
//!
//! Every message is a JSON text frame. The server sends `hello` on
//! connect, a `frame` after every tick, `ack`/`nack` for each command,
//! `verdict` for each deduction branch once the run ends, and a final
//! `end`. The client sends commands such as
//! `{"id": 1, "command": "takeover", "vehicle": "vut"}`; they are queued and
//! applied at the next tick boundary.

use std::io::{ErrorKind, Write as _};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use fusiontest_core::harness::runlog::Termination;
use fusiontest_core::harness::session::{Command, Session, SessionOptions, StateFrame};
use fusiontest_core::{ScenarioMap, ScenarioSpec, DT};
use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::{deduce_all, sibling, write_file, DeductionRecord};

pub const CONSOLE_PROTOCOL: u32 = 1;

pub struct ServeConfig {
    pub port: u16,
    pub speed: f64,
    pub wait_for_console: bool,
    pub out: PathBuf,
}

#[derive(Debug, Deserialize)]
struct Request {
    #[serde(default)]
    id: Option<u64>,
    #[serde(flatten)]
    command: Command,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Outgoing<'a> {
    Hello {
        protocol: u32,
        scenario: &'a str,
        vut: &'a str,
        dt: f64,
    },
    Frame {
        #[serde(flatten)]
        frame: StateFrame,
        paused: bool,
    },
    Ack {
        id: Option<u64>,
        tick: u64,
    },
    Nack {
        id: Option<u64>,
        reason: String,
    },
    Verdict(&'a DeductionRecord),
    End {
        termination: Option<Termination>,
        log: String,
    },
}

struct Console {
    ws: Option<WebSocket<TcpStream>>,
}

impl Console {
    fn send(&mut self, msg: &Outgoing) {
        let Some(ws) = self.ws.as_mut() else { return };
        let text = serde_json::to_string(msg).expect("console messages serialize");
        match ws.send(Message::text(text)) {
            Ok(()) => {}
            Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => {}
            Err(_) => self.ws = None,
        }
    }

    /// Commands received since the last poll.
    fn poll(&mut self) -> Vec<Result<Request, String>> {
        let mut out = Vec::new();
        while let Some(ws) = self.ws.as_mut() {
            match ws.read() {
                Ok(Message::Text(t)) => out.push(serde_json::from_str(t.as_str()).map_err(|e| format!("bad command: {e}"))),
                Ok(Message::Close(_)) => self.ws = None,
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => break,
                Err(_) => self.ws = None,
            }
        }
        out
    }
}

fn accept(stream: TcpStream) -> Option<WebSocket<TcpStream>> {
    stream.set_nonblocking(false).ok()?;
    let ws = tungstenite::accept(stream).ok()?;
    ws.get_ref().set_nonblocking(true).ok()?;
    Some(ws)
}

pub fn serve(spec: ScenarioSpec, map: ScenarioMap, opts: SessionOptions, cfg: &ServeConfig) -> Result<()> {
    let listener = TcpListener::bind(("127.0.0.1", cfg.port)).with_context(|| format!("binding port {}", cfg.port))?;
    let addr = listener.local_addr()?;
    println!("listening on ws://{addr}");
    std::io::stdout().flush()?;

    let mut session = Session::new(spec.clone(), map.clone(), opts)?;
    let mut console = Console { ws: None };
    let hello = |c: &mut Console| {
        c.send(&Outgoing::Hello {
            protocol: CONSOLE_PROTOCOL,
            scenario: &spec.id,
            vut: &spec.vut,
            dt: DT,
        })
    };
    if cfg.wait_for_console {
        let (stream, _) = listener.accept()?;
        console.ws = accept(stream);
        hello(&mut console);
    }
    listener.set_nonblocking(true)?;

    let mut paused = false;
    let period = if cfg.speed > 0.0 { Some(Duration::from_secs_f64(DT / cfg.speed)) } else { None };
    let mut next = Instant::now();
    while !session.is_finished() {
        match listener.accept() {
            Ok((stream, _)) if console.ws.is_none() => {
                console.ws = accept(stream);
                hello(&mut console);
            }
            // One console at a time; later connections are dropped.
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::WouldBlock => {}
            Err(e) => return Err(e.into()),
        }
        for req in console.poll() {
            let reply = match req {
                Err(reason) => Outgoing::Nack { id: None, reason },
                Ok(Request { id, command }) => {
                    let gate = match command {
                        Command::Pause if paused => Err("already paused".to_string()),
                        Command::Resume if !paused => Err("not paused".to_string()),
                        _ => Ok(()),
                    };
                    match gate.and_then(|_| session.apply_command(command.clone()).map_err(|e| e.to_string())) {
                        Ok(()) => {
                            match command {
                                Command::Pause => paused = true,
                                Command::Resume => paused = false,
                                _ => {}
                            }
                            Outgoing::Ack {
                                id,
                                tick: session.world().tick,
                            }
                        }
                        Err(reason) => Outgoing::Nack { id, reason },
                    }
                }
            };
            console.send(&reply);
        }
        if paused {
            std::thread::sleep(Duration::from_millis(10));
            next = Instant::now();
            continue;
        }
        session.step()?;
        console.send(&Outgoing::Frame {
            frame: session.frame(),
            paused,
        });
        if let Some(p) = period {
            next += p;
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            } else {
                next = now;
            }
        }
    }

    let termination = session.termination();
    let (log, takeovers) = session.run_with_takeovers()?;
    write_file(&cfg.out, &log.to_jsonl())?;
    let records = deduce_all(&spec, &map, &log, &takeovers)?;
    if !records.is_empty() {
        let path = sibling(&cfg.out, ".deduction.json");
        write_file(&path, &serde_json::to_string_pretty(&records)?)?;
    }
    for r in &records {
        console.send(&Outgoing::Verdict(r));
    }
    console.send(&Outgoing::End {
        termination,
        log: cfg.out.display().to_string(),
    });
    if let Some(mut ws) = console.ws.take() {
        let _ = ws.get_ref().set_nonblocking(false);
        let _ = ws.close(None);
        let _ = ws.flush();
    }
    println!("session ended: {termination:?} -> {}", cfg.out.display());
    Ok(())
}
