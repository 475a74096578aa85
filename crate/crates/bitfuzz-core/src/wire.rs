//! Target wire protocol: newline-delimited JSON over TCP.
//!
//! One request object per line, one response per line. Hex is lowercase,
//! 8 chars per word. An unresponsive (hard-crashed) device answers
//! `{"ok":false,"error":"timeout"}`; when the crash happened during the
//! current `program` call, the 156-byte dump the device emitted on its way
//! down rides along as `emission`.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bitstream::{BitstreamImage, Word};
use crate::harness::{ProgramOutcome, Target, TargetError};
use crate::hexfmt;
use crate::sim::{DeviceConfig, EngineState, Lifecycle, SimError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Program { bitstream: String },
    ReadRegs,
    Reset,
    PowerCycle,
    Done,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// `"ok"` or `"soft_crashed"`, on program responses.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lifecycle: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regs: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub done: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emission: Option<String>,
}

impl Response {
    fn ok() -> Response {
        Response {
            ok: true,
            ..Response::default()
        }
    }

    fn timeout(emission: Option<String>) -> Response {
        Response {
            ok: false,
            error: Some("timeout".into()),
            emission,
            ..Response::default()
        }
    }

    fn bad_request(message: String) -> Response {
        Response {
            ok: false,
            error: Some(format!("bad request: {message}")),
            ..Response::default()
        }
    }
}

fn dispatch(engine: &mut EngineState, request: Request) -> Response {
    match request {
        Request::Program { bitstream } => {
            let Some(words) = hexfmt::words_from_hex(&bitstream) else {
                return Response::bad_request("bitstream hex".into());
            };
            let image = BitstreamImage::from_words(words);
            match engine.program(&image) {
                Err(_) => Response::timeout(None),
                Ok(report) => match report.lifecycle {
                    Lifecycle::HardCrashed => {
                        Response::timeout(report.emission.as_deref().map(hexfmt::words_to_hex))
                    }
                    Lifecycle::SoftCrashed => Response {
                        lifecycle: Some("soft_crashed".into()),
                        ..Response::ok()
                    },
                    _ => Response {
                        lifecycle: Some("ok".into()),
                        ..Response::ok()
                    },
                },
            }
        }
        Request::ReadRegs => match engine.read_all() {
            Err(_) => Response::timeout(None),
            Ok(regs) => Response {
                regs: Some(regs.iter().map(|&w| hexfmt::word_to_hex(w)).collect()),
                ..Response::ok()
            },
        },
        Request::Reset => match engine.reset_jprogram() {
            Err(_) => Response::timeout(None),
            Ok(()) => Response::ok(),
        },
        Request::PowerCycle => {
            engine.power_cycle();
            Response::ok()
        }
        Request::Done => match engine.done_pin() {
            Err(_) => Response::timeout(None),
            Ok(done) => Response {
                done: Some(done),
                ..Response::ok()
            },
        },
    }
}

/// Serve one simulated device on a listener. The engine persists across
/// connections, like a board stays powered between fuzzer runs. Blocks
/// until the listener fails.
pub fn serve(listener: TcpListener, config: &DeviceConfig) -> Result<(), SimError> {
    let mut engine = EngineState::new(config)?;
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(_) => continue,
        };
        // A dropped client just ends its connection.
        let _ = handle_connection(stream, &mut engine);
    }
    Ok(())
}

fn handle_connection(stream: TcpStream, engine: &mut EngineState) -> std::io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(request) => dispatch(engine, request),
            Err(e) => Response::bad_request(e.to_string()),
        };
        let mut text = serde_json::to_string(&response).expect("response serializes");
        text.push('\n');
        writer.write_all(text.as_bytes())?;
    }
    Ok(())
}

/// Client side of the wire protocol, a [`Target`] over TCP.
pub struct TcpTarget {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpTarget {
    pub fn connect(addr: &str) -> std::io::Result<TcpTarget> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        stream.set_nodelay(true)?;
        Ok(TcpTarget {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn call(&mut self, request: &Request) -> Result<Response, TargetError> {
        let transport = |e: std::io::Error| TargetError::Transport(e.to_string());
        let mut line =
            serde_json::to_string(request).map_err(|e| TargetError::Transport(e.to_string()))?;
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(transport)?;
        let mut reply = String::new();
        let n = self.reader.read_line(&mut reply).map_err(transport)?;
        if n == 0 {
            return Err(TargetError::Transport("connection closed".into()));
        }
        serde_json::from_str(&reply).map_err(|e| TargetError::Transport(e.to_string()))
    }

    fn expect_ok(response: Response) -> Result<Response, TargetError> {
        if response.ok {
            Ok(response)
        } else if response.error.as_deref() == Some("timeout") {
            Err(TargetError::Unresponsive)
        } else {
            Err(TargetError::Transport(
                response.error.unwrap_or_else(|| "unknown error".into()),
            ))
        }
    }
}

impl Target for TcpTarget {
    fn program(&mut self, image: &BitstreamImage) -> Result<ProgramOutcome, TargetError> {
        let response = self.call(&Request::Program {
            bitstream: hexfmt::words_to_hex(&image.words),
        })?;
        if response.ok {
            let lifecycle = match response.lifecycle.as_deref() {
                Some("soft_crashed") => Lifecycle::SoftCrashed,
                _ => Lifecycle::Synced,
            };
            return Ok(ProgramOutcome {
                lifecycle,
                emission: response
                    .emission
                    .as_deref()
                    .and_then(hexfmt::words_from_hex),
            });
        }
        if response.error.as_deref() == Some("timeout") {
            // A timeout carrying an emission is the device hard-crashing
            // during this very program call.
            return match response
                .emission
                .as_deref()
                .and_then(hexfmt::words_from_hex)
            {
                Some(emission) => Ok(ProgramOutcome {
                    lifecycle: Lifecycle::HardCrashed,
                    emission: Some(emission),
                }),
                None => Err(TargetError::Unresponsive),
            };
        }
        Err(TargetError::Transport(
            response.error.unwrap_or_else(|| "unknown error".into()),
        ))
    }

    fn read_all(&mut self) -> Result<[Word; 32], TargetError> {
        let response = Self::expect_ok(self.call(&Request::ReadRegs)?)?;
        let regs = response
            .regs
            .ok_or_else(|| TargetError::Transport("missing regs".into()))?;
        if regs.len() != 32 {
            return Err(TargetError::Transport(format!(
                "expected 32 registers, got {}",
                regs.len()
            )));
        }
        let mut out = [0; 32];
        for (i, s) in regs.iter().enumerate() {
            out[i] = hexfmt::word_from_hex(s)
                .ok_or_else(|| TargetError::Transport(format!("bad register hex {s:?}")))?;
        }
        Ok(out)
    }

    fn reset(&mut self) -> Result<(), TargetError> {
        Self::expect_ok(self.call(&Request::Reset)?).map(|_| ())
    }

    fn power_cycle(&mut self) -> Result<(), TargetError> {
        Self::expect_ok(self.call(&Request::PowerCycle)?).map(|_| ())
    }

    fn done_pin(&mut self) -> Result<bool, TargetError> {
        let response = Self::expect_ok(self.call(&Request::Done)?)?;
        response
            .done
            .ok_or_else(|| TargetError::Transport("missing done".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitstream::{encode_type1_header, Opcode, SYNC_WORD};
    use crate::harness::SimTarget;
    use crate::regs;

    fn spawn_server(config: DeviceConfig) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let _ = serve(listener, &config);
        });
        addr.to_string()
    }

    fn images() -> Vec<BitstreamImage> {
        let t1w = |reg, count| encode_type1_header(Opcode::Write, reg, count).unwrap();
        vec![
            BitstreamImage::from_words(vec![SYNC_WORD, 0x2000_0000]),
            BitstreamImage::from_words(vec![SYNC_WORD, t1w(regs::WBSTAR, 1), 0xDEAD_C0DE]),
            BitstreamImage::from_words(vec![SYNC_WORD, t1w(regs::UNKNOWN_23, 1), 1 << 24]),
            BitstreamImage::from_words(vec![
                SYNC_WORD,
                t1w(regs::UNKNOWN_23, 1),
                (1 << 23) | (1 << 25),
            ]),
        ]
    }

    #[test]
    fn tcp_target_mirrors_in_process_simulator() {
        let addr = spawn_server(DeviceConfig::default());
        let mut tcp = TcpTarget::connect(&addr).unwrap();
        let mut sim = SimTarget::new(&DeviceConfig::default()).unwrap();

        for image in images() {
            let a = tcp.reset();
            let b = sim.reset();
            assert_eq!(a, b);
            let (a, b) = (tcp.program(&image), sim.program(&image));
            assert_eq!(a, b, "program mismatch for {:08x?}", image.words);
            let (a, b) = (tcp.read_all(), sim.read_all());
            assert_eq!(a, b);
            let (a, b) = (tcp.done_pin(), sim.done_pin());
            assert_eq!(a, b);
            assert_eq!(tcp.power_cycle(), sim.power_cycle());
        }
    }

    #[test]
    fn malformed_requests_get_an_error_line() {
        let addr = spawn_server(DeviceConfig::default());
        let mut stream = TcpStream::connect(&addr).unwrap();
        stream.write_all(b"{\"op\":\"nonsense\"}\n").unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let response: Response = serde_json::from_str(&line).unwrap();
        assert!(!response.ok);
        assert!(response.error.unwrap().starts_with("bad request"));
    }
}
