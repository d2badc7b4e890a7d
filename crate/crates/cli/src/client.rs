//! One request per connection, read until the terminating reply.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use hepinfo_core::protocol::{decode, encode, Message};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to {0}: {1}")]
    Connect(String, std::io::Error),
    #[error("connection error: {0}")]
    Io(std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// True once `reply` ends the exchange started by `req`.
pub fn is_final(req: &Message, reply: &Message) -> bool {
    match reply {
        Message::Ok | Message::Err { .. } | Message::JobId(_) => true,
        Message::State(_) => matches!(req, Message::Status(_)),
        _ => false,
    }
}

pub fn request(addr: &str, req: &Message, timeout: Duration) -> Result<Vec<Message>, ClientError> {
    let sock = addr
        .to_socket_addrs()
        .map_err(|e| ClientError::Connect(addr.to_string(), e))?
        .next()
        .ok_or_else(|| {
            ClientError::Connect(
                addr.to_string(),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no address"),
            )
        })?;
    let mut stream =
        TcpStream::connect_timeout(&sock, timeout).map_err(|e| ClientError::Connect(addr.to_string(), e))?;
    stream.set_read_timeout(Some(timeout)).map_err(ClientError::Io)?;
    stream.write_all(encode(req).as_bytes()).map_err(ClientError::Io)?;
    let mut reader = BufReader::new(stream);
    let mut replies = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(ClientError::Io)? == 0 {
            return Err(ClientError::Protocol("connection closed before reply completed".into()));
        }
        let msg = decode(&line).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let done = is_final(req, &msg);
        replies.push(msg);
        if done {
            return Ok(replies);
        }
    }
}
