//! Reply wire format. Plain replies are UTF-8 lines; structured data travels as
//!
//! ```text
//! ##FRAME <content_type> <payload-byte-count>\n
//! <payload bytes>##END\n
//! ```

use thiserror::Error;

pub const FRAME_PREFIX: &str = "##FRAME ";
pub const FRAME_END: &str = "##END\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("malformed frame header: {0:?}")]
    Header(String),
    #[error("frame of {expected} bytes truncated after {got}")]
    Truncated { expected: usize, got: usize },
    #[error("frame payload not followed by ##END")]
    MissingEnd,
}

/// Encodes one data frame.
///
/// # Panics
/// When `content_type` is empty or contains whitespace.
pub fn frame_reply(content_type: &str, payload: &[u8]) -> Vec<u8> {
    assert!(
        !content_type.is_empty() && !content_type.chars().any(char::is_whitespace),
        "content type must be a single token"
    );
    let mut out = format!("{FRAME_PREFIX}{content_type} {}\n", payload.len()).into_bytes();
    out.extend_from_slice(payload);
    out.extend_from_slice(FRAME_END.as_bytes());
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    /// One line. Includes its trailing `\n` unless it is an unterminated tail
    /// such as a prompt.
    Text(String),
    Frame { content_type: String, payload: Vec<u8> },
}

impl Reply {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Reply::Text(s) => s.as_bytes().to_vec(),
            Reply::Frame { content_type, payload } => frame_reply(content_type, payload),
        }
    }
}

/// Incremental parser for a reply byte stream.
#[derive(Debug, Default)]
pub struct ReplyParser {
    buf: Vec<u8>,
}

fn parse_header(line: &[u8]) -> Result<(String, usize), FrameError> {
    let text = std::str::from_utf8(line).map_err(|_| FrameError::Header(String::from_utf8_lossy(line).into()))?;
    let bad = || FrameError::Header(text.trim_end().to_string());
    let rest = text.strip_prefix(FRAME_PREFIX).ok_or_else(bad)?.trim_end_matches('\n');
    let mut parts = rest.split(' ');
    let (Some(kind), Some(len), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    if kind.is_empty() {
        return Err(bad());
    }
    let len = len.parse::<usize>().map_err(|_| bad())?;
    Ok((kind.to_string(), len))
}

impl ReplyParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete reply, if the buffer holds one.
    pub fn next_reply(&mut self) -> Option<Result<Reply, FrameError>> {
        let nl = self.buf.iter().position(|&b| b == b'\n')?;
        if !self.buf.starts_with(FRAME_PREFIX.as_bytes()) {
            let line: Vec<u8> = self.buf.drain(..=nl).collect();
            return Some(Ok(Reply::Text(String::from_utf8_lossy(&line).into_owned())));
        }
        let (content_type, len) = match parse_header(&self.buf[..=nl]) {
            Ok(h) => h,
            Err(e) => {
                self.buf.drain(..=nl);
                return Some(Err(e));
            }
        };
        let start = nl + 1;
        let end = start + len + FRAME_END.len();
        if self.buf.len() < end {
            return None;
        }
        if &self.buf[start + len..end] != FRAME_END.as_bytes() {
            self.buf.drain(..start);
            return Some(Err(FrameError::MissingEnd));
        }
        let payload = self.buf[start..start + len].to_vec();
        self.buf.drain(..end);
        Some(Ok(Reply::Frame { content_type, payload }))
    }

    /// Flushes what is left: an unterminated text tail, or an error for a
    /// frame that never completed.
    pub fn finish(mut self) -> Result<Option<Reply>, FrameError> {
        if self.buf.is_empty() {
            return Ok(None);
        }
        if self.buf.starts_with(FRAME_PREFIX.as_bytes()) {
            if let Some(nl) = self.buf.iter().position(|&b| b == b'\n') {
                let (_, len) = parse_header(&self.buf[..=nl])?;
                let got = self.buf.len() - nl - 1;
                return Err(FrameError::Truncated { expected: len, got: got.min(len) });
            }
        }
        Ok(Some(Reply::Text(String::from_utf8_lossy(&std::mem::take(&mut self.buf)).into_owned())))
    }
}

/// Splits a complete byte stream into replies.
pub fn parse_replies(bytes: &[u8]) -> Result<Vec<Reply>, FrameError> {
    let mut p = ReplyParser::new();
    p.feed(bytes);
    let mut out = Vec::new();
    while let Some(r) = p.next_reply() {
        out.push(r?);
    }
    out.extend(p.finish()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_byte_slice() {
        let payload = vec![b'7'; 100];
        let bytes = frame_reply("slice/json", &payload);
        assert!(bytes.starts_with(b"##FRAME slice/json 100\n"));
        assert!(bytes.ends_with(b"7##END\n"));
        assert_eq!(bytes.len(), 23 + 100 + 6);
    }

    #[test]
    fn empty_payload() {
        assert_eq!(frame_reply("metric/json", b""), b"##FRAME metric/json 0\n##END\n");
        let r = parse_replies(b"##FRAME metric/json 0\n##END\n").unwrap();
        assert_eq!(r, vec![Reply::Frame { content_type: "metric/json".into(), payload: vec![] }]);
    }

    #[test]
    fn mixed_stream() {
        let mut s = b"hello\n".to_vec();
        s.extend(frame_reply("a/b", b"x\n##END\ny"));
        s.extend_from_slice(b">>> ");
        let r = parse_replies(&s).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0], Reply::Text("hello\n".into()));
        assert_eq!(r[1], Reply::Frame { content_type: "a/b".into(), payload: b"x\n##END\ny".to_vec() });
        assert_eq!(r[2], Reply::Text(">>> ".into()));
    }

    #[test]
    fn malformed() {
        assert!(matches!(parse_replies(b"##FRAME x\n"), Err(FrameError::Header(_))));
        assert_eq!(parse_replies(b"##FRAME x 10\nabc"), Err(FrameError::Truncated { expected: 10, got: 3 }));
        assert_eq!(parse_replies(b"##FRAME x 1\nab##END\n"), Err(FrameError::MissingEnd));
    }
}
