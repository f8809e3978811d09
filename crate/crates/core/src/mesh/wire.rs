//! Length-prefixed binary framing for topic messages and service calls.
//!
//! ```text
//! "VLCP" | version u8 | kind u8 | header_len u16 | header | body_len u32 | body
//! header = name (UTF-8, header_len - 12 bytes) | seq u32 | timestamp_ns u64
//! ```
//! All integers are little-endian. The body starts with a one-byte tag.

use std::io::{Read, Write};

use thiserror::Error;

use crate::types::{Encoding, Frame};

pub const MAGIC: [u8; 4] = *b"VLCP";
pub const VERSION: u8 = 1;
/// Upper bound on a body, enough for a native mono8 frame with headroom.
pub const MAX_BODY: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message kind {0}")]
    BadKind(u8),
    #[error("unknown body tag {0:#04x}")]
    BadTag(u8),
    #[error("message truncated")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid UTF-8 in string field")]
    Utf8,
    #[error("field too large: {0}")]
    TooLarge(&'static str),
    #[error("pixel buffer of {got} bytes, expected {expected}")]
    PixelLength { expected: usize, got: usize },
    #[error("unsupported encoding {0}")]
    Encoding(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Topic = 1,
    Request = 2,
    Response = 3,
}

impl Kind {
    pub fn from_u8(v: u8) -> Result<Self, WireError> {
        match v {
            1 => Ok(Kind::Topic),
            2 => Ok(Kind::Request),
            3 => Ok(Kind::Response),
            other => Err(WireError::BadKind(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    /// Topic or service name.
    pub name: String,
    /// Publisher sequence number or request id.
    pub seq: u32,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBody {
    pub width: u16,
    pub height: u16,
    pub encoding: u8,
    pub pixels: Vec<u8>,
}

impl ImageBody {
    pub fn from_frame(frame: &Frame) -> Result<Self, WireError> {
        let width = u16::try_from(frame.width).map_err(|_| WireError::TooLarge("image width"))?;
        let height = u16::try_from(frame.height).map_err(|_| WireError::TooLarge("image height"))?;
        Ok(Self { width, height, encoding: frame.encoding as u8, pixels: frame.pixels.clone() })
    }

    pub fn to_frame(&self, timestamp_ns: u64) -> Result<Frame, WireError> {
        Encoding::from_u8(self.encoding).ok_or(WireError::Encoding(self.encoding))?;
        let expected = self.width as usize * self.height as usize;
        Frame::from_pixels(self.width as u32, self.height as u32, timestamp_ns, self.pixels.clone())
            .ok_or(WireError::PixelLength { expected, got: self.pixels.len() })
    }
}

/// Pixel position of one identified lamp.
#[derive(Debug, Clone, PartialEq)]
pub struct LampFix {
    pub id: String,
    pub img_x: f64,
    pub img_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionBody {
    pub x_w: f64,
    pub y_w: f64,
    pub z_w: f64,
    pub theta: f64,
    pub pair: (String, String),
    pub solve_timestamp_ns: u64,
    pub source_frame_seq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum IdStatus {
    Found = 0,
    NoMatch = 1,
    Ambiguous = 2,
    Failed = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Image(ImageBody),
    Position(PositionBody),
    /// ROI patch cut from frame `frame_seq`; `x0, y0` is its offset in
    /// that frame, whose capture time is `frame_ts_ns`.
    IdRequest { frame_seq: u32, frame_ts_ns: u64, x0: u16, y0: u16, patch: ImageBody },
    IdResponse { status: IdStatus, id: String },
    LedInfoRequest { frame_seq: u32, frame_ts_ns: u64, lamps: Vec<LampFix> },
    LedInfoResponse { ack: bool },
    /// Receipt of a topic message, used for lockstep pacing.
    Ack { seq: u32 },
    EndOfStream,
    Error { message: String },
}

impl Body {
    pub fn tag(&self) -> u8 {
        match self {
            Body::Image(_) => 0x01,
            Body::Position(_) => 0x02,
            Body::IdRequest { .. } => 0x03,
            Body::IdResponse { .. } => 0x04,
            Body::LedInfoRequest { .. } => 0x05,
            Body::LedInfoResponse { .. } => 0x06,
            Body::Ack { .. } => 0x08,
            Body::EndOfStream => 0x09,
            Body::Error { .. } => 0x7f,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: Kind,
    pub header: Header,
    pub body: Body,
}

impl Message {
    pub fn topic(name: &str, seq: u32, timestamp_ns: u64, body: Body) -> Self {
        Self { kind: Kind::Topic, header: Header { name: name.into(), seq, timestamp_ns }, body }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<(), WireError> {
        let n = u16::try_from(s.len()).map_err(|_| WireError::TooLarge("string"))?;
        self.u16(n);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn image(&mut self, img: &ImageBody) {
        self.u16(img.width);
        self.u16(img.height);
        self.u8(img.encoding);
        self.0.extend_from_slice(&img.pixels);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::Utf8)
    }
    fn image_rest(&mut self) -> Result<ImageBody, WireError> {
        let width = self.u16()?;
        let height = self.u16()?;
        let encoding = self.u8()?;
        let bpp = Encoding::from_u8(encoding).ok_or(WireError::Encoding(encoding))?.bytes_per_pixel();
        let expected = width as usize * height as usize * bpp;
        let got = self.buf.len() - self.pos;
        if got != expected {
            return Err(WireError::PixelLength { expected, got });
        }
        let pixels = self.take(expected)?.to_vec();
        Ok(ImageBody { width, height, encoding, pixels })
    }
    fn done(&self) -> Result<(), WireError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}

fn encode_body(body: &Body) -> Result<Vec<u8>, WireError> {
    let mut w = Writer(Vec::new());
    w.u8(body.tag());
    match body {
        Body::Image(img) => w.image(img),
        Body::Position(p) => {
            w.f64(p.x_w);
            w.f64(p.y_w);
            w.f64(p.z_w);
            w.f64(p.theta);
            w.str(&p.pair.0)?;
            w.str(&p.pair.1)?;
            w.u64(p.solve_timestamp_ns);
            w.u32(p.source_frame_seq);
        }
        Body::IdRequest { frame_seq, frame_ts_ns, x0, y0, patch } => {
            w.u32(*frame_seq);
            w.u64(*frame_ts_ns);
            w.u16(*x0);
            w.u16(*y0);
            w.image(patch);
        }
        Body::IdResponse { status, id } => {
            w.u8(*status as u8);
            w.str(id)?;
        }
        Body::LedInfoRequest { frame_seq, frame_ts_ns, lamps } => {
            w.u32(*frame_seq);
            w.u64(*frame_ts_ns);
            w.u16(u16::try_from(lamps.len()).map_err(|_| WireError::TooLarge("lamp list"))?);
            for l in lamps {
                w.str(&l.id)?;
                w.f64(l.img_x);
                w.f64(l.img_y);
            }
        }
        Body::LedInfoResponse { ack } => w.u8(*ack as u8),
        Body::Ack { seq } => w.u32(*seq),
        Body::EndOfStream => {}
        Body::Error { message } => w.str(message)?,
    }
    Ok(w.0)
}

fn decode_body(buf: &[u8]) -> Result<Body, WireError> {
    let mut r = Reader { buf, pos: 0 };
    let body = match r.u8()? {
        0x01 => Body::Image(r.image_rest()?),
        0x02 => Body::Position(PositionBody {
            x_w: r.f64()?,
            y_w: r.f64()?,
            z_w: r.f64()?,
            theta: r.f64()?,
            pair: (r.str()?, r.str()?),
            solve_timestamp_ns: r.u64()?,
            source_frame_seq: r.u32()?,
        }),
        0x03 => Body::IdRequest {
            frame_seq: r.u32()?,
            frame_ts_ns: r.u64()?,
            x0: r.u16()?,
            y0: r.u16()?,
            patch: r.image_rest()?,
        },
        0x04 => {
            let status = match r.u8()? {
                0 => IdStatus::Found,
                1 => IdStatus::NoMatch,
                2 => IdStatus::Ambiguous,
                3 => IdStatus::Failed,
                other => return Err(WireError::BadTag(other)),
            };
            Body::IdResponse { status, id: r.str()? }
        }
        0x05 => {
            let frame_seq = r.u32()?;
            let frame_ts_ns = r.u64()?;
            let n = r.u16()?;
            let lamps = (0..n)
                .map(|_| Ok(LampFix { id: r.str()?, img_x: r.f64()?, img_y: r.f64()? }))
                .collect::<Result<_, WireError>>()?;
            Body::LedInfoRequest { frame_seq, frame_ts_ns, lamps }
        }
        0x06 => match r.u8()? {
            0 => Body::LedInfoResponse { ack: false },
            1 => Body::LedInfoResponse { ack: true },
            other => return Err(WireError::BadTag(other)),
        },
        0x08 => Body::Ack { seq: r.u32()? },
        0x09 => Body::EndOfStream,
        0x7f => Body::Error { message: r.str()? },
        other => return Err(WireError::BadTag(other)),
    };
    r.done()?;
    Ok(body)
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let name = msg.header.name.as_bytes();
    let header_len = u16::try_from(name.len() + 12).map_err(|_| WireError::TooLarge("name"))?;
    let body = encode_body(&msg.body)?;
    let body_len = u32::try_from(body.len()).map_err(|_| WireError::TooLarge("body"))?;
    let mut w = Writer(Vec::with_capacity(12 + header_len as usize + body.len()));
    w.0.extend_from_slice(&MAGIC);
    w.u8(VERSION);
    w.u8(msg.kind as u8);
    w.u16(header_len);
    w.0.extend_from_slice(name);
    w.u32(msg.header.seq);
    w.u64(msg.header.timestamp_ns);
    w.u32(body_len);
    w.0.extend_from_slice(&body);
    Ok(w.0)
}

/// Parses the fixed prefix and header; returns the message kind, header and
/// body length.
fn decode_prefix(r: &mut Reader<'_>) -> Result<(Kind, Header, u32), WireError> {
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let kind = Kind::from_u8(r.u8()?)?;
    let header_len = r.u16()? as usize;
    let name_len = header_len.checked_sub(12).ok_or(WireError::Truncated)?;
    let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| WireError::Utf8)?;
    let header = Header { name, seq: r.u32()?, timestamp_ns: r.u64()? };
    let body_len = r.u32()?;
    if body_len > MAX_BODY {
        return Err(WireError::TooLarge("body"));
    }
    Ok((kind, header, body_len))
}

/// Decodes exactly one message occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let (kind, header, body_len) = decode_prefix(&mut r)?;
    let body = decode_body(r.take(body_len as usize)?)?;
    r.done()?;
    Ok(Message { kind, header, body })
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<usize, WireError> {
    let bytes = encode(msg)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

/// Reads one message from a stream. Returns `None` on a clean end of stream
/// before the first byte.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<(Message, usize)>, WireError> {
    let mut fixed = [0u8; 8];
    let mut got = 0;
    while got < fixed.len() {
        match r.read(&mut fixed[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(WireError::Truncated),
            n => got += n,
        }
    }
    let header_len = u16::from_le_bytes([fixed[6], fixed[7]]) as usize;
    let mut buf = fixed.to_vec();
    buf.resize(8 + header_len + 4, 0);
    read_full(r, &mut buf[8..])?;
    let body_len = u32::from_le_bytes(buf[8 + header_len..].try_into().expect("4 bytes"));
    if body_len > MAX_BODY {
        return Err(WireError::TooLarge("body"));
    }
    let start = buf.len();
    buf.resize(start + body_len as usize, 0);
    read_full(r, &mut buf[start..])?;
    let n = buf.len();
    Ok(Some((decode(&buf)?, n)))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), WireError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })
}
