//! Length-prefixed binary frames for profiles, metrics, detections and
//! heartbeats.
//!
//! ```text
//! magic "TOPO" | version u8 | type u8 | payload_len u32 LE | payload | crc32(payload) u32 LE
//! ```

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TOPO";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 10;
pub const TRAILER_LEN: usize = 4;
/// Frames announcing a larger payload are rejected before buffering.
pub const MAX_PAYLOAD: usize = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("checksum mismatch: frame {expected:08x}, payload {actual:08x}")]
    BadCrc { expected: u32, actual: u32 },
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed payload: {0}")]
    BadPayload(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Profile = 0x01,
    Metrics = 0x02,
    Detection = 0x03,
    Heartbeat = 0x04,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Result<Self, WireError> {
        match b {
            0x01 => Ok(Self::Profile),
            0x02 => Ok(Self::Metrics),
            0x03 => Ok(Self::Detection),
            0x04 => Ok(Self::Heartbeat),
            other => Err(WireError::UnknownType(other)),
        }
    }

    /// Subscription bit; heartbeats go to every subscriber.
    pub fn topic_bit(self) -> u8 {
        match self {
            Self::Profile => TOPIC_PROFILE,
            Self::Metrics => TOPIC_METRICS,
            Self::Detection => TOPIC_DETECTION,
            Self::Heartbeat => 0,
        }
    }
}

pub const TOPIC_PROFILE: u8 = 0x01;
pub const TOPIC_METRICS: u8 = 0x02;
pub const TOPIC_DETECTION: u8 = 0x04;
pub const TOPIC_ALL: u8 = TOPIC_PROFILE | TOPIC_METRICS | TOPIC_DETECTION;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileMsg {
    pub frame_index: u64,
    pub axial_pos: f64,
    pub radii: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsMsg {
    pub frame_index: u64,
    pub d_min: f32,
    pub d_max: f32,
    pub ovality: f32,
    pub roundness: f32,
    pub waviness: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMsg {
    /// Last profile seen when the region was reported.
    pub frame_index: u64,
    pub theta_min: f32,
    pub theta_max: f32,
    pub y_min: f32,
    pub y_max: f32,
    pub confidence: f32,
    pub members: u32,
    /// At most 255 bytes of UTF-8.
    pub class: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeartbeatMsg {
    pub sequence: u64,
    /// Messages dropped for this subscriber so far.
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Profile(ProfileMsg),
    Metrics(MetricsMsg),
    Detection(DetectionMsg),
    Heartbeat(HeartbeatMsg),
}

impl WireMessage {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Self::Profile(_) => MsgType::Profile,
            Self::Metrics(_) => MsgType::Metrics,
            Self::Detection(_) => MsgType::Detection,
            Self::Heartbeat(_) => MsgType::Heartbeat,
        }
    }

    pub fn frame_index(&self) -> Option<u64> {
        match self {
            Self::Profile(m) => Some(m.frame_index),
            Self::Metrics(m) => Some(m.frame_index),
            Self::Detection(m) => Some(m.frame_index),
            Self::Heartbeat(_) => None,
        }
    }
}

fn payload(msg: &WireMessage) -> Vec<u8> {
    let mut p = Vec::new();
    match msg {
        WireMessage::Profile(m) => {
            p.reserve(20 + 4 * m.radii.len());
            p.extend_from_slice(&m.frame_index.to_le_bytes());
            p.extend_from_slice(&m.axial_pos.to_le_bytes());
            p.extend_from_slice(&(m.radii.len() as u32).to_le_bytes());
            for r in &m.radii {
                p.extend_from_slice(&r.to_le_bytes());
            }
        }
        WireMessage::Metrics(m) => {
            p.extend_from_slice(&m.frame_index.to_le_bytes());
            for v in [m.d_min, m.d_max, m.ovality, m.roundness, m.waviness] {
                p.extend_from_slice(&v.to_le_bytes());
            }
        }
        WireMessage::Detection(m) => {
            p.extend_from_slice(&m.frame_index.to_le_bytes());
            for v in [m.theta_min, m.theta_max, m.y_min, m.y_max, m.confidence] {
                p.extend_from_slice(&v.to_le_bytes());
            }
            p.extend_from_slice(&m.members.to_le_bytes());
            let class = truncate_utf8(&m.class, 255);
            p.push(class.len() as u8);
            p.extend_from_slice(class.as_bytes());
        }
        WireMessage::Heartbeat(m) => {
            p.extend_from_slice(&m.sequence.to_le_bytes());
            p.extend_from_slice(&m.dropped.to_le_bytes());
        }
    }
    p
}

fn truncate_utf8(s: &str, max: usize) -> &str {
    let mut end = s.len().min(max);
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

/// Serializes one frame.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let p = payload(msg);
    let mut out = Vec::with_capacity(HEADER_LEN + p.len() + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type() as u8);
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    out.extend_from_slice(&p);
    out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or(WireError::BadPayload("payload too short"))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish<T>(self, value: T) -> Result<T, WireError> {
        if self.pos == self.buf.len() {
            Ok(value)
        } else {
            Err(WireError::BadPayload("trailing payload bytes"))
        }
    }
}

fn parse_payload(ty: MsgType, p: &[u8]) -> Result<WireMessage, WireError> {
    let mut r = Reader { buf: p, pos: 0 };
    let msg = match ty {
        MsgType::Profile => {
            let frame_index = r.u64()?;
            let axial_pos = r.f64()?;
            let n = r.u32()? as usize;
            if p.len() != 20 + 4 * n {
                return Err(WireError::BadPayload("point count disagrees with payload length"));
            }
            let radii = (0..n).map(|_| r.f32()).collect::<Result<_, _>>()?;
            WireMessage::Profile(ProfileMsg {
                frame_index,
                axial_pos,
                radii,
            })
        }
        MsgType::Metrics => WireMessage::Metrics(MetricsMsg {
            frame_index: r.u64()?,
            d_min: r.f32()?,
            d_max: r.f32()?,
            ovality: r.f32()?,
            roundness: r.f32()?,
            waviness: r.f32()?,
        }),
        MsgType::Detection => {
            let frame_index = r.u64()?;
            let (theta_min, theta_max, y_min, y_max, confidence) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?, r.f32()?);
            let members = r.u32()?;
            let len = r.take(1)?[0] as usize;
            let class = std::str::from_utf8(r.take(len)?).map_err(|_| WireError::BadPayload("class is not UTF-8"))?.to_string();
            WireMessage::Detection(DetectionMsg {
                frame_index,
                theta_min,
                theta_max,
                y_min,
                y_max,
                confidence,
                members,
                class,
            })
        }
        MsgType::Heartbeat => WireMessage::Heartbeat(HeartbeatMsg {
            sequence: r.u64()?,
            dropped: r.u64()?,
        }),
    };
    r.finish(msg)
}

/// Validated header: message type and payload length.
fn parse_header(bytes: &[u8]) -> Result<(MsgType, usize), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            have: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(WireError::BadVersion(bytes[4]));
    }
    let ty = MsgType::from_byte(bytes[5])?;
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    Ok((ty, len))
}

/// Decodes the frame at the start of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(WireMessage, usize), WireError> {
    let (ty, len) = parse_header(bytes)?;
    let total = HEADER_LEN + len + TRAILER_LEN;
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            have: bytes.len(),
        });
    }
    let p = &bytes[HEADER_LEN..HEADER_LEN + len];
    let expected = u32::from_le_bytes(bytes[HEADER_LEN + len..total].try_into().unwrap());
    let actual = crc32fast::hash(p);
    if expected != actual {
        return Err(WireError::BadCrc { expected, actual });
    }
    Ok((parse_payload(ty, p)?, total))
}

/// Reassembles frames from arbitrarily chunked input.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    head: usize,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.head > 0 && self.head * 2 >= self.buf.len() {
            self.buf.drain(..self.head);
            self.head = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.head
    }

    /// Next complete message, `None` when more input is needed. A frame
    /// with a bad checksum or payload is skipped whole; a bad header skips
    /// one byte so the decoder can resynchronize.
    pub fn next_message(&mut self) -> Result<Option<WireMessage>, WireError> {
        let avail = &self.buf[self.head..];
        let (_, len) = match parse_header(avail) {
            Ok(h) => h,
            Err(WireError::Truncated { .. }) => return Ok(None),
            Err(e) => {
                self.head += 1;
                return Err(e);
            }
        };
        if avail.len() < HEADER_LEN + len + TRAILER_LEN {
            return Ok(None);
        }
        let result = decode(avail);
        self.head += HEADER_LEN + len + TRAILER_LEN;
        result.map(|(m, _)| Some(m))
    }
}
