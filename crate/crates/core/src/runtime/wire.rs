//! Length-prefixed frames.
//!
//! ```text
//! u32 BE payload length | u8 kind | u16 BE sender | u64 BE step | payload
//! ```
//!
//! Vectors travel as little-endian f64 in layout order.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::numeric::Batch;
use crate::{Error, Result};

pub const HEADER_LEN: usize = 15;

/// Step used by the initial parameter pull, before step 0.
pub const INIT_STEP: u64 = u64::MAX;

const PS_SENDER: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Ps,
    Worker(usize),
}

impl NodeId {
    fn to_wire(self) -> Result<u16> {
        match self {
            NodeId::Ps => Ok(PS_SENDER),
            NodeId::Worker(n) if n < PS_SENDER as usize => Ok(n as u16),
            NodeId::Worker(n) => Err(Error::Protocol(format!("worker index {n} does not fit the wire format"))),
        }
    }

    fn from_wire(v: u16) -> Self {
        if v == PS_SENDER {
            NodeId::Ps
        } else {
            NodeId::Worker(v as usize)
        }
    }

    pub fn worker_index(self) -> Option<usize> {
        match self {
            NodeId::Worker(n) => Some(n),
            NodeId::Ps => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Kind {
    PullRequest = 1,
    GlobalParams = 2,
    PushParams = 3,
    PushGrad = 4,
    FlagBits = 5,
    DataShare = 6,
    IterationReport = 7,
    Shutdown = 8,
    /// Mean gradient returned by a gradient-aggregation round.
    GlobalGrad = 9,
}

impl Kind {
    pub const ALL: [Kind; 9] = [
        Kind::PullRequest,
        Kind::GlobalParams,
        Kind::PushParams,
        Kind::PushGrad,
        Kind::FlagBits,
        Kind::DataShare,
        Kind::IterationReport,
        Kind::Shutdown,
        Kind::GlobalGrad,
    ];

    pub fn index(self) -> usize {
        self as usize - 1
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Kind::ALL
            .get((tag as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Protocol(format!("unknown frame kind {tag}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: Kind,
    pub sender: NodeId,
    pub step: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(kind: Kind, sender: NodeId, step: u64, payload: Vec<u8>) -> Self {
        Envelope {
            kind,
            sender,
            step,
            payload,
        }
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    /// Rejects payloads whose length does not fit the kind.
    pub fn check_payload(&self, params: usize, flag_bytes: usize) -> Result<()> {
        let len = self.payload.len();
        let ok = match self.kind {
            Kind::PullRequest | Kind::Shutdown => len == 0,
            Kind::GlobalParams | Kind::PushParams | Kind::PushGrad | Kind::GlobalGrad => len == 8 * params,
            Kind::FlagBits => len == flag_bytes,
            Kind::IterationReport => len == 8,
            Kind::DataShare => len >= 8,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Protocol(format!("{:?} frame with {len}-byte payload", self.kind)))
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let len = u32::try_from(self.payload.len())
            .map_err(|_| Error::Protocol(format!("payload of {} bytes too large", self.payload.len())))?;
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&len.to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.sender.to_wire()?.to_be_bytes());
        out.extend_from_slice(&self.step.to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(frame: &[u8]) -> Result<Self> {
        if frame.len() < HEADER_LEN {
            return Err(Error::Protocol(format!("frame of {} bytes is shorter than the header", frame.len())));
        }
        let (header, payload) = frame.split_at(HEADER_LEN);
        let len = u32::from_be_bytes(header[0..4].try_into().unwrap()) as usize;
        if len != payload.len() {
            return Err(Error::Protocol(format!("header announces {len} payload bytes, frame has {}", payload.len())));
        }
        Ok(Envelope {
            kind: Kind::from_tag(header[4])?,
            sender: NodeId::from_wire(u16::from_be_bytes(header[5..7].try_into().unwrap())),
            step: u64::from_be_bytes(header[7..15].try_into().unwrap()),
            payload: payload.to_vec(),
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode()?)?;
        w.flush()?;
        Ok(())
    }

    /// Reads one frame. `Ok(None)` on a clean end of stream.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Self>> {
        let mut header = [0u8; HEADER_LEN];
        match r.read_exact(&mut header) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_be_bytes(header[0..4].try_into().unwrap()) as usize;
        let mut frame = header.to_vec();
        frame.resize(HEADER_LEN + len, 0);
        r.read_exact(&mut frame[HEADER_LEN..])?;
        Self::decode(&frame).map(Some)
    }
}

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Protocol(format!("{} bytes is not a whole number of f64s", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_u64(v: u64) -> Vec<u8> {
    v.to_le_bytes().to_vec()
}

pub fn decode_u64(bytes: &[u8]) -> Result<u64> {
    let arr: [u8; 8] = bytes
        .try_into()
        .map_err(|_| Error::Protocol(format!("expected 8-byte integer, got {} bytes", bytes.len())))?;
    Ok(u64::from_le_bytes(arr))
}

/// `u32 LE rows | u32 LE dim | rows x (u32 LE label, dim x f64 LE)`.
pub fn encode_share(batch: &Batch) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + batch.len() * (4 + 8 * batch.dim));
    out.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    out.extend_from_slice(&(batch.dim as u32).to_le_bytes());
    for i in 0..batch.len() {
        out.extend_from_slice(&(batch.labels[i] as u32).to_le_bytes());
        out.extend(batch.row(i).iter().flat_map(|v| v.to_le_bytes()));
    }
    out
}

pub fn decode_share(bytes: &[u8], source_chunk: usize) -> Result<Batch> {
    let bad = || Error::Protocol("malformed data share".into());
    let word = |at: usize| -> Result<usize> {
        let b = bytes.get(at..at + 4).ok_or_else(bad)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    };
    let (rows, dim) = (word(0)?, word(4)?);
    if bytes.len() != 8 + rows * (4 + 8 * dim) {
        return Err(bad());
    }
    let mut features = Vec::with_capacity(rows * dim);
    let mut labels = Vec::with_capacity(rows);
    let mut at = 8;
    for _ in 0..rows {
        labels.push(word(at)?);
        at += 4;
        features.extend(decode_f64s(&bytes[at..at + 8 * dim])?);
        at += 8 * dim;
    }
    Batch::new(features, dim, labels, source_chunk)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let env = Envelope::new(Kind::FlagBits, NodeId::Worker(3), 0x0102, vec![0b100]);
        let bytes = env.encode().unwrap();
        assert_eq!(
            bytes,
            vec![0, 0, 0, 1, 5, 0, 3, 0, 0, 0, 0, 0, 0, 1, 2, 0b100]
        );
        assert_eq!(Envelope::decode(&bytes).unwrap(), env);
        let ps = Envelope::new(Kind::Shutdown, NodeId::Ps, INIT_STEP, vec![]);
        assert_eq!(Envelope::decode(&ps.encode().unwrap()).unwrap(), ps);
    }

    #[test]
    fn param_payload_is_little_endian() {
        let p = encode_f64s(&[1.0, -2.5]);
        assert_eq!(p.len(), 16);
        assert_eq!(&p[..8], &1.0f64.to_le_bytes());
        assert_eq!(decode_f64s(&p).unwrap(), vec![1.0, -2.5]);
        assert!(decode_f64s(&p[..7]).is_err());
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(Envelope::decode(&[0; 10]).is_err());
        let mut bytes = Envelope::new(Kind::PullRequest, NodeId::Worker(0), 1, vec![]).encode().unwrap();
        bytes[4] = 42;
        assert!(Envelope::decode(&bytes).is_err());
        bytes[4] = 1;
        bytes[3] = 3;
        assert!(Envelope::decode(&bytes).is_err());
        let env = Envelope::new(Kind::PushParams, NodeId::Worker(0), 1, vec![0; 16]);
        assert!(env.check_payload(2, 1).is_ok());
        assert!(env.check_payload(3, 1).is_err());
    }

    #[test]
    fn share_round_trip() {
        let b = Batch::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, vec![4, 1], 2).unwrap();
        let back = decode_share(&encode_share(&b), 2).unwrap();
        assert_eq!(back, b);
        assert!(decode_share(&[1, 0, 0, 0, 1, 0, 0, 0], 0).is_err());
    }

    #[test]
    fn stream_round_trip() {
        let frames = vec![
            Envelope::new(Kind::PushGrad, NodeId::Worker(7), 9, encode_f64s(&[0.25; 4])),
            Envelope::new(Kind::IterationReport, NodeId::Ps, 9, encode_u64(3)),
        ];
        let mut buf = Vec::new();
        for f in &frames {
            f.write_to(&mut buf).unwrap();
        }
        let mut cursor = io::Cursor::new(buf);
        for f in &frames {
            assert_eq!(&Envelope::read_from(&mut cursor).unwrap().unwrap(), f);
        }
        assert!(Envelope::read_from(&mut cursor).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn params_bit_exact(values in prop::collection::vec(any::<f64>(), 0..64), step: u64, sender in 0usize..1000) {
            let env = Envelope::new(Kind::GlobalParams, NodeId::Worker(sender), step, encode_f64s(&values));
            let back = Envelope::decode(&env.encode().unwrap()).unwrap();
            let decoded = decode_f64s(&back.payload).unwrap();
            prop_assert_eq!(back.step, step);
            prop_assert!(decoded.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
