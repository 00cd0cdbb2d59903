//! Socket backend wire format.
//!
//! Frame layout: 4-byte little-endian length prefix (covering everything after
//! the prefix), 1-byte tag, 4-byte little-endian source rank, then the body.
//! Protocol bodies start with a 4-byte little-endian round counter.

use super::{Body, Rank, Tag, TransportError, WireAcc};

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_f64s(bytes: &[u8]) -> Result<Vec<f64>, TransportError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(TransportError::BadFrame(format!(
            "payload length {} not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn get_u32(bytes: &[u8]) -> Result<(u32, &[u8]), TransportError> {
    if bytes.len() < 4 {
        return Err(TransportError::BadFrame("truncated u32".into()));
    }
    let (head, rest) = bytes.split_at(4);
    Ok((u32::from_le_bytes(head.try_into().unwrap()), rest))
}

pub fn encode_body(body: &Body) -> Vec<u8> {
    let mut out = Vec::new();
    match body {
        Body::Data(values) => put_f64s(&mut out, values),
        Body::SnapshotData { round, values } => {
            out.extend_from_slice(&round.to_le_bytes());
            put_f64s(&mut out, values);
        }
        Body::LocalConv { round } => out.extend_from_slice(&round.to_le_bytes()),
        Body::NormUp { round, acc } => {
            out.extend_from_slice(&round.to_le_bytes());
            out.push(acc.kind);
            out.extend_from_slice(&acc.value.to_le_bytes());
            out.extend_from_slice(&acc.count.to_le_bytes());
        }
        Body::NormDown {
            round,
            value,
            detected,
        } => {
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(&value.to_le_bytes());
            out.push(u8::from(*detected));
        }
        Body::Terminate { round } => out.extend_from_slice(&round.to_le_bytes()),
        Body::Control(bytes) => out.extend_from_slice(bytes),
    }
    out
}

pub fn decode_body(tag: Tag, bytes: &[u8]) -> Result<Body, TransportError> {
    Ok(match tag {
        Tag::Data => Body::Data(get_f64s(bytes)?),
        Tag::SnapshotData => {
            let (round, rest) = get_u32(bytes)?;
            Body::SnapshotData {
                round,
                values: get_f64s(rest)?,
            }
        }
        Tag::LocalConv => {
            let (round, _) = get_u32(bytes)?;
            Body::LocalConv { round }
        }
        Tag::NormUp => {
            let (round, rest) = get_u32(bytes)?;
            if rest.len() != 13 {
                return Err(TransportError::BadFrame("bad NormUp body".into()));
            }
            Body::NormUp {
                round,
                acc: WireAcc {
                    kind: rest[0],
                    value: f64::from_le_bytes(rest[1..9].try_into().unwrap()),
                    count: u32::from_le_bytes(rest[9..13].try_into().unwrap()),
                },
            }
        }
        Tag::NormDown => {
            let (round, rest) = get_u32(bytes)?;
            if rest.len() != 9 {
                return Err(TransportError::BadFrame("bad NormDown body".into()));
            }
            Body::NormDown {
                round,
                value: f64::from_le_bytes(rest[0..8].try_into().unwrap()),
                detected: rest[8] != 0,
            }
        }
        Tag::Terminate => {
            let (round, _) = get_u32(bytes)?;
            Body::Terminate { round }
        }
        Tag::Control => Body::Control(bytes.to_vec()),
    })
}

/// Encode a full frame: length prefix, tag, src rank, body.
pub fn encode_frame(src: Rank, body: &Body) -> Vec<u8> {
    let payload = encode_body(body);
    let len = (1 + 4 + payload.len()) as u32;
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&len.to_le_bytes());
    out.push(body.tag().byte());
    out.extend_from_slice(&(src as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decode the frame contents that follow the length prefix.
pub fn decode_frame(frame: &[u8]) -> Result<(Rank, Body), TransportError> {
    if frame.len() < 5 {
        return Err(TransportError::BadFrame("frame shorter than header".into()));
    }
    let tag = Tag::from_byte(frame[0])
        .ok_or_else(|| TransportError::BadFrame(format!("unknown tag {}", frame[0])))?;
    let src = u32::from_le_bytes(frame[1..5].try_into().unwrap()) as Rank;
    Ok((src, decode_body(tag, &frame[5..])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout_is_pinned() {
        // 2 payload doubles from rank 3: len = 1 + 4 + 16 = 21.
        let body = Body::Data(vec![1.0, -2.0]);
        let frame = encode_frame(3, &body);
        assert_eq!(&frame[0..4], &21u32.to_le_bytes());
        assert_eq!(frame[4], 0); // Data tag
        assert_eq!(&frame[5..9], &3u32.to_le_bytes());
        assert_eq!(&frame[9..17], &1.0f64.to_le_bytes());
        assert_eq!(&frame[17..25], &(-2.0f64).to_le_bytes());
    }

    #[test]
    fn protocol_bodies_carry_round_counter_first() {
        let body = Body::Terminate { round: 0x0a0b0c0d };
        let frame = encode_frame(0, &body);
        assert_eq!(&frame[9..13], &[0x0d, 0x0c, 0x0b, 0x0a]);
    }

    #[test]
    fn roundtrip_all_tags() {
        let bodies = vec![
            Body::Data(vec![0.5, 2.25, -1.0]),
            Body::SnapshotData {
                round: 7,
                values: vec![3.0],
            },
            Body::LocalConv { round: 1 },
            Body::NormUp {
                round: 2,
                acc: WireAcc {
                    kind: 1,
                    value: 4.5,
                    count: 9,
                },
            },
            Body::NormDown {
                round: 3,
                value: 1e-7,
                detected: true,
            },
            Body::Terminate { round: 4 },
            Body::Control(vec![1, 2, 3]),
        ];
        for body in bodies {
            let frame = encode_frame(5, &body);
            let (src, decoded) = decode_frame(&frame[4..]).unwrap();
            assert_eq!(src, 5);
            assert_eq!(decoded, body);
        }
    }

    #[test]
    fn rejects_unknown_tag() {
        assert!(decode_frame(&[99, 0, 0, 0, 0, 0]).is_err());
    }
}
