use std::collections::BTreeSet;

use super::*;
use crate::tensorstore::{element_count, Tag};

pub(super) fn check_header(header: &[u8]) -> Result<(MessageType, u32), WireError> {
    if header.len() < HEADER_LEN {
        return Err(WireError::Truncated);
    }
    let magic: [u8; 4] = header[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let kind = MessageType::try_from(header[4])?;
    let body_len = u32::from_be_bytes(header[5..9].try_into().unwrap());
    if body_len > MAX_BODY_LEN {
        return Err(WireError::Oversize(body_len));
    }
    Ok((kind, body_len))
}

pub fn encode(message: &Message) -> Vec<u8> {
    let mut body = Writer::default();
    match message {
        Message::GetTasksRequest(m) => body.header(&m.header),
        Message::GetTasksResponse(m) => {
            body.u32(m.round);
            body.u32(m.task_names.len() as u32);
            for name in &m.task_names {
                body.str(name);
            }
            body.u32(m.sleep_seconds);
            body.bool(m.quit);
        }
        Message::GetTensorRequest(m) => {
            body.header(&m.header);
            body.key(&m.key);
        }
        Message::GetTensorResponse(m) => body.tensor(&m.tensor),
        Message::SendResultsRequest(m) => {
            body.header(&m.header);
            body.u32(m.round);
            body.str(&m.task_name);
            body.u64(m.data_size);
            body.u32(m.tensors.len() as u32);
            for t in &m.tensors {
                body.tensor(t);
            }
        }
        Message::SendResultsAck(m) => body.bool(m.accepted),
        Message::ErrorResponse(m) => {
            body.u16(m.code);
            body.str(&m.detail);
        }
    }
    let body = body.0;
    let mut frame = Vec::with_capacity(HEADER_LEN + body.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(message.message_type() as u8);
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

/// Decodes one complete frame. Trailing bytes after the declared body are
/// rejected.
pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    let (kind, body_len) = check_header(frame)?;
    let body = &frame[HEADER_LEN..];
    if body.len() < body_len as usize {
        return Err(WireError::Truncated);
    }
    if body.len() > body_len as usize {
        return Err(WireError::Malformed("trailing bytes after frame".into()));
    }
    decode_body(kind, body)
}

pub fn decode_body(kind: MessageType, body: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf: body, pos: 0 };
    let message = match kind {
        MessageType::GetTasksRequest => Message::GetTasksRequest(GetTasksRequest { header: r.header()? }),
        MessageType::GetTasksResponse => {
            let round = r.u32()?;
            let count = r.count(4)?;
            let mut task_names = Vec::with_capacity(count);
            for _ in 0..count {
                task_names.push(r.str()?);
            }
            Message::GetTasksResponse(GetTasksResponse {
                round,
                task_names,
                sleep_seconds: r.u32()?,
                quit: r.bool()?,
            })
        }
        MessageType::GetTensorRequest => Message::GetTensorRequest(GetTensorRequest {
            header: r.header()?,
            key: r.key()?,
        }),
        MessageType::GetTensorResponse => Message::GetTensorResponse(GetTensorResponse { tensor: r.tensor()? }),
        MessageType::SendResultsRequest => {
            let header = r.header()?;
            let round = r.u32()?;
            let task_name = r.str()?;
            let data_size = r.u64()?;
            let count = r.count(4)?;
            let mut tensors = Vec::with_capacity(count);
            for _ in 0..count {
                tensors.push(r.tensor()?);
            }
            Message::SendResultsRequest(SendResultsRequest {
                header,
                round,
                task_name,
                data_size,
                tensors,
            })
        }
        MessageType::SendResultsAck => Message::SendResultsAck(SendResultsAck { accepted: r.bool()? }),
        MessageType::ErrorResponse => Message::ErrorResponse(ErrorResponse {
            code: r.u16()?,
            detail: r.str()?,
        }),
    };
    if r.pos != body.len() {
        return Err(WireError::Malformed(format!(
            "{} unread bytes in {kind:?} body",
            body.len() - r.pos
        )));
    }
    Ok(message)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }

    fn bool(&mut self, v: bool) {
        self.0.push(u8::from(v));
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn header(&mut self, h: &RequestHeader) {
        self.str(&h.sender_label);
        self.0.extend_from_slice(&h.plan_hash.0);
        self.u16(h.protocol_version);
    }

    // name, round, origin, tag bitmask (model=1, trained=2, metric=4)
    fn key(&mut self, k: &TensorKey) {
        self.str(&k.name);
        self.u32(k.round);
        self.str(&k.origin);
        self.0.push(k.tags.iter().fold(0, |acc, t| acc | t.bit()));
    }

    // key, ndim, dims, then product(dims) little-endian f32 values
    fn tensor(&mut self, t: &NamedTensor) {
        self.key(&t.key);
        self.u32(t.shape.len() as u32);
        for &d in &t.shape {
            self.u32(d);
        }
        self.0.reserve(t.data.len() * 4);
        for v in &t.data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        if end > self.buf.len() {
            return Err(WireError::Truncated);
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(WireError::Malformed(format!("bool byte {other}"))),
        }
    }

    /// A u32 element count, sanity-checked against the bytes left so a
    /// hostile count cannot trigger a huge allocation.
    fn count(&mut self, min_elem_size: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem_size) > self.remaining() {
            return Err(WireError::Truncated);
        }
        Ok(n)
    }

    fn str(&mut self) -> Result<String, WireError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Malformed("invalid UTF-8".into()))
    }

    fn header(&mut self) -> Result<RequestHeader, WireError> {
        let sender_label = self.str()?;
        let plan_hash = PlanHash(self.take(32)?.try_into().unwrap());
        let protocol_version = self.u16()?;
        Ok(RequestHeader {
            sender_label,
            plan_hash,
            protocol_version,
        })
    }

    fn key(&mut self) -> Result<TensorKey, WireError> {
        let name = self.str()?;
        let round = self.u32()?;
        let origin = self.str()?;
        let bits = self.u8()?;
        if bits & !0b111 != 0 {
            return Err(WireError::Malformed(format!("unknown tag bits {bits:#04x}")));
        }
        let tags: BTreeSet<Tag> = [Tag::Model, Tag::Trained, Tag::Metric]
            .into_iter()
            .filter(|t| bits & t.bit() != 0)
            .collect();
        Ok(TensorKey {
            name,
            round,
            origin,
            tags,
        })
    }

    fn tensor(&mut self) -> Result<NamedTensor, WireError> {
        let key = self.key()?;
        let ndim = self.count(4)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| WireError::Malformed("tensor shape overflows".into()))?;
        debug_assert_eq!(len, element_count(&shape));
        let bytes = self.take(len.checked_mul(4).ok_or(WireError::Truncated)?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(NamedTensor { key, shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorstore::Tag;

    fn header() -> RequestHeader {
        RequestHeader::new("col.one", PlanHash([7u8; 32]))
    }

    fn tensor(name: &str, shape: Vec<u32>) -> NamedTensor {
        let len = element_count(&shape);
        NamedTensor {
            key: TensorKey::new(name, 3, "col.one", [Tag::Model, Tag::Trained]),
            shape,
            data: (0..len).map(|i| i as f32 * 0.25 - 1.0).collect(),
        }
    }

    fn every_variant() -> Vec<Message> {
        vec![
            Message::GetTasksRequest(GetTasksRequest { header: header() }),
            Message::GetTasksResponse(GetTasksResponse {
                round: 4,
                task_names: vec!["train".into(), "validate".into()],
                sleep_seconds: 0,
                quit: false,
            }),
            Message::GetTasksResponse(GetTasksResponse {
                round: 0,
                task_names: vec![],
                sleep_seconds: 10,
                quit: true,
            }),
            Message::GetTensorRequest(GetTensorRequest {
                header: header(),
                key: TensorKey::global("w0", 2),
            }),
            Message::GetTensorResponse(GetTensorResponse { tensor: tensor("w0", vec![3, 2]) }),
            Message::SendResultsRequest(SendResultsRequest {
                header: header(),
                round: 3,
                task_name: "train".into(),
                data_size: 800,
                tensors: vec![
                    tensor("w0", vec![2, 2]),
                    NamedTensor {
                        key: TensorKey::new("train/train_loss", 3, "col.one", [Tag::Metric]),
                        shape: vec![],
                        data: vec![0.5],
                    },
                ],
            }),
            Message::SendResultsAck(SendResultsAck { accepted: true }),
            Message::ErrorResponse(ErrorResponse::new(ErrorCode::PlanHashMismatch, "stale plan")),
        ]
    }

    #[test]
    fn every_variant_round_trips() {
        for message in every_variant() {
            let bytes = encode(&message);
            let back = decode(&bytes).unwrap();
            assert_eq!(back, message);
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn get_tasks_request_layout() {
        let bytes = encode(&Message::GetTasksRequest(GetTasksRequest { header: header() }));
        assert_eq!(&bytes[..4], b"OFL1");
        assert_eq!(bytes[4], 1);
        // label len (4) + "col.one" (7) + hash (32) + version (2)
        assert_eq!(u32::from_be_bytes(bytes[5..9].try_into().unwrap()), 45);
        assert_eq!(&bytes[9..13], &[0, 0, 0, 7]);
        assert_eq!(&bytes[bytes.len() - 2..], &[0, 1]);
    }

    #[test]
    fn tensor_payload_is_little_endian() {
        let mut t = tensor("b", vec![1]);
        t.data = vec![1.0];
        let bytes = encode(&Message::GetTensorResponse(GetTensorResponse { tensor: t }));
        assert_eq!(&bytes[bytes.len() - 4..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&Message::SendResultsAck(SendResultsAck { accepted: true }));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(WireError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn oversize_is_rejected_from_the_header_alone() {
        let mut bytes = b"OFL1".to_vec();
        bytes.push(2);
        bytes.extend_from_slice(&(100u32 * 1024 * 1024).to_be_bytes());
        assert!(matches!(decode(&bytes), Err(WireError::Oversize(_))));
        let mut reader = std::io::Cursor::new(bytes);
        assert!(matches!(read_frame(&mut reader), Err(WireError::Oversize(_))));
    }

    #[test]
    fn unknown_type_and_truncation() {
        let mut bytes = encode(&Message::SendResultsAck(SendResultsAck { accepted: false }));
        bytes[4] = 99;
        assert!(matches!(decode(&bytes), Err(WireError::UnknownType(99))));

        let bytes = encode(&every_variant()[5]);
        for cut in [3, 9, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(WireError::Truncated)), "cut {cut}");
        }
        let mut reader = std::io::Cursor::new(bytes[..bytes.len() - 1].to_vec());
        assert!(matches!(read_frame(&mut reader), Err(WireError::Truncated)));
    }

    #[test]
    fn hostile_counts_do_not_allocate() {
        // GetTasksResponse claiming 2^32-1 task names in a 9-byte body
        let mut bytes = b"OFL1".to_vec();
        bytes.push(2);
        bytes.extend_from_slice(&9u32.to_be_bytes());
        bytes.extend_from_slice(&0u32.to_be_bytes());
        bytes.extend_from_slice(&u32::MAX.to_be_bytes());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(WireError::Truncated)));
    }

    #[test]
    fn trailing_bytes_are_malformed() {
        let mut bytes = encode(&Message::SendResultsAck(SendResultsAck { accepted: true }));
        bytes.push(0);
        let len = (bytes.len() - HEADER_LEN) as u32;
        bytes[5..9].copy_from_slice(&len.to_be_bytes());
        assert!(matches!(decode(&bytes), Err(WireError::Malformed(_))));
    }

    #[test]
    fn read_frame_reports_clean_eof() {
        let mut empty = std::io::Cursor::new(Vec::<u8>::new());
        assert!(read_frame(&mut empty).unwrap().is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_tensor() -> impl Strategy<Value = NamedTensor> {
            (
                "[a-z0-9/_]{1,12}",
                any::<u32>(),
                "[a-z.]{1,10}",
                1u8..8,
                prop::collection::vec(1u32..5, 0..3),
            )
                .prop_flat_map(|(name, round, origin, bits, shape)| {
                    let len = element_count(&shape);
                    prop::collection::vec(any::<f32>(), len).prop_map(move |data| {
                        let tags = [Tag::Model, Tag::Trained, Tag::Metric]
                            .into_iter()
                            .filter(|t| bits & t.bit() != 0);
                        NamedTensor {
                            key: TensorKey::new(name.clone(), round, origin.clone(), tags),
                            shape: shape.clone(),
                            data,
                        }
                    })
                })
        }

        proptest! {
            #[test]
            fn send_results_round_trip_is_byte_exact(
                label in "[a-z.]{1,10}",
                hash in any::<[u8; 32]>(),
                round: u32,
                task in "\\PC{0,12}",
                data_size: u64,
                tensors in prop::collection::vec(arb_tensor(), 0..4),
            ) {
                let m = Message::SendResultsRequest(SendResultsRequest {
                    header: RequestHeader::new(label, PlanHash(hash)),
                    round,
                    task_name: task,
                    data_size,
                    tensors,
                });
                let bytes = encode(&m);
                let back = decode(&bytes).unwrap();
                // NaN payloads compare unequal, so compare the re-encoding
                prop_assert_eq!(encode(&back), bytes);
            }
        }
    }
}
