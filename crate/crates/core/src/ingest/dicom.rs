//! Minimal DICOM reader: explicit VR little endian, native pixel data only.
//!
//! Only the handful of tags needed for windowing are decoded. Anything
//! outside that profile fails loudly instead of being mis-decoded.

use super::{IngestError, Photometric, RawImage};
use crate::geometry::ImageDims;

pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";

const PREAMBLE: usize = 128;
const MAGIC: &[u8; 4] = b"DICM";
const UNDEFINED: u32 = 0xFFFF_FFFF;

type Tag = (u16, u16);

const TRANSFER_SYNTAX: Tag = (0x0002, 0x0010);
const SAMPLES_PER_PIXEL: Tag = (0x0028, 0x0002);
const PHOTOMETRIC: Tag = (0x0028, 0x0004);
const ROWS: Tag = (0x0028, 0x0010);
const COLUMNS: Tag = (0x0028, 0x0011);
const BITS_ALLOCATED: Tag = (0x0028, 0x0100);
const BITS_STORED: Tag = (0x0028, 0x0101);
const PIXEL_REPRESENTATION: Tag = (0x0028, 0x0103);
const WINDOW_CENTER: Tag = (0x0028, 0x1050);
const WINDOW_WIDTH: Tag = (0x0028, 0x1051);
const PIXEL_DATA: Tag = (0x7FE0, 0x0010);

const ITEM: Tag = (0xFFFE, 0xE000);
const ITEM_END: Tag = (0xFFFE, 0xE00D);
const SEQUENCE_END: Tag = (0xFFFE, 0xE0DD);

fn corrupt(msg: impl Into<String>) -> IngestError {
    IngestError::Corrupt(msg.into())
}

fn has_long_length(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR" | b"UT" | b"UV"
    )
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IngestError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("unexpected end of file at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, IngestError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, IngestError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag, IngestError> {
        Ok((self.u16()?, self.u16()?))
    }

    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }
}

struct Element<'a> {
    tag: Tag,
    value: &'a [u8],
}

/// Reads one explicit-VR element, skipping over sequences.
fn next_element<'a>(cur: &mut Cursor<'a>) -> Result<Element<'a>, IngestError> {
    let tag = cur.tag()?;
    let vr: [u8; 2] = cur.take(2)?.try_into().expect("two bytes");
    let len = if has_long_length(&vr) {
        cur.take(2)?;
        cur.u32()?
    } else {
        u32::from(cur.u16()?)
    };
    if len == UNDEFINED {
        if &vr == b"SQ" {
            skip_undefined_sequence(cur)?;
            return Ok(Element { tag, value: &[] });
        }
        if tag == PIXEL_DATA {
            return Err(IngestError::Unsupported("encapsulated pixel data".into()));
        }
        return Err(corrupt(format!("undefined length on non-sequence element {tag:04X?}")));
    }
    let value = cur.take(len as usize).map_err(|_| {
        if tag == PIXEL_DATA {
            corrupt(format!("pixel data truncated: declared {len} bytes, {} available", cur.buf.len() - cur.pos))
        } else {
            corrupt(format!("element {tag:04X?} runs past end of file"))
        }
    })?;
    Ok(Element { tag, value })
}

fn skip_undefined_sequence(cur: &mut Cursor<'_>) -> Result<(), IngestError> {
    loop {
        let tag = cur.tag()?;
        let len = cur.u32()?;
        match tag {
            SEQUENCE_END => return Ok(()),
            ITEM if len == UNDEFINED => loop {
                let save = cur.pos;
                if cur.tag()? == ITEM_END {
                    cur.u32()?;
                    break;
                }
                cur.pos = save;
                next_element(cur)?;
            },
            ITEM => {
                cur.take(len as usize)?;
            }
            other => return Err(corrupt(format!("unexpected tag {other:04X?} inside sequence"))),
        }
    }
}

fn text(value: &[u8]) -> String {
    String::from_utf8_lossy(value).trim_matches(|c: char| c == '\0' || c.is_whitespace()).to_string()
}

fn first_decimal(value: &[u8], tag: Tag) -> Result<Option<f64>, IngestError> {
    let s = text(value);
    let first = s.split('\\').next().unwrap_or("").trim();
    if first.is_empty() {
        return Ok(None);
    }
    first
        .parse::<f64>()
        .map(Some)
        .map_err(|_| corrupt(format!("element {tag:04X?} is not a decimal string: {s:?}")))
}

fn us(value: &[u8], tag: Tag) -> Result<u16, IngestError> {
    match value {
        [a, b, ..] => Ok(u16::from_le_bytes([*a, *b])),
        _ => Err(corrupt(format!("element {tag:04X?} too short for US"))),
    }
}

/// Decode the windowing-relevant tags and the pixel array of a DICOM file.
pub fn read_dicom_tags(bytes: &[u8]) -> Result<RawImage, IngestError> {
    if bytes.len() < PREAMBLE + 4 || &bytes[PREAMBLE..PREAMBLE + 4] != MAGIC {
        return Err(IngestError::NotDicom);
    }
    let mut cur = Cursor { buf: bytes, pos: PREAMBLE + 4 };

    let mut syntax = None;
    loop {
        let save = cur.pos;
        if cur.at_end() || cur.u16()? != 0x0002 {
            cur.pos = save;
            break;
        }
        cur.pos = save;
        let e = next_element(&mut cur)?;
        if e.tag == TRANSFER_SYNTAX {
            syntax = Some(text(e.value));
        }
    }
    let syntax = syntax.ok_or_else(|| corrupt("missing transfer syntax (0002,0010)"))?;
    if syntax != EXPLICIT_VR_LITTLE_ENDIAN {
        return Err(IngestError::UnsupportedTransferSyntax(syntax));
    }

    let (mut rows, mut cols, mut bits_alloc, mut bits_stored) = (None, None, None, None);
    let (mut photometric, mut center, mut width, mut pixels) = (None, None, None, None);
    while !cur.at_end() {
        let e = next_element(&mut cur)?;
        match e.tag {
            ROWS => rows = Some(us(e.value, ROWS)?),
            COLUMNS => cols = Some(us(e.value, COLUMNS)?),
            BITS_ALLOCATED => bits_alloc = Some(us(e.value, BITS_ALLOCATED)?),
            BITS_STORED => bits_stored = Some(us(e.value, BITS_STORED)?),
            SAMPLES_PER_PIXEL if us(e.value, SAMPLES_PER_PIXEL)? != 1 => {
                return Err(IngestError::Unsupported("more than one sample per pixel".into()))
            }
            PIXEL_REPRESENTATION if us(e.value, PIXEL_REPRESENTATION)? != 0 => {
                return Err(IngestError::Unsupported("signed pixel representation".into()))
            }
            PHOTOMETRIC => photometric = Some(text(e.value)),
            WINDOW_CENTER => center = first_decimal(e.value, WINDOW_CENTER)?,
            WINDOW_WIDTH => width = first_decimal(e.value, WINDOW_WIDTH)?,
            PIXEL_DATA => {
                pixels = Some(e.value);
                break;
            }
            _ => {}
        }
    }

    let rows = rows.ok_or_else(|| corrupt("missing Rows (0028,0010)"))?;
    let cols = cols.ok_or_else(|| corrupt("missing Columns (0028,0011)"))?;
    let bits_alloc = bits_alloc.ok_or_else(|| corrupt("missing BitsAllocated (0028,0100)"))?;
    let photometric: Photometric = photometric
        .ok_or_else(|| corrupt("missing PhotometricInterpretation (0028,0004)"))?
        .parse()?;
    let data = pixels.ok_or_else(|| corrupt("missing PixelData (7FE0,0010)"))?;

    let dims = ImageDims::new(u32::from(cols), u32::from(rows)).map_err(|e| corrupt(e.to_string()))?;
    let count = usize::from(rows) * usize::from(cols);
    let values: Vec<u16> = match bits_alloc {
        8 => {
            if data.len() < count {
                return Err(corrupt(format!("pixel data truncated: need {count} bytes, have {}", data.len())));
            }
            data[..count].iter().map(|&b| u16::from(b)).collect()
        }
        16 => {
            if data.len() < count * 2 {
                return Err(corrupt(format!("pixel data truncated: need {} bytes, have {}", count * 2, data.len())));
            }
            data[..count * 2].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
        }
        other => return Err(IngestError::Unsupported(format!("BitsAllocated = {other}"))),
    };
    let bits = bits_stored.unwrap_or(bits_alloc);
    let bits = u8::try_from(bits).map_err(|_| corrupt(format!("BitsStored = {bits}")))?;
    RawImage::new(values, dims, bits, photometric, center, width)
}

fn push_element(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8]) {
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    if has_long_length(vr) {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}

fn padded(s: &str, pad: u8) -> Vec<u8> {
    let mut v = s.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(pad);
    }
    v
}

/// Encode an image as a minimal explicit-VR little-endian DICOM file with
/// 16-bit pixels. Used to synthesize fixtures.
pub fn encode_dicom(image: &RawImage) -> Vec<u8> {
    let mut meta = Vec::new();
    push_element(&mut meta, TRANSFER_SYNTAX, b"UI", &padded(EXPLICIT_VR_LITTLE_ENDIAN, 0));

    let mut out = vec![0u8; PREAMBLE];
    out.extend_from_slice(MAGIC);
    push_element(&mut out, (0x0002, 0x0000), b"UL", &(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);

    let dims = image.dims();
    push_element(&mut out, SAMPLES_PER_PIXEL, b"US", &1u16.to_le_bytes());
    push_element(&mut out, PHOTOMETRIC, b"CS", &padded(image.photometric().as_str(), b' '));
    push_element(&mut out, ROWS, b"US", &(dims.height as u16).to_le_bytes());
    push_element(&mut out, COLUMNS, b"US", &(dims.width as u16).to_le_bytes());
    push_element(&mut out, BITS_ALLOCATED, b"US", &16u16.to_le_bytes());
    push_element(&mut out, BITS_STORED, b"US", &u16::from(image.bits_stored()).to_le_bytes());
    push_element(&mut out, PIXEL_REPRESENTATION, b"US", &0u16.to_le_bytes());
    if let Some(c) = image.window_center() {
        push_element(&mut out, WINDOW_CENTER, b"DS", &padded(&c.to_string(), b' '));
    }
    if let Some(w) = image.window_width() {
        push_element(&mut out, WINDOW_WIDTH, b"DS", &padded(&w.to_string(), b' '));
    }
    let pixel_bytes: Vec<u8> = image.pixels().iter().flat_map(|p| p.to_le_bytes()).collect();
    push_element(&mut out, PIXEL_DATA, b"OW", &pixel_bytes);
    out
}
