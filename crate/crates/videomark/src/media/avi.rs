//! Minimal MJPEG-in-AVI container: one baseline JPEG per frame inside a
//! RIFF/AVI wrapper with an idx1 index. Enough structure for interchange
//! with standard players; the reader accepts any AVI whose video stream is
//! MJPG-compressed `00dc`/`01dc` chunks.

use std::path::Path;

use crate::error::{Error, Result};

const FPS: u32 = 12;

fn u32le(v: u32) -> [u8; 4] {
    v.to_le_bytes()
}

struct Chunk {
    id: [u8; 4],
    data: Vec<u8>,
}

impl Chunk {
    fn encoded_len(&self) -> usize {
        8 + self.data.len() + self.data.len() % 2
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.id);
        out.extend_from_slice(&u32le(self.data.len() as u32));
        out.extend_from_slice(&self.data);
        if self.data.len() % 2 == 1 {
            out.push(0);
        }
    }
}

/// Write JPEG-encoded frames into an AVI container.
pub fn write_mjpeg_avi(path: &Path, frames: &[Vec<u8>], width: usize, height: usize) -> Result<()> {
    assert!(!frames.is_empty());
    let max_frame = frames.iter().map(Vec::len).max().unwrap_or(0);

    // avih: MainAVIHeader
    let mut avih = Vec::new();
    avih.extend_from_slice(&u32le(1_000_000 / FPS)); // microseconds per frame
    avih.extend_from_slice(&u32le((max_frame as u32) * FPS)); // max bytes/sec
    avih.extend_from_slice(&u32le(0)); // padding granularity
    avih.extend_from_slice(&u32le(0x10)); // AVIF_HASINDEX
    avih.extend_from_slice(&u32le(frames.len() as u32));
    avih.extend_from_slice(&u32le(0)); // initial frames
    avih.extend_from_slice(&u32le(1)); // streams
    avih.extend_from_slice(&u32le(max_frame as u32));
    avih.extend_from_slice(&u32le(width as u32));
    avih.extend_from_slice(&u32le(height as u32));
    avih.extend_from_slice(&[0u8; 16]); // reserved

    // strh: stream header
    let mut strh = Vec::new();
    strh.extend_from_slice(b"vids");
    strh.extend_from_slice(b"MJPG");
    strh.extend_from_slice(&u32le(0)); // flags
    strh.extend_from_slice(&u32le(0)); // priority + language
    strh.extend_from_slice(&u32le(0)); // initial frames
    strh.extend_from_slice(&u32le(1)); // scale
    strh.extend_from_slice(&u32le(FPS)); // rate
    strh.extend_from_slice(&u32le(0)); // start
    strh.extend_from_slice(&u32le(frames.len() as u32)); // length
    strh.extend_from_slice(&u32le(max_frame as u32)); // suggested buffer
    strh.extend_from_slice(&u32le(10_000)); // quality
    strh.extend_from_slice(&u32le(0)); // sample size
    strh.extend_from_slice(&[0u8; 8]); // rcFrame

    // strf: BITMAPINFOHEADER
    let mut strf = Vec::new();
    strf.extend_from_slice(&u32le(40));
    strf.extend_from_slice(&u32le(width as u32));
    strf.extend_from_slice(&u32le(height as u32));
    strf.extend_from_slice(&(1u16).to_le_bytes());
    strf.extend_from_slice(&(24u16).to_le_bytes());
    strf.extend_from_slice(b"MJPG");
    strf.extend_from_slice(&u32le((width * height * 3) as u32));
    strf.extend_from_slice(&[0u8; 16]);

    let strl = list(b"strl", {
        let mut v = Vec::new();
        Chunk { id: *b"strh", data: strh }.write(&mut v);
        Chunk { id: *b"strf", data: strf }.write(&mut v);
        v
    });
    let hdrl = list(b"hdrl", {
        let mut v = Vec::new();
        Chunk { id: *b"avih", data: avih }.write(&mut v);
        v.extend_from_slice(&strl);
        v
    });

    // movi body + idx1
    let mut movi_body = Vec::new();
    movi_body.extend_from_slice(b"movi");
    let mut idx = Vec::new();
    for f in frames {
        let offset = movi_body.len() - 4; // relative to 'movi' fourcc per convention
        idx.extend_from_slice(b"00dc");
        idx.extend_from_slice(&u32le(0x10)); // AVIIF_KEYFRAME
        idx.extend_from_slice(&u32le(offset as u32 + 4));
        idx.extend_from_slice(&u32le(f.len() as u32));
        Chunk {
            id: *b"00dc",
            data: f.clone(),
        }
        .write(&mut movi_body);
    }
    let mut movi = Vec::new();
    movi.extend_from_slice(b"LIST");
    movi.extend_from_slice(&u32le(movi_body.len() as u32));
    movi.extend_from_slice(&movi_body);

    let mut riff_body = Vec::new();
    riff_body.extend_from_slice(b"AVI ");
    riff_body.extend_from_slice(&hdrl);
    riff_body.extend_from_slice(&movi);
    Chunk { id: *b"idx1", data: idx }.write(&mut riff_body);

    let mut out = Vec::new();
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&u32le(riff_body.len() as u32));
    out.extend_from_slice(&riff_body);

    std::fs::write(path, &out).map_err(|e| Error::io(path, e))
}

fn list(kind: &[u8; 4], body: Vec<u8>) -> Vec<u8> {
    let mut v = Vec::new();
    v.extend_from_slice(b"LIST");
    v.extend_from_slice(&u32le((body.len() + 4) as u32));
    v.extend_from_slice(kind);
    v.extend_from_slice(&body);
    v
}

/// Extract the JPEG payloads of every video chunk, in file order.
pub fn read_mjpeg_avi(path: &Path) -> Result<Vec<Vec<u8>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"AVI " {
        return Err(Error::data(path, "not a RIFF/AVI file"));
    }
    let mut frames = Vec::new();
    scan_chunks(&bytes[12..], &mut frames);
    if frames.is_empty() {
        return Err(Error::data(path, "no MJPG video chunks found"));
    }
    Ok(frames)
}

fn scan_chunks(mut data: &[u8], frames: &mut Vec<Vec<u8>>) {
    while data.len() >= 8 {
        let id = &data[0..4];
        let size = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
        if data.len() < 8 + size {
            return;
        }
        let body = &data[8..8 + size];
        if id == b"LIST" {
            if size >= 4 {
                scan_chunks(&body[4..], frames);
            }
        } else if (&id[2..4] == b"dc" || &id[2..4] == b"db") && body.starts_with(&[0xFF, 0xD8]) {
            frames.push(body.to_vec());
        }
        let advance = 8 + size + size % 2;
        if advance > data.len() {
            return;
        }
        data = &data[advance..];
    }
}
