//! RIFF/WAVE reading (PCM16 and float32) and PCM16 writing.

use std::fs;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::WavParse {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Format {
    tag: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

/// Decodes a WAV byte buffer into a mono waveform (channels averaged).
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "RIFF id")? != b"RIFF" {
        return Err(Error::WavParse {
            offset: 0,
            msg: "missing RIFF id".into(),
        });
    }
    r.u32("RIFF size")?;
    if r.take(4, "WAVE id")? != b"WAVE" {
        return Err(Error::WavParse {
            offset: 8,
            msg: "missing WAVE id".into(),
        });
    }
    let mut format: Option<Format> = None;
    loop {
        let start = r.pos;
        let id = r.take(4, "chunk id")?;
        let size = r.u32("chunk size")? as usize;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::WavParse {
                        offset: start as u64 + 4,
                        msg: format!("fmt chunk too small ({size} bytes)"),
                    });
                }
                let body_start = r.pos;
                let mut tag = r.u16("format tag")?;
                let channels = r.u16("channel count")?;
                let rate = r.u32("sample rate")?;
                r.u32("byte rate")?;
                r.u16("block align")?;
                let bits = r.u16("bits per sample")?;
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(Error::WavParse {
                            offset: start as u64 + 4,
                            msg: "extensible fmt chunk too small".into(),
                        });
                    }
                    r.take(8, "extension header")?;
                    tag = r.u16("sub-format")?;
                }
                r.pos = body_start;
                r.take(size + size % 2, "fmt chunk body")?;
                format = Some(Format {
                    tag,
                    channels,
                    rate,
                    bits,
                });
            }
            b"data" => {
                let fmt = format.ok_or_else(|| Error::WavParse {
                    offset: start as u64,
                    msg: "data chunk before fmt chunk".into(),
                })?;
                let data = r.take(size, "data chunk")?;
                return decode_samples(&fmt, data, start as u64 + 8);
            }
            _ => {
                r.take(size + size % 2, "chunk body")?;
            }
        }
    }
}

fn decode_samples(fmt: &Format, data: &[u8], offset: u64) -> Result<Waveform> {
    let sample = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        (tag, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "format tag {tag} with {bits} bits per sample (PCM 16-bit and float 32-bit are supported)"
            )))
        }
    };
    if fmt.channels == 0 {
        return Err(Error::WavParse {
            offset,
            msg: "zero channels".into(),
        });
    }
    if fmt.rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            found: fmt.rate,
            expected: SAMPLE_RATE,
        });
    }
    let channels = fmt.channels as usize;
    let frame = sample * channels;
    if data.len() % frame != 0 {
        return Err(Error::WavParse {
            offset: offset + (data.len() - data.len() % frame) as u64,
            msg: format!(
                "data length {} is not a multiple of the {frame}-byte frame",
                data.len()
            ),
        });
    }
    let decode = |b: &[u8]| -> f64 {
        if sample == 2 {
            i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0
        } else {
            f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
        }
    };
    let samples = data
        .chunks_exact(frame)
        .map(|f| f.chunks_exact(sample).map(decode).sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    decode_wav(&fs::read(path)?)
}

/// Encodes a mono 16 kHz PCM16 WAV, clamping samples to `[-1, 1 - 2^-15]`.
pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    if let Some(i) = w.samples().iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "write_wav: non-finite sample at index {i}"
        )));
    }
    let data_len = w.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &v in w.samples() {
        let q = (v.clamp(-1.0, 1.0 - 1.0 / 32768.0) * 32768.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    Ok(out)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    fs::write(path, encode_wav(w)?)?;
    Ok(())
}
