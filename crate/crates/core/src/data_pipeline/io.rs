//! WAV, PNG and uncompressed AVI reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use stfm_tensor::Tensor;

use crate::data_model::{Image, Waveform};
use crate::error::{Error, Result};

/// 16-bit PCM mono.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    ensure_parent(path)?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        w.write_sample(quantize(s))?;
    }
    w.finalize()?;
    Ok(())
}

fn quantize(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16
}

/// Reads any integer or float WAV; multi-channel input is averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Media(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let full = (1_i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mono = raw
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

pub fn image_to_rgb8(img: &Image) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = img.pixel(y as usize, x as usize);
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn rgb8_to_image(buf: &RgbImage) -> Result<Image> {
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let data = Tensor::from_fn(&[h, w, 3], |i| {
        let (y, x, c) = (i / (w * 3), (i / 3) % w, i % 3);
        buf.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });
    Image::new(data)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    ensure_parent(path)?;
    image_to_rgb8(img).save(path)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let buf = image::open(path)?.to_rgb8();
    rgb8_to_image(&buf)
}

/// Triangle-filter resize to `hw x hw`.
pub fn resize(img: &Image, hw: usize) -> Result<Image> {
    if img.height() == hw && img.width() == hw {
        return Ok(img.clone());
    }
    let out = image::imageops::resize(&image_to_rgb8(img), hw as u32, hw as u32, image::imageops::FilterType::Triangle);
    rgb8_to_image(&out)
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

/// Writes `frames` and `audio` as an uncompressed RGB24 AVI with 16-bit PCM.
pub fn write_avi(path: &Path, frames: &[Image], fps: usize, audio: &Waveform) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::arg("cannot mux a clip without frames"));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    let row = (w * 3).div_ceil(4) * 4;
    let frame_bytes = row * h;
    let pcm: Vec<u8> = audio.samples.iter().flat_map(|&s| quantize(s).to_le_bytes()).collect();

    let mut movi = Vec::new();
    let mut index = Vec::new();
    let mut push_chunk = |movi: &mut Vec<u8>, id: &[u8; 4], data: &[u8]| {
        let offset = movi.len() as u32 + 4;
        movi.extend_from_slice(id);
        movi.extend_from_slice(&(data.len() as u32).to_le_bytes());
        movi.extend_from_slice(data);
        if data.len() % 2 == 1 {
            movi.push(0);
        }
        index.push((*id, offset, data.len() as u32));
    };
    for f in frames {
        if f.height() != h || f.width() != w {
            return Err(Error::shape("frames of a clip must share one size"));
        }
        let mut buf = vec![0u8; frame_bytes];
        // Bottom-up BGR rows.
        for y in 0..h {
            let dst = &mut buf[(h - 1 - y) * row..];
            for x in 0..w {
                let p = f.pixel(y, x).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
                dst[3 * x] = p[2];
                dst[3 * x + 1] = p[1];
                dst[3 * x + 2] = p[0];
            }
        }
        push_chunk(&mut movi, b"00db", &buf);
    }
    if !pcm.is_empty() {
        push_chunk(&mut movi, b"01wb", &pcm);
    }

    let le32 = |v: u32| v.to_le_bytes();
    let le16 = |v: u16| v.to_le_bytes();
    let list = |kind: &[u8; 4], body: &[u8]| {
        let mut v = Vec::with_capacity(body.len() + 12);
        v.extend_from_slice(b"LIST");
        v.extend_from_slice(&le32(body.len() as u32 + 4));
        v.extend_from_slice(kind);
        v.extend_from_slice(body);
        v
    };
    let chunk = |id: &[u8; 4], body: &[u8]| {
        let mut v = Vec::with_capacity(body.len() + 8);
        v.extend_from_slice(id);
        v.extend_from_slice(&le32(body.len() as u32));
        v.extend_from_slice(body);
        v
    };
    let n = frames.len() as u32;
    let streams = if pcm.is_empty() { 1 } else { 2 };

    let mut avih = Vec::new();
    for v in [
        1_000_000 / fps as u32,
        (frame_bytes as u32) * fps as u32,
        0,
        0x10,
        n,
        0,
        streams,
        frame_bytes as u32,
        w as u32,
        h as u32,
        0,
        0,
        0,
        0,
    ] {
        avih.extend_from_slice(&le32(v));
    }

    let mut strh_v = Vec::new();
    strh_v.extend_from_slice(b"vids");
    strh_v.extend_from_slice(b"DIB ");
    for v in [0u32, 0, 0, 1, fps as u32, 0, n, frame_bytes as u32, u32::MAX, 0] {
        strh_v.extend_from_slice(&le32(v));
    }
    strh_v.extend_from_slice(&[0u8; 8]);
    let mut strf_v = Vec::new();
    for v in [40u32, w as u32, h as u32] {
        strf_v.extend_from_slice(&le32(v));
    }
    strf_v.extend_from_slice(&le16(1));
    strf_v.extend_from_slice(&le16(24));
    for v in [0u32, frame_bytes as u32, 0, 0, 0, 0] {
        strf_v.extend_from_slice(&le32(v));
    }
    let mut strl = list(b"strl", &[chunk(b"strh", &strh_v), chunk(b"strf", &strf_v)].concat());

    if !pcm.is_empty() {
        let sr = audio.sample_rate;
        let mut strh_a = Vec::new();
        strh_a.extend_from_slice(b"auds");
        strh_a.extend_from_slice(&[0u8; 4]);
        for v in [0u32, 0, 0, 1, sr, 0, audio.samples.len() as u32, pcm.len() as u32, u32::MAX, 2] {
            strh_a.extend_from_slice(&le32(v));
        }
        strh_a.extend_from_slice(&[0u8; 8]);
        let mut strf_a = Vec::new();
        strf_a.extend_from_slice(&le16(1));
        strf_a.extend_from_slice(&le16(1));
        strf_a.extend_from_slice(&le32(sr));
        strf_a.extend_from_slice(&le32(sr * 2));
        strf_a.extend_from_slice(&le16(2));
        strf_a.extend_from_slice(&le16(16));
        strl.extend(list(b"strl", &[chunk(b"strh", &strh_a), chunk(b"strf", &strf_a)].concat()));
    }
    let hdrl = list(b"hdrl", &[chunk(b"avih", &avih), strl].concat());
    let movi = list(b"movi", &movi);
    let mut idx = Vec::new();
    for (id, off, len) in index {
        idx.extend_from_slice(&id);
        idx.extend_from_slice(&le32(0x10));
        idx.extend_from_slice(&le32(off));
        idx.extend_from_slice(&le32(len));
    }
    let idx1 = chunk(b"idx1", &idx);
    let body = [b"AVI ".as_slice(), &hdrl, &movi, &idx1].concat();

    ensure_parent(path)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(b"RIFF")
        .and_then(|_| file.write_all(&le32(body.len() as u32)))
        .and_then(|_| file.write_all(&body))
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}
