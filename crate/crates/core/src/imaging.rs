//! Deterministic PNG encoding for placeholders, composites and masks.

use std::io::Cursor;

use png::{BitDepth, ColorType, Compression, Encoder, Transformations};

use crate::backend::BackendError;

fn encoder_error(e: png::EncodingError) -> BackendError {
    BackendError::Malformed(format!("png encoding failed: {e}"))
}

/// Single-color indexed PNG with optional `tEXt` metadata.
pub fn solid_png(width: u32, height: u32, rgb: [u8; 3], text: &[(&str, String)]) -> Result<Vec<u8>, BackendError> {
    let mut out = Vec::new();
    {
        let mut enc = Encoder::new(&mut out, width, height);
        enc.set_color(ColorType::Indexed);
        enc.set_depth(BitDepth::One);
        enc.set_palette(rgb.to_vec());
        enc.set_compression(Compression::Fast);
        for (key, value) in text {
            enc.add_text_chunk((*key).to_string(), value.clone()).map_err(encoder_error)?;
        }
        let mut writer = enc.write_header().map_err(encoder_error)?;
        let row = (width as usize).div_ceil(8);
        writer
            .write_image_data(&vec![0u8; row * height as usize])
            .map_err(encoder_error)?;
    }
    Ok(out)
}

/// 8-bit RGB PNG from a row-major pixel buffer.
pub fn rgb_png(width: u32, height: u32, pixels: &[u8]) -> Result<Vec<u8>, BackendError> {
    assert_eq!(pixels.len(), width as usize * height as usize * 3);
    let mut out = Vec::new();
    {
        let mut enc = Encoder::new(&mut out, width, height);
        enc.set_color(ColorType::Rgb);
        enc.set_depth(BitDepth::Eight);
        enc.set_compression(Compression::Fast);
        let mut writer = enc.write_header().map_err(encoder_error)?;
        writer.write_image_data(pixels).map_err(encoder_error)?;
    }
    Ok(out)
}

/// 1-bit grayscale PNG. `packed` rows are MSB-first and padded to whole bytes.
pub fn bilevel_png(width: u32, height: u32, packed: &[u8]) -> Result<Vec<u8>, BackendError> {
    let mut out = Vec::new();
    {
        let mut enc = Encoder::new(&mut out, width, height);
        enc.set_color(ColorType::Grayscale);
        enc.set_depth(BitDepth::One);
        enc.set_compression(Compression::Balanced);
        let mut writer = enc.write_header().map_err(encoder_error)?;
        writer.write_image_data(packed).map_err(encoder_error)?;
    }
    Ok(out)
}

/// Decoded raw image: dimensions, color type, bit depth and undecoded sample bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: u32,
    pub height: u32,
    pub color: ColorType,
    pub depth: BitDepth,
    pub data: Vec<u8>,
    pub text: Vec<(String, String)>,
}

pub fn decode_png(bytes: &[u8]) -> Result<RawImage, BackendError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| BackendError::Malformed(format!("png decoding failed: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| BackendError::Malformed("png too large".into()))?;
    let mut data = vec![0; size];
    let frame = reader
        .next_frame(&mut data)
        .map_err(|e| BackendError::Malformed(format!("png decoding failed: {e}")))?;
    data.truncate(frame.buffer_size());
    let info = reader.info();
    let text = info
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    Ok(RawImage {
        width: frame.width,
        height: frame.height,
        color: frame.color_type,
        depth: frame.bit_depth,
        data,
        text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_round_trip() {
        let bytes = solid_png(20, 10, [1, 2, 3], &[("design", "0,1".into())]).unwrap();
        let raw = decode_png(&bytes).unwrap();
        assert_eq!((raw.width, raw.height), (20, 10));
        assert_eq!(raw.color, ColorType::Indexed);
        assert!(raw.data.iter().all(|&b| b == 0));
        assert_eq!(raw.text, vec![("design".to_string(), "0,1".to_string())]);
    }

    #[test]
    fn bilevel_round_trip() {
        let packed = vec![0b1010_0000, 0b0100_0000];
        let bytes = bilevel_png(3, 2, &packed).unwrap();
        let raw = decode_png(&bytes).unwrap();
        assert_eq!(raw.depth, BitDepth::One);
        assert_eq!(raw.data, packed);
        assert_eq!(bytes, bilevel_png(3, 2, &packed).unwrap());
    }
}
