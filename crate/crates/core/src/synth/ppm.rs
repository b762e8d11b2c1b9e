//! Binary PPM (P6) encoding for `[3, H, W]` images with values in `[0, 1]`.

use std::path::Path;

use crate::tensor::Tensor;

pub fn encode(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    let plane = h * w;
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("expected P6 magic, found {:?}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(format!("only 8-bit PPM supported, maxval {max}"));
    }
    let pixels = bytes.get(pos..pos + 3 * w * h).ok_or("truncated PPM payload")?;
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = pixels[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| e.to_string())
}

pub fn write(path: impl AsRef<Path>, image: &Tensor<f32>) -> std::io::Result<()> {
    std::fs::write(path, encode(image))
}

pub fn read(path: impl AsRef<Path>) -> std::io::Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_8_bits() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f32 / 255.0);
        let back = decode(&encode(&img)).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) < 1e-6);
        assert!(encode(&img).starts_with(b"P6\n5 4\n255\n"));
    }
}
