//! Minimal grayscale dendrogram rendering.

use super::algo::{leaf_order, Merge};

const W: usize = 320;
const H: usize = 200;
const MARGIN: usize = 10;

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Canvas { px: vec![255; W * H] }
    }

    fn hline(&mut self, x0: usize, x1: usize, y: usize) {
        let (a, b) = (x0.min(x1), x0.max(x1));
        for x in a..=b.min(W - 1) {
            self.px[y.min(H - 1) * W + x] = 0;
        }
    }

    fn vline(&mut self, x: usize, y0: usize, y1: usize) {
        let (a, b) = (y0.min(y1), y0.max(y1));
        for y in a..=b.min(H - 1) {
            self.px[y * W + x.min(W - 1)] = 0;
        }
    }
}

/// Renders the merge tree as an 8-bit grayscale PNG.
pub fn dendrogram_png(n: usize, merges: &[Merge]) -> Vec<u8> {
    let mut c = Canvas::new();
    if n > 0 {
        let order = leaf_order(n, merges);
        let span = (W - 2 * MARGIN) as f64;
        let mut x = vec![0.0; n + merges.len()];
        let mut y = vec![0.0; n + merges.len()];
        for (pos, &leaf) in order.iter().enumerate() {
            x[leaf] = MARGIN as f64 + span * (pos as f64 + 0.5) / n as f64;
        }
        let top = merges.iter().map(|m| m.height).fold(0.0, f64::max);
        let scale = if top > 0.0 { (H - 2 * MARGIN) as f64 / top } else { 0.0 };
        let base = (H - MARGIN) as f64;
        y[..n].fill(base);
        for (k, m) in merges.iter().enumerate() {
            let id = n + k;
            let h = base - m.height * scale;
            x[id] = (x[m.a] + x[m.b]) / 2.0;
            y[id] = h;
            for child in [m.a, m.b] {
                c.vline(x[child] as usize, y[child] as usize, h as usize);
            }
            c.hline(x[m.a] as usize, x[m.b] as usize, h as usize);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, W as u32, H as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(&c.px).expect("in-memory PNG data");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::stubs::algo::{agglomerate, Linkage};

    #[test]
    fn renders_valid_png() {
        let x = vec![vec![0.0], vec![1.0], vec![5.0]];
        let bytes = dendrogram_png(3, &agglomerate(&x, Linkage::Average, false));
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
        let dec = png::Decoder::new(bytes.as_slice());
        let reader = dec.read_info().unwrap();
        assert_eq!(reader.info().width, W as u32);
        assert_eq!(dendrogram_png(3, &agglomerate(&x, Linkage::Average, false)), bytes);
    }
}
