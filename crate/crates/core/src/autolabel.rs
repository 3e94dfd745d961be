//! Bounding-box post-processing for automatic annotation, the classical
//! threshold + morphological-opening segmenter it replaces, and the
//! annotation / PGM file formats.
//!
//! Boxes use half-open pixel coordinates: `x1, y1` inclusive, `x2, y2`
//! exclusive, so `width = x2 - x1`.
//!
//! Only one annotation is produced per image: all accepted detections are
//! merged into a single envelope unconditionally.

use std::collections::VecDeque;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SLACK: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::Data(format!(
                "degenerate box ({x1},{y1},{x2},{y2}): need x1 < x2 and y1 < y2"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x2 <= width && self.y2 <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub image_path: String,
    pub bbox: BBox,
    pub class_name: String,
}

/// Smallest box containing every input box.
pub fn merge_boxes(boxes: &[BBox]) -> Result<BBox> {
    let first = boxes
        .first()
        .ok_or_else(|| Error::Data("cannot merge an empty list of boxes".into()))?;
    Ok(boxes.iter().skip(1).fold(*first, |acc, b| BBox {
        x1: acc.x1.min(b.x1),
        y1: acc.y1.min(b.y1),
        x2: acc.x2.max(b.x2),
        y2: acc.y2.max(b.y2),
    }))
}

/// Moves every side outward by `slack` pixels, clamped to the image.
pub fn expand_clamp(bbox: BBox, slack: u32, width: u32, height: u32) -> Result<BBox> {
    if !bbox.fits(width, height) || bbox.x1 >= bbox.x2 || bbox.y1 >= bbox.y2 {
        return Err(Error::Data(format!(
            "box ({},{},{},{}) is not inside a {width}x{height} image",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        )));
    }
    Ok(BBox {
        x1: bbox.x1.saturating_sub(slack),
        y1: bbox.y1.saturating_sub(slack),
        x2: bbox.x2.saturating_add(slack).min(width),
        y2: bbox.y2.saturating_add(slack).min(height),
    })
}

/// Filters detections by score, merges the survivors into one box and adds
/// slack. Returns `None` when nothing clears `score_threshold`.
pub fn postprocess(
    detections: &[Detection],
    score_threshold: f64,
    slack: u32,
    width: u32,
    height: u32,
    class_name: &str,
    image_path: &str,
) -> Result<Option<Annotation>> {
    if !(0.0..=1.0).contains(&score_threshold) {
        return Err(Error::Config(format!(
            "score threshold must lie in [0, 1], got {score_threshold}"
        )));
    }
    if class_name.is_empty() {
        return Err(Error::Config("class name is empty".into()));
    }
    let kept: Vec<BBox> = detections
        .iter()
        .filter(|d| d.score >= score_threshold)
        .map(|d| d.bbox)
        .collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let merged = merge_boxes(&kept)?;
    let bbox = expand_clamp(merged, slack, width, height)?;
    Ok(Some(Annotation {
        image_path: image_path.to_string(),
        bbox,
        class_name: class_name.to_string(),
    }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::shape(
                "GrayImage::new",
                format!("{width}x{height}"),
                format!("{} pixels", pixels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn write_pgm<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        write!(sink, "P5\n{} {}\n255\n", self.width, self.height)?;
        sink.write_all(&self.pixels)
    }

    pub fn read_pgm<R: Read>(source: R) -> Result<Self> {
        let mut r = std::io::BufReader::new(source);
        let mut header = Vec::new();
        // magic, width, height, maxval; '#' comments allowed between tokens
        let mut tokens: Vec<String> = Vec::new();
        while tokens.len() < 4 {
            let mut byte = [0u8; 1];
            let mut tok = String::new();
            loop {
                if r.read(&mut byte).map_err(|e| pgm_err(e.to_string()))? == 0 {
                    return Err(pgm_err("truncated header".into()));
                }
                header.push(byte[0]);
                let c = byte[0] as char;
                if c == '#' && tok.is_empty() {
                    let mut skip = String::new();
                    r.read_line(&mut skip).map_err(|e| pgm_err(e.to_string()))?;
                    continue;
                }
                if c.is_ascii_whitespace() {
                    if tok.is_empty() {
                        continue;
                    }
                    break;
                }
                tok.push(c);
            }
            tokens.push(tok);
        }
        if tokens[0] != "P5" {
            return Err(pgm_err(format!("bad magic `{}`", tokens[0])));
        }
        let parse = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| pgm_err(format!("bad number `{s}`")))
        };
        let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(pgm_err(format!(
                "only maxval 255 is supported, got {maxval}"
            )));
        }
        let mut pixels = vec![0u8; w as usize * h as usize];
        r.read_exact(&mut pixels)
            .map_err(|_| pgm_err("truncated pixel data".into()))?;
        GrayImage::new(w, h, pixels)
    }
}

fn pgm_err(msg: String) -> Error {
    Error::Parse {
        line: 0,
        msg: format!("PGM: {msg}"),
    }
}

/// Erosion (`min`) or dilation (`max`) with a square window of side
/// `2·radius + 1`. Pixels outside the image are ignored.
fn morph(mask: &[bool], w: usize, h: usize, radius: usize, erode: bool) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    // Separable: rows first, then columns.
    let pass = |src: &[bool], horizontal: bool| -> Vec<bool> {
        let mut out = vec![false; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (lo, hi, fixed) = if horizontal {
                    (x.saturating_sub(radius), (x + radius).min(w - 1), y)
                } else {
                    (y.saturating_sub(radius), (y + radius).min(h - 1), x)
                };
                let at = |i: usize| {
                    if horizontal {
                        src[fixed * w + i]
                    } else {
                        src[i * w + fixed]
                    }
                };
                out[y * w + x] = if erode {
                    (lo..=hi).all(at)
                } else {
                    (lo..=hi).any(at)
                };
            }
        }
        out
    };
    let tmp = pass(mask, true);
    pass(&tmp, false)
}

/// Global-threshold segmentation for dark objects on a light background:
/// pixels `< threshold` are foreground, cleaned by a morphological opening
/// with a `(2·opening_radius + 1)²` square, then split into 8-connected
/// components. Returns one tight box per component, largest area first
/// (ties by top-left corner).
pub fn threshold_segment(image: &GrayImage, threshold: u8, opening_radius: u32) -> Vec<BBox> {
    let (w, h) = (image.width as usize, image.height as usize);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let mask: Vec<bool> = image.pixels.iter().map(|&p| p < threshold).collect();
    let r = opening_radius as usize;
    let opened = morph(&morph(&mask, w, h, r, true), w, h, r, false);

    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !opened[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if opened[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        boxes.push(BBox {
            x1: x1 as u32,
            y1: y1 as u32,
            x2: x2 as u32,
            y2: y2 as u32,
        });
    }
    boxes.sort_by(|a, b| {
        b.area()
            .cmp(&a.area())
            .then((a.y1, a.x1).cmp(&(b.y1, b.x1)))
    });
    boxes
}

/// One `image_path,x1,y1,x2,y2,class_name` line per annotation, LF endings,
/// no header.
pub fn write_annotations<W: Write>(annotations: &[Annotation], mut sink: W) -> Result<()> {
    for a in annotations {
        for field in [&a.image_path, &a.class_name] {
            if field.contains([',', '\n', '\r']) {
                return Err(Error::Data(format!(
                    "annotation field `{field}` contains a comma or line break"
                )));
            }
        }
        if a.class_name.is_empty() {
            return Err(Error::Data("annotation with empty class name".into()));
        }
        let b = a.bbox;
        writeln!(
            sink,
            "{},{},{},{},{},{}",
            a.image_path, b.x1, b.y1, b.x2, b.y2, a.class_name
        )
        .map_err(|e| Error::Data(format!("writing annotations: {e}")))?;
    }
    Ok(())
}

pub fn read_annotations<R: BufRead>(source: R) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 6 comma-separated fields, got {}", fields.len()),
            });
        }
        let coord = |s: &str| {
            s.parse::<u32>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad coordinate `{s}`"),
            })
        };
        let (x1, y1, x2, y2) = (
            coord(fields[1])?,
            coord(fields[2])?,
            coord(fields[3])?,
            coord(fields[4])?,
        );
        let bbox =
            BBox::new(x1, y1, x2, y2).map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
        if fields[5].is_empty() {
            return Err(Error::Data(format!("line {line_no}: empty class name")));
        }
        out.push(Annotation {
            image_path: fields[0].to_string(),
            bbox,
            class_name: fields[5].to_string(),
        });
    }
    Ok(out)
}
