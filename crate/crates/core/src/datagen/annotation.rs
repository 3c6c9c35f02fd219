//! Pascal VOC style annotation files with exactly one object.

use std::collections::HashMap;

use quick_xml::escape::escape;
use quick_xml::events::Event;
use quick_xml::Reader;

use super::{Annotation, BBox, DataError, DefectClass};

pub fn emit_annotation(annotation: &Annotation, image_name: &str) -> Vec<u8> {
    let b = &annotation.bbox;
    format!(
        "<annotation>\n\
         \t<filename>{}</filename>\n\
         \t<size>\n\
         \t\t<width>{}</width>\n\
         \t\t<height>{}</height>\n\
         \t\t<depth>1</depth>\n\
         \t</size>\n\
         \t<object>\n\
         \t\t<name>{}</name>\n\
         \t\t<bndbox>\n\
         \t\t\t<xmin>{}</xmin>\n\
         \t\t\t<ymin>{}</ymin>\n\
         \t\t\t<xmax>{}</xmax>\n\
         \t\t\t<ymax>{}</ymax>\n\
         \t\t</bndbox>\n\
         \t</object>\n\
         </annotation>\n",
        escape(image_name),
        annotation.image_width,
        annotation.image_height,
        annotation.class.name(),
        b.xmin,
        b.ymin,
        b.xmax,
        b.ymax,
    )
    .into_bytes()
}

fn perr(element: &str, reason: impl Into<String>) -> DataError {
    DataError::Parse {
        element: element.to_string(),
        reason: reason.into(),
    }
}

/// Parses an annotation file, returning the annotation and the image filename.
pub fn parse_annotation(xml: &[u8]) -> Result<(Annotation, String), DataError> {
    let text = std::str::from_utf8(xml).map_err(|e| perr("annotation", format!("not UTF-8: {e}")))?;
    let mut reader = Reader::from_str(text);

    let mut path: Vec<String> = Vec::new();
    let mut leaves: HashMap<String, String> = HashMap::new();
    let mut objects = 0;
    let mut saw_root = false;
    loop {
        let event = reader
            .read_event()
            .map_err(|e| perr(path.last().map_or("annotation", String::as_str), format!("malformed XML: {e}")))?;
        match event {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if path.is_empty() {
                    if name != "annotation" || saw_root {
                        return Err(perr(&name, "root element must be a single <annotation>"));
                    }
                    saw_root = true;
                }
                path.push(name);
                if path.len() == 2 && path[1] == "object" {
                    objects += 1;
                }
            }
            Event::End(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if path.pop().as_deref() != Some(name.as_str()) {
                    return Err(perr(&name, "mismatched closing tag"));
                }
            }
            Event::Empty(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                leaves.entry(format!("{}/{}", path.join("/"), name)).or_default();
            }
            Event::Text(t) => {
                let value = t
                    .unescape()
                    .map_err(|e| perr(path.last().map_or("annotation", String::as_str), e.to_string()))?;
                leaves.entry(path.join("/")).or_default().push_str(&value);
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !path.is_empty() {
        return Err(perr(&path[path.len() - 1], "unexpected end of document"));
    }
    if !saw_root {
        return Err(perr("annotation", "missing root element"));
    }
    if objects != 1 {
        return Err(perr("object", format!("expected exactly one object, found {objects}")));
    }

    let get = |key: &str| -> Result<&str, DataError> {
        let element = key.rsplit('/').next().unwrap_or(key);
        leaves
            .get(&format!("annotation/{key}"))
            .map(String::as_str)
            .ok_or_else(|| perr(element, "missing element"))
    };
    let int = |key: &str| -> Result<u32, DataError> {
        let element = key.rsplit('/').next().unwrap_or(key);
        let raw = get(key)?;
        raw.trim()
            .parse::<u32>()
            .map_err(|_| perr(element, format!("expected a non-negative integer, got {raw:?}")))
    };

    let filename = get("filename").unwrap_or_default().to_string();
    let width = int("size/width")?;
    let height = int("size/height")?;
    if let Ok(depth) = get("size/depth") {
        if depth.trim() != "1" {
            return Err(perr("depth", format!("grayscale only, got depth {depth}")));
        }
    }
    let name = get("object/name")?;
    let class = DefectClass::from_name(name.trim()).ok_or_else(|| perr("name", format!("unknown class {name:?}")))?;
    let bbox = BBox {
        xmin: int("object/bndbox/xmin")?,
        ymin: int("object/bndbox/ymin")?,
        xmax: int("object/bndbox/xmax")?,
        ymax: int("object/bndbox/ymax")?,
    };
    if bbox.xmax <= bbox.xmin {
        return Err(perr("xmax", format!("xmax {} not greater than xmin {}", bbox.xmax, bbox.xmin)));
    }
    if bbox.ymax <= bbox.ymin {
        return Err(perr("ymax", format!("ymax {} not greater than ymin {}", bbox.ymax, bbox.ymin)));
    }
    if bbox.xmax > width {
        return Err(perr("xmax", format!("xmax {} beyond image width {width}", bbox.xmax)));
    }
    if bbox.ymax > height {
        return Err(perr("ymax", format!("ymax {} beyond image height {height}", bbox.ymax)));
    }
    Ok((
        Annotation {
            class,
            bbox,
            image_width: width,
            image_height: height,
        },
        filename,
    ))
}
