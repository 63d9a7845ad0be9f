//! OME-TIFF stack reader/writer.
//!
//! Stacks are stored as multipage TIFF, one unsigned 16-bit grayscale page
//! per channel, with a minimal OME-XML block in the first page's
//! ImageDescription. Intensities are read and written losslessly. Channel
//! naming comes from a [`ChannelMap`]; the embedded XML is informational.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use ndarray::Array2;
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;
use tiff::ColorType;

use crate::error::{Error, Result};
use crate::stack::{ChannelMap, ChannelStack, ClassLabel, LoadMode};

/// Load a stack from a TIFF file on disk.
///
/// `channel_map` names the pages and may carry subject metadata; missing
/// metadata falls back to the file stem and [`ClassLabel::Control`].
pub fn load_stack(path: &Path, channel_map: &ChannelMap, mode: LoadMode) -> Result<ChannelStack> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let file = File::open(path)?;
    let subject_fallback = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".to_string());
    read_stack_from(BufReader::new(file), channel_map, mode, &subject_fallback)
}

/// Decode a stack from any seekable reader. Validation mirrors [`load_stack`].
pub fn read_stack_from<R: Read + Seek>(
    reader: R,
    channel_map: &ChannelMap,
    mode: LoadMode,
    subject_fallback: &str,
) -> Result<ChannelStack> {
    let mut decoder = Decoder::new(reader)?;
    let mut channels: Vec<(String, Array2<u16>)> = Vec::new();
    let mut page = 0usize;
    loop {
        let name = channel_map.name_for_page(page, mode)?;
        if decoder.colortype()? != ColorType::Gray(16) {
            return Err(Error::UnsupportedPixelFormat {
                path: Path::new(subject_fallback).to_path_buf(),
            });
        }
        let (width, height) = decoder.dimensions()?;
        let data = match decoder.read_image()? {
            DecodingResult::U16(values) => values,
            _ => {
                return Err(Error::UnsupportedPixelFormat {
                    path: Path::new(subject_fallback).to_path_buf(),
                })
            }
        };
        let grid = Array2::from_shape_vec((height as usize, width as usize), data)
            .map_err(|e| Error::Decode(format!("page {page}: {e}")))?;
        channels.push((name, grid));
        if !decoder.more_images() {
            break;
        }
        decoder.next_image()?;
        page += 1;
    }

    let subject_id = channel_map
        .subject_id
        .clone()
        .unwrap_or_else(|| subject_fallback.to_string());
    let label = channel_map.class_label.unwrap_or(ClassLabel::Control);
    let mut stack = ChannelStack::new(subject_id, label, channels)?;
    stack.subtype = channel_map.subtype.clone();
    stack.validate_names(mode)?;
    Ok(stack)
}

/// Write a stack as multipage Gray16 TIFF with an OME-XML description.
pub fn write_stack(stack: &ChannelStack, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    write_stack_to(stack, BufWriter::new(file))
}

pub fn write_stack_to<W: Write + Seek>(stack: &ChannelStack, writer: W) -> Result<()> {
    let mut encoder = TiffEncoder::new(writer)?;
    let description = ome_xml(stack);
    for (page, (_, grid)) in stack.channels().enumerate() {
        let (h, w) = grid.dim();
        let mut image = encoder.new_image::<colortype::Gray16>(w as u32, h as u32)?;
        if page == 0 {
            image
                .encoder()
                .write_tag(Tag::ImageDescription, description.as_str())?;
        }
        let data = grid
            .as_slice()
            .expect("channel grids are standard layout")
            .to_vec();
        image.write_data(&data)?;
    }
    Ok(())
}

/// Minimal OME-XML block naming the channels.
fn ome_xml(stack: &ChannelStack) -> String {
    let (h, w) = stack.dims();
    let mut xml = String::new();
    xml.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    xml.push_str(
        "<OME xmlns=\"http://www.openmicroscopy.org/Schemas/OME/2016-06\">\n",
    );
    xml.push_str(&format!(
        "  <Image ID=\"Image:0\" Name=\"{}\">\n",
        xml_escape(&stack.subject_id)
    ));
    xml.push_str(&format!(
        "    <Pixels ID=\"Pixels:0\" DimensionOrder=\"XYCZT\" Type=\"uint16\" \
         SizeX=\"{w}\" SizeY=\"{h}\" SizeC=\"{}\" SizeZ=\"1\" SizeT=\"1\" \
         PhysicalSizeX=\"{}\" PhysicalSizeY=\"{}\">\n",
        stack.num_channels(),
        stack.pixel_size,
        stack.pixel_size
    ));
    for (index, (name, _)) in stack.channels().enumerate() {
        xml.push_str(&format!(
            "      <Channel ID=\"Channel:0:{index}\" Name=\"{}\" SamplesPerPixel=\"1\"/>\n",
            xml_escape(name)
        ));
    }
    xml.push_str("      <TiffData/>\n    </Pixels>\n  </Image>\n</OME>\n");
    xml
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Write a pair of label/boolean masks as a 2-page u16 TIFF (labels, mask).
pub fn write_masks(labels: &Array2<u16>, mask: &Array2<bool>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = TiffEncoder::new(BufWriter::new(file))?;
    let (h, w) = labels.dim();
    encoder.write_image::<colortype::Gray16>(
        w as u32,
        h as u32,
        labels.as_slice().expect("standard layout"),
    )?;
    let mask_u16: Vec<u16> = mask.iter().map(|&b| u16::from(b)).collect();
    let (mh, mw) = mask.dim();
    encoder.write_image::<colortype::Gray16>(mw as u32, mh as u32, &mask_u16)?;
    Ok(())
}

/// Read back a mask pair written by [`write_masks`].
pub fn read_masks(path: &Path) -> Result<(Array2<u16>, Array2<bool>)> {
    let file = File::open(path)?;
    let mut decoder = Decoder::new(BufReader::new(file))?;
    let mut pages: Vec<Array2<u16>> = Vec::new();
    loop {
        let (w, h) = decoder.dimensions()?;
        match decoder.read_image()? {
            DecodingResult::U16(values) => {
                pages.push(
                    Array2::from_shape_vec((h as usize, w as usize), values)
                        .map_err(|e| Error::Decode(e.to_string()))?,
                );
            }
            _ => return Err(Error::Decode("mask pages must be u16".to_string())),
        }
        if !decoder.more_images() {
            break;
        }
        decoder.next_image()?;
    }
    if pages.len() != 2 {
        return Err(Error::Decode(format!(
            "expected 2 mask pages, found {}",
            pages.len()
        )));
    }
    let mask = pages.pop().expect("two pages");
    let labels = pages.pop().expect("two pages");
    let mask_bool = mask.mapv(|v| v != 0);
    Ok((labels, mask_bool))
}
