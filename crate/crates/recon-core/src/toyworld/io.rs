//! On-disk formats: layout and palette JSON, raw f64 grids, and a PPM export
//! for eyeballing results.
//!
//! Grid files are `RCG1` + height,width as u32 LE + row-major H*W*3 f64 LE.
//! JSON writers emit pretty output with sorted collections so identical
//! inputs produce identical bytes.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyworld::{
    BBox, CategorySpec, ColorComponent, LatentGrid, Layout, LayoutObject, Palette,
};

const GRID_MAGIC: &[u8; 4] = b"RCG1";

#[derive(Serialize, Deserialize)]
struct LayoutFile {
    width: usize,
    height: usize,
    objects: Vec<ObjectFile>,
    caption: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ObjectFile {
    #[serde(rename = "box")]
    bbox: [usize; 4],
    label: usize,
}

/// Writes a layout as JSON (caption sorted ascending).
pub fn save_layout(path: impl AsRef<Path>, layout: &Layout) -> Result<()> {
    let file = LayoutFile {
        width: layout.width(),
        height: layout.height(),
        objects: layout
            .objects()
            .iter()
            .map(|o| ObjectFile {
                bbox: [o.bbox.x0(), o.bbox.y0(), o.bbox.x1(), o.bbox.y1()],
                label: o.label,
            })
            .collect(),
        caption: layout.caption().iter().copied().collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads a layout and validates every layout invariant against the palette.
pub fn load_layout(path: impl AsRef<Path>, palette: &Palette) -> Result<Layout> {
    let text = fs::read_to_string(&path)?;
    let file: LayoutFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))?;
    let mut objects = Vec::with_capacity(file.objects.len());
    for (i, o) in file.objects.iter().enumerate() {
        let [x0, y0, x1, y1] = o.bbox;
        let bbox = BBox::new(x0, y0, x1, y1)
            .map_err(|e| Error::validation(format!("objects[{i}].box: {e}")))?;
        objects.push(LayoutObject {
            bbox,
            label: o.label,
        });
    }
    let caption: BTreeSet<usize> = file.caption.iter().copied().collect();
    Layout::new(file.width, file.height, objects, caption, palette)
}

#[derive(Serialize, Deserialize)]
struct PaletteFile {
    pixel_sigma: f64,
    categories: Vec<CategoryFile>,
}

#[derive(Serialize, Deserialize)]
struct CategoryFile {
    id: usize,
    name: String,
    components: Vec<ComponentFile>,
}

#[derive(Serialize, Deserialize)]
struct ComponentFile {
    color: [f64; 3],
    weight: f64,
}

pub fn save_palette(path: impl AsRef<Path>, palette: &Palette) -> Result<()> {
    let file = PaletteFile {
        pixel_sigma: palette.pixel_sigma(),
        categories: palette
            .categories()
            .iter()
            .map(|c| CategoryFile {
                id: c.id(),
                name: c.name().to_string(),
                components: c
                    .components()
                    .iter()
                    .map(|k| ComponentFile {
                        color: k.mean,
                        weight: k.weight,
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_palette(path: impl AsRef<Path>) -> Result<Palette> {
    let text = fs::read_to_string(&path)?;
    let file: PaletteFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))?;
    let mut categories = Vec::with_capacity(file.categories.len());
    for c in file.categories {
        let components = c
            .components
            .into_iter()
            .map(|k| ColorComponent {
                mean: k.color,
                weight: k.weight,
            })
            .collect();
        categories.push(CategorySpec::new(c.id, c.name, components)?);
    }
    Palette::new(file.pixel_sigma, categories)
}

/// Writes a grid as RCG1 binary (bit-exact round trip).
pub fn save_grid(path: impl AsRef<Path>, grid: &LatentGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + grid.data().len() * 8);
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&(grid.h() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.w() as u32).to_le_bytes());
    for v in grid.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<LatentGrid> {
    let mut file = fs::File::open(&path)?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|_| Error::Parse(format!("{}: truncated header", path.as_ref().display())))?;
    if &header[0..4] != GRID_MAGIC {
        return Err(Error::Parse(format!(
            "{}: bad magic, not an RCG1 grid",
            path.as_ref().display()
        )));
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let expect = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(24))
        .ok_or_else(|| Error::Parse("grid dimensions overflow".into()))?;
    let mut raw = Vec::with_capacity(expect);
    file.read_to_end(&mut raw)?;
    if raw.len() != expect {
        return Err(Error::Parse(format!(
            "{}: expected {expect} payload bytes, found {}",
            path.as_ref().display(),
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LatentGrid::from_vec(h, w, data)
}

/// 8-bit viewable export: binary PPM (P6), values clamped to [0,1].
pub fn write_ppm(path: impl AsRef<Path>, grid: &LatentGrid) -> Result<()> {
    let mut file = fs::File::create(path)?;
    write!(file, "P6\n{} {}\n255\n", grid.w(), grid.h())?;
    let bytes: Vec<u8> = grid
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    file.write_all(&bytes)?;
    Ok(())
}
