//! Reader and writer for the uncompressed MetaImage (`.mhd` + `.raw`) subset
//! used for every image this crate exchanges: 3-D, little-endian, element
//! type `MET_UCHAR` or `MET_FLOAT`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Grid, LabelMap, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    UChar,
    Float,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::UChar => "MET_UCHAR",
            ElementType::Float => "MET_FLOAT",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::UChar => 1,
            ElementType::Float => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetaImageData {
    UChar(Vec<u8>),
    Float(Vec<f32>),
}

/// A decoded MetaImage file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaImage {
    pub grid: Grid,
    pub data: MetaImageData,
}

impl MetaImage {
    pub fn element_type(&self) -> ElementType {
        match self.data {
            MetaImageData::UChar(_) => ElementType::UChar,
            MetaImageData::Float(_) => ElementType::Float,
        }
    }

    pub fn into_volume(self) -> Result<Volume> {
        let data = match self.data {
            MetaImageData::UChar(d) => d.into_iter().map(f32::from).collect(),
            MetaImageData::Float(d) => d,
        };
        Volume::new(self.grid, data)
    }

    pub fn into_label_map(self) -> Result<LabelMap> {
        match self.data {
            MetaImageData::UChar(d) => LabelMap::new(self.grid, d),
            MetaImageData::Float(d) => {
                let mut labels = Vec::with_capacity(d.len());
                for v in d {
                    if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "float image value {v} is not a valid label"
                        )));
                    }
                    labels.push(v as u8);
                }
                LabelMap::new(self.grid, labels)
            }
        }
    }
}

impl From<&Volume> for MetaImage {
    fn from(v: &Volume) -> Self {
        MetaImage {
            grid: v.grid,
            data: MetaImageData::Float(v.data.clone()),
        }
    }
}

impl From<&LabelMap> for MetaImage {
    fn from(l: &LabelMap) -> Self {
        MetaImage {
            grid: l.grid,
            data: MetaImageData::UChar(l.data.clone()),
        }
    }
}

/// Read a `.mhd` header and its raw payload.
pub fn load_metaimage(path: impl AsRef<Path>) -> Result<MetaImage> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let mut dims: Option<[usize; 3]> = None;
    let mut spacing = [1.0f64; 3];
    let mut origin = [0.0f64; 3];
    let mut element: Option<ElementType> = None;
    let mut data_file: Option<String> = None;

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Header(format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "NDims" => {
                if value != "3" {
                    return Err(Error::Header(format!("only 3-D images are supported, NDims = {value}")));
                }
            }
            "DimSize" => dims = Some(parse_triple(key, value)?),
            "ElementSpacing" | "ElementSize" => spacing = parse_triple(key, value)?,
            "Offset" | "Origin" | "Position" => origin = parse_triple(key, value)?,
            "ElementType" => {
                element = Some(match value {
                    "MET_UCHAR" => ElementType::UChar,
                    "MET_FLOAT" => ElementType::Float,
                    other => return Err(Error::UnsupportedElementType(other.to_string())),
                })
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(Error::Header("big-endian payloads are not supported".into()));
                }
            }
            "CompressedData" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(Error::Header("compressed payloads are not supported".into()));
                }
            }
            "ElementNumberOfChannels" => {
                if value != "1" {
                    return Err(Error::Header("multi-channel images are not supported".into()));
                }
            }
            "ElementDataFile" => data_file = Some(value.to_string()),
            _ => {}
        }
    }

    let dims = dims.ok_or_else(|| Error::Header("missing DimSize".into()))?;
    let element = element.ok_or_else(|| Error::Header("missing ElementType".into()))?;
    let data_file = data_file.ok_or_else(|| Error::Header("missing ElementDataFile".into()))?;
    if data_file == "LOCAL" || data_file.starts_with("LIST") || data_file.contains('%') {
        return Err(Error::Header(format!("unsupported ElementDataFile `{data_file}`")));
    }
    let grid = Grid::new(dims, spacing, origin).map_err(|e| Error::Header(e.to_string()))?;

    let raw_path = resolve_data_file(path, &data_file);
    if !raw_path.exists() {
        return Err(Error::MissingFile(raw_path));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = grid.len() * element.size();
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: bytes.len(),
        });
    }

    let data = match element {
        ElementType::UChar => MetaImageData::UChar(bytes),
        ElementType::Float => MetaImageData::Float(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    Ok(MetaImage { grid, data })
}

/// Write `image` as `path` (header) plus a sibling `.raw` payload, creating
/// the parent directory.
pub fn save_metaimage(image: &MetaImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?
        .to_string();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let g = &image.grid;
    let mut header = String::new();
    header.push_str("ObjectType = Image\nNDims = 3\nBinaryData = True\n");
    header.push_str("BinaryDataByteOrderMSB = False\nCompressedData = False\n");
    let _ = writeln!(header, "Offset = {} {} {}", g.origin[0], g.origin[1], g.origin[2]);
    let _ = writeln!(
        header,
        "ElementSpacing = {} {} {}",
        g.spacing[0], g.spacing[1], g.spacing[2]
    );
    let _ = writeln!(header, "DimSize = {} {} {}", g.dims[0], g.dims[1], g.dims[2]);
    let _ = writeln!(header, "ElementType = {}", image.element_type().tag());
    let _ = writeln!(header, "ElementDataFile = {raw_name}");

    let payload: Vec<u8> = match &image.data {
        MetaImageData::UChar(d) => d.clone(),
        MetaImageData::Float(d) => d.iter().flat_map(|v| v.to_le_bytes()).collect(),
    };
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    load_metaimage(path)?.into_volume()
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    load_metaimage(path)?.into_label_map()
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    save_metaimage(&MetaImage::from(v), path)
}

pub fn save_label_map(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    save_metaimage(&MetaImage::from(l), path)
}

fn parse_triple<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Header(format!("{key} needs 3 values, got `{value}`")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::Header(format!("cannot parse `{p}` in {key}")))?,
        );
    }
    let mut it = out.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

fn resolve_data_file(header: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        header.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_header(dir: &Path, dims: &str, element: &str, raw: &[u8]) -> PathBuf {
        let path = dir.join("img.mhd");
        fs::write(
            &path,
            format!(
                "ObjectType = Image\nNDims = 3\nDimSize = {dims}\nElementSpacing = 1 1 1\n\
                 ElementType = {element}\nElementDataFile = img.raw\n"
            ),
        )
        .unwrap();
        fs::write(dir.join("img.raw"), raw).unwrap();
        path
    }

    #[test]
    fn zero_payload_loads_as_zero_volume() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_header(dir.path(), "2 2 2", "MET_UCHAR", &[0u8; 8]);
        let v = load_volume(&path).unwrap();
        assert_eq!(v.grid.dims, [2, 2, 2]);
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_header(dir.path(), "4 4 4", "MET_UCHAR", &[0u8; 32]);
        match load_metaimage(&path) {
            Err(Error::PayloadLength { expected, found }) => {
                assert_eq!(expected, 64);
                assert_eq!(found, 32);
            }
            other => panic!("expected payload error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_element_type_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_header(dir.path(), "2 2 2", "MET_SHORT", &[0u8; 16]);
        assert!(matches!(load_metaimage(&path), Err(Error::UnsupportedElementType(t)) if t == "MET_SHORT"));
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_metaimage(dir.path().join("nope.mhd")),
            Err(Error::MissingFile(_))
        ));
        let path = dir.path().join("a.mhd");
        fs::write(&path, "NDims = 3\nDimSize = 1 1 1\nElementType = MET_UCHAR\nElementDataFile = gone.raw\n").unwrap();
        assert!(matches!(load_metaimage(&path), Err(Error::MissingFile(p)) if p.ends_with("gone.raw")));
    }

    #[test]
    fn zero_volume_writes_eight_byte_payload() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        save_label_map(&LabelMap::empty(g), dir.path().join("z.mhd")).unwrap();
        assert_eq!(fs::metadata(dir.path().join("z.raw")).unwrap().len(), 8);
        assert!(dir.path().join("z.mhd").exists());
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([2, 1, 1], [0.5, 0.5, 1.2], [-3.25, 0.1, 7.0]).unwrap();
        let v = Volume::new(g, vec![-1.5, 3.25]).unwrap();
        let path = dir.path().join("f.mhd");
        save_volume(&v, &path).unwrap();
        let raw = fs::read(dir.path().join("f.raw")).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(&(-1.5f32).to_le_bytes());
        expected.extend_from_slice(&3.25f32.to_le_bytes());
        assert_eq!(raw, expected);
        let back = load_volume(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.grid.spacing, [0.5, 0.5, 1.2]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_preserves_everything(
            nx in 1usize..5, ny in 1usize..5, nz in 1usize..5,
            sx in 0.01f64..10.0, sy in 0.01f64..10.0, sz in 0.01f64..10.0,
            ox in -100f64..100.0, seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = Grid::new([nx, ny, nz], [sx, sy, sz], [ox, -ox, ox * 0.5]).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let v = Volume::new(g, (0..g.len()).map(|_| rng.random_range(-1e6f32..1e6)).collect()).unwrap();
            save_volume(&v, dir.path().join("v.mhd")).unwrap();
            proptest::prop_assert_eq!(load_volume(dir.path().join("v.mhd")).unwrap(), v);
            let l = LabelMap::new(g, (0..g.len()).map(|_| rng.random::<u8>()).collect()).unwrap();
            save_label_map(&l, dir.path().join("l.mhd")).unwrap();
            proptest::prop_assert_eq!(load_label_map(dir.path().join("l.mhd")).unwrap(), l);
        }
    }
}
