//! Dataset directory layout:
//!
//! * `attributes.tsv`: header of slot names, then one row per image:
//!   `image_index  view_id  semantic_id  slot_0 .. slot_{n-1}`.
//! * `images.bin`: `"AIRB" | version | count | H | W | C | count*H*W*C f32 | crc32`,
//!   integers little-endian `u32`, the checksum covering the float bytes only.
//! * `split.json`: schema, render settings and the train/gallery/query index lists.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::CHANNELS;
use super::{
    AttributeSchema, AttributeVector, DataError, DatasetSplit, PersonImage, Query, RenderConfig,
    Sample, SemanticId,
};
use crate::binio::{put_f32s, put_u32, ByteReader};

pub const ATTRIBUTES_FILE: &str = "attributes.tsv";
pub const IMAGES_FILE: &str = "images.bin";
pub const SPLIT_FILE: &str = "split.json";
pub const IMAGES_MAGIC: &[u8; 4] = b"AIRB";
pub const IMAGES_VERSION: u32 = 1;
const SPLIT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    version: u32,
    schema: AttributeSchema,
    render: RenderConfig,
    train: Vec<usize>,
    gallery: Vec<usize>,
    queries: Vec<QueryRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRef {
    semantic_id: SemanticId,
    image_index: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn encode_images(split: &DatasetSplit) -> Vec<u8> {
    let n = split.train.len() + split.gallery.len();
    let mut out = Vec::with_capacity(28 + n * split.image_len() * 4);
    out.extend_from_slice(IMAGES_MAGIC);
    for v in [
        IMAGES_VERSION,
        n as u32,
        split.render.height as u32,
        split.render.width as u32,
        CHANNELS as u32,
    ] {
        put_u32(&mut out, v);
    }
    let start = out.len();
    for s in split.samples() {
        put_f32s(&mut out, s.image.pixels.iter().copied());
    }
    let crc = crc32fast::hash(&out[start..]);
    put_u32(&mut out, crc);
    out
}

pub(crate) fn decode_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f32>>), DataError> {
    const FILE: &str = IMAGES_FILE;
    let trunc = |source| DataError::Truncated { file: FILE, source };
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4).map_err(trunc)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            file: FILE,
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u32().map_err(trunc)?;
    if version != IMAGES_VERSION {
        return Err(DataError::UnsupportedVersion {
            file: FILE,
            version,
        });
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32().map_err(trunc)? as usize;
    }
    let [count, h, w, c] = dims;
    if c != CHANNELS {
        return Err(DataError::Inconsistent(format!(
            "{FILE}: {c} channels, expected {CHANNELS}"
        )));
    }
    let per = h * w * c;
    let start = r.offset();
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        images.push(r.f32_vec(per).map_err(trunc)?);
    }
    let computed = crc32fast::hash(&bytes[start..r.offset()]);
    let stored = r.u32().map_err(trunc)?;
    if stored != computed {
        return Err(DataError::Checksum {
            file: FILE,
            stored,
            computed,
        });
    }
    if r.remaining() != 0 {
        return Err(DataError::Inconsistent(format!(
            "{FILE}: {} trailing bytes",
            r.remaining()
        )));
    }
    Ok((h, w, images))
}

fn encode_attributes(split: &DatasetSplit) -> Result<Vec<u8>, DataError> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_writer(Vec::new());
    let mut header = vec![
        "image_index".to_string(),
        "view_id".into(),
        "semantic_id".into(),
    ];
    header.extend(split.schema.slot_names());
    let csv_err = |e: csv::Error| DataError::InvalidArgument(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for s in split.samples() {
        let mut row = vec![
            s.index.to_string(),
            s.image.view_id.to_string(),
            s.image.semantic_id.0.to_string(),
        ];
        row.extend(s.attributes.bits().iter().map(u8::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| DataError::InvalidArgument(e.to_string()))
}

struct AttributeRow {
    view_id: u32,
    semantic_id: SemanticId,
    attributes: AttributeVector,
}

fn decode_attributes(
    bytes: &[u8],
    schema: &AttributeSchema,
) -> Result<Vec<AttributeRow>, DataError> {
    const FILE: &str = ATTRIBUTES_FILE;
    let mut rd = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_reader(bytes);
    let parse = |line: usize, reason: String| DataError::Parse {
        file: FILE,
        line,
        reason,
    };
    let header = rd.headers().map_err(|e| parse(1, e.to_string()))?.clone();
    let mut want = vec![
        "image_index".to_string(),
        "view_id".into(),
        "semantic_id".into(),
    ];
    want.extend(schema.slot_names());
    if header.iter().ne(want.iter().map(String::as_str)) {
        return Err(parse(
            1,
            format!("header does not match schema slots {want:?}"),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse(line, e.to_string()))?;
        let field = |k: usize| -> Result<u64, DataError> {
            rec[k]
                .parse::<u64>()
                .map_err(|e| parse(line, format!("column {}: {e}", &header[k])))
        };
        if field(0)? as usize != i {
            return Err(parse(
                line,
                format!("image_index {} out of sequence", &rec[0]),
            ));
        }
        let bits = (3..rec.len())
            .map(|k| {
                field(k).and_then(|v| {
                    u8::try_from(v).map_err(|_| parse(line, format!("slot value {v}")))
                })
            })
            .collect::<Result<Vec<u8>, _>>()?;
        let attributes = AttributeVector::from_bits(bits);
        schema
            .check(&attributes)
            .map_err(|e| parse(line, e.to_string()))?;
        rows.push(AttributeRow {
            view_id: field(1)? as u32,
            semantic_id: SemanticId(field(2)? as usize),
            attributes,
        });
    }
    Ok(rows)
}

fn split_json(split: &DatasetSplit) -> Result<Vec<u8>, DataError> {
    let file = SplitFile {
        version: SPLIT_VERSION,
        schema: split.schema.clone(),
        render: split.render.clone(),
        train: split.train.iter().map(|s| s.index).collect(),
        gallery: split.gallery.iter().map(|s| s.index).collect(),
        queries: split
            .queries
            .iter()
            .map(|q| QueryRef {
                semantic_id: q.semantic_id,
                image_index: q.image_index,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&file).map_err(|source| DataError::Json {
        file: SPLIT_FILE,
        source,
    })?;
    out.push(b'\n');
    Ok(out)
}

/// Writes the three dataset files into `dir`, creating it if needed.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<(), DataError> {
    split.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, bytes) in [
        (SPLIT_FILE, split_json(split)?),
        (ATTRIBUTES_FILE, encode_attributes(split)?),
        (IMAGES_FILE, encode_images(split)),
    ] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Reads and cross-checks a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<DatasetSplit, DataError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(io_err(&p))
    };
    let file: SplitFile =
        serde_json::from_slice(&read(SPLIT_FILE)?).map_err(|source| DataError::Json {
            file: SPLIT_FILE,
            source,
        })?;
    if file.version != SPLIT_VERSION {
        return Err(DataError::UnsupportedVersion {
            file: SPLIT_FILE,
            version: file.version,
        });
    }
    let rows = decode_attributes(&read(ATTRIBUTES_FILE)?, &file.schema)?;
    let (h, w, images) = decode_images(&read(IMAGES_FILE)?)?;
    if (h, w) != (file.render.height, file.render.width) {
        return Err(DataError::Inconsistent(format!(
            "{IMAGES_FILE} is {h}x{w}, {SPLIT_FILE} says {}x{}",
            file.render.height, file.render.width
        )));
    }
    if images.len() != rows.len() {
        return Err(DataError::Inconsistent(format!(
            "{} images but {} attribute rows",
            images.len(),
            rows.len()
        )));
    }
    let n = rows.len();
    if file.train.len() + file.gallery.len() != n
        || file
            .train
            .iter()
            .chain(&file.gallery)
            .enumerate()
            .any(|(i, &idx)| i != idx)
    {
        return Err(DataError::Inconsistent(format!(
            "train/gallery indices must list 0..{n} with train first"
        )));
    }
    let mut samples: Vec<Sample> = rows
        .into_iter()
        .zip(images)
        .enumerate()
        .map(|(index, (row, pixels))| Sample {
            index,
            image: PersonImage {
                pixels,
                view_id: row.view_id,
                semantic_id: row.semantic_id,
            },
            attributes: row.attributes,
        })
        .collect();
    let gallery = samples.split_off(file.train.len());
    let queries = file
        .queries
        .iter()
        .map(|q| {
            let g = q
                .image_index
                .checked_sub(samples.len())
                .and_then(|i| gallery.get(i))
                .ok_or_else(|| {
                    DataError::Inconsistent(format!(
                        "query references non-gallery image {}",
                        q.image_index
                    ))
                })?;
            Ok(Query {
                attributes: g.attributes.clone(),
                semantic_id: q.semantic_id,
                image_index: q.image_index,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let split = DatasetSplit {
        schema: file.schema,
        render: file.render,
        train: samples,
        gallery,
        queries,
    };
    split.validate()?;
    Ok(split)
}
