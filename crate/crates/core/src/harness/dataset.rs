//! On-disk datasets.
//!
//! ```text
//! <dir>/config.txt          effective run config
//! <dir>/annotations.jsonl   one JSON object per image
//! <dir>/images/NNNNNN.bin   image tensor blob
//! ```
//!
//! An image blob is the magic `GFRIMG01`, a `u32` rank, `rank` `u64` dims and
//! the values as little-endian `f64`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::detect::{BBox, Detection};
use crate::error::{Error, Result};
use crate::harness::scene::{generate_scene_with, ObjectAnnotation, SceneAnnotation, SizeBucket};
use crate::tensor::FeatureMap;

pub const IMAGE_MAGIC: &[u8; 8] = b"GFRIMG01";
pub const CONFIG_FILE: &str = "config.txt";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub bucket: SizeBucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: usize,
    pub file: String,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Scenes described by the data-generation keys of `config`, all drawn from
/// one generator seeded with `config.seed`.
pub fn generate_dataset(config: &RunConfig) -> Vec<SceneAnnotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.count)
        .map(|_| {
            let n = if config.max_objects == 0 {
                0
            } else {
                rng.random_range(1..=config.max_objects)
            };
            generate_scene_with(&mut rng, config.input_size, n, config.num_classes, &config.size_mix)
        })
        .collect()
}

pub fn write_image<W: Write>(mut w: W, image: &FeatureMap) -> Result<()> {
    w.write_all(IMAGE_MAGIC)?;
    w.write_all(&4u32.to_le_bytes())?;
    for d in image.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in image.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_image<R: Read>(mut r: R) -> Result<FeatureMap> {
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != IMAGE_MAGIC {
        return Err(Error::format("image", "bad magic"));
    }
    let mut b4 = [0; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != 4 {
        return Err(Error::format("image", "rank must be 4"));
    }
    let mut shape = [0usize; 4];
    let mut b8 = [0; 8];
    for d in &mut shape {
        r.read_exact(&mut b8)?;
        *d = u64::from_le_bytes(b8) as usize;
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != shape.iter().product::<usize>() * 8 {
        return Err(Error::format(
            "image",
            format!("payload of {} bytes for shape {shape:?}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    FeatureMap::from_vec(shape, data)
}

fn image_file(id: usize) -> String {
    format!("{IMAGES_DIR}/{id:06}.bin")
}

/// True if `dir` exists and has any entry.
pub fn is_non_empty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

/// Writes scenes and the config echo into `dir`, which must be empty or
/// absent unless `force` is set.
pub fn write_dataset(dir: &Path, config: &RunConfig, scenes: &[SceneAnnotation], force: bool) -> Result<()> {
    if is_non_empty_dir(dir) {
        if !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    fs::write(dir.join(CONFIG_FILE), config.to_text())?;
    let mut ann = BufWriter::new(fs::File::create(dir.join(ANNOTATIONS_FILE))?);
    for (id, s) in scenes.iter().enumerate() {
        let file = image_file(id);
        write_image(BufWriter::new(fs::File::create(dir.join(&file))?), &s.image)?;
        let record = AnnotationRecord {
            image_id: id,
            file,
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    class_id: o.class_id,
                    bbox: o.bbox.to_array(),
                    bucket: o.bucket,
                })
                .collect(),
        };
        serde_json::to_writer(&mut ann, &record)?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneAnnotation>> {
    let path = dir.join(ANNOTATIONS_FILE);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "no dataset at {} (missing {ANNOTATIONS_FILE})",
            dir.display()
        )));
    }
    let mut scenes = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| Error::format("annotations", format!("line {}: {e}", n + 1)))?;
        let image = read_image(BufReader::new(fs::File::open(dir.join(&rec.file))?))?;
        let objects = rec
            .objects
            .into_iter()
            .map(|o| {
                let [x1, y1, x2, y2] = o.bbox;
                ObjectAnnotation {
                    class_id: o.class_id,
                    bbox: BBox::new(x1, y1, x2, y2),
                    bucket: o.bucket,
                }
            })
            .collect();
        scenes.push(SceneAnnotation { image, objects });
    }
    Ok(scenes)
}

/// The config echo stored next to a dataset, if any.
pub fn read_dataset_config(dir: &Path) -> Result<Option<RunConfig>> {
    let path = dir.join(CONFIG_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(fs::read_to_string(path)?.parse()?))
}

pub fn write_detections<W: Write>(mut w: W, detections: &[Vec<Detection>]) -> Result<()> {
    for (image_id, ds) in detections.iter().enumerate() {
        for d in ds {
            let rec = DetectionRecord {
                image_id,
                class_id: d.class_id,
                score: d.score,
                bbox: d.bbox.to_array(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}
