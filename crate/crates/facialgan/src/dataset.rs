//! On-disk dataset: `images/<id>.png`, `masks/<id>.png` (raw class ids) and
//! `attributes.csv` with header `id,male`.

use std::fs;
use std::path::{Path, PathBuf};

use facialgan_core::datapipe::{remap_classes, resize_nearest, DomainLabel, Sample, SampleSource};
use facialgan_core::toyset::ToyFace;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::wire;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub male: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// `(train, val, test)` sizes: one thirtieth each for val and test, so a
/// 30,000-image set splits 28,000 / 1,000 / 1,000.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = n / 30;
    (n - 2 * held, held, held)
}

/// Parse `attributes.csv`; the header must be exactly `id,male` and values
/// 0 or 1.
pub fn read_attributes(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Decode(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["id", "male"] {
        return Err(Error::Decode(format!(
            "{}: header must be `id,male`, found `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
        let male = match &row[1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Decode(format!(
                    "{}: row {}: male must be 0 or 1, found `{other}`",
                    path.display(),
                    line + 2
                )))
            }
        };
        out.push(Record {
            id: row[0].to_string(),
            male,
        });
    }
    Ok(out)
}

/// Decode one record, resizing the image bilinearly and the mask by nearest
/// neighbour to `image_size`.
pub fn load_sample(root: &Path, record: &Record, image_size: usize) -> Result<Sample> {
    let img_path = root.join("images").join(format!("{}.png", record.id));
    let mask_path = root.join("masks").join(format!("{}.png", record.id));
    let img_bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let mask_bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
    let image = wire::decode_image(&img_bytes, Some(image_size))
        .map_err(|e| Error::Decode(format!("{}: {e}", img_path.display())))?;
    let (h, w, raw) =
        wire::decode_indexed(&mask_bytes).map_err(|e| Error::Decode(format!("{}: {e}", mask_path.display())))?;
    let raw = if (h, w) == (image_size, image_size) {
        raw
    } else {
        resize_nearest(&raw, (h, w), (image_size, image_size))
    };
    let mask = remap_classes(image_size, image_size, &raw)?;
    Ok(Sample {
        id: record.id.clone(),
        image,
        mask,
        gender: if record.male { DomainLabel::Male } else { DomainLabel::Female },
    })
}

/// A directory dataset with its records in split order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub image_size: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    /// Records sorted by id. With a `split_seed` they are additionally
    /// shuffled by that seed before splitting.
    pub fn open(root: &Path, image_size: usize, split_seed: Option<u64>) -> Result<Self> {
        let mut records = read_attributes(&root.join("attributes.csv"))?;
        records.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Decode(format!("duplicate id {}", w[0].id)));
        }
        if let Some(seed) = split_seed {
            records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Self {
            root: root.to_path_buf(),
            image_size,
            records,
        })
    }

    pub fn all(&self) -> DirSource {
        DirSource {
            root: self.root.clone(),
            image_size: self.image_size,
            records: self.records.clone(),
        }
    }

    pub fn split(&self, split: Split) -> DirSource {
        let (train, val, _) = split_sizes(self.records.len());
        let range = match split {
            Split::Train => 0..train,
            Split::Val => train..train + val,
            Split::Test => train + val..self.records.len(),
        };
        DirSource {
            root: self.root.clone(),
            image_size: self.image_size,
            records: self.records[range].to_vec(),
        }
    }
}

/// Lazily decoded samples of one split.
#[derive(Clone, Debug)]
pub struct DirSource {
    pub root: PathBuf,
    pub image_size: usize,
    pub records: Vec<Record>,
}

impl DirSource {
    pub fn load(&self, index: usize) -> Result<Sample> {
        let record = self
            .records
            .get(index)
            .ok_or_else(|| Error::Decode(format!("index {index} out of range")))?;
        load_sample(&self.root, record, self.image_size)
    }
}

impl SampleSource for DirSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn get(&self, index: usize) -> facialgan_core::Result<Sample> {
        self.load(index).map_err(|e| match e {
            Error::Core(c) => c,
            other => facialgan_core::Error::Source(other.to_string()),
        })
    }

    fn gender(&self, index: usize) -> facialgan_core::Result<DomainLabel> {
        let r = self
            .records
            .get(index)
            .ok_or_else(|| facialgan_core::Error::Source(format!("index {index} out of range")))?;
        Ok(if r.male { DomainLabel::Male } else { DomainLabel::Female })
    }
}

/// Write faces in the dataset layout.
pub fn write_dataset(root: &Path, faces: &[(String, ToyFace)]) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut csv = String::from("id,male\n");
    for (id, face) in faces {
        let img = image::RgbImage::from_raw(face.size as u32, face.size as u32, face.rgb.clone())
            .ok_or_else(|| Error::Decode(format!("{id}: pixel buffer size")))?;
        let png = wire::encode_image(&wire::rgb8_to_image(&img)?)?;
        let path = root.join("images").join(format!("{id}.png"));
        fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
        let mask = wire::encode_indexed(face.size, face.size, &face.raw_labels, &wire::RAW_PALETTE)?;
        let path = root.join("masks").join(format!("{id}.png"));
        fs::write(&path, mask).map_err(|e| Error::io(&path, e))?;
        csv.push_str(&format!("{id},{}\n", (face.gender == DomainLabel::Male) as u8));
    }
    let path = root.join("attributes.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// `n` toy faces named `toy-00000`, ... written under `root`.
pub fn write_toy_dataset(root: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    let faces: Vec<(String, ToyFace)> = (0..n)
        .map(|i| (format!("toy-{i:05}"), facialgan_core::toyset::toy_face(size, seed, i as u64)))
        .collect();
    write_dataset(root, &faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use facialgan_core::toyset::toy_source;

    #[test]
    fn split_sizes_examples() {
        assert_eq!(split_sizes(30_000), (28_000, 1_000, 1_000));
        assert_eq!(split_sizes(16), (16, 0, 0));
        assert_eq!(split_sizes(60), (56, 2, 2));
    }

    #[test]
    fn toy_dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dataset(dir.path(), 4, 32, 9).unwrap();
        let ds = Dataset::open(dir.path(), 32, None).unwrap();
        let mem = toy_source(4, 32, 9).unwrap();
        let src = ds.all();
        assert_eq!(src.len(), 4);
        for i in 0..4 {
            let a = src.get(i).unwrap();
            assert_eq!(a, mem.get(i).unwrap());
            assert_eq!(src.gender(i).unwrap(), a.gender);
            assert_eq!(a, src.get(i).unwrap());
        }
    }

    #[test]
    fn resizes_on_load() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dataset(dir.path(), 1, 32, 0).unwrap();
        let s = Dataset::open(dir.path(), 16, None).unwrap().all().get(0).unwrap();
        assert_eq!((s.image.height(), s.mask.height()), (16, 16));
    }

    #[test]
    fn header_and_values_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("attributes.csv");
        fs::write(&p, "id,gender\na,1\n").unwrap();
        assert!(matches!(read_attributes(&p), Err(Error::Decode(_))));
        fs::write(&p, "id,male\na,2\n").unwrap();
        assert!(matches!(read_attributes(&p), Err(Error::Decode(_))));
        fs::write(&p, "id,male\nb,1\na,0\n").unwrap();
        let ds = Dataset::open(dir.path(), 8, None).unwrap();
        assert_eq!(ds.records[0], Record { id: "a".into(), male: false });
    }

    #[test]
    fn unreadable_png_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dataset(dir.path(), 1, 8, 0).unwrap();
        fs::write(dir.path().join("images/toy-00000.png"), b"nope").unwrap();
        let err = Dataset::open(dir.path(), 8, None).unwrap().all().load(0).unwrap_err();
        assert!(matches!(err, Error::Decode(_)), "{err}");
    }

    #[test]
    fn splits_partition_in_id_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("attributes.csv");
        let body: String = (0..60).rev().map(|i| format!("{i:03},{}\n", i % 2)).collect();
        fs::write(&p, format!("id,male\n{body}")).unwrap();
        let ds = Dataset::open(dir.path(), 8, None).unwrap();
        let ids = |s: Split| ds.split(s).records.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(Split::Val), ["056", "057"]);
        assert_eq!(ids(Split::Test), ["058", "059"]);
        assert_eq!(ids(Split::Train).len(), 56);
        let shuffled = Dataset::open(dir.path(), 8, Some(1)).unwrap();
        let mut all = shuffled.records.clone();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        assert_eq!(all, ds.records);
        assert_ne!(shuffled.records, ds.records);
    }
}
