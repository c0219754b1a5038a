//! On-disk dataset layout: `images/<id>.pgm`, `masks/<id>.pgm`, `split.txt`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;

use super::pgm::{read_pgm, write_pgm, Gray};

/// One image with its label mask. Image values lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Vec<f64>,
    pub mask: LabelMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Vec<f64>, mask: LabelMask) -> Result<Self> {
        let id = id.into();
        if image.len() != mask.len() {
            return Err(Error::SampleShape {
                id,
                image: vec![image.len()],
                mask: vec![mask.height(), mask.width()],
            });
        }
        Ok(Sample { id, image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Image quantized to bytes with `round(v · 255)`.
    pub fn image_gray(&self) -> Gray {
        let pixels = self
            .image
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Gray {
            width: self.width(),
            height: self.height(),
            pixels,
        }
    }

    pub fn mask_gray(&self) -> Gray {
        Gray {
            width: self.width(),
            height: self.height(),
            pixels: self.mask.labels().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ids per split, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn ids_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// Parses `"<split> <id>"` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = DatasetSplit::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::MalformedSplit { line: i + 1, msg };
            let mut parts = line.split_whitespace();
            let (Some(name), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!("expected \"<split> <id>\", got {line:?}")));
            };
            let split = Split::parse(name).ok_or_else(|| bad(format!("unknown split {name:?}")))?;
            if !seen.insert(id.to_string()) {
                return Err(bad(format!("id {id:?} listed twice")));
            }
            out.ids_mut(split).push(id.to_string());
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for split in Split::ALL {
            for id in self.ids(split) {
                s.push_str(&format!("{split} {id}\n"));
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Samples of one split, in split-file order.
    pub fn subset(&self, split: Split) -> Vec<Sample> {
        self.split
            .ids(split)
            .iter()
            .filter_map(|id| self.get(id).cloned())
            .collect()
    }
}

fn stems(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Loads every image/mask pair under `root` and the split file.
pub fn load_dataset(root: &Path, classes: usize) -> Result<Dataset> {
    let image_dir = root.join("images");
    let mask_dir = root.join("masks");
    let images = stems(&image_dir)?;
    let masks = stems(&mask_dir)?;
    if let Some(id) = images.difference(&masks).next() {
        return Err(Error::MissingMask(id.clone()));
    }
    if let Some(id) = masks.difference(&images).next() {
        return Err(Error::MissingImage(id.clone()));
    }

    let split_path = root.join("split.txt");
    let text = std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let split = DatasetSplit::parse(&text)?;
    let mut assigned: BTreeMap<&str, Split> = BTreeMap::new();
    for s in Split::ALL {
        for id in split.ids(s) {
            if !images.contains(id) {
                return Err(Error::MalformedSplit {
                    line: 0,
                    msg: format!("id {id:?} has no image"),
                });
            }
            assigned.insert(id, s);
        }
    }
    if let Some(id) = images.iter().find(|id| !assigned.contains_key(id.as_str())) {
        return Err(Error::MalformedSplit {
            line: 0,
            msg: format!("sample {id:?} is not assigned to any split"),
        });
    }

    let mut samples = Vec::with_capacity(images.len());
    for id in &images {
        let img = read_pgm(&image_dir.join(format!("{id}.pgm")))?;
        let msk = read_pgm(&mask_dir.join(format!("{id}.pgm")))?;
        if (img.width, img.height) != (msk.width, msk.height) {
            return Err(Error::SampleShape {
                id: id.clone(),
                image: vec![img.height, img.width],
                mask: vec![msk.height, msk.width],
            });
        }
        let mask = LabelMask::new(msk.height, msk.width, msk.pixels)?;
        mask.check_classes(classes)?;
        let image = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        samples.push(Sample::new(id.clone(), image, mask)?);
    }
    Ok(Dataset { samples, split })
}

/// Writes `samples` and `split` in the layout [`load_dataset`] reads.
pub fn write_dataset(root: &Path, samples: &[Sample], split: &DatasetSplit) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        write_pgm(&s.image_gray(), &root.join("images").join(format!("{}.pgm", s.id)))?;
        write_pgm(&s.mask_gray(), &root.join("masks").join(format!("{}.pgm", s.id)))?;
    }
    let path = root.join("split.txt");
    std::fs::write(&path, split.to_text()).map_err(|e| Error::io(&path, e))
}

/// Split sizes for `n` items by the largest-remainder rule. Ties in the
/// remainder go to the earlier split (train, then val, then test).
pub fn split_counts(n: usize, fracs: [f64; 3]) -> Result<[usize; 3]> {
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fracs:?} must be in [0, 1] and sum to 1"
        )));
    }
    let exact: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) {
        let samples = vec![
            Sample::new(
                "a",
                vec![0.0, 1.0, 0.5, 0.25],
                LabelMask::new(2, 2, vec![0, 1, 2, 3]).unwrap(),
            )
            .unwrap(),
            Sample::new("b", vec![1.0; 4], LabelMask::filled(2, 2, 0).unwrap()).unwrap(),
        ];
        let split = DatasetSplit {
            train: vec!["a".into()],
            val: vec![],
            test: vec!["b".into()],
        };
        write_dataset(dir, &samples, &split).unwrap();
    }

    #[test]
    fn loads_written_dataset() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_dataset(dir.path(), 4).unwrap();
        assert_eq!(ds.split.counts(), (1, 0, 1));
        let a = ds.get("a").unwrap();
        assert_eq!(a.image[1], 1.0);
        assert_eq!(a.image[2], 128.0 / 255.0);
        assert_eq!(a.mask.labels(), &[0, 1, 2, 3]);
        assert!(matches!(
            load_dataset(dir.path(), 3),
            Err(Error::ClassOutOfRange { value: 3, classes: 3 })
        ));
    }

    #[test]
    fn orphan_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        std::fs::remove_file(dir.path().join("masks/b.pgm")).unwrap();
        assert!(matches!(load_dataset(dir.path(), 4), Err(Error::MissingMask(id)) if id == "b"));

        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        std::fs::remove_file(dir.path().join("images/a.pgm")).unwrap();
        assert!(matches!(load_dataset(dir.path(), 4), Err(Error::MissingImage(id)) if id == "a"));
    }

    #[test]
    fn split_parse_errors() {
        assert!(matches!(
            DatasetSplit::parse("train a\nbogus b\n"),
            Err(Error::MalformedSplit { line: 2, .. })
        ));
        assert!(matches!(
            DatasetSplit::parse("train"),
            Err(Error::MalformedSplit { line: 1, .. })
        ));
        assert!(matches!(
            DatasetSplit::parse("train a\ntest a"),
            Err(Error::MalformedSplit { line: 2, .. })
        ));
        let s = DatasetSplit::parse("# header\n\ntrain x\nval y\n").unwrap();
        assert_eq!(s.counts(), (1, 1, 0));
        assert_eq!(DatasetSplit::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(split_counts(100, [0.6, 0.1, 0.3]).unwrap(), [60, 10, 30]);
        assert_eq!(split_counts(1, [0.6, 0.1, 0.3]).unwrap(), [1, 0, 0]);
        assert_eq!(split_counts(16, [1.0, 0.0, 0.0]).unwrap(), [16, 0, 0]);
        assert_eq!(split_counts(7, [0.5, 0.25, 0.25]).unwrap(), [3, 2, 2]);
        assert!(split_counts(5, [0.5, 0.5, 0.5]).is_err());
        for n in 0..50 {
            assert_eq!(split_counts(n, [0.3, 0.3, 0.4]).unwrap().iter().sum::<usize>(), n);
        }
    }
}
