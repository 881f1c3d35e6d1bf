//! Labelled grayscale image sets: the synthetic shape generator and the
//! `root/<class>/<image>` directory layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{quantize, read_gray, resize_bilinear, write_pgm};
use crate::tensor::Tensor;

/// Class names of the synthetic set, in label order. They are already
/// sorted, so a written set reloads with the same labels.
pub const SYNTHETIC_CLASSES: [&str; 3] = ["cross", "disc", "square"];

pub const BOXES_FILE: &str = "boxes.csv";

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `1×H×W` tensors with values in `[0, 1]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub boxes: Option<Vec<BoundingBox>>,
    pub class_names: Vec<String>,
    /// Path of each image relative to the dataset root, e.g. `disc/disc_0003.pgm`.
    pub filenames: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Side of the (square) images, if the set is nonempty.
    pub fn image_size(&self) -> Option<usize> {
        self.images.first().map(|t| t.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.labels.len() != n || self.filenames.len() != n {
            return Err(Error::invalid("images, labels and filenames differ in length"));
        }
        if let Some(first) = self.images.first() {
            if first.rank() != 3 || first.shape()[0] != 1 {
                return Err(Error::invalid("images must be 1×H×W"));
            }
            if self.images.iter().any(|t| t.shape() != first.shape()) {
                return Err(Error::invalid("all images must share one shape"));
            }
            if self.images.iter().any(|t| t.data().iter().any(|v| !(0.0..=1.0).contains(v))) {
                return Err(Error::invalid("pixel values must lie in [0, 1]"));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::ClassOutOfRange {
                index: bad,
                classes: self.num_classes(),
            });
        }
        if let Some(boxes) = &self.boxes {
            if boxes.len() != n {
                return Err(Error::invalid("one box per image is required"));
            }
            for (b, img) in boxes.iter().zip(&self.images) {
                let (h, w) = (img.shape()[1], img.shape()[2]);
                if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= w || b.y1 >= h {
                    return Err(Error::invalid(format!("box {b:?} is outside a {w}×{h} image")));
                }
            }
        }
        Ok(())
    }

    /// Writes every image as 8-bit PGM under `root/<filename>`, plus
    /// `boxes.csv` when boxes are present.
    pub fn write_to(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        self.validate()?;
        for class in &self.class_names {
            let dir = root.join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (img, name) in self.images.iter().zip(&self.filenames) {
            let (_, h, w) = img.dims3("write")?;
            write_pgm(root.join(name), w, h, &quantize(img.data()))?;
        }
        if let Some(boxes) = &self.boxes {
            let mut csv = String::from("filename,x0,y0,x1,y1\n");
            for (b, name) in boxes.iter().zip(&self.filenames) {
                csv.push_str(&format!("{name},{},{},{},{}\n", b.x0, b.y0, b.x1, b.y1));
            }
            let path = root.join(BOXES_FILE);
            fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Cross,
    Disc,
    Square,
}

impl Shape {
    fn covers(self, dx: i64, dy: i64, r: i64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Cross => {
                let t = (r / 3).max(1);
                (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
            }
        }
    }
}

/// Three classes of bright shapes (cross, disc, square) on a dark noisy
/// background. Each image records the tight box around its shape.
///
/// Background pixels stay below 0.25 and shape pixels above 0.6, so the
/// brightest pixel always lies in the box.
pub fn generate_synthetic(per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::invalid("per_class must be at least 1"));
    }
    if image_size < 16 {
        return Err(Error::invalid("image_size must be at least 16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = image_size as i64;
    let (r_min, r_max) = ((s * 12 / 100).max(2), (s / 5).max(3));
    let shapes = [Shape::Cross, Shape::Disc, Shape::Square];
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        boxes: Some(Vec::new()),
        class_names: SYNTHETIC_CLASSES.iter().map(|c| c.to_string()).collect(),
        filenames: Vec::new(),
    };
    // Class-major order, the same order `load_directory` returns.
    for (label, &shape) in shapes.iter().enumerate() {
        for i in 0..per_class {
            let r = rng.gen_range(r_min..=r_max);
            let cx = rng.gen_range(r..s - r);
            let cy = rng.gen_range(r..s - r);
            let level = rng.gen_range(0.7..0.95);
            let mut data = Vec::with_capacity(image_size * image_size);
            let (mut x0, mut y0, mut x1, mut y1) = (s, s, 0, 0);
            for y in 0..s {
                for x in 0..s {
                    let v = if shape.covers(x - cx, y - cy, r) {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x);
                        y1 = y1.max(y);
                        (level + rng.gen_range(-0.05..0.05f64)).min(1.0)
                    } else {
                        rng.gen_range(0.0..0.25)
                    };
                    data.push(v);
                }
            }
            ds.images.push(Tensor::new(&[1, image_size, image_size], data)?);
            ds.labels.push(label);
            ds.boxes.as_mut().expect("set above").push(BoundingBox {
                x0: x0 as usize,
                y0: y0 as usize,
                x1: x1 as usize,
                y1: y1 as usize,
            });
            let name = SYNTHETIC_CLASSES[label];
            ds.filenames.push(format!("{name}/{name}_{i:04}.pgm"));
        }
    }
    Ok(ds)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "png")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn read_boxes(path: &Path) -> Result<BTreeMap<String, BoundingBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: expected filename,x0,y0,x1,y1", lineno + 1));
        let mut parts = line.split(',');
        let name = parts.next().ok_or_else(bad)?.to_string();
        let nums: Vec<usize> = parts.map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let [x0, y0, x1, y1] = nums[..] else { return Err(bad()) };
        out.insert(name, BoundingBox { x0, y0, x1, y1 });
    }
    Ok(out)
}

/// Loads `root/<class>/<image>.pgm|.png`. Class directories are sorted
/// lexicographically to assign labels; images are resized to
/// `image_size` when needed. A `boxes.csv` covering every image is loaded
/// too, unless resizing happened.
pub fn load_directory(root: impl AsRef<Path>, image_size: usize) -> Result<Dataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::format(root, "dataset directory does not exist"));
    }
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        boxes: None,
        class_names: Vec::new(),
        filenames: Vec::new(),
    };
    let mut resized = false;
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let class = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(&dir, "class directory name is not valid UTF-8"))?
            .to_string();
        let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            return Err(Error::format(&dir, "class directory holds no .pgm or .png images"));
        }
        let label = ds.class_names.len();
        for f in files {
            let img = read_gray(&f)?;
            let (_, h, w) = img.dims3("load")?;
            let img = if h == image_size && w == image_size {
                img
            } else {
                resized = true;
                resize_bilinear(&img, image_size)?
            };
            let name = f.file_name().and_then(|n| n.to_str()).expect("listed from a UTF-8 directory");
            ds.filenames.push(format!("{class}/{name}"));
            ds.images.push(img);
            ds.labels.push(label);
        }
        ds.class_names.push(class);
    }
    if ds.class_names.is_empty() {
        return Err(Error::format(root, "no class directories found"));
    }
    let boxes_path = root.join(BOXES_FILE);
    // Boxes are in native pixel coordinates, so they are dropped after a resize.
    if boxes_path.is_file() && !resized {
        let table = read_boxes(&boxes_path)?;
        ds.boxes = ds.filenames.iter().map(|f| table.get(f).copied()).collect();
    }
    ds.validate()?;
    Ok(ds)
}
