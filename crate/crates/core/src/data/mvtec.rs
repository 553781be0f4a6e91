//! Reading and writing the MVTec directory layout:
//! `train/good`, `test/good`, `test/<defect>` and `ground_truth/<defect>/<stem>_mask.png`.

use std::fs;
use std::path::{Path, PathBuf};

use super::png_io::{read_png, write_png};
use super::synth::synthesize_category;
use super::{to_u8, CategoryData, CategorySpec, Label, Mask, Sample};
use crate::error::{Error, Result};
use crate::nn::kernels::resize_plane;
use crate::nn::Tensor;

fn image_bytes(s: &Sample) -> Vec<u8> {
    let (_, h, w) = s.image.chw().expect("image is CHW");
    let n = h * w;
    let d = s.image.data();
    (0..n).flat_map(|p| (0..3).map(move |c| to_u8(d[c * n + p]))).collect()
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes an in-memory category below `root/<name>`.
pub fn write_category(data: &CategoryData, root: &Path) -> Result<PathBuf> {
    let base = root.join(&data.name);
    let put = |dir: PathBuf, s: &Sample| -> Result<()> {
        mkdir(&dir)?;
        let (_, h, w) = s.image.chw()?;
        write_png(&dir.join(format!("{}.png", s.name)), h, w, false, &image_bytes(s))
    };
    for s in &data.train {
        put(base.join("train/good"), s)?;
    }
    for s in &data.test_good {
        put(base.join("test/good"), s)?;
    }
    for s in &data.test_bad {
        let defect = s.defect.as_deref().unwrap_or("defect");
        put(base.join("test").join(defect), s)?;
        let gt = base.join("ground_truth").join(defect);
        mkdir(&gt)?;
        let m = &s.mask;
        let bytes: Vec<u8> = m.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        write_png(&gt.join(format!("{}_mask.png", s.name)), m.height, m.width, true, &bytes)?;
    }
    Ok(base)
}

/// Generates `spec` and writes it below `root/<name>`.
pub fn generate_category(spec: &CategorySpec, root: &Path) -> Result<PathBuf> {
    write_category(&synthesize_category(spec)?, root)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_image(path: &Path, hw: Option<(usize, usize)>) -> Result<Tensor> {
    let d = read_png(path)?;
    let n = d.height * d.width;
    let mut planes = vec![0.0f32; 3 * n];
    for p in 0..n {
        let px = &d.pixels[p * d.channels..(p + 1) * d.channels];
        for c in 0..3 {
            let v = if d.channels < 3 { px[0] } else { px[c] };
            planes[c * n + p] = v as f32 / 255.0;
        }
    }
    let (oh, ow) = hw.unwrap_or((d.height, d.width));
    let data = if (oh, ow) == (d.height, d.width) {
        planes
    } else {
        planes
            .chunks(n)
            .flat_map(|plane| resize_plane(plane, d.height, d.width, oh, ow))
            .collect()
    };
    Tensor::new(vec![3, oh, ow], data)
}

fn load_mask(path: &Path, hw: (usize, usize)) -> Result<Mask> {
    let d = read_png(path)?;
    let data = d.pixels.chunks(d.channels).map(|px| px[0] >= 128).collect();
    Ok(Mask {
        height: d.height,
        width: d.width,
        data,
    }
    .resize(hw.0, hw.1))
}

/// Loads `root/<category>`, resizing images (bilinear) and masks (nearest) to `input_hw` when given.
pub fn load_mvtec(root: &Path, category: &str, input_hw: Option<(usize, usize)>) -> Result<CategoryData> {
    let base = root.join(category);
    let good = |dir: PathBuf| -> Result<Vec<Sample>> {
        list_pngs(&dir)?
            .iter()
            .map(|p| {
                let image = load_image(p, input_hw)?;
                let (_, h, w) = image.chw()?;
                Ok(Sample {
                    name: stem(p),
                    image,
                    label: Label::Good,
                    defect: None,
                    mask: Mask::empty(h, w),
                })
            })
            .collect()
    };
    let train = good(base.join("train/good"))?;
    if train.is_empty() {
        return Err(Error::data(format!("no training images in {}", base.join("train/good").display())));
    }
    let test_good = good(base.join("test/good"))?;
    let test_dir = base.join("test");
    let mut defects: Vec<String> = match fs::read_dir(&test_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != "good")
            .collect(),
        Err(_) => Vec::new(),
    };
    defects.sort();
    let mut test_bad = Vec::new();
    for defect in defects {
        for p in list_pngs(&test_dir.join(&defect))? {
            let image = load_image(&p, input_hw)?;
            let (_, h, w) = image.chw()?;
            let mask_path = base.join("ground_truth").join(&defect).join(format!("{}_mask.png", stem(&p)));
            if !mask_path.is_file() {
                return Err(Error::data(format!("missing mask {} for {}", mask_path.display(), p.display())));
            }
            let mask = load_mask(&mask_path, (h, w))?;
            test_bad.push(Sample {
                name: stem(&p),
                image,
                label: Label::Anomalous,
                defect: Some(defect.clone()),
                mask,
            });
        }
    }
    Ok(CategoryData {
        name: category.to_string(),
        train,
        test_good,
        test_bad,
    })
}
