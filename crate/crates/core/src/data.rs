//! Datasets: the builtin synthetic-shapes generator, PPM/PGM directories,
//! and raw tensor files. All images are `[c x h x w]` tensors in [-1, 1].

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{image_to_tensor, read_image};
use crate::rng::{stream_rng, uniform};
use crate::tensor::{Scalar, Tensor};

pub const SHAPE_KINDS: usize = 3; // rectangle, ellipse, line

pub struct Dataset<T: Scalar> {
    pub images: Vec<Tensor<T>>,
    pub labels: Option<Vec<usize>>,
    pub channels: usize,
    pub resolution: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One synthetic image: a single shape on a flat(ish) background. Returns
/// pixel values, the foreground coverage mask, and the shape kind.
fn draw_shape(resolution: usize, channels: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>, usize) {
    let res = resolution as f64;
    let kind = rng.gen_range(0..SHAPE_KINDS);
    let bg: Vec<f64> = (0..channels).map(|_| uniform(rng, -0.9, -0.2)).collect();
    let fg: Vec<f64> = (0..channels).map(|_| uniform(rng, 0.1, 0.95)).collect();

    // geometry parameters, all relative to the resolution
    let cx = uniform(rng, 0.25, 0.75) * res;
    let cy = uniform(rng, 0.25, 0.75) * res;
    let ax = uniform(rng, 0.12, 0.3) * res;
    let ay = uniform(rng, 0.12, 0.3) * res;
    let theta = uniform(rng, 0.0, std::f64::consts::PI);
    let (x0, y0) = (cx - theta.cos() * ax * 1.4, cy - theta.sin() * ax * 1.4);
    let (x1, y1) = (cx + theta.cos() * ax * 1.4, cy + theta.sin() * ax * 1.4);
    let thickness = (0.06 * res).max(1.0);

    let inside = |x: f64, y: f64| -> bool {
        match kind {
            0 => (x - cx).abs() <= ax && (y - cy).abs() <= ay,
            1 => {
                let dx = (x - cx) / ax;
                let dy = (y - cy) / ay;
                dx * dx + dy * dy <= 1.0
            }
            _ => {
                // distance from (x, y) to the segment (x0,y0)-(x1,y1)
                let vx = x1 - x0;
                let vy = y1 - y0;
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 {
                    (((x - x0) * vx + (y - y0) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let dx = x - (x0 + t * vx);
                let dy = y - (y0 + t * vy);
                (dx * dx + dy * dy).sqrt() <= thickness
            }
        }
    };

    let mut pixels = vec![0.0f64; channels * resolution * resolution];
    let mut mask = vec![false; resolution * resolution];
    for y in 0..resolution {
        for x in 0..resolution {
            let fgp = inside(x as f64 + 0.5, y as f64 + 0.5);
            mask[y * resolution + x] = fgp;
            for c in 0..channels {
                let base = if fgp { fg[c] } else { bg[c] };
                let noise = uniform(rng, -0.01, 0.01);
                pixels[c * resolution * resolution + y * resolution + x] =
                    (base + noise).clamp(-1.0, 1.0);
            }
        }
    }
    (pixels, mask, kind)
}

/// Deterministic synthetic corpus with per-image foreground masks.
pub fn generate_synthetic_with_masks<T: Scalar>(
    count: usize,
    resolution: usize,
    channels: usize,
    seed: u64,
) -> (Dataset<T>, Vec<Vec<bool>>) {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream_rng(seed, "synth", i as u64);
        let (pixels, mask, kind) = draw_shape(resolution, channels, &mut rng);
        let data: Vec<T> = pixels.iter().map(|&v| T::from_f64(v)).collect();
        images.push(Tensor::from_vec(vec![channels, resolution, resolution], data).unwrap());
        labels.push(kind);
        masks.push(mask);
    }
    (
        Dataset {
            images,
            labels: Some(labels),
            channels,
            resolution,
        },
        masks,
    )
}

/// Deterministic synthetic corpus of single-shape images.
pub fn generate_synthetic<T: Scalar>(
    count: usize,
    resolution: usize,
    channels: usize,
    seed: u64,
) -> Dataset<T> {
    generate_synthetic_with_masks(count, resolution, channels, seed).0
}

/// Load every `.pgm`/`.ppm` in a directory (sorted by filename). An optional
/// `labels.csv` (`file,label` rows) provides class labels.
pub fn load_directory<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset {
            reason: format!("no .pgm/.ppm files in {}", dir.display()),
        });
    }
    let mut images = Vec::new();
    let mut channels = 0;
    let mut resolution = 0;
    for p in &paths {
        let img = read_image(p)?;
        if img.width != img.height {
            return Err(Error::Dataset {
                reason: format!("{} is not square", p.display()),
            });
        }
        if images.is_empty() {
            channels = img.channels;
            resolution = img.width;
        } else if img.channels != channels || img.width != resolution {
            return Err(Error::Dataset {
                reason: format!(
                    "{} has {}x{} c{} but the corpus is {}x{} c{}",
                    p.display(),
                    img.width,
                    img.height,
                    img.channels,
                    resolution,
                    resolution,
                    channels
                ),
            });
        }
        images.push(image_to_tensor(&img));
    }

    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let text = std::fs::read_to_string(&labels_path)?;
        let mut by_name = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line.starts_with("file,") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let Some((file, label)) = line.split_once(',') else {
                return Err(Error::Dataset {
                    reason: format!("labels.csv line {} is not `file,label`", i + 1),
                });
            };
            let label: usize = label.trim().parse().map_err(|_| Error::Dataset {
                reason: format!("labels.csv line {}: bad label `{}`", i + 1, label.trim()),
            })?;
            by_name.insert(file.trim().to_string(), label);
        }
        let mut labels = Vec::with_capacity(paths.len());
        for p in &paths {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            match by_name.get(&name) {
                Some(&l) => labels.push(l),
                None => {
                    return Err(Error::Dataset {
                        reason: format!("labels.csv has no entry for {name}"),
                    })
                }
            }
        }
        Some(labels)
    } else {
        None
    };

    Ok(Dataset {
        images,
        labels,
        channels,
        resolution,
    })
}

/// Load a raw tensor file: a checkpoint container holding `images` with
/// shape [count x c x h x w] and optionally `labels` [count].
pub fn load_tensor_file<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let ckpt = Checkpoint::load(path)?;
    let entry = ckpt.tensor("images").ok_or_else(|| Error::Dataset {
        reason: format!("{} has no `images` tensor", path.display()),
    })?;
    if entry.shape.len() != 4 {
        return Err(Error::Dataset {
            reason: format!("`images` must be rank 4, got {:?}", entry.shape),
        });
    }
    let (count, c, h, w) = (entry.shape[0], entry.shape[1], entry.shape[2], entry.shape[3]);
    if h != w {
        return Err(Error::Dataset {
            reason: "`images` must be square".into(),
        });
    }
    let all: Vec<T> = entry.to_vec("images")?;
    let per = c * h * w;
    let images = (0..count)
        .map(|i| Tensor::from_vec(vec![c, h, w], all[i * per..(i + 1) * per].to_vec()).unwrap())
        .collect();
    let labels = match ckpt.tensor("labels") {
        Some(l) => {
            let vals: Vec<T> = l.to_vec("labels")?;
            Some(vals.iter().map(|v| v.as_f64().round() as usize).collect())
        }
        None => None,
    };
    Ok(Dataset {
        images,
        labels,
        channels: c,
        resolution: h,
    })
}

/// Build the dataset named by the config (`synthetic`, a directory, or a
/// tensor file) and verify it against the configured resolution/channels.
pub fn build_dataset<T: Scalar>(cfg: &RunConfig) -> Result<Dataset<T>> {
    let ds = if cfg.data == "synthetic" {
        generate_synthetic(cfg.data_count, cfg.resolution, cfg.channels, cfg.seed)
    } else {
        let path = Path::new(&cfg.data);
        let ds = if path.is_dir() {
            load_directory(path)?
        } else {
            load_tensor_file(path)?
        };
        if ds.resolution != cfg.resolution || ds.channels != cfg.channels {
            return Err(Error::Dataset {
                reason: format!(
                    "dataset is {}x{} c{}, config expects {}x{} c{}",
                    ds.resolution, ds.resolution, ds.channels, cfg.resolution, cfg.resolution, cfg.channels
                ),
            });
        }
        ds
    };
    if ds.is_empty() {
        return Err(Error::Dataset {
            reason: "dataset is empty".into(),
        });
    }
    Ok(ds)
}

/// Seeded split into (train, eval) index sets; `fraction` is the train share.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream_rng(seed, "split", 0);
    let order = crate::rng::partial_shuffle(&mut rng, n, n);
    let cut = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    (order[..cut].to_vec(), order[cut..].to_vec())
}
