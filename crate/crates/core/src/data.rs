//! Synthetic corpora and the on-disk dataset layout.
//!
//! ```text
//! root/
//!   classes.txt            "<index> <name>" per line
//!   groundTruth/<id>.txt   one class name per frame
//!   features/<id>.bin      JSON header line {"rows":D,"cols":T,...} + f32 LE, row-major D×T
//!   features/<id>.csv      (alternative) T lines of D comma-separated values
//!   splits/train.txt       video ids, one per line
//!   splits/test.txt
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::sequence::{boundary_targets, LabelSequence};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic config `{key}`: {reason}")]
    ConfigInvalid { key: &'static str, reason: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("video `{video}`: features have {features} frames, labels {labels}")]
    LengthMismatch {
        video: String,
        features: usize,
        labels: usize,
    },
    #[error("video `{video}`: label `{token}` is not listed in classes.txt")]
    UnknownLabel { video: String, token: String },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_videos: usize,
    /// Inclusive range of video lengths.
    pub frames: [usize; 2],
    /// Inclusive range of segments per video.
    pub segments: [usize; 2],
    /// Shortest generated segment.
    pub min_segment_len: usize,
    pub feature_dim: usize,
    pub base_noise: f64,
    pub boundary_noise_boost: f64,
    pub boundary_jitter: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            num_videos: 75,
            frames: [260, 340],
            segments: [4, 8],
            min_segment_len: 12,
            feature_dim: 16,
            base_noise: 3.0,
            boundary_noise_boost: 3.0,
            boundary_jitter: 5,
            train_fraction: 0.8,
            seed: 2024,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |key, reason: String| Err(DataError::ConfigInvalid { key, reason });
        if self.num_classes < 2 {
            return bad(
                "num_classes",
                format!("must be >= 2, got {}", self.num_classes),
            );
        }
        if self.num_videos < 2 {
            return bad(
                "num_videos",
                format!("must be >= 2, got {}", self.num_videos),
            );
        }
        if self.frames[0] == 0 || self.frames[0] > self.frames[1] {
            return bad("frames", format!("empty range {:?}", self.frames));
        }
        if self.segments[0] == 0 || self.segments[0] > self.segments[1] {
            return bad("segments", format!("empty range {:?}", self.segments));
        }
        if self.min_segment_len == 0 {
            return bad("min_segment_len", "must be >= 1".into());
        }
        if self.segments[1] * self.min_segment_len > self.frames[0] {
            return bad(
                "segments",
                format!(
                    "{} segments of >= {} frames do not fit in {} frames",
                    self.segments[1], self.min_segment_len, self.frames[0]
                ),
            );
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be >= 1".into());
        }
        if !(self.base_noise > 0.0 && self.base_noise.is_finite()) {
            return bad(
                "base_noise",
                format!("must be > 0, got {}", self.base_noise),
            );
        }
        if !(self.boundary_noise_boost >= 1.0 && self.boundary_noise_boost.is_finite()) {
            return bad(
                "boundary_noise_boost",
                format!("must be >= 1, got {}", self.boundary_noise_boost),
            );
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(
                "train_fraction",
                format!("must lie in (0, 1), got {}", self.train_fraction),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    /// D × T
    pub features: Matrix,
    pub labels: LabelSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    pub train: Vec<Video>,
    pub test: Vec<Video>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Splits `total` frames into `k` segment lengths, each at least `min_len`.
fn segment_lengths(rng: &mut ChaCha8Rng, total: usize, k: usize, min_len: usize) -> Vec<usize> {
    let spare = total - k * min_len;
    let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.random_range(0..=spare)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(spare)) {
        out.push(min_len + c - prev);
        prev = c;
    }
    out
}

/// Generates a corpus. Labels follow a Markov chain without self-transitions;
/// each frame's feature is its class prototype plus Gaussian noise, with the
/// noise scaled by `boundary_noise_boost` within `boundary_jitter` frames of
/// a transition. Features are rounded to `f32` so that a corpus written to
/// disk and loaded back is identical.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let c = cfg.num_classes;
    let d = cfg.feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();

    let mut videos = Vec::with_capacity(cfg.num_videos);
    for v in 0..cfg.num_videos {
        let t_len = rng.random_range(cfg.frames[0]..=cfg.frames[1]);
        let k = rng.random_range(cfg.segments[0]..=cfg.segments[1]);
        let lengths = segment_lengths(&mut rng, t_len, k, cfg.min_segment_len);
        let mut labels = Vec::with_capacity(t_len);
        let mut class = rng.random_range(0..c);
        for (i, &len) in lengths.iter().enumerate() {
            if i > 0 {
                class = (class + rng.random_range(1..c)) % c;
            }
            labels.extend(std::iter::repeat_n(class, len));
        }
        let labels = LabelSequence::new(labels, c).expect("generated labels are in range");

        let mut near_boundary = vec![false; t_len];
        for tau in boundary_targets(&labels).transitions() {
            let lo = tau.saturating_sub(cfg.boundary_jitter);
            let hi = (tau + cfg.boundary_jitter).min(t_len - 1);
            near_boundary[lo..=hi].iter_mut().for_each(|b| *b = true);
        }
        let mut features = Matrix::zeros(d, t_len);
        for t in 0..t_len {
            let sigma = if near_boundary[t] {
                cfg.base_noise * cfg.boundary_noise_boost
            } else {
                cfg.base_noise
            };
            let proto = &prototypes[labels.labels()[t]];
            for (j, &p) in proto.iter().enumerate() {
                let x = p + sigma * std_normal.sample(&mut rng);
                features.set(j, t, f64::from(x as f32));
            }
        }
        videos.push(Video {
            id: format!("video_{v:03}"),
            features,
            labels,
        });
    }
    let n_train = ((cfg.num_videos as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, cfg.num_videos - 1);
    let test = videos.split_off(n_train);
    Ok(Corpus {
        class_names: (0..c).map(|i| format!("action_{i}")).collect(),
        feature_dim: d,
        train: videos,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureFormat {
    #[default]
    Binary,
    Csv,
}

fn write_binary_features(path: &Path, m: &Matrix) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = serde_json::json!({"rows": m.rows(), "cols": m.cols(), "dtype": "f32le", "layout": "row-major"});
    writeln!(w, "{header}")?;
    for &v in m.as_slice() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()
}

fn write_csv_features(path: &Path, m: &Matrix) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in 0..m.cols() {
        let line: Vec<String> = m.column(t).map(|v| format!("{}", v as f32)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()
}

/// Writes label files, one class-name token per frame.
pub fn write_labels(path: &Path, labels: &LabelSequence, class_names: &[String]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for &l in labels.labels() {
        writeln!(w, "{}", class_names[l])?;
    }
    w.flush()
}

pub fn write_dataset(corpus: &Corpus, root: &Path, format: FeatureFormat) -> Result<(), DataError> {
    for sub in ["groundTruth", "features", "splits"] {
        fs::create_dir_all(root.join(sub))?;
    }
    let classes: String = corpus
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{i} {n}\n"))
        .collect();
    fs::write(root.join("classes.txt"), classes)?;
    for (split, videos) in [("train", &corpus.train), ("test", &corpus.test)] {
        let list: String = videos.iter().map(|v| format!("{}\n", v.id)).collect();
        fs::write(root.join("splits").join(format!("{split}.txt")), list)?;
        for v in videos.iter() {
            write_labels(
                &root.join("groundTruth").join(format!("{}.txt", v.id)),
                &v.labels,
                &corpus.class_names,
            )?;
            match format {
                FeatureFormat::Binary => write_binary_features(
                    &root.join("features").join(format!("{}.bin", v.id)),
                    &v.features,
                )?,
                FeatureFormat::Csv => write_csv_features(
                    &root.join("features").join(format!("{}.csv", v.id)),
                    &v.features,
                )?,
            }
        }
    }
    Ok(())
}

fn read_existing(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DataError::MissingFile(path.to_owned()),
        _ => DataError::Io(e),
    })
}

fn read_text(path: &Path) -> Result<String, DataError> {
    String::from_utf8(read_existing(path)?).map_err(|e| DataError::Parse {
        path: path.to_owned(),
        msg: e.to_string(),
    })
}

/// Reads `classes.txt` into a name → index map and the ordered name list.
pub fn read_classes(path: &Path) -> Result<(HashMap<String, usize>, Vec<String>), DataError> {
    let text = read_text(path)?;
    let mut entries = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let mut parts = line.split_whitespace();
        let parse_err = |msg: String| DataError::Parse {
            path: path.to_owned(),
            msg: format!("line {}: {msg}", n + 1),
        };
        let idx: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("expected `<index> <name>`".into()))?;
        let name = parts
            .next()
            .ok_or_else(|| parse_err("missing class name".into()))?;
        entries.push((idx, name.to_owned()));
    }
    entries.sort();
    let names: Vec<String> = entries.iter().map(|(_, n)| n.clone()).collect();
    if entries.iter().enumerate().any(|(i, (idx, _))| *idx != i) {
        return Err(DataError::Parse {
            path: path.to_owned(),
            msg: "class indices must be 0..C without gaps".into(),
        });
    }
    let map = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    Ok((map, names))
}

/// Reads one label file with the given class map.
pub fn read_labels(
    path: &Path,
    video: &str,
    classes: &HashMap<String, usize>,
) -> Result<LabelSequence, DataError> {
    let text = read_text(path)?;
    let labels = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|tok| {
            classes
                .get(tok)
                .copied()
                .ok_or_else(|| DataError::UnknownLabel {
                    video: video.to_owned(),
                    token: tok.to_owned(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    LabelSequence::new(labels, classes.len()).map_err(|e| DataError::Parse {
        path: path.to_owned(),
        msg: e.to_string(),
    })
}

fn read_binary_features(path: &Path) -> Result<Matrix, DataError> {
    let bytes = read_existing(path)?;
    let parse_err = |msg: &str| DataError::Parse {
        path: path.to_owned(),
        msg: msg.to_owned(),
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| parse_err("missing JSON header line"))?;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| parse_err(&e.to_string()))?;
    let dim = |k: &str| {
        header[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| parse_err(&format!("header lacks `{k}`")))
    };
    let (rows, cols) = (dim("rows")?, dim("cols")?);
    let body = &bytes[nl + 1..];
    if body.len() != rows * cols * 4 {
        return Err(parse_err(&format!(
            "expected {} f32 values, found {} bytes",
            rows * cols,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data).expect("length checked"))
}

fn read_csv_features(path: &Path) -> Result<Matrix, DataError> {
    let text = read_text(path)?;
    let frames: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            line.split(',')
                .map(|v| v.trim().parse::<f32>().map(f64::from))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| DataError::Parse {
                    path: path.to_owned(),
                    msg: format!("line {}: {e}", n + 1),
                })
        })
        .collect::<Result<_, _>>()?;
    // one CSV row per frame; stored transposed as D × T
    let t_len = frames.len();
    let d = frames.first().map_or(0, Vec::len);
    if frames.iter().any(|f| f.len() != d) {
        return Err(DataError::Parse {
            path: path.to_owned(),
            msg: "rows have differing column counts".into(),
        });
    }
    let mut m = Matrix::zeros(d, t_len);
    for (t, f) in frames.iter().enumerate() {
        for (j, &v) in f.iter().enumerate() {
            m.set(j, t, v);
        }
    }
    Ok(m)
}

/// Loads `features/<id>.bin`, falling back to `features/<id>.csv`.
pub fn read_features(root: &Path, id: &str) -> Result<Matrix, DataError> {
    let bin = root.join("features").join(format!("{id}.bin"));
    if bin.exists() {
        return read_binary_features(&bin);
    }
    let csv = root.join("features").join(format!("{id}.csv"));
    if csv.exists() {
        return read_csv_features(&csv);
    }
    Err(DataError::MissingFile(bin))
}

fn read_split(path: &Path) -> Result<Vec<String>, DataError> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.trim_end_matches(".txt").to_owned())
        .collect())
}

pub fn load_dataset(root: &Path) -> Result<Corpus, DataError> {
    let (classes, class_names) = read_classes(&root.join("classes.txt"))?;
    let mut feature_dim = None;
    let mut load_split = |name: &str| -> Result<Vec<Video>, DataError> {
        read_split(&root.join("splits").join(format!("{name}.txt")))?
            .into_iter()
            .map(|id| {
                let labels = read_labels(
                    &root.join("groundTruth").join(format!("{id}.txt")),
                    &id,
                    &classes,
                )?;
                let features = read_features(root, &id)?;
                if features.cols() != labels.len() {
                    return Err(DataError::LengthMismatch {
                        video: id,
                        features: features.cols(),
                        labels: labels.len(),
                    });
                }
                match feature_dim {
                    None => feature_dim = Some(features.rows()),
                    Some(d) if d != features.rows() => {
                        return Err(DataError::Parse {
                            path: root.join("features"),
                            msg: format!(
                                "video `{id}` has {} feature channels, expected {d}",
                                features.rows()
                            ),
                        })
                    }
                    Some(_) => {}
                }
                Ok(Video {
                    id,
                    features,
                    labels,
                })
            })
            .collect()
    };
    let train = load_split("train")?;
    let test = load_split("test")?;
    Ok(Corpus {
        class_names,
        feature_dim: feature_dim.unwrap_or(0),
        train,
        test,
    })
}
