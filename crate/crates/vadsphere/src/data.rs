//! Manifests, feature files, preprocessing and synthetic datasets.
//!
//! A manifest is UTF-8 text with one utterance per line, tab-separated:
//! `id, feature_path, valence, arousal, dominance, category`. Lines starting
//! with `#` are comments. Relative feature paths resolve against the
//! manifest's directory.
//!
//! A feature file is binary: 8-byte magic `EMOFEAT1`, two little-endian u32
//! values (frame count T, feature width D), then `T * D` little-endian f32
//! values, frames outermost.

use crate::geometry::{
    assign_region, denormalize_vad, normalize_vad, to_spherical, GeometryError, RegionPartition,
    VadPoint,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Magic bytes that open every feature file.
pub const FEATURE_MAGIC: &[u8; 8] = b"EMOFEAT1";

/// Category value marking annotator disagreement; excluded by preprocessing.
pub const AMBIGUOUS_CATEGORY: &str = "X";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest {path} is invalid:\n  {}", issues.join("\n  "))]
    ManifestInvalid { path: PathBuf, issues: Vec<String> },
    #[error("feature file {path}: not a feature file (bad magic)")]
    BadFeatureMagic { path: PathBuf },
    #[error("feature file {path}: truncated or malformed ({detail})")]
    FeatureFormat { path: PathBuf, detail: String },
    #[error("feature file {path}: width {got} does not match expected {expected}")]
    FeatureDimMismatch {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Where a record landed after splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub feature_path: PathBuf,
    pub vad_raw: VadPoint,
    pub category: String,
    pub split: Split,
}

impl UtteranceRecord {
    /// Normalized VAD components of this record.
    pub fn vad_normalized(&self) -> Result<[f64; 3], GeometryError> {
        Ok(normalize_vad(&self.vad_raw)?.components())
    }

    /// Region label of this record under the partition.
    pub fn region(&self, part: &RegionPartition) -> Result<usize, GeometryError> {
        let norm = normalize_vad(&self.vad_raw)?;
        Ok(assign_region(part, &to_spherical(&norm)?).0)
    }
}

/// Records plus the partition they are counted under.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<UtteranceRecord>,
    pub partition: RegionPartition,
    pub region_counts: Vec<u64>,
}

impl Dataset {
    pub fn from_records(
        records: Vec<UtteranceRecord>,
        partition: RegionPartition,
    ) -> Result<Self, GeometryError> {
        let region_counts = compute_region_counts(&records, &partition)?;
        Ok(Dataset {
            records,
            partition,
            region_counts,
        })
    }
}

/// Parses a manifest file. All problems (malformed lines with their line
/// numbers, out-of-range VAD values with their ids, duplicate ids) are
/// collected and reported together.
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 6 {
            issues.push(format!(
                "line {lineno}: expected 6 tab-separated fields, got {}",
                fields.len()
            ));
            continue;
        }
        let id = fields[0].to_string();
        if !seen_ids.insert(id.clone()) {
            issues.push(format!("line {lineno}: duplicate id {id}"));
            continue;
        }
        let mut vad = [0.0f64; 3];
        let mut parse_failed = false;
        for (slot, (name, raw)) in vad.iter_mut().zip(
            ["valence", "arousal", "dominance"]
                .iter()
                .zip(&fields[2..5]),
        ) {
            match raw.parse::<f64>() {
                Ok(v) => *slot = v,
                Err(_) => {
                    issues.push(format!("line {lineno}: {name} `{raw}` is not a number"));
                    parse_failed = true;
                }
            }
        }
        if parse_failed {
            continue;
        }
        match VadPoint::raw(vad[0], vad[1], vad[2]) {
            Ok(point) => {
                let raw_path = Path::new(fields[1]);
                let feature_path = if raw_path.is_absolute() {
                    raw_path.to_path_buf()
                } else {
                    base_dir.join(raw_path)
                };
                records.push(UtteranceRecord {
                    id,
                    feature_path,
                    vad_raw: point,
                    category: fields[5].to_string(),
                    split: Split::Unassigned,
                });
            }
            Err(e) => issues.push(format!("id {id}: {e}")),
        }
    }
    if !issues.is_empty() {
        return Err(DataError::ManifestInvalid {
            path: path.to_path_buf(),
            issues,
        });
    }
    Ok(records)
}

/// Drops records whose category is the ambiguity marker. Returns the
/// surviving records (original order) and the number removed.
pub fn filter_x_labels(records: Vec<UtteranceRecord>) -> (Vec<UtteranceRecord>, usize) {
    let before = records.len();
    let kept: Vec<UtteranceRecord> = records
        .into_iter()
        .filter(|r| r.category != AMBIGUOUS_CATEGORY)
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Result of the per-category split.
#[derive(Debug, Clone)]
pub struct CategorySplit {
    /// `per_class` seeded samples from each category.
    pub val: Vec<UtteranceRecord>,
    /// Everything else.
    pub test: Vec<UtteranceRecord>,
    /// Categories with fewer than `per_class` records; these contribute all
    /// their records to `val`.
    pub undersized: Vec<String>,
}

/// Samples `per_class` records per category into `val` (seeded, without
/// replacement); the remainder goes to `test`. Categories are processed in
/// sorted order so the split depends only on (records, per_class, seed).
pub fn split_per_category(
    records: &[UtteranceRecord],
    per_class: usize,
    seed: u64,
) -> CategorySplit {
    let mut by_category: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (idx, r) in records.iter().enumerate() {
        by_category.entry(r.category.as_str()).or_default().push(idx);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_indices = Vec::new();
    let mut test_indices = Vec::new();
    let mut undersized = Vec::new();
    for (category, mut indices) in by_category {
        if indices.len() < per_class {
            undersized.push(category.to_string());
            val_indices.extend(indices);
            continue;
        }
        // Fisher-Yates on the per-category index list.
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        val_indices.extend(&indices[..per_class]);
        test_indices.extend(&indices[per_class..]);
    }
    val_indices.sort_unstable();
    test_indices.sort_unstable();

    let tag = |indices: &[usize], split: Split| {
        indices
            .iter()
            .map(|&i| UtteranceRecord {
                split,
                ..records[i].clone()
            })
            .collect()
    };
    CategorySplit {
        val: tag(&val_indices, Split::Val),
        test: tag(&test_indices, Split::Test),
        undersized,
    }
}

/// Number of records per region under the partition. Sums to `records.len()`.
pub fn compute_region_counts(
    records: &[UtteranceRecord],
    partition: &RegionPartition,
) -> Result<Vec<u64>, GeometryError> {
    let mut counts = vec![0u64; partition.n_regions()];
    for r in records {
        counts[r.region(partition)?] += 1;
    }
    Ok(counts)
}

/// Reads just the header of a feature file: `(frames, width)`.
pub fn feature_dims(path: &Path) -> Result<(usize, usize), DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| DataError::FeatureFormat {
        path: path.to_path_buf(),
        detail: "missing header".into(),
    })?;
    if &magic != FEATURE_MAGIC {
        return Err(DataError::BadFeatureMagic {
            path: path.to_path_buf(),
        });
    }
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| DataError::FeatureFormat {
        path: path.to_path_buf(),
        detail: "missing frame count".into(),
    })?;
    let frames = u32::from_le_bytes(buf) as usize;
    r.read_exact(&mut buf).map_err(|_| DataError::FeatureFormat {
        path: path.to_path_buf(),
        detail: "missing feature width".into(),
    })?;
    Ok((frames, u32::from_le_bytes(buf) as usize))
}

/// Reads a `T x expected_dim` feature matrix (f32 in the file, f64 in memory).
pub fn load_features(path: &Path, expected_dim: usize) -> Result<Tensor, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = BufReader::new(file);
    let format_err = |detail: &str| DataError::FeatureFormat {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("missing header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(DataError::BadFeatureMagic {
            path: path.to_path_buf(),
        });
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf)
        .map_err(|_| format_err("missing frame count"))?;
    let frames = u32::from_le_bytes(u32_buf) as usize;
    r.read_exact(&mut u32_buf)
        .map_err(|_| format_err("missing feature width"))?;
    let width = u32::from_le_bytes(u32_buf) as usize;
    if frames == 0 {
        return Err(format_err("frame count is zero"));
    }
    if width != expected_dim {
        return Err(DataError::FeatureDimMismatch {
            path: path.to_path_buf(),
            expected: expected_dim,
            got: width,
        });
    }

    let mut bytes = vec![0u8; frames * width * 4];
    r.read_exact(&mut bytes).map_err(|_| {
        format_err(&format!(
            "expected {} f32 values after the header",
            frames * width
        ))
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|_| format_err("read error"))? != 0 {
        return Err(format_err("trailing bytes after the data block"));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Ok(Tensor::from_vec(&[frames, width], data).expect("length matches header"))
}

/// Writes a `T x D` feature matrix. Values are stored as f32.
pub fn write_features(path: &Path, features: &Tensor) -> Result<(), DataError> {
    let io_err = |source: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let shape = features.shape();
    debug_assert_eq!(shape.len(), 2);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(FEATURE_MAGIC).map_err(io_err)?;
    w.write_all(&(shape[0] as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(shape[1] as u32).to_le_bytes()).map_err(io_err)?;
    for &v in features.data() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Settings for the synthetic dataset generator.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n: usize,
    pub feat_dim: usize,
    pub frames: usize,
    pub noise: f64,
    pub seed: u64,
    /// Angular width used to derive category strings from region labels.
    pub partition: RegionPartition,
}

/// Draws normalized VAD targets uniformly from the cube, embeds each triple
/// through a fixed seeded affine map into feature space, and adds per-frame
/// Gaussian noise. The temporal mean of each feature matrix is therefore an
/// affine function of the target (exactly so at `noise = 0`), which makes the
/// regression task solvable by construction. Categories are the stringified
/// region labels (`"R3"`), so the classification task is solvable too.
///
/// Writes `manifest.tsv` plus one feature file per record under
/// `out_dir/features/` and returns the dataset.
pub fn synthesize_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<Dataset, DataError> {
    let io_err = |path: &Path, source: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let features_dir = out_dir.join("features");
    std::fs::create_dir_all(&features_dir).map_err(|e| io_err(&features_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Fixed affine embedding of the VAD triple into feature space. The offset
    // keeps the map injective through the network's input normalization.
    let embed_w: Vec<f64> = (0..cfg.feat_dim * 3)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let embed_b: Vec<f64> = (0..cfg.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let noise_dist = Normal::new(0.0, 1.0).expect("valid normal");

    let mut records = Vec::with_capacity(cfg.n);
    let manifest_path = out_dir.join("manifest.tsv");
    let mut manifest = BufWriter::new(
        File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?,
    );
    writeln!(manifest, "# id\tfeature_path\tvalence\tarousal\tdominance\tcategory")
        .map_err(|e| io_err(&manifest_path, e))?;

    for i in 0..cfg.n {
        let norm = VadPoint::normalized(
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        )
        .expect("in range");
        let raw = denormalize_vad(&norm)?;
        let region = assign_region(&cfg.partition, &to_spherical(&norm)?);
        let category = format!("R{}", region.0);

        let mut data = Vec::with_capacity(cfg.frames * cfg.feat_dim);
        let components = norm.components();
        for _ in 0..cfg.frames {
            for d in 0..cfg.feat_dim {
                let clean: f64 = embed_b[d]
                    + (0..3).map(|c| embed_w[d * 3 + c] * components[c]).sum::<f64>();
                data.push(clean + cfg.noise * noise_dist.sample(&mut rng));
            }
        }
        let features =
            Tensor::from_vec(&[cfg.frames, cfg.feat_dim], data).expect("length matches");
        let id = format!("synth-{i:05}");
        let rel_path = format!("features/{id}.feat");
        let feature_path = features_dir.join(format!("{id}.feat"));
        write_features(&feature_path, &features)?;

        writeln!(
            manifest,
            "{id}\t{rel_path}\t{}\t{}\t{}\t{category}",
            raw.v, raw.a, raw.d
        )
        .map_err(|e| io_err(&manifest_path, e))?;

        records.push(UtteranceRecord {
            id,
            feature_path,
            vad_raw: raw,
            category,
            split: Split::Unassigned,
        });
    }
    manifest.flush().map_err(|e| io_err(&manifest_path, e))?;
    Dataset::from_records(records, cfg.partition).map_err(DataError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_partition;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("vadsphere-data-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn record(id: &str, category: &str, vad: [f64; 3]) -> UtteranceRecord {
        UtteranceRecord {
            id: id.to_string(),
            feature_path: PathBuf::from(format!("{id}.feat")),
            vad_raw: VadPoint::raw(vad[0], vad[1], vad[2]).unwrap(),
            category: category.to_string(),
            split: Split::Unassigned,
        }
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = temp_dir("manifest");
        let path = dir.join("m.tsv");

        std::fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());

        std::fs::write(
            &path,
            "# comment\nu1\tu1.feat\t4\t4\t4\tN\nu2\tu2.feat\t5.5\t2.5\t4.0\tH\nu3\tu3.feat\t7\t1\t7\tX\n",
        )
        .unwrap();
        let records = load_manifest(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].id, "u1");
        assert_eq!(records[1].vad_raw.v, 5.5);
        assert_eq!(records[2].category, "X");
        assert_eq!(records[0].feature_path, dir.join("u1.feat"));

        // Out-of-range VAD names the offending id.
        std::fs::write(&path, "bad\tf.feat\t8.0\t4\t4\tN\n").unwrap();
        match load_manifest(&path) {
            Err(DataError::ManifestInvalid { issues, .. }) => {
                assert_eq!(issues.len(), 1);
                assert!(issues[0].contains("bad"), "{issues:?}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }

        // Malformed line reported with its line number.
        std::fs::write(&path, "u1\tf.feat\t4\t4\t4\tN\nonly-three\tfields\toops\n").unwrap();
        match load_manifest(&path) {
            Err(DataError::ManifestInvalid { issues, .. }) => {
                assert!(issues[0].contains("line 2"), "{issues:?}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }

        // Duplicate ids are rejected.
        std::fs::write(&path, "u1\tf.feat\t4\t4\t4\tN\nu1\tg.feat\t4\t4\t4\tN\n").unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(DataError::ManifestInvalid { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn x_label_filtering() {
        let records = vec![
            record("a", "N", [4.0, 4.0, 4.0]),
            record("b", "X", [4.0, 4.0, 4.0]),
            record("c", "H", [5.0, 4.0, 4.0]),
            record("d", "X", [3.0, 4.0, 4.0]),
            record("e", "N", [4.0, 5.0, 4.0]),
        ];
        let (kept, removed) = filter_x_labels(records.clone());
        assert_eq!(removed, 2);
        assert_eq!(
            kept.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["a", "c", "e"]
        );

        let (kept, removed) = filter_x_labels(kept);
        assert_eq!(removed, 0);
        assert_eq!(kept.len(), 3);

        let all_x = vec![record("a", "X", [4.0, 4.0, 4.0])];
        let (kept, removed) = filter_x_labels(all_x);
        assert!(kept.is_empty());
        assert_eq!(removed, 1);
    }

    #[test]
    fn split_samples_per_category() {
        let mut records = Vec::new();
        for i in 0..5 {
            records.push(record(&format!("n{i}"), "N", [4.0, 4.0, 4.0]));
        }
        for i in 0..3 {
            records.push(record(&format!("h{i}"), "H", [5.0, 4.0, 4.0]));
        }
        let split = split_per_category(&records, 2, 9);
        assert_eq!(split.val.len(), 4);
        assert_eq!(split.test.len(), 4);
        assert!(split.undersized.is_empty());
        assert!(split.val.iter().all(|r| r.split == Split::Val));
        assert!(split.test.iter().all(|r| r.split == Split::Test));

        // Same seed, same split; no record in both halves.
        let again = split_per_category(&records, 2, 9);
        assert_eq!(
            split.val.iter().map(|r| &r.id).collect::<Vec<_>>(),
            again.val.iter().map(|r| &r.id).collect::<Vec<_>>()
        );
        for v in &split.val {
            assert!(split.test.iter().all(|t| t.id != v.id));
        }

        // Undersized category goes entirely to val.
        let split = split_per_category(&records, 4, 9);
        assert_eq!(split.undersized, vec!["H".to_string()]);
        assert_eq!(split.val.len(), 4 + 3);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn region_counts_sum_and_single_record() {
        let part = make_partition(90.0).unwrap();
        let counts =
            compute_region_counts(&[record("a", "N", [7.0, 7.0, 7.0])], &part).unwrap();
        assert_eq!(counts.iter().sum::<u64>(), 1);
        assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = temp_dir("features");
        let path = dir.join("t.feat");
        let features = Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.5, 3.0, 0.0, -1.0]).unwrap();
        write_features(&path, &features).unwrap();
        let loaded = load_features(&path, 3).unwrap();
        assert_eq!(loaded.shape(), &[2, 3]);
        assert_eq!(loaded.data(), features.data());

        // Write-read-write is byte exact.
        let path2 = dir.join("t2.feat");
        write_features(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        assert!(matches!(
            load_features(&path, 4),
            Err(DataError::FeatureDimMismatch {
                expected: 4,
                got: 3,
                ..
            })
        ));

        // Truncation is detected.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_features(&path, 3),
            Err(DataError::FeatureFormat { .. })
        ));

        std::fs::write(&path, b"WRONGMAG\x01\x00\x00\x00\x01\x00\x00\x00AAAA").unwrap();
        assert!(matches!(
            load_features(&path, 1),
            Err(DataError::BadFeatureMagic { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synthetic_dataset_is_deterministic_and_valid() {
        let dir_a = temp_dir("synth-a");
        let dir_b = temp_dir("synth-b");
        let cfg = SynthConfig {
            n: 24,
            feat_dim: 6,
            frames: 4,
            noise: 0.1,
            seed: 3,
            partition: make_partition(90.0).unwrap(),
        };
        let ds_a = synthesize_dataset(&dir_a, &cfg).unwrap();
        let ds_b = synthesize_dataset(&dir_b, &cfg).unwrap();
        assert_eq!(ds_a.records.len(), 24);
        assert_eq!(ds_a.region_counts.iter().sum::<u64>(), 24);
        for (a, b) in ds_a.records.iter().zip(&ds_b.records) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.vad_raw, b.vad_raw);
            assert_eq!(a.category, b.category);
            let fa = load_features(&a.feature_path, 6).unwrap();
            let fb = load_features(&b.feature_path, 6).unwrap();
            assert_eq!(fa.data(), fb.data());
        }

        // The written manifest parses and passes validation.
        let records = load_manifest(&dir_a.join("manifest.tsv")).unwrap();
        assert_eq!(records.len(), 24);
        for (loaded, original) in records.iter().zip(&ds_a.records) {
            assert_eq!(loaded.id, original.id);
            assert_eq!(loaded.vad_raw, original.vad_raw);
            assert_eq!(loaded.category, original.category);
        }
        std::fs::remove_dir_all(&dir_a).ok();
        std::fs::remove_dir_all(&dir_b).ok();
    }

    #[test]
    fn noiseless_synthetic_mean_features_are_affine_in_the_target() {
        // With noise = 0 every frame equals the embedding of the target, so
        // solving the 4-parameter affine fit per feature dimension by least
        // squares must reproduce the mean features with ~zero residual.
        let dir = temp_dir("synth-ls");
        let cfg = SynthConfig {
            n: 40,
            feat_dim: 5,
            frames: 3,
            noise: 0.0,
            seed: 11,
            partition: make_partition(90.0).unwrap(),
        };
        let ds = synthesize_dataset(&dir, &cfg).unwrap();

        let mut design = Vec::new(); // rows of [v, a, d, 1]
        let mut targets = vec![Vec::new(); cfg.feat_dim];
        for r in &ds.records {
            let norm = r.vad_normalized().unwrap();
            design.push([norm[0], norm[1], norm[2], 1.0]);
            let feats = load_features(&r.feature_path, cfg.feat_dim).unwrap();
            for d in 0..cfg.feat_dim {
                let mean = (0..cfg.frames).map(|t| feats.get2(t, d)).sum::<f64>()
                    / cfg.frames as f64;
                targets[d].push(mean);
            }
        }

        for d in 0..cfg.feat_dim {
            let coef = crate::data::tests::solve_normal_equations(&design, &targets[d]);
            for (row, &y) in design.iter().zip(&targets[d]) {
                let fit: f64 = row.iter().zip(&coef).map(|(a, b)| a * b).sum();
                assert!(
                    (fit - y).abs() < 1e-9,
                    "residual {} too large",
                    (fit - y).abs()
                );
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    // Small dense least squares via normal equations (test-only oracle).
    pub(crate) fn solve_normal_equations(design: &[[f64; 4]], y: &[f64]) -> [f64; 4] {
        let mut ata = [[0.0f64; 4]; 4];
        let mut aty = [0.0f64; 4];
        for (row, &target) in design.iter().zip(y) {
            for i in 0..4 {
                aty[i] += row[i] * target;
                for j in 0..4 {
                    ata[i][j] += row[i] * row[j];
                }
            }
        }
        // Gaussian elimination with partial pivoting.
        let mut aug = [[0.0f64; 5]; 4];
        for i in 0..4 {
            aug[i][..4].copy_from_slice(&ata[i]);
            aug[i][4] = aty[i];
        }
        for col in 0..4 {
            let pivot = (col..4)
                .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for j in col..5 {
                aug[col][j] /= p;
            }
            for row in 0..4 {
                if row != col {
                    let factor = aug[row][col];
                    for j in col..5 {
                        aug[row][j] -= factor * aug[col][j];
                    }
                }
            }
        }
        [aug[0][4], aug[1][4], aug[2][4], aug[3][4]]
    }
}
