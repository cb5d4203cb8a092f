//! Synthetic chest-CT corpus: procedurally generated volumes with 0–3
//! geometric findings, paired with deterministic template reports.
//!
//! Every record is a pure function of `(master seed, record index)`: the same
//! call regenerates bit-identical voxels and byte-identical report text, so
//! corpora never need to be checked in. Volumes are written in the `.ctvol`
//! container; the manifest is a JSON-lines file with one record per line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::derive_seed;
use crate::error::{CoreError, Result};
use crate::volume::{prepare, read_ctvol, write_ctvol, CtVolume, PreparedVolume, HU_FLOOR};

/// Report verbosity. The long style pads each finding with measurement and
/// follow-up sentences and is roughly three times the token count of the
/// short style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusStyle {
    ShortReport,
    LongReport,
}

impl CorpusStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusStyle::ShortReport => "short_report",
            CorpusStyle::LongReport => "long_report",
        }
    }
}

impl FromStr for CorpusStyle {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short_report" => Ok(CorpusStyle::ShortReport),
            "long_report" => Ok(CorpusStyle::LongReport),
            other => Err(CoreError::Config(format!(
                "unknown corpus style {other:?}; expected short_report or long_report"
            ))),
        }
    }
}

impl fmt::Display for CorpusStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FindingShape {
    Sphere,
    Box,
}

/// One synthetic lesion: a solid sphere or box stamped into the air
/// background at a fixed Hounsfield intensity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub shape: FindingShape,
    /// Center voxel (z, y, x).
    pub center: [usize; 3],
    /// Half-extent in voxels per axis; a sphere uses `extent[0]` as radius.
    pub extent: [usize; 3],
    /// Hounsfield value of the lesion interior.
    pub intensity: i16,
}

/// A fully generated record before it is written to disk.
#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub id: String,
    pub volume: CtVolume,
    pub report: String,
    pub findings: Vec<Finding>,
}

/// One manifest line: record id, volume path relative to the corpus root,
/// reference report text, and split assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub volume: String,
    pub report: String,
    pub split: String,
}

/// Background air value stamped everywhere a finding is not.
const BACKGROUND_HU: i16 = HU_FLOOR as i16;
/// Lesion intensities: a dense soft-tissue value and a faint low value.
const DENSE_HU: i16 = 50;
const FAINT_HU: i16 = -600;
/// Largest half-extent a finding may be drawn with. At the default 0.75 mm
/// in-plane spacing the range 3..=8 voxels corresponds to roughly 4-12 mm
/// across — the size range of findings a reader would actually call out.
const MAX_EXTENT: usize = 8;
const MIN_EXTENT: usize = 3;

fn density_word(intensity: i16) -> &'static str {
    if intensity >= -300 {
        "dense"
    } else {
        "faint"
    }
}

fn size_word(extent: &[usize; 3]) -> &'static str {
    if extent.iter().copied().max().unwrap_or(0) <= 5 {
        "small"
    } else {
        "large"
    }
}

fn noun(shape: FindingShape) -> &'static str {
    match shape {
        FindingShape::Sphere => "nodule",
        FindingShape::Box => "opacity",
    }
}

fn margin_word(shape: FindingShape) -> &'static str {
    match shape {
        FindingShape::Sphere => "sharp",
        FindingShape::Box => "irregular",
    }
}

/// Left/right from the x coordinate, upper/lower from the z coordinate.
fn location_words(center: &[usize; 3], dims: &[usize; 3]) -> (&'static str, &'static str) {
    let side = if center[2] * 2 < dims[2] { "right" } else { "left" };
    let zone = if center[0] * 2 < dims[0] { "upper" } else { "lower" };
    (side, zone)
}

/// Approximate in-plane diameter in whole millimetres.
fn diameter_mm(f: &Finding, spacing_mm: &[f64; 3]) -> i64 {
    let across = 2 * f.extent.iter().copied().max().unwrap_or(0);
    (across as f64 * spacing_mm[2]).round() as i64
}

fn finding_sentence(f: &Finding, dims: &[usize; 3]) -> String {
    let (side, zone) = location_words(&f.center, dims);
    format!(
        "there is a {} {} {} in the {} {} lung .",
        size_word(&f.extent),
        density_word(f.intensity),
        noun(f.shape),
        side,
        zone
    )
}

/// Render the deterministic reference report for a finding list. Findings are
/// described in (z, y, x) center order regardless of generation order.
pub fn report_text(
    findings: &[Finding],
    dims: &[usize; 3],
    spacing_mm: &[f64; 3],
    style: CorpusStyle,
) -> String {
    let mut ordered: Vec<&Finding> = findings.iter().collect();
    ordered.sort_by_key(|f| f.center);

    let mut sentences: Vec<String> = Vec::new();
    match style {
        CorpusStyle::ShortReport => {
            if ordered.is_empty() {
                sentences.push("the lungs are clear .".to_string());
                sentences.push("no acute abnormality is seen .".to_string());
            } else {
                for f in &ordered {
                    sentences.push(finding_sentence(f, dims));
                }
            }
        }
        CorpusStyle::LongReport => {
            sentences.push(
                "a chest ct scan was obtained and reviewed in axial projection .".to_string(),
            );
            if ordered.is_empty() {
                sentences.push("the lungs are clear without nodule or opacity .".to_string());
                sentences.push("no acute abnormality is seen .".to_string());
                sentences.push("the study is within normal limits .".to_string());
            } else {
                for f in &ordered {
                    sentences.push(finding_sentence(f, dims));
                    sentences.push(format!(
                        "it measures about {} millimeters across and shows {} margins .",
                        diameter_mm(f, spacing_mm),
                        margin_word(f.shape)
                    ));
                    sentences.push("follow up imaging may be considered for this finding .".to_string());
                }
                sentences.push("the remainder of the examination is unremarkable .".to_string());
            }
        }
    }
    sentences.join(" ")
}

/// Stamp the findings into an air background, in list order (later findings
/// overwrite earlier ones where they overlap).
fn render_voxels(dims: &[usize; 3], findings: &[Finding]) -> Vec<i16> {
    let [nz, ny, nx] = *dims;
    let mut voxels = vec![BACKGROUND_HU; nz * ny * nx];
    for f in findings {
        let [cz, cy, cx] = f.center;
        let lo = [
            cz.saturating_sub(f.extent[0]),
            cy.saturating_sub(f.extent[1]),
            cx.saturating_sub(f.extent[2]),
        ];
        let hi = [
            (cz + f.extent[0]).min(nz - 1),
            (cy + f.extent[1]).min(ny - 1),
            (cx + f.extent[2]).min(nx - 1),
        ];
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let inside = match f.shape {
                        FindingShape::Box => true,
                        FindingShape::Sphere => {
                            let r = f.extent[0] as f64;
                            let dz = z as f64 - cz as f64;
                            let dy = y as f64 - cy as f64;
                            let dx = x as f64 - cx as f64;
                            dz * dz + dy * dy + dx * dx <= r * r
                        }
                    };
                    if inside {
                        voxels[(z * ny + y) * nx + x] = f.intensity;
                    }
                }
            }
        }
    }
    voxels
}

/// Generate one record deterministically from its seed. Volumes are written
/// with rescale slope 1 and intercept 0, so stored values are already
/// Hounsfield units.
pub fn synth_record(
    id: &str,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    style: CorpusStyle,
    seed: u64,
) -> Result<SynthRecord> {
    if dims.iter().any(|&d| d < 2 * MAX_EXTENT + 2) {
        return Err(CoreError::Data(format!(
            "corpus dims {dims:?} too small: every axis must be at least {} voxels \
             to fit finding geometry",
            2 * MAX_EXTENT + 2
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_findings = rng.gen_range(0..=3usize);
    let mut findings = Vec::with_capacity(n_findings);
    for _ in 0..n_findings {
        let shape = if rng.gen_bool(0.5) {
            FindingShape::Sphere
        } else {
            FindingShape::Box
        };
        let extent = match shape {
            FindingShape::Sphere => {
                let r = rng.gen_range(MIN_EXTENT..=MAX_EXTENT);
                [r, r, r]
            }
            FindingShape::Box => [
                rng.gen_range(MIN_EXTENT..=MAX_EXTENT),
                rng.gen_range(MIN_EXTENT..=MAX_EXTENT),
                rng.gen_range(MIN_EXTENT..=MAX_EXTENT),
            ],
        };
        let center = [
            rng.gen_range(extent[0]..dims[0] - extent[0]),
            rng.gen_range(extent[1]..dims[1] - extent[1]),
            rng.gen_range(extent[2]..dims[2] - extent[2]),
        ];
        let intensity = if rng.gen_bool(0.5) { DENSE_HU } else { FAINT_HU };
        findings.push(Finding {
            shape,
            center,
            extent,
            intensity,
        });
    }
    let voxels = render_voxels(&dims, &findings);
    let volume = CtVolume::new(id, dims, spacing_mm, 1.0, 0.0, voxels)?;
    let report = report_text(&findings, &dims, &spacing_mm, style);
    Ok(SynthRecord {
        id: id.to_string(),
        volume,
        report,
        findings,
    })
}

/// Split labels for `n` records: val and test each receive
/// `round(ratio * n)` records and train takes the remainder, over a seeded
/// shuffle of the record order. Returns one label per original index.
pub fn split_labels(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<&'static str>> {
    if n == 0 {
        return Err(CoreError::Config("cannot split an empty manifest".to_string()));
    }
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(CoreError::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let n_val = (rv * n as f64 + 0.5).floor() as usize;
    let n_test = (rs * n as f64 + 0.5).floor() as usize;
    if n_val + n_test >= n {
        return Err(CoreError::Config(format!(
            "split of {n} records leaves no training data (val {n_val}, test {n_test})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher–Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut labels = vec![""; n];
    for (pos, &idx) in order.iter().enumerate() {
        labels[idx] = if pos < n_val {
            "val"
        } else if pos < n_val + n_test {
            "test"
        } else {
            "train"
        };
    }
    Ok(labels)
}

/// Assign splits in place. See [`split_labels`] for the count law.
pub fn split_manifest(
    records: &mut [ManifestRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(usize, usize, usize)> {
    let labels = split_labels(records.len(), ratios, seed)?;
    for (r, label) in records.iter_mut().zip(&labels) {
        r.split = label.to_string();
    }
    let count = |s: &str| labels.iter().filter(|&&l| l == s).count();
    Ok((count("train"), count("val"), count("test")))
}

/// Serialize a manifest as JSON lines.
pub fn save_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CoreError::Data(format!("manifest serialization failed: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| CoreError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(line).map_err(|e| {
            CoreError::Data(format!("{}:{}: bad manifest line: {e}", path.display(), i + 1))
        })?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(CoreError::Data(format!(
            "manifest {} contains no records",
            path.display()
        )));
    }
    Ok(records)
}

/// Generate a corpus of `n` records under `out_dir`: volumes in `volumes/`,
/// manifest at `manifest.jsonl`, splits assigned 80/10/10. Records are
/// generated in parallel, each from its own derived seed, so the result is
/// independent of thread count.
pub fn generate_corpus(
    out_dir: &Path,
    n: usize,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    style: CorpusStyle,
    seed: u64,
) -> Result<Vec<ManifestRecord>> {
    if n < 10 {
        return Err(CoreError::Config(format!(
            "corpus size {n} too small: need at least 10 records to split"
        )));
    }
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir)
        .map_err(|e| CoreError::Data(format!("cannot create {}: {e}", vol_dir.display())))?;

    let mut records: Vec<ManifestRecord> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<ManifestRecord> {
            let id = format!("rec{i:04}");
            let rec_seed = derive_seed(seed, &format!("record{i}"));
            let rec = synth_record(&id, dims, spacing_mm, style, rec_seed)?;
            let rel = format!("volumes/{id}.ctvol");
            write_ctvol(&rec.volume, &out_dir.join(&rel))?;
            Ok(ManifestRecord {
                id,
                volume: rel,
                report: rec.report,
                split: String::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    split_manifest(&mut records, (0.8, 0.1, 0.1), derive_seed(seed, "split"))?;
    save_manifest(&records, &out_dir.join("manifest.jsonl"))?;
    Ok(records)
}

/// A record loaded into memory and preprocessed to the model's input grid.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub id: String,
    pub prepared: PreparedVolume,
    pub report: String,
    pub split: String,
}

/// A whole corpus in memory, ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct CorpusRecords {
    pub id: String,
    pub records: Vec<LoadedRecord>,
}

impl CorpusRecords {
    /// Records belonging to one split, in manifest order.
    pub fn split(&self, name: &str) -> Vec<&LoadedRecord> {
        self.records.iter().filter(|r| r.split == name).collect()
    }
}

/// Load a generated corpus directory and preprocess every volume to the
/// target grid. The corpus id is the directory's file name.
pub fn load_corpus(
    dir: &Path,
    target_dims: [usize; 3],
    target_spacing_mm: [f64; 3],
) -> Result<CorpusRecords> {
    let manifest = load_manifest(&dir.join("manifest.jsonl"))?;
    let records: Vec<LoadedRecord> = manifest
        .par_iter()
        .map(|m| -> Result<LoadedRecord> {
            let volume = read_ctvol(&dir.join(&m.volume))?;
            let prepared = prepare(&volume, target_dims, target_spacing_mm)?;
            Ok(LoadedRecord {
                id: m.id.clone(),
                prepared,
                report: m.report.clone(),
                split: m.split.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    Ok(CorpusRecords { id, records })
}

/// Generate a corpus directly in memory: identical records and splits to
/// [`generate_corpus`] with the same arguments, skipping the disk round
/// trip. Volumes are preprocessed to their own grid.
pub fn synth_corpus(
    corpus_id: &str,
    n: usize,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    style: CorpusStyle,
    seed: u64,
) -> Result<CorpusRecords> {
    if n < 10 {
        return Err(CoreError::Config(format!(
            "corpus size {n} too small: need at least 10 records to split"
        )));
    }
    let labels = split_labels(n, (0.8, 0.1, 0.1), derive_seed(seed, "split"))?;
    let records: Vec<LoadedRecord> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<LoadedRecord> {
            let id = format!("rec{i:04}");
            let rec = synth_record(
                &id,
                dims,
                spacing_mm,
                style,
                derive_seed(seed, &format!("record{i}")),
            )?;
            let prepared = prepare(&rec.volume, dims, spacing_mm)?;
            Ok(LoadedRecord {
                id,
                prepared,
                report: rec.report,
                split: labels[i].to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorpusRecords {
        id: corpus_id.to_string(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DEFAULT_SPACING_MM;

    const DIMS: [usize; 3] = [24, 48, 48];

    fn rec(seed: u64) -> SynthRecord {
        synth_record("t", DIMS, DEFAULT_SPACING_MM, CorpusStyle::ShortReport, seed).unwrap()
    }

    #[test]
    fn record_is_deterministic_for_a_seed() {
        let a = rec(42);
        let b = rec(42);
        assert_eq!(a.volume.voxels, b.volume.voxels);
        assert_eq!(a.report, b.report);
        assert_eq!(a.findings, b.findings);
    }

    #[test]
    fn different_seeds_change_the_volume() {
        let base = rec(0);
        let any_differs = (1..20).any(|s| rec(s).volume.voxels != base.volume.voxels);
        assert!(any_differs);
    }

    #[test]
    fn center_voxel_carries_the_finding_intensity() {
        let f = Finding {
            shape: FindingShape::Sphere,
            center: [10, 20, 30],
            extent: [3, 3, 3],
            intensity: DENSE_HU,
        };
        let voxels = render_voxels(&DIMS, &[f.clone()]);
        let idx = (10 * DIMS[1] + 20) * DIMS[2] + 30;
        assert_eq!(voxels[idx], 50);
        // A corner voxel of the bounding cube lies outside the sphere.
        let corner = ((10 - 3) * DIMS[1] + (20 - 3)) * DIMS[2] + (30 - 3);
        assert_eq!(voxels[corner], BACKGROUND_HU);
    }

    #[test]
    fn box_fills_its_full_extent() {
        let f = Finding {
            shape: FindingShape::Box,
            center: [10, 20, 30],
            extent: [2, 2, 2],
            intensity: FAINT_HU,
        };
        let voxels = render_voxels(&DIMS, &[f]);
        let corner = ((10 - 2) * DIMS[1] + (20 - 2)) * DIMS[2] + (30 - 2);
        assert_eq!(voxels[corner], FAINT_HU);
    }

    #[test]
    fn intensities_stay_inside_the_display_window() {
        for seed in 0..30 {
            let r = rec(seed);
            for &v in &r.volume.voxels {
                assert!((-1000..=200).contains(&(v as i32)), "voxel {v} outside window");
            }
        }
    }

    #[test]
    fn report_orders_findings_by_center() {
        let far = Finding {
            shape: FindingShape::Sphere,
            center: [20, 10, 10],
            extent: [2, 2, 2],
            intensity: DENSE_HU,
        };
        let near = Finding {
            shape: FindingShape::Box,
            center: [5, 10, 10],
            extent: [2, 2, 2],
            intensity: FAINT_HU,
        };
        // Listed far-first, but the near (lower z) finding must be described first.
        let text = report_text(
            &[far, near],
            &DIMS,
            &DEFAULT_SPACING_MM,
            CorpusStyle::ShortReport,
        );
        let opacity_pos = text.find("opacity").unwrap();
        let nodule_pos = text.find("nodule").unwrap();
        assert!(opacity_pos < nodule_pos, "{text}");
    }

    #[test]
    fn zero_findings_use_the_fixed_normal_sentences() {
        let text = report_text(&[], &DIMS, &DEFAULT_SPACING_MM, CorpusStyle::ShortReport);
        assert_eq!(text, "the lungs are clear . no acute abnormality is seen .");
    }

    #[test]
    fn long_style_is_about_three_times_longer() {
        let f = Finding {
            shape: FindingShape::Sphere,
            center: [10, 20, 30],
            extent: [3, 3, 3],
            intensity: DENSE_HU,
        };
        let short = report_text(
            &[f.clone()],
            &DIMS,
            &DEFAULT_SPACING_MM,
            CorpusStyle::ShortReport,
        );
        let long = report_text(&[f], &DIMS, &DEFAULT_SPACING_MM, CorpusStyle::LongReport);
        let sw = short.split_whitespace().count();
        let lw = long.split_whitespace().count();
        assert!(lw >= 2 * sw && lw <= 5 * sw, "short {sw} long {lw}");
    }

    #[test]
    fn location_words_cover_both_halves() {
        assert_eq!(location_words(&[2, 0, 2], &DIMS), ("right", "upper"));
        assert_eq!(location_words(&[20, 0, 40], &DIMS), ("left", "lower"));
    }

    #[test]
    fn tiny_dims_are_rejected() {
        let err = synth_record("t", [4, 48, 48], DEFAULT_SPACING_MM, CorpusStyle::ShortReport, 0)
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn split_counts_small_corpus() {
        let mut records: Vec<ManifestRecord> = (0..10)
            .map(|i| ManifestRecord {
                id: format!("r{i}"),
                volume: String::new(),
                report: String::new(),
                split: String::new(),
            })
            .collect();
        let (tr, va, te) = split_manifest(&mut records, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr, va, te), (8, 1, 1));
        let count = |s: &str| records.iter().filter(|r| r.split == s).count();
        assert_eq!((count("train"), count("val"), count("test")), (8, 1, 1));
    }

    #[test]
    fn split_counts_large_corpus() {
        let mut records: Vec<ManifestRecord> = (0..1886)
            .map(|i| ManifestRecord {
                id: format!("r{i:04}"),
                volume: String::new(),
                report: String::new(),
                split: String::new(),
            })
            .collect();
        let (tr, va, te) = split_manifest(&mut records, (0.8, 0.1, 0.1), 123).unwrap();
        assert_eq!((tr, va, te), (1508, 189, 189));
    }

    #[test]
    fn split_is_seed_deterministic_and_seed_sensitive() {
        let mk = || -> Vec<ManifestRecord> {
            (0..40)
                .map(|i| ManifestRecord {
                    id: format!("r{i}"),
                    volume: String::new(),
                    report: String::new(),
                    split: String::new(),
                })
                .collect()
        };
        let mut a = mk();
        let mut b = mk();
        let mut c = mk();
        split_manifest(&mut a, (0.8, 0.1, 0.1), 5).unwrap();
        split_manifest(&mut b, (0.8, 0.1, 0.1), 5).unwrap();
        split_manifest(&mut c, (0.8, 0.1, 0.1), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_bad_inputs() {
        let mut empty: Vec<ManifestRecord> = Vec::new();
        assert_eq!(
            split_manifest(&mut empty, (0.8, 0.1, 0.1), 0).unwrap_err().exit_code(),
            2
        );
        let mut one = vec![ManifestRecord {
            id: "r".into(),
            volume: String::new(),
            report: String::new(),
            split: String::new(),
        }];
        assert_eq!(
            split_manifest(&mut one, (0.5, 0.3, 0.3), 0).unwrap_err().exit_code(),
            2
        );
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_corpus(
            dir.path(),
            10,
            DIMS,
            DEFAULT_SPACING_MM,
            CorpusStyle::ShortReport,
            99,
        )
        .unwrap();
        assert_eq!(records.len(), 10);
        let loaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(records, loaded);
        // Volumes parse and prepare to the target geometry.
        let v = read_ctvol(&dir.path().join(&loaded[0].volume)).unwrap();
        assert_eq!(v.dims, DIMS);
        let prepared = prepare(&v, DIMS, DEFAULT_SPACING_MM).unwrap();
        assert_eq!(prepared.dims, DIMS);
        assert!(prepared.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn corpus_generation_is_reproducible_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let args = (12usize, DIMS, DEFAULT_SPACING_MM, CorpusStyle::LongReport, 4u64);
        let r1 = generate_corpus(d1.path(), args.0, args.1, args.2, args.3, args.4).unwrap();
        let r2 = generate_corpus(d2.path(), args.0, args.1, args.2, args.3, args.4).unwrap();
        assert_eq!(r1, r2);
        let b1 = std::fs::read(d1.path().join(&r1[3].volume)).unwrap();
        let b2 = std::fs::read(d2.path().join(&r2[3].volume)).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn in_memory_corpus_matches_the_disk_path() {
        let dir = tempfile::tempdir().unwrap();
        let on_disk = generate_corpus(
            dir.path(),
            10,
            DIMS,
            DEFAULT_SPACING_MM,
            CorpusStyle::ShortReport,
            55,
        )
        .unwrap();
        let loaded = load_corpus(dir.path(), DIMS, DEFAULT_SPACING_MM).unwrap();
        let in_mem = synth_corpus("x", 10, DIMS, DEFAULT_SPACING_MM, CorpusStyle::ShortReport, 55)
            .unwrap();
        assert_eq!(loaded.records.len(), in_mem.records.len());
        for ((d, l), m) in on_disk.iter().zip(&loaded.records).zip(&in_mem.records) {
            assert_eq!(d.id, m.id);
            assert_eq!(d.split, m.split);
            assert_eq!(d.report, m.report);
            assert_eq!(l.prepared, m.prepared);
        }
        assert_eq!(in_mem.split("train").len(), 8);
        assert_eq!(in_mem.split("val").len(), 1);
        assert_eq!(in_mem.split("test").len(), 1);
    }

    #[test]
    fn corpus_smaller_than_ten_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = generate_corpus(
            dir.path(),
            9,
            DIMS,
            DEFAULT_SPACING_MM,
            CorpusStyle::ShortReport,
            0,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bright_voxel_count_separates_findings_from_clean_studies() {
        // Nearest-centroid classifier on one feature (log count of voxels
        // brighter than air) must recover the has-finding label far better
        // than chance.
        let samples: Vec<(bool, f64)> = (0..100)
            .map(|i| {
                let r = synth_record(
                    &format!("c{i}"),
                    DIMS,
                    DEFAULT_SPACING_MM,
                    CorpusStyle::ShortReport,
                    derive_seed(1234, &format!("clf{i}")),
                )
                .unwrap();
                let p = prepare(&r.volume, DIMS, DEFAULT_SPACING_MM).unwrap();
                let bright = p.values.iter().filter(|&&v| v > -0.999).count();
                (!r.findings.is_empty(), (1.0 + bright as f64).ln())
            })
            .collect();
        let class_mean = |label: bool| {
            let vals: Vec<f64> = samples
                .iter()
                .filter(|(l, _)| *l == label)
                .map(|(_, m)| *m)
                .collect();
            assert!(!vals.is_empty(), "class {label} missing from sample");
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let (c_pos, c_neg) = (class_mean(true), class_mean(false));
        let correct = samples
            .iter()
            .filter(|(label, m)| ((m - c_pos).abs() < (m - c_neg).abs()) == *label)
            .count();
        assert!(correct > 90, "classifier got {correct}/100");
    }
}
