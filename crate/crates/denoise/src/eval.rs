//! Whole-image inference and scoring: padded denoising, PSNR, the
//! multi-realization evaluation protocol, gain profiles against baseline
//! score files, and CSV/JSON report emission.
//!
//! Evaluation randomness is keyed by `(seed, image id, realization)` only,
//! never by position in the corpus, so any subset of the work recomputed in
//! isolation reproduces the full run's records exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{from_net_range, to_net_range, GrayImage};
use crate::net::Network;
use crate::noise::{corrupt, fnv1a64, NoiseSpec, SeededRng};
use crate::tensor::{crop_center, pad_symmetric};

/// Mirror-padding width applied around an image before inference, sized to
/// cover the receptive-field radius of the default 20-layer network.
pub const PAD_MARGIN: usize = 21;

/// Serializes PSNR values that may be infinite: finite values as JSON
/// numbers, +∞ as the string `"inf"` (plain JSON has no infinity literal).
mod psnr_fmt {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = f64;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or the string \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
                Ok(v)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
                match v {
                    "inf" | "+inf" => Ok(f64::INFINITY),
                    other => Err(E::custom(format!("unexpected PSNR string {other:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// One scored (image, noise realization) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image: String,
    pub realization: usize,
    #[serde(with = "psnr_fmt")]
    pub psnr_noisy: f64,
    #[serde(with = "psnr_fmt")]
    pub psnr_denoised: f64,
}

/// Record count and mean PSNRs. Non-finite values are excluded from the
/// means (with a warning); a mean is `None` when no finite value remains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean_psnr_noisy: Option<f64>,
    pub mean_psnr_denoised: Option<f64>,
}

impl Aggregate {
    pub fn from_records(records: &[EvalRecord]) -> Aggregate {
        let mean = |pick: fn(&EvalRecord) -> f64| -> Option<f64> {
            let finite: Vec<f64> = records.iter().map(pick).filter(|v| v.is_finite()).collect();
            let skipped = records.len() - finite.len();
            if skipped > 0 {
                log::warn!("excluding {skipped} non-finite PSNR value(s) from the mean");
            }
            if finite.is_empty() {
                None
            } else {
                Some(finite.iter().sum::<f64>() / finite.len() as f64)
            }
        };
        Aggregate {
            count: records.len(),
            mean_psnr_noisy: mean(|r| r.psnr_noisy),
            mean_psnr_denoised: mean(|r| r.psnr_denoised),
        }
    }
}

/// One image's slot in a gain profile; `rank` is 1-based after sorting all
/// gains ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEntry {
    pub rank: usize,
    pub image: String,
    pub gain: f64,
}

/// Per-image PSNR gains over a baseline, sorted ascending, with the
/// fraction of images lost to (`zero_crossing_fraction`, gain < 0) and won
/// against (`win_rate`, gain > 0) the baseline. Ties count as neither.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainProfile {
    pub entries: Vec<GainEntry>,
    pub zero_crossing_fraction: f64,
    pub win_rate: f64,
}

/// Full evaluation output: per-realization records, their aggregate, and
/// an optional gain profile against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub aggregate: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub profile: Option<GainProfile>,
}

/// External method scores keyed by image id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineScores(pub BTreeMap<String, f64>);

impl BaselineScores {
    /// Parses CSV lines `image,psnr`; a leading `image,psnr` header row is
    /// tolerated and skipped.
    pub fn from_csv(text: &str) -> Result<BaselineScores> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.eq_ignore_ascii_case("image,psnr")) {
                continue;
            }
            let (id, score) = line.rsplit_once(',').ok_or_else(|| {
                Error::InvalidArg(format!("baseline line {} has no comma: {line:?}", i + 1))
            })?;
            let v: f64 = score.trim().parse().map_err(|_| {
                Error::InvalidArg(format!("baseline line {}: bad score {score:?}", i + 1))
            })?;
            map.insert(id.trim().to_string(), v);
        }
        Ok(BaselineScores(map))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<BaselineScores> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr\n");
        for (id, v) in &self.0 {
            out.push_str(&format!("{id},{v}\n"));
        }
        out
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.0.get(id).copied()
    }
}

/// Denoises one whole image: shift to net range, mirror-pad by `margin`,
/// run the network, crop the pad back off, and return to pixel range
/// (clamped to [0,1]). The input may hold out-of-range values (noisy
/// images do); the output never does.
pub fn denoise_image(net: &Network, img: &GrayImage, margin: usize) -> Result<GrayImage> {
    let padded = pad_symmetric(&to_net_range(img), margin)?;
    let trace = net.forward(&padded, false)?;
    let out = from_net_range(&crop_center(&trace.output, margin)?)?;
    Ok(match img.source() {
        Some(s) => out.with_source(s),
        None => out,
    })
}

/// Peak signal-to-noise ratio in dB with peak 1: `10·log10(1 / MSE)` over
/// all pixels, the test image clamped to [0,1] first. Identical images
/// give +∞ (displayed as `inf`).
pub fn psnr(reference: &GrayImage, test: &GrayImage) -> Result<f64> {
    if reference.height() != test.height() || reference.width() != test.width() {
        return Err(Error::shape(
            "psnr",
            format!(
                "{}x{} vs {}x{}",
                reference.height(),
                reference.width(),
                test.height(),
                test.width()
            ),
        ));
    }
    let n = reference.pixels().len();
    let mse = reference
        .pixels()
        .iter()
        .zip(test.pixels())
        .map(|(&r, &t)| {
            let d = r - t.clamp(0.0, 1.0);
            d * d
        })
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Scores a model over `corpus` with `realizations` independent noise
/// draws per image.
///
/// The draw for `(image, r)` comes from the stream
/// `seed → derive(fnv1a64(image id)) → derive(r)`, so records do not
/// depend on corpus order or on which other images are present, and
/// per-image work parallelizes freely. Image ids must be unique.
pub fn evaluate(
    corpus: &[GrayImage],
    net: &Network,
    spec: &NoiseSpec,
    realizations: usize,
    seed: u64,
    margin: usize,
) -> Result<EvalReport> {
    spec.validate()?;
    if realizations == 0 {
        return Err(Error::InvalidArg("realizations must be >= 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArg("empty evaluation corpus".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for img in corpus {
        if !seen.insert(img.id()) {
            return Err(Error::InvalidArg(format!(
                "duplicate image id {:?} in evaluation corpus",
                img.id()
            )));
        }
    }
    let root = SeededRng::new(seed);
    let per_image: Vec<Vec<EvalRecord>> = corpus
        .par_iter()
        .map(|img| -> Result<Vec<EvalRecord>> {
            let id = img.id();
            let image_stream = root.derive(fnv1a64(id.as_bytes()));
            let mut records = Vec::with_capacity(realizations);
            for r in 0..realizations {
                let mut rng = image_stream.derive(r as u64);
                let noisy = corrupt(img, spec, &mut rng)?;
                let denoised = denoise_image(net, &noisy, margin)?;
                records.push(EvalRecord {
                    image: id.clone(),
                    realization: r,
                    psnr_noisy: psnr(img, &noisy)?,
                    psnr_denoised: psnr(img, &denoised)?,
                });
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;
    let records: Vec<EvalRecord> = per_image.into_iter().flatten().collect();
    let aggregate = Aggregate::from_records(&records);
    Ok(EvalReport {
        records,
        aggregate,
        profile: None,
    })
}

/// Builds the gain profile of a report against baseline scores.
///
/// Per image, PSNRs are first averaged over realizations (non-finite
/// values excluded); the gain is that average minus the baseline score.
/// Entries are sorted by ascending gain (image id breaks exact ties), so
/// the result is independent of record order.
pub fn gain_profile(report: &EvalReport, baseline: &BaselineScores) -> Result<GainProfile> {
    if report.records.is_empty() {
        return Err(Error::InvalidArg("cannot profile an empty report".into()));
    }
    let mut per_image: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for rec in &report.records {
        per_image.entry(&rec.image).or_default().push(rec.psnr_denoised);
    }
    let mut entries = Vec::with_capacity(per_image.len());
    for (id, values) in &per_image {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.len() < values.len() {
            log::warn!(
                "image {id}: dropping {} infinite PSNR value(s) from its average",
                values.len() - finite.len()
            );
        }
        let ours = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let base = baseline
            .get(id)
            .ok_or_else(|| Error::MissingBaseline((*id).to_string()))?;
        entries.push(GainEntry {
            rank: 0,
            image: (*id).to_string(),
            gain: ours - base,
        });
    }
    entries.sort_by(|a, b| {
        a.gain
            .partial_cmp(&b.gain)
            .expect("gains are never NaN")
            .then_with(|| a.image.cmp(&b.image))
    });
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    let n = entries.len() as f64;
    let below = entries.iter().filter(|e| e.gain < 0.0).count() as f64;
    let above = entries.iter().filter(|e| e.gain > 0.0).count() as f64;
    Ok(GainProfile {
        entries,
        zero_crossing_fraction: below / n,
        win_rate: above / n,
    })
}

/// Report output formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Renders the per-record table as CSV: `image,realization,psnr_noisy,psnr_denoised`.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("image,realization,psnr_noisy,psnr_denoised\n");
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.image, r.realization, r.psnr_noisy, r.psnr_denoised
        ));
    }
    out
}

/// Parses a record table written by [`report_csv`] back into records.
/// Fields split from the right, so image ids may contain commas; `inf`
/// reads back as an infinite PSNR.
pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("image,realization,psnr_noisy,psnr_denoised") => {}
        other => {
            return Err(Error::InvalidArg(format!(
                "not a record CSV: first line {other:?}"
            )))
        }
    }
    let parse_psnr = |v: &str| -> Result<f64> {
        match v {
            "inf" | "+inf" => Ok(f64::INFINITY),
            other => other
                .parse()
                .map_err(|_| Error::InvalidArg(format!("bad PSNR value {other:?}"))),
        }
    };
    let mut records = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let mut fields = line.rsplitn(4, ',');
        let (denoised, noisy, realization, image) = match (
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
        ) {
            (Some(d), Some(n), Some(r), Some(i)) => (d, n, r, i),
            _ => {
                return Err(Error::InvalidArg(format!(
                    "record line {line:?} does not have 4 fields"
                )))
            }
        };
        records.push(EvalRecord {
            image: image.to_string(),
            realization: realization
                .parse()
                .map_err(|_| Error::InvalidArg(format!("bad realization {realization:?}")))?,
            psnr_noisy: parse_psnr(noisy)?,
            psnr_denoised: parse_psnr(denoised)?,
        });
    }
    if records.is_empty() {
        return Err(Error::InvalidArg("record CSV has no rows".into()));
    }
    Ok(records)
}

/// Renders a gain profile as CSV: `rank,image,gain`.
pub fn profile_csv(profile: &GainProfile) -> String {
    let mut out = String::from("rank,image,gain\n");
    for e in &profile.entries {
        out.push_str(&format!("{},{},{}\n", e.rank, e.image, e.gain));
    }
    out
}

/// Writes a report to `path`: the record CSV, or the whole report
/// (records, aggregate, profile if present) as pretty JSON.
pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
