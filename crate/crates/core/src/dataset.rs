//! Epoch data model, the EPB binary epoch format, stratified splitting and a
//! synthetic labelled-epoch generator.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of every epoch window in seconds (-0.5 s .. +1.5 s around the event).
pub const EPOCH_WINDOW_S: f64 = 2.0;
/// Default sampling rate after resampling.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 500.0;
/// Default pre-event baseline length.
pub const DEFAULT_T0_OFFSET_S: f64 = 0.5;

const EPB_MAGIC: &[u8; 4] = b"EPB1";
const EPB_VERSION: u16 = 1;

/// Driving behaviour label. The ordinal mapping is fixed:
/// Brake = 0, Change = 1, Throttle = 2, Turn = 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BehaviorClass {
    Brake,
    Change,
    Throttle,
    Turn,
}

impl BehaviorClass {
    pub const ALL: [BehaviorClass; 4] = [Self::Brake, Self::Change, Self::Throttle, Self::Turn];
    pub const COUNT: usize = 4;

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        Self::ALL.get(ordinal).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Brake => "Brake",
            Self::Change => "Change",
            Self::Throttle => "Throttle",
            Self::Turn => "Turn",
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

impl fmt::Display for BehaviorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BehaviorClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "brake" | "0" => Ok(Self::Brake),
            "change" | "1" => Ok(Self::Change),
            "throttle" | "2" => Ok(Self::Throttle),
            "turn" | "3" => Ok(Self::Turn),
            _ => Err(Error::InvalidLabel(s.to_string())),
        }
    }
}

/// Physiological signal family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Eeg,
    Emg,
    Gsr,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Self::Eeg, Self::Emg, Self::Gsr];

    pub fn prefix(self) -> &'static str {
        match self {
            Self::Eeg => "EEG",
            Self::Emg => "EMG",
            Self::Gsr => "GSR",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

// 59 scalp sites of an extended 10-20 montage (64-channel cap without
// reference, EOG and mastoid electrodes).
const CANONICAL_EEG: [&str; 59] = [
    "Fp1", "Fp2", "AF3", "AF4", "F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8", "FT7",
    "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8", "T7", "C5", "C3", "C1", "Cz", "C2",
    "C4", "C6", "T8", "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8", "P7", "P5",
    "P3", "P1", "Pz", "P2", "P4", "P6", "P8", "PO7", "PO5", "PO3", "POz", "PO4", "PO6", "PO8",
    "O1", "Oz", "O2",
];

/// Channel-axis arrangement of the fused epoch: EEG first, then EMG, then GSR.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityLayout {
    pub eeg_range: Range<usize>,
    pub emg_range: Range<usize>,
    pub gsr_range: Range<usize>,
    pub channel_names: Vec<String>,
}

impl ModalityLayout {
    /// 59 EEG + 4 EMG + 1 GSR = 69 channels.
    pub fn canonical() -> Self {
        let eeg: Vec<String> = CANONICAL_EEG.iter().map(|s| s.to_string()).collect();
        let emg: Vec<String> = (0..4).map(|i| format!("ch{i}")).collect();
        Self::new(eeg, emg, vec!["0".to_string()]).expect("canonical layout is valid")
    }

    pub fn new(eeg: Vec<String>, emg: Vec<String>, gsr: Vec<String>) -> Result<Self> {
        let n_eeg = eeg.len();
        let n_emg = emg.len();
        let n_gsr = gsr.len();
        let mut channel_names = eeg;
        channel_names.extend(emg);
        channel_names.extend(gsr);
        let layout = Self {
            eeg_range: 0..n_eeg,
            emg_range: n_eeg..n_eeg + n_emg,
            gsr_range: n_eeg + n_emg..n_eeg + n_emg + n_gsr,
            channel_names,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [&self.eeg_range, &self.emg_range, &self.gsr_range];
        let mut next = 0;
        for r in ranges {
            if r.start != next || r.end < r.start {
                return Err(Error::InvalidLayout(format!(
                    "ranges must be contiguous from 0, got {:?}/{:?}/{:?}",
                    self.eeg_range, self.emg_range, self.gsr_range
                )));
            }
            next = r.end;
        }
        if next != self.channel_names.len() {
            return Err(Error::InvalidLayout(format!(
                "{} channel names for {next} channels",
                self.channel_names.len()
            )));
        }
        if next == 0 {
            return Err(Error::InvalidLayout("layout has no channels".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.gsr_range.end
    }

    pub fn range(&self, modality: Modality) -> Range<usize> {
        match modality {
            Modality::Eeg => self.eeg_range.clone(),
            Modality::Emg => self.emg_range.clone(),
            Modality::Gsr => self.gsr_range.clone(),
        }
    }

    pub fn modality_of(&self, channel: usize) -> Option<Modality> {
        Modality::ALL
            .into_iter()
            .find(|&m| self.range(m).contains(&channel))
    }
}

/// One event-locked multichannel window. `samples` is row-major
/// `[n_channels x n_samples]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub subject_id: String,
    pub event_id: String,
    pub label: BehaviorClass,
    pub sample_rate_hz: f64,
    pub t0_offset_s: f64,
    n_channels: usize,
    n_samples: usize,
    samples: Vec<f64>,
}

impl Epoch {
    pub fn new(
        subject_id: impl Into<String>,
        event_id: impl Into<String>,
        label: BehaviorClass,
        sample_rate_hz: f64,
        n_channels: usize,
        samples: Vec<f64>,
    ) -> Result<Self> {
        if n_channels == 0 || samples.len() % n_channels != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} samples cannot be split into {n_channels} channels",
                samples.len()
            )));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            event_id: event_id.into(),
            label,
            sample_rate_hz,
            t0_offset_s: DEFAULT_T0_OFFSET_S,
            n_channels,
            n_samples: samples.len() / n_channels,
            samples,
        })
    }

    pub fn from_channels(
        subject_id: impl Into<String>,
        event_id: impl Into<String>,
        label: BehaviorClass,
        sample_rate_hz: f64,
        channels: &[Vec<f64>],
    ) -> Result<Self> {
        let n = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument("channels differ in length".into()));
        }
        let samples = channels.concat();
        Self::new(
            subject_id,
            event_id,
            label,
            sample_rate_hz,
            channels.len(),
            samples,
        )
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.samples[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.samples[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn channels(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks(self.n_samples.max(1)).take(self.n_channels)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Replace all channel data; the new channels must have equal length.
    pub fn set_channels(&mut self, channels: Vec<Vec<f64>>) -> Result<()> {
        let n = channels.first().map_or(0, Vec::len);
        if channels.len() != self.n_channels || channels.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument(
                "replacement channels must match channel count and share a length".into(),
            ));
        }
        self.n_samples = n;
        self.samples = channels.concat();
        Ok(())
    }

    /// Number of samples in a window at this epoch's rate.
    pub fn expected_samples(sample_rate_hz: f64) -> usize {
        (sample_rate_hz * EPOCH_WINDOW_S).round() as usize + 1
    }

    /// Index of the event sample (first sample at t >= 0).
    pub fn event_index(&self) -> usize {
        ((self.t0_offset_s * self.sample_rate_hz).round() as usize).min(self.n_samples)
    }

    /// Check every invariant against `layout`. `record` is reported in errors.
    pub fn validate(&self, layout: &ModalityLayout, record: usize) -> Result<()> {
        if self.n_channels != layout.total() {
            return Err(Error::ChannelCountMismatch {
                record,
                expected: layout.total(),
                found: self.n_channels,
            });
        }
        let expected = Self::expected_samples(self.sample_rate_hz);
        if self.n_samples != expected {
            return Err(Error::SampleCountMismatch {
                record,
                expected,
                found: self.n_samples,
            });
        }
        if let Some(pos) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample {
                record,
                channel: pos / self.n_samples,
                index: pos % self.n_samples,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// EPB format
// ---------------------------------------------------------------------------

/// Write epochs in EPB format. All epochs must share channel count, sample
/// count and sample rate. Samples are stored as little-endian `f32`.
pub fn write_epochs(path: impl AsRef<Path>, epochs: &[Epoch]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = EpbWriter::new(BufWriter::new(file), epochs)?;
    for e in epochs {
        w.write_epoch(e)?;
    }
    w.finish()?;
    Ok(())
}

/// Stream `n_epochs` epochs into an EPB file without holding them in memory.
/// Returns the manifest rows `(subject_id, event_id, label)` in file order.
pub fn write_epochs_streaming<I>(path: impl AsRef<Path>, n_epochs: usize, epochs: I) -> Result<Vec<(String, String, BehaviorClass)>>
where
    I: IntoIterator<Item = Epoch>,
{
    let mut it = epochs.into_iter().peekable();
    let file = File::create(path)?;
    let mut w = match it.peek() {
        Some(first) => EpbWriter::with_shape(BufWriter::new(file), first.n_channels, first.n_samples, first.sample_rate_hz, n_epochs)?,
        None => EpbWriter::new(BufWriter::new(file), &[])?,
    };
    let mut rows = Vec::with_capacity(n_epochs);
    for e in it {
        if rows.len() == n_epochs {
            return Err(Error::InvalidArgument(format!("more than {n_epochs} epochs supplied")));
        }
        w.write_epoch(&e)?;
        rows.push((e.subject_id, e.event_id, e.label));
    }
    if rows.len() != n_epochs {
        return Err(Error::LengthMismatch(rows.len(), n_epochs));
    }
    w.finish()?;
    Ok(rows)
}

/// Manifest CSV from rows returned by [`write_epochs_streaming`].
pub fn write_manifest_rows(path: impl AsRef<Path>, rows: &[(String, String, BehaviorClass)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch_index,subject_id,event_id,label")?;
    for (i, (subject, event, label)) in rows.iter().enumerate() {
        writeln!(w, "{i},{subject},{event},{label}")?;
    }
    w.flush()?;
    Ok(())
}

struct EpbWriter<W: Write> {
    inner: W,
    n_channels: usize,
    n_samples: usize,
    sample_rate: f64,
}

impl<W: Write> EpbWriter<W> {
    fn new(inner: W, epochs: &[Epoch]) -> Result<Self> {
        let (n_channels, n_samples, sample_rate) = epochs
            .first()
            .map(|e| (e.n_channels, e.n_samples, e.sample_rate_hz))
            .unwrap_or((0, 0, DEFAULT_SAMPLE_RATE_HZ));
        Self::with_shape(inner, n_channels, n_samples, sample_rate, epochs.len())
    }

    fn with_shape(mut inner: W, n_channels: usize, n_samples: usize, sample_rate: f64, n_epochs: usize) -> Result<Self> {
        let n_channels_u16 = u16::try_from(n_channels)
            .map_err(|_| Error::InvalidArgument(format!("{n_channels} channels exceed u16")))?;
        let n_samples_u32 = u32::try_from(n_samples)
            .map_err(|_| Error::InvalidArgument(format!("{n_samples} samples exceed u32")))?;
        let n_epochs = u32::try_from(n_epochs)
            .map_err(|_| Error::InvalidArgument("too many epochs".into()))?;
        inner.write_all(EPB_MAGIC)?;
        inner.write_all(&EPB_VERSION.to_le_bytes())?;
        inner.write_all(&n_channels_u16.to_le_bytes())?;
        inner.write_all(&n_samples_u32.to_le_bytes())?;
        inner.write_all(&n_epochs.to_le_bytes())?;
        inner.write_all(&(sample_rate as f32).to_le_bytes())?;
        Ok(Self {
            inner,
            n_channels,
            n_samples,
            sample_rate,
        })
    }

    fn write_epoch(&mut self, e: &Epoch) -> Result<()> {
        if e.n_channels != self.n_channels
            || e.n_samples != self.n_samples
            || e.sample_rate_hz != self.sample_rate
        {
            return Err(Error::InvalidArgument(format!(
                "epoch {} does not share the file shape",
                e.event_id
            )));
        }
        write_str16(&mut self.inner, &e.subject_id)?;
        write_str16(&mut self.inner, &e.event_id)?;
        self.inner.write_all(&[e.label.ordinal() as u8])?;
        let mut buf = Vec::with_capacity(e.samples.len() * 4);
        for &v in &e.samples {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

fn write_str16<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::InvalidArgument(format!("identifier too long: {} bytes", s.len())))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Streaming EPB reader; yields epochs in file order.
pub struct EpbReader<R: Read> {
    inner: R,
    layout: ModalityLayout,
    n_channels: usize,
    n_samples: usize,
    n_epochs: usize,
    sample_rate: f64,
    next: usize,
}

impl EpbReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>, layout: &ModalityLayout) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?), layout)
    }
}

impl<R: Read> EpbReader<R> {
    pub fn new(mut inner: R, layout: &ModalityLayout) -> Result<Self> {
        let mut magic = [0u8; 4];
        inner.read_exact(&mut magic).map_err(|_| Error::MagicMismatch)?;
        if &magic != EPB_MAGIC {
            return Err(Error::MagicMismatch);
        }
        let version = read_u16(&mut inner)?;
        if version != EPB_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let n_channels = read_u16(&mut inner)? as usize;
        let n_samples = read_u32(&mut inner)? as usize;
        let n_epochs = read_u32(&mut inner)? as usize;
        let sample_rate = f32::from_le_bytes(read_array(&mut inner)?) as f64;
        if n_epochs > 0 && n_channels != layout.total() {
            return Err(Error::ChannelCountMismatch {
                record: 0,
                expected: layout.total(),
                found: n_channels,
            });
        }
        Ok(Self {
            inner,
            layout: layout.clone(),
            n_channels,
            n_samples,
            n_epochs,
            sample_rate,
            next: 0,
        })
    }

    pub fn n_epochs(&self) -> usize {
        self.n_epochs
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    fn read_record(&mut self) -> Result<Epoch> {
        let record = self.next;
        let truncated = |_| Error::MalformedRecord {
            record,
            reason: "unexpected end of file".into(),
        };
        let subject_id = read_str16(&mut self.inner, record)?;
        let event_id = read_str16(&mut self.inner, record)?;
        let [ordinal] = read_array::<1>(&mut self.inner).map_err(truncated)?;
        let label = BehaviorClass::from_ordinal(ordinal as usize).ok_or_else(|| {
            Error::MalformedRecord {
                record,
                reason: format!("label ordinal {ordinal} out of range"),
            }
        })?;
        let n = self.n_channels * self.n_samples;
        let mut raw = vec![0u8; n * 4];
        self.inner.read_exact(&mut raw).map_err(truncated)?;
        let samples: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let epoch = Epoch {
            subject_id,
            event_id,
            label,
            sample_rate_hz: self.sample_rate,
            t0_offset_s: DEFAULT_T0_OFFSET_S,
            n_channels: self.n_channels,
            n_samples: self.n_samples,
            samples,
        };
        epoch.validate(&self.layout, record)?;
        Ok(epoch)
    }
}

impl<R: Read> Iterator for EpbReader<R> {
    type Item = Result<Epoch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.n_epochs {
            return None;
        }
        let out = self.read_record();
        self.next += 1;
        if out.is_err() {
            // stop after the first broken record
            self.next = self.n_epochs;
        }
        Some(out)
    }
}

/// Read every epoch of an EPB file, validating each against `layout`.
pub fn read_epochs(path: impl AsRef<Path>, layout: &ModalityLayout) -> Result<Vec<Epoch>> {
    EpbReader::open(path, layout)?.collect()
}

fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    Ok(u16::from_le_bytes(read_array(r)?))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_str16(r: &mut impl Read, record: usize) -> Result<String> {
    let malformed = |reason: String| Error::MalformedRecord { record, reason };
    let len = u16::from_le_bytes(read_array(r).map_err(|e| malformed(e.to_string()))?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| malformed(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| malformed(e.to_string()))
}

/// Manifest CSV: `epoch_index,subject_id,event_id,label`.
pub fn write_manifest(path: impl AsRef<Path>, epochs: &[Epoch]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch_index,subject_id,event_id,label")?;
    for (i, e) in epochs.iter().enumerate() {
        writeln!(w, "{i},{},{},{}", e.subject_id, e.event_id, e.label)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Stratified train/test partition. Indices are sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
    pub test_fraction: f64,
}

fn class_members(labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    members
}

fn class_label(c: usize) -> String {
    BehaviorClass::from_ordinal(c).map_or_else(|| c.to_string(), |b| b.name().to_string())
}

/// Stratified split over class ordinals.
///
/// Each class's member list (in input order) is shuffled with ChaCha8 seeded
/// from `seed`, classes processed in ordinal order from one stream, and the
/// first `round(n_c * test_fraction)` shuffled members go to the test set.
pub fn stratified_split_ordinals(
    labels: &[usize],
    n_classes: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must be in (0,1), got {test_fraction}"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= n_classes) {
        return Err(Error::InvalidLabel(bad.to_string()));
    }
    let members = class_members(labels, n_classes);
    for (c, m) in members.iter().enumerate() {
        if m.len() < 2 {
            return Err(Error::ClassTooSmall {
                class: class_label(c),
                count: m.len(),
                min: 2,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(labels.len());
    let mut test = Vec::new();
    for mut m in members {
        m.shuffle(&mut rng);
        let n_test = ((m.len() as f64 * test_fraction).round() as usize).clamp(1, m.len() - 1);
        test.extend_from_slice(&m[..n_test]);
        train.extend_from_slice(&m[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit {
        train_indices: train,
        test_indices: test,
        seed,
        test_fraction,
    })
}

pub fn stratified_split(
    labels: &[BehaviorClass],
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let ordinals: Vec<usize> = labels.iter().map(|l| l.ordinal()).collect();
    stratified_split_ordinals(&ordinals, BehaviorClass::COUNT, test_fraction, seed)
}

/// Stratified k-fold assignment. Returns the held-out indices of each fold,
/// sorted ascending. Every class present must have at least `k` members.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let members = class_members(labels, n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for (c, mut m) in members.into_iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        if m.len() < k {
            return Err(Error::ClassTooSmall {
                class: class_label(c),
                count: m.len(),
                min: k,
            });
        }
        m.shuffle(&mut rng);
        for (j, idx) in m.iter().enumerate() {
            folds[(offset + j) % k].push(*idx);
        }
        offset = (offset + m.len()) % k;
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Complement of `held_out` within `0..n`.
pub fn complement(held_out: &[usize], n: usize) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in held_out {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Amplitudes of the planted class signatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureAmplitudes {
    /// Brake: GSR ramp height in microsiemens reached at +1.5 s.
    pub brake_gsr_ramp: f64,
    /// Brake: EEG beta burst amplitude in microvolts.
    pub brake_eeg_beta: f64,
    /// Turn: relative EMG envelope change (left up, right down by half).
    pub turn_emg_envelope: f64,
    /// Change: fraction of the alpha rhythm suppressed after the event.
    pub change_alpha_suppression: f64,
    /// Throttle: relative broadband EMG increase on all channels.
    pub throttle_emg_gain: f64,
}

impl Default for SignatureAmplitudes {
    fn default() -> Self {
        Self {
            brake_gsr_ramp: 0.6,
            brake_eeg_beta: 4.0,
            turn_emg_envelope: 1.2,
            change_alpha_suppression: 0.7,
            throttle_emg_gain: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    /// Per-class count overrides in ordinal order (for imbalanced sets).
    pub class_counts: Option<[usize; 4]>,
    pub n_subjects: usize,
    pub sample_rate_hz: f64,
    pub amplitudes: SignatureAmplitudes,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            class_counts: None,
            n_subjects: 10,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            amplitudes: SignatureAmplitudes::default(),
            seed,
        }
    }

    pub fn counts(&self) -> [usize; 4] {
        self.class_counts.unwrap_or([self.n_per_class; 4])
    }

    pub fn total(&self) -> usize {
        self.counts().iter().sum()
    }
}

/// Deterministic, random-access synthetic epoch source. Epoch `i` depends
/// only on `(config, layout, i)`, so epochs can be generated in any order.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    config: SyntheticConfig,
    layout: ModalityLayout,
    labels: Vec<BehaviorClass>,
    eeg_weights: Vec<f64>,
    subject_gains: Vec<f64>,
}

impl SyntheticGenerator {
    pub fn new(config: SyntheticConfig, layout: &ModalityLayout) -> Result<Self> {
        layout.validate()?;
        if config.counts().iter().any(|&c| c == 0) {
            return Err(Error::InvalidArgument(
                "every class needs at least one synthetic epoch".into(),
            ));
        }
        if config.n_subjects == 0 {
            return Err(Error::InvalidArgument("n_subjects must be >= 1".into()));
        }
        let labels = BehaviorClass::ALL
            .iter()
            .zip(config.counts())
            .flat_map(|(&c, n)| std::iter::repeat(c).take(n))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let eeg_weights = (0..layout.eeg_range.len())
            .map(|_| rng.random_range(0.85..1.15))
            .collect();
        let subject_gains = (0..config.n_subjects)
            .map(|_| rng.random_range(0.85..1.15))
            .collect();
        Ok(Self {
            config,
            layout: layout.clone(),
            labels,
            eeg_weights,
            subject_gains,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[BehaviorClass] {
        &self.labels
    }

    pub fn epoch(&self, index: usize) -> Epoch {
        let cfg = &self.config;
        let amp = &cfg.amplitudes;
        let label = self.labels[index];
        let fs = cfg.sample_rate_hz;
        let n = Epoch::expected_samples(fs);
        let subject = index % cfg.n_subjects;
        let gain = self.subject_gains[subject];

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);

        let t: Vec<f64> = (0..n).map(|i| i as f64 / fs - DEFAULT_T0_OFFSET_S).collect();
        // smooth post-event onset reaching 1 at +0.2 s
        let onset: Vec<f64> = t
            .iter()
            .map(|&ti| {
                if ti <= 0.0 {
                    0.0
                } else if ti >= 0.2 {
                    1.0
                } else {
                    0.5 - 0.5 * (std::f64::consts::PI * ti / 0.2).cos()
                }
            })
            .collect();

        let mut data = vec![0.0; self.layout.total() * n];
        let two_pi = 2.0 * std::f64::consts::PI;

        // EEG: pink background plus a posterior-dominant alpha rhythm.
        let alpha_freq = rng.random_range(9.5..10.5);
        let alpha_phase = rng.random_range(0.0..two_pi);
        let beta_freq = rng.random_range(18.0..22.0);
        let beta_phase = rng.random_range(0.0..two_pi);
        for (k, ch) in self.layout.eeg_range.clone().enumerate() {
            let w = self.eeg_weights[k] * gain;
            let noise = pink_noise(&mut rng, n);
            let row = &mut data[ch * n..(ch + 1) * n];
            for i in 0..n {
                let mut alpha = 6.0 * (two_pi * alpha_freq * t[i] + alpha_phase).sin();
                if label == BehaviorClass::Change {
                    alpha *= 1.0 - amp.change_alpha_suppression * onset[i];
                }
                let mut v = 8.0 * noise[i] + alpha;
                if label == BehaviorClass::Brake {
                    // burst over +0.1 .. +1.1 s
                    let u = (t[i] - 0.1) / 1.0;
                    if (0.0..=1.0).contains(&u) {
                        let env = (std::f64::consts::PI * u).sin().powi(2);
                        v += amp.brake_eeg_beta
                            * env
                            * (two_pi * beta_freq * t[i] + beta_phase).sin();
                    }
                }
                row[i] = w * v;
            }
        }

        // EMG: broadband noise with mains interference.
        let mains_phase = rng.random_range(0.0..two_pi);
        for (k, ch) in self.layout.emg_range.clone().enumerate() {
            let left = k % 4 < 2;
            let row = &mut data[ch * n..(ch + 1) * n];
            for i in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                let mut env = 1.0;
                match label {
                    BehaviorClass::Turn => {
                        env += if left {
                            amp.turn_emg_envelope * onset[i]
                        } else {
                            -0.5 * amp.turn_emg_envelope.min(1.0) * onset[i]
                        };
                    }
                    BehaviorClass::Throttle => env += amp.throttle_emg_gain * onset[i],
                    _ => {}
                }
                let mains = 2.0 * (two_pi * 50.0 * t[i] + mains_phase).sin();
                row[i] = gain * (5.0 * env * z + mains);
            }
        }

        // GSR: tonic level, slow drift, small pink noise.
        let tonic = rng.random_range(3.0..8.0);
        let drift = rng.random_range(-0.05..0.05);
        for ch in self.layout.gsr_range.clone() {
            let noise = pink_noise(&mut rng, n);
            let row = &mut data[ch * n..(ch + 1) * n];
            for i in 0..n {
                let mut v = tonic + drift * t[i] + 0.01 * noise[i];
                if label == BehaviorClass::Brake && t[i] > 0.0 {
                    v += amp.brake_gsr_ramp * (t[i].min(1.5) / 1.5);
                }
                row[i] = gain * v;
            }
        }

        // store at f32 precision so EPB round trips are exact
        for v in &mut data {
            *v = *v as f32 as f64;
        }

        Epoch {
            subject_id: format!("S{subject:02}"),
            event_id: format!("E{index:05}"),
            label,
            sample_rate_hz: fs,
            t0_offset_s: DEFAULT_T0_OFFSET_S,
            n_channels: self.layout.total(),
            n_samples: n,
            samples: data,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Epoch> + '_ {
        (0..self.len()).map(move |i| self.epoch(i))
    }
}

/// Unit-variance-ish 1/f noise (Kellett's refined pink filter) after burn-in.
fn pink_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    const BURN_IN: usize = 512;
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for i in 0..n + BURN_IN {
        let white: f64 = rng.sample(StandardNormal);
        b[0] = 0.99886 * b[0] + white * 0.0555179;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        let pink = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + white * 0.5362;
        b[6] = white * 0.115926;
        if i >= BURN_IN {
            out.push(pink * 0.25);
        }
    }
    out
}

/// Generate `4 * n_per_class` synthetic epochs with planted class signatures.
pub fn generate_synthetic(
    n_per_class: usize,
    layout: &ModalityLayout,
    seed: u64,
) -> Result<Vec<Epoch>> {
    let generator = SyntheticGenerator::new(SyntheticConfig::new(n_per_class, seed), layout)?;
    Ok(generator.iter().collect())
}
