//! Walk files in the PhysioNet gaitpdb text layout.
//!
//! One sample per line, 19 whitespace-separated numbers: the time stamp in
//! seconds (0.01 s apart) followed by L1..L8, R1..R8, total left and total
//! right force in newtons. File names encode study, group, subject and walk:
//! `GaPt03_01.txt` is walk 1 of Parkinson subject 3 of the Ga study.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use gaitformer_core::data::{subject_id, Group, Study, WalkRecord, SAMPLE_RATE_HZ};
use gaitformer_core::NUM_CHANNELS;
use regex::Regex;

use crate::error::{Error, Result};

const TIME_STEP: f64 = 1.0 / SAMPLE_RATE_HZ;
const TIME_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WalkName {
    pub study: Study,
    pub group: Group,
    pub subject: u32,
    pub walk: u32,
}

impl WalkName {
    pub fn subject_id(&self) -> String {
        subject_id(self.study, self.group, self.subject)
    }

    pub fn file_name(&self) -> String {
        format!("{}_{:02}.txt", self.subject_id(), self.walk)
    }
}

fn name_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(Ga|Ju|Si)(Pt|Co)(\d{2,})_(\d{2,})\.txt$").expect("valid pattern"))
}

pub fn parse_walk_name(file_name: &str) -> Result<WalkName> {
    let bad = || Error::FileName(file_name.to_string());
    let caps = name_pattern().captures(file_name).ok_or_else(bad)?;
    Ok(WalkName {
        study: caps[1].parse().map_err(|_| bad())?,
        group: if &caps[2] == "Pt" {
            Group::Parkinson
        } else {
            Group::Control
        },
        subject: caps[3].parse().map_err(|_| bad())?,
        walk: caps[4].parse().map_err(|_| bad())?,
    })
}

pub fn is_walk_file_name(file_name: &str) -> bool {
    name_pattern().is_match(file_name)
}

/// Parses the text of a walk file; `path` supplies the name and is quoted in
/// errors.
pub fn parse_walk_file(path: &Path, contents: &str) -> Result<WalkRecord> {
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::FileName(path.display().to_string()))?;
    let name = parse_walk_name(file_name)?;
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut channels = vec![Vec::new(); NUM_CHANNELS];
    let mut previous_time: Option<f64> = None;
    for (i, line) in contents.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut values = [0.0; NUM_CHANNELS + 1];
        let mut count = 0;
        for token in line.split_whitespace() {
            if count <= NUM_CHANNELS {
                values[count] = token
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("`{token}` is not a number")))?;
            }
            count += 1;
        }
        if count != NUM_CHANNELS + 1 {
            return Err(parse_err(
                line_no,
                format!("expected {} columns, found {count}", NUM_CHANNELS + 1),
            ));
        }
        let time = values[0];
        if let Some(prev) = previous_time {
            if ((time - prev) - TIME_STEP).abs() > TIME_TOLERANCE {
                return Err(parse_err(
                    line_no,
                    format!("time step {:.6} s, expected {TIME_STEP} s", time - prev),
                ));
            }
        }
        previous_time = Some(time);
        for (c, v) in channels.iter_mut().zip(&values[1..]) {
            c.push(*v);
        }
    }
    if previous_time.is_none() {
        return Err(parse_err(0, "no samples".to_string()));
    }
    Ok(WalkRecord::new(
        name.subject_id(),
        name.study,
        name.group,
        name.walk,
        channels,
    )?)
}

pub fn read_walk_file(path: &Path) -> Result<WalkRecord> {
    let contents = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_walk_file(path, &contents)
}

/// Walk files directly inside `dir`, sorted by name. Other files (such as
/// the dataset's demographics table) are ignored.
pub fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let entry = entry.map_err(Error::io(dir))?;
        let name = entry.file_name();
        if name.to_str().is_some_and(is_walk_file_name) {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files)
}

/// Every walk of a dataset directory, in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<WalkRecord>> {
    let files = walk_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    files.iter().map(|f| read_walk_file(f)).collect()
}

/// Renders a walk in the dataset layout. Values use the shortest decimal
/// form that parses back to the same `f64`.
pub fn format_walk(walk: &WalkRecord) -> String {
    let mut out = String::new();
    let channels = walk.channels();
    for t in 0..walk.duration_samples() {
        write!(out, "{:.2}", (t + 1) as f64 * TIME_STEP).expect("string write");
        for c in channels {
            write!(out, "\t{}", c[t]).expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn walk_file_name(walk: &WalkRecord) -> String {
    format!("{}.txt", walk.walk_id())
}

/// Writes each walk to `dir/<walk id>.txt`, creating `dir` if needed.
pub fn write_dataset(dir: &Path, walks: &[WalkRecord]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    walks
        .iter()
        .map(|w| {
            let path = dir.join(walk_file_name(w));
            fs::write(&path, format_walk(w)).map_err(Error::io(&path))?;
            Ok(path)
        })
        .collect()
}
