use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::transforms::HalfTransform;
use crate::Vec3;

/// Named anatomical positions (mm) of one image. Categories may be missing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    pub image_id: u32,
    pub entries: Vec<(String, Vec3)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryStats {
    pub name: String,
    pub mean_mm: f64,
    pub max_mm: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkReport {
    pub categories: Vec<CategoryStats>,
    /// Mean over every projected landmark of its distance to its category mean.
    pub global_mean: f64,
    pub global_max: f64,
    /// Categories seen in fewer than two images.
    pub skipped: Vec<String>,
    /// Names outside the declared dictionary, if one was given.
    pub unknown: Vec<String>,
}

impl LandmarkReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,mean_mm,max_mm,count\n");
        for c in &self.categories {
            let _ = writeln!(s, "{},{},{},{}", c.name, c.mean_mm, c.max_mm, c.count);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>10} {:>10} {:>6}\n", "category", "mean mm", "max mm", "count");
        for c in &self.categories {
            let _ = writeln!(s, "{:<24} {:>10.3} {:>10.3} {:>6}", c.name, c.mean_mm, c.max_mm, c.count);
        }
        let _ = writeln!(s, "{:<24} {:>10.3} {:>10.3}", "global", self.global_mean, self.global_max);
        if !self.skipped.is_empty() {
            let _ = writeln!(s, "skipped (fewer than 2 images): {}", self.skipped.join(", "));
        }
        if !self.unknown.is_empty() {
            let _ = writeln!(s, "unknown categories: {}", self.unknown.join(", "));
        }
        s
    }
}

/// Projects each landmark with its image's transform (`transforms[image_id]`) and measures
/// the spread of every category around its mean position.
pub fn evaluate_landmarks(
    landmarks: &[LandmarkSet],
    transforms: &[HalfTransform],
    dictionary: Option<&[String]>,
) -> Result<LandmarkReport> {
    let mut by_category: BTreeMap<&str, Vec<Vec3>> = BTreeMap::new();
    let mut unknown = Vec::new();
    for set in landmarks {
        let t = transforms.get(set.image_id as usize).ok_or_else(|| {
            Error::invalid(format!("no transform for landmark image {}", set.image_id))
        })?;
        for (name, p) in &set.entries {
            if !p.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid(format!("non-finite landmark {name} in image {}", set.image_id)));
            }
            if let Some(dict) = dictionary {
                if !dict.iter().any(|d| d == name) {
                    if !unknown.contains(name) {
                        unknown.push(name.clone());
                    }
                    continue;
                }
            }
            by_category.entry(name).or_default().push(t.apply(p));
        }
    }
    let mut report = LandmarkReport {
        unknown,
        ..Default::default()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for (name, pts) in by_category {
        if pts.len() < 2 {
            report.skipped.push(name.to_string());
            continue;
        }
        let mean = pts.iter().sum::<Vec3>() / pts.len() as f64;
        let d: Vec<f64> = pts.iter().map(|p| (p - mean).norm()).collect();
        let max = d.iter().copied().fold(0.0, f64::max);
        let sum: f64 = d.iter().sum();
        total += sum;
        count += d.len();
        report.global_max = report.global_max.max(max);
        report.categories.push(CategoryStats {
            name: name.to_string(),
            mean_mm: sum / d.len() as f64,
            max_mm: max,
            count: d.len(),
        });
    }
    report.global_mean = if count > 0 { total / count as f64 } else { 0.0 };
    Ok(report)
}

/// Writes `image_id,category,x,y,z` rows for all sets.
pub fn write_landmarks(path: impl AsRef<Path>, sets: &[LandmarkSet]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("image_id,category,x,y,z\n");
    for set in sets {
        for (name, p) in &set.entries {
            let _ = writeln!(s, "{},{},{},{},{}", set.image_id, name, p[0], p[1], p[2]);
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a landmark CSV, grouping rows by image id (sorted).
pub fn read_landmarks(path: impl AsRef<Path>) -> Result<Vec<LandmarkSet>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text)
}

pub fn parse_landmarks(text: &str) -> Result<Vec<LandmarkSet>> {
    let mut sets: BTreeMap<u32, LandmarkSet> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with("image_id")) {
            continue;
        }
        let bad = |what: &str| Error::format(format!("landmark line {}: {what}", lineno + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad("expected image_id,category,x,y,z"));
        }
        let id: u32 = f[0].parse().map_err(|_| bad("bad image id"))?;
        let mut p = Vec3::zeros();
        for a in 0..3 {
            p[a] = f[2 + a].parse().map_err(|_| bad("bad coordinate"))?;
        }
        sets.entry(id)
            .or_insert_with(|| LandmarkSet {
                image_id: id,
                entries: Vec::new(),
            })
            .entries
            .push((f[1].to_string(), p));
    }
    Ok(sets.into_values().collect())
}
