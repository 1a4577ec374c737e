//! App vocabulary: package-name merging, inclusion rules and dense indexing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Padding token index.
pub const PAD: u32 = 0;
/// Mask token index used by masked app prediction.
pub const MASK: u32 = 1;
/// First dense index given to a real app.
pub const FIRST_APP: u32 = 2;

/// One row of raw app metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawAppRow {
    pub package_name: String,
    pub logical_key: String,
    pub category_id: u32,
    pub install_capacity: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AppFlags {
    pub ubiquitous: bool,
    pub preinstalled: bool,
    pub keep_override: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppEntry {
    /// Dense index, `0` until the entry is admitted to a catalog.
    pub app_id: u32,
    pub logical_key: String,
    pub package_names: BTreeSet<String>,
    pub category_id: u32,
    pub install_capacity: u64,
    pub flags: AppFlags,
}

impl AppEntry {
    pub fn first_package(&self) -> &str {
        self.package_names
            .iter()
            .next()
            .map(String::as_str)
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterPolicy {
    /// Apps installed by more than this fraction of `population` are dropped.
    pub exclude_ubiquitous_above: f64,
    /// Apps with a summed capacity below this are dropped as niche.
    pub exclude_capacity_below: u64,
    /// Number of users the capacities are counted over.
    pub population: u64,
    pub preinstall_list: BTreeSet<String>,
    pub keep_list: BTreeSet<String>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            exclude_ubiquitous_above: 1.0,
            exclude_capacity_below: 0,
            population: 0,
            preinstall_list: BTreeSet::new(),
            keep_list: BTreeSet::new(),
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        let u = self.exclude_ubiquitous_above;
        if !(u.is_finite() && u > 0.0 && u <= 1.0) {
            return Err(Error::Catalog(format!(
                "exclude_ubiquitous_above must be in (0, 1], got {u}"
            )));
        }
        if u < 1.0 && self.population == 0 {
            return Err(Error::Catalog(
                "a ubiquity threshold below 1 needs a nonzero population".into(),
            ));
        }
        Ok(())
    }

    fn is_ubiquitous(&self, capacity: u64) -> bool {
        self.population > 0
            && capacity as f64 / self.population as f64 > self.exclude_ubiquitous_above
    }
}

/// The modeled app vocabulary. Real apps occupy dense indices `2..=M+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppCatalog {
    apps: Vec<AppEntry>,
    num_categories: usize,
    index: HashMap<String, u32>,
}

impl AppCatalog {
    fn from_entries(mut apps: Vec<AppEntry>, num_categories: usize) -> Result<Self> {
        if apps.is_empty() {
            return Err(Error::Catalog("no app survives the filter policy".into()));
        }
        apps.sort_by(|a, b| a.first_package().cmp(b.first_package()));
        let mut index = HashMap::new();
        for (i, app) in apps.iter_mut().enumerate() {
            app.app_id = FIRST_APP + i as u32;
            if app.category_id as usize >= num_categories {
                return Err(Error::Catalog(format!(
                    "category {} of `{}` outside [0, {num_categories})",
                    app.category_id,
                    app.first_package()
                )));
            }
            for name in &app.package_names {
                if index.insert(name.clone(), app.app_id).is_some() {
                    return Err(Error::Catalog(format!("package `{name}` listed twice")));
                }
            }
        }
        Ok(AppCatalog {
            apps,
            num_categories,
            index,
        })
    }

    /// `M`, the number of modeled apps.
    pub fn num_apps(&self) -> usize {
        self.apps.len()
    }

    /// `K`, the number of categories.
    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn apps(&self) -> &[AppEntry] {
        &self.apps
    }

    /// Dense index of a raw package name.
    pub fn resolve(&self, package_name: &str) -> Option<u32> {
        self.index.get(package_name).copied()
    }

    pub fn entry(&self, app_id: u32) -> Option<&AppEntry> {
        app_id
            .checked_sub(FIRST_APP)
            .and_then(|i| self.apps.get(i as usize))
    }

    /// Category of every real app, ordered by dense index.
    pub fn categories(&self) -> Vec<u32> {
        self.apps.iter().map(|a| a.category_id).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("M={} K={}\n", self.num_apps(), self.num_categories);
        for app in &self.apps {
            let names: Vec<&str> = app.package_names.iter().map(String::as_str).collect();
            let _ = writeln!(out, "{}\t{}\t{}", app.app_id, app.category_id, names.join(","));
        }
        out
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: "missing header".into(),
            })??;
        let (m, k) = parse_header(&header)?;
        let mut apps = Vec::with_capacity(m);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 2;
            let bad = |msg: &str| Error::Parse {
                line: lineno,
                msg: msg.to_string(),
            };
            let mut cols = line.split('\t');
            let app_id: u32 = cols
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("app_id"))?;
            let category_id: u32 = cols
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("category_id"))?;
            let names: BTreeSet<String> = cols
                .next()
                .ok_or_else(|| bad("package names"))?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            if names.is_empty() {
                return Err(bad("empty package list"));
            }
            if app_id != FIRST_APP + apps.len() as u32 {
                return Err(bad("app ids must be dense and ascending from 2"));
            }
            let logical_key = names.iter().next().cloned().unwrap_or_default();
            apps.push(AppEntry {
                app_id,
                logical_key,
                package_names: names,
                category_id,
                install_capacity: 0,
                flags: AppFlags::default(),
            });
        }
        if apps.len() != m {
            return Err(Error::Format(format!(
                "header declares M={m} but {} apps follow",
                apps.len()
            )));
        }
        AppCatalog::from_entries(apps, k)
    }
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let mut m = None;
    let mut k = None;
    for part in header.split_whitespace() {
        match part.split_once('=') {
            Some(("M", v)) => m = v.parse().ok(),
            Some(("K", v)) => k = v.parse().ok(),
            _ => {}
        }
    }
    match (m, k) {
        (Some(m), Some(k)) => Ok((m, k)),
        _ => Err(Error::Parse {
            line: 1,
            msg: format!("expected `M=<int> K=<int>`, got `{header}`"),
        }),
    }
}

/// Parse the tab-separated app table
/// `package_name, logical_key, category_id, install_capacity`.
/// Blank lines and lines starting with `#` are skipped.
pub fn read_app_rows<R: BufRead>(r: R) -> Result<Vec<RawAppRow>> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 columns, got {}", cols.len())));
        }
        rows.push(RawAppRow {
            package_name: cols[0].to_string(),
            logical_key: cols[1].to_string(),
            category_id: cols[2]
                .parse()
                .map_err(|e| bad(format!("category_id: {e}")))?,
            install_capacity: cols[3]
                .parse()
                .map_err(|e| bad(format!("install_capacity: {e}")))?,
        });
    }
    Ok(rows)
}

pub fn write_app_rows<W: Write>(rows: &[RawAppRow], mut w: W) -> Result<()> {
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.package_name, r.logical_key, r.category_id, r.install_capacity
        )?;
    }
    Ok(())
}

/// Collapse entries sharing a logical key into one, taking the union of
/// package names and the sum of capacities. Output is ordered by key.
pub fn merge_packages(entries: Vec<AppEntry>) -> Vec<AppEntry> {
    let mut merged: BTreeMap<String, AppEntry> = BTreeMap::new();
    for e in entries {
        match merged.get_mut(&e.logical_key) {
            Some(acc) => {
                acc.package_names.extend(e.package_names);
                acc.install_capacity += e.install_capacity;
                acc.flags.ubiquitous |= e.flags.ubiquitous;
                acc.flags.preinstalled |= e.flags.preinstalled;
                acc.flags.keep_override |= e.flags.keep_override;
            }
            None => {
                merged.insert(e.logical_key.clone(), e);
            }
        }
    }
    merged.into_values().collect()
}

/// Merge package names, then keep apps that are neither ubiquitous,
/// preinstalled nor niche. Apps on the keep list always survive.
pub fn build_catalog(rows: &[RawAppRow], policy: &FilterPolicy) -> Result<AppCatalog> {
    policy.validate()?;

    // A package may legitimately repeat, but never with two meanings.
    let mut seen: HashMap<&str, (&str, u32)> = HashMap::new();
    for r in rows {
        if let Some(&(key, cat)) = seen.get(r.package_name.as_str()) {
            if cat != r.category_id {
                return Err(Error::Catalog(format!(
                    "package `{}` has conflicting categories {cat} and {}",
                    r.package_name, r.category_id
                )));
            }
            if key != r.logical_key {
                return Err(Error::Catalog(format!(
                    "package `{}` belongs to two apps `{key}` and `{}`",
                    r.package_name, r.logical_key
                )));
            }
        } else {
            seen.insert(&r.package_name, (&r.logical_key, r.category_id));
        }
    }

    let entries = rows
        .iter()
        .map(|r| AppEntry {
            app_id: 0,
            logical_key: r.logical_key.clone(),
            package_names: BTreeSet::from([r.package_name.clone()]),
            category_id: r.category_id,
            install_capacity: r.install_capacity,
            flags: AppFlags::default(),
        })
        .collect();
    let mut merged = merge_packages(entries);

    for e in &merged {
        if let Some(other) = rows
            .iter()
            .find(|r| r.logical_key == e.logical_key && r.category_id != e.category_id)
        {
            return Err(Error::Catalog(format!(
                "package `{}` has conflicting categories {} and {} within app `{}`",
                other.package_name, e.category_id, other.category_id, e.logical_key
            )));
        }
    }

    for e in &mut merged {
        e.flags = AppFlags {
            ubiquitous: policy.is_ubiquitous(e.install_capacity),
            preinstalled: e
                .package_names
                .iter()
                .any(|p| policy.preinstall_list.contains(p)),
            keep_override: e.package_names.iter().any(|p| policy.keep_list.contains(p)),
        };
    }
    let survivors: Vec<AppEntry> = merged
        .into_iter()
        .filter(|e| {
            e.flags.keep_override
                || !(e.flags.ubiquitous
                    || e.flags.preinstalled
                    || e.install_capacity < policy.exclude_capacity_below)
        })
        .collect();
    let k = survivors
        .iter()
        .map(|e| e.category_id as usize + 1)
        .max()
        .unwrap_or(0);
    AppCatalog::from_entries(survivors, k)
}
