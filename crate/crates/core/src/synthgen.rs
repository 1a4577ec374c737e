//! Labeled synthetic populations with bursty install/uninstall timing.
//!
//! Each user belongs to one genre. A day is active with probability
//! `burstiness`; an active day brings `Poisson(install_rate)` installs drawn
//! from the genre's app affinity, and every app installed so far is removed
//! with probability `churn_rate`. Most user-days are therefore empty.
//!
//! In twin mode genres come in pairs `(2p, 2p + 1)` with the same affinity.
//! Users are generated in couples, one per genre of a pair, and both members
//! of a couple report the same retention set, drawn from a small pool of
//! templates. Only the install/uninstall activity (driven by each genre's
//! rates) tells the pair apart. Retention stays fixed at the template;
//! installed apps are tracked separately and only they churn.

use std::collections::BTreeSet;
use std::io::Write;

use chrono::{Duration, NaiveDate};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;

use crate::catalog::{build_catalog, AppCatalog, FilterPolicy, RawAppRow};
use crate::error::{Error, Result};
use crate::ingest::{EventKind, LineType, LogLine};
use crate::kv::KeyValues;
use crate::seed::stream_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GenreProfile {
    pub genre_id: u32,
    /// Weight of each catalog app, in dense-index order.
    pub affinity: Vec<f64>,
    /// Mean installs on an active day.
    pub install_rate: f64,
    /// Probability that a day is active.
    pub burstiness: f64,
    /// Probability that an installed app is removed on an active day.
    pub churn_rate: f64,
}

impl GenreProfile {
    pub fn validate(&self, num_apps: usize) -> Result<()> {
        let g = self.genre_id;
        if self.affinity.len() != num_apps {
            return Err(Error::Invalid(format!(
                "genre {g}: affinity over {} apps, catalog has {num_apps}",
                self.affinity.len()
            )));
        }
        if self.affinity.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid(format!("genre {g}: affinity weights must be finite and >= 0")));
        }
        let total: f64 = self.affinity.iter().sum();
        if total <= 0.0 {
            return Err(Error::Invalid(format!("genre {g}: affinity weights sum to zero")));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("genre {g}: affinity weights sum to {total}, not 1")));
        }
        for (name, p) in [("burstiness", self.burstiness), ("churn_rate", self.churn_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("genre {g}: {name} {p} outside [0, 1]")));
            }
        }
        if !(self.install_rate.is_finite() && self.install_rate >= 0.0) {
            return Err(Error::Invalid(format!("genre {g}: install_rate must be >= 0")));
        }
        Ok(())
    }
}

/// Normalise raw weights; an all-zero vector is an error.
pub fn normalize(weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Invalid("affinity weights sum to zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Power-law weights `(rank + 1)^-exponent` over a seeded random ranking
/// of the apps.
pub fn power_law_affinity(num_apps: usize, exponent: f64, seed: u64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..num_apps).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut w = vec![0.0; num_apps];
    for (rank, &app) in order.iter().enumerate() {
        w[app] = ((rank + 1) as f64).powf(-exponent);
    }
    normalize(&w).expect("power law weights are positive")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub genres: Vec<GenreProfile>,
    pub window_days: u32,
    pub seed: u64,
    pub twin_mode: bool,
    /// Snapshot day; the window ends here.
    pub end_date: NaiveDate,
    /// Apps installed before the window opens (and the size of twin
    /// retention templates).
    pub initial_apps: usize,
    /// Retention templates per genre pair in twin mode.
    pub twin_templates: usize,
}

impl GeneratorConfig {
    pub fn validate(&self, num_apps: usize) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::Invalid("n_users must be >= 1".into()));
        }
        if self.genres.is_empty() {
            return Err(Error::Invalid("at least one genre is required".into()));
        }
        if self.window_days == 0 {
            return Err(Error::Invalid("window_days must be >= 1".into()));
        }
        if self.initial_apps > num_apps {
            return Err(Error::Invalid(format!(
                "initial_apps {} exceeds the {num_apps} catalog apps",
                self.initial_apps
            )));
        }
        for g in &self.genres {
            g.validate(num_apps)?;
        }
        if self.twin_mode {
            let n = self.genres.len();
            if !n.is_multiple_of(2) {
                return Err(Error::Invalid("twin mode needs an even number of genres".into()));
            }
            if !self.n_users.is_multiple_of(n) {
                return Err(Error::Invalid(format!(
                    "twin mode needs n_users divisible by the {n} genres"
                )));
            }
            if self.twin_templates == 0 {
                return Err(Error::Invalid("twin_templates must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Index of the genre of user `u` (round robin).
    pub fn genre_of(&self, u: usize) -> usize {
        u % self.genres.len()
    }
}

pub fn user_id(u: usize) -> String {
    format!("user{u:06}")
}

/// Generated log lines plus the hidden genre of every user.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub lines: Vec<LogLine>,
    pub labels: Vec<(String, u32)>,
}

impl Population {
    pub fn write_labels<W: Write>(&self, mut w: W) -> Result<()> {
        for (u, g) in &self.labels {
            writeln!(w, "{u}\t{g}")?;
        }
        Ok(())
    }
}

pub fn read_labels(text: &str) -> Result<Vec<(String, u32)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let (u, g) = l.split_once('\t').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: "expected `user_id<TAB>genre_id`".into(),
            })?;
            let g = g.trim().parse().map_err(|_| Error::Parse {
                line: n + 1,
                msg: format!("bad genre `{g}`"),
            })?;
            Ok((u.to_string(), g))
        })
        .collect()
}

fn draw_distinct<R: Rng>(rng: &mut R, weights: &[f64], k: usize) -> Result<BTreeSet<usize>> {
    let mut w = weights.to_vec();
    let mut out = BTreeSet::new();
    for _ in 0..k {
        let dist = WeightedIndex::new(&w)
            .map_err(|_| Error::Invalid("not enough apps with positive affinity".into()))?;
        let a = dist.sample(rng);
        out.insert(a);
        w[a] = 0.0;
    }
    Ok(out)
}

fn date_of(config: &GeneratorConfig, day: u32) -> NaiveDate {
    config.end_date - Duration::days((config.window_days - 1 - day) as i64)
}

fn template(config: &GeneratorConfig, pair: usize, couple: usize) -> Result<BTreeSet<usize>> {
    let mut pick = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, couple as u64, "couple", &pair.to_string()));
    let t = pick.gen_range(0..config.twin_templates);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, t as u64, "template", &pair.to_string()));
    draw_distinct(&mut rng, &config.genres[2 * pair].affinity, config.initial_apps)
}

fn simulate_user(config: &GeneratorConfig, names: &[String], u: usize, out: &mut Vec<LogLine>) -> Result<()> {
    let id = user_id(u);
    let g = config.genre_of(u);
    let genre = &config.genres[g];
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 0, "user", &id));
    let (retention_fixed, mut installed) = if config.twin_mode {
        let couple = u / config.genres.len();
        (Some(template(config, g / 2, couple)?), BTreeSet::new())
    } else {
        (None, draw_distinct(&mut rng, &genre.affinity, config.initial_apps)?)
    };
    let poisson = (genre.install_rate > 0.0)
        .then(|| Poisson::new(genre.install_rate).expect("rate checked positive"));
    let dist = WeightedIndex::new(&genre.affinity).expect("affinity validated");
    let event = |app: usize, kind: EventKind, date: NaiveDate| LogLine {
        user_id: id.clone(),
        line_type: LineType::Event,
        app: names[app].clone(),
        kind: Some(kind),
        date,
    };
    for day in 0..config.window_days {
        if !rng.gen_bool(genre.burstiness) {
            continue;
        }
        let date = date_of(config, day);
        let n = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let mut fresh = Vec::new();
        for _ in 0..n {
            // A few redraws to find an app not already present.
            for _ in 0..8 {
                let a = dist.sample(&mut rng);
                let present = installed.contains(&a)
                    || retention_fixed.as_ref().is_some_and(|r| r.contains(&a));
                if !present {
                    installed.insert(a);
                    fresh.push(a);
                    out.push(event(a, EventKind::Install, date));
                    break;
                }
            }
        }
        let removed: Vec<usize> = installed
            .iter()
            .copied()
            .filter(|a| !fresh.contains(a))
            .filter(|_| rng.gen_bool(genre.churn_rate))
            .collect();
        for a in removed {
            installed.remove(&a);
            out.push(event(a, EventKind::Uninstall, date));
        }
    }
    let retention = retention_fixed.unwrap_or(installed);
    for a in retention {
        out.push(LogLine {
            user_id: id.clone(),
            line_type: LineType::Retention,
            app: names[a].clone(),
            kind: None,
            date: config.end_date,
        });
    }
    Ok(())
}

/// Generate the population. Output is a pure function of `config` and the
/// catalog.
pub fn generate(config: &GeneratorConfig, catalog: &AppCatalog) -> Result<Population> {
    config.validate(catalog.num_apps())?;
    let names: Vec<String> = catalog.apps().iter().map(|a| a.first_package().to_string()).collect();
    let mut lines = Vec::new();
    let mut labels = Vec::with_capacity(config.n_users);
    for u in 0..config.n_users {
        simulate_user(config, &names, u, &mut lines)?;
        labels.push((user_id(u), config.genres[config.genre_of(u)].genre_id));
    }
    Ok(Population { lines, labels })
}

/// A catalog of `num_apps` synthetic apps spread over `num_categories`.
pub fn synthetic_catalog(num_apps: usize, num_categories: usize) -> Result<AppCatalog> {
    build_catalog(&synthetic_app_rows(num_apps, num_categories), &FilterPolicy::default())
}

pub fn synthetic_app_rows(num_apps: usize, num_categories: usize) -> Vec<RawAppRow> {
    (0..num_apps)
        .map(|m| RawAppRow {
            package_name: format!("com.synth.app{m:05}"),
            logical_key: format!("app{m:05}"),
            category_id: (m % num_categories.max(1)) as u32,
            install_capacity: 1000,
        })
        .collect()
}

/// Flat settings from which a [`GeneratorConfig`] is derived.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub n_users: usize,
    pub n_genres: usize,
    pub window_days: u32,
    pub seed: u64,
    pub twin_mode: bool,
    pub end_date: NaiveDate,
    pub initial_apps: usize,
    pub twin_templates: usize,
    pub affinity_exponent: f64,
    pub burstiness: f64,
    pub install_rate: f64,
    pub churn_rate: f64,
    /// Rates of the odd genre of each twin pair.
    pub twin_burstiness: f64,
    pub twin_install_rate: f64,
    pub twin_churn_rate: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            n_users: 1000,
            n_genres: 4,
            window_days: 120,
            seed: 0,
            twin_mode: false,
            end_date: NaiveDate::from_ymd_opt(2019, 12, 31).expect("valid date"),
            initial_apps: 8,
            twin_templates: 20,
            affinity_exponent: 1.0,
            burstiness: 0.05,
            install_rate: 1.5,
            churn_rate: 0.1,
            twin_burstiness: 0.15,
            twin_install_rate: 0.5,
            twin_churn_rate: 0.6,
        }
    }
}

impl SynthSettings {
    pub const KEYS: &'static [&'static str] = &[
        "n_users",
        "n_genres",
        "window_days",
        "seed",
        "twin_mode",
        "end_date",
        "initial_apps",
        "twin_templates",
        "affinity_exponent",
        "burstiness",
        "install_rate",
        "churn_rate",
        "twin_burstiness",
        "twin_install_rate",
        "twin_churn_rate",
    ];

    /// Read known keys over the defaults; other keys are ignored here.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = SynthSettings::default();
        Ok(SynthSettings {
            n_users: kv.parsed_or("n_users", d.n_users)?,
            n_genres: kv.parsed_or("n_genres", d.n_genres)?,
            window_days: kv.parsed_or("window_days", d.window_days)?,
            seed: kv.parsed_or("seed", d.seed)?,
            twin_mode: kv.parsed_or("twin_mode", d.twin_mode)?,
            end_date: kv.parsed_or("end_date", d.end_date)?,
            initial_apps: kv.parsed_or("initial_apps", d.initial_apps)?,
            twin_templates: kv.parsed_or("twin_templates", d.twin_templates)?,
            affinity_exponent: kv.parsed_or("affinity_exponent", d.affinity_exponent)?,
            burstiness: kv.parsed_or("burstiness", d.burstiness)?,
            install_rate: kv.parsed_or("install_rate", d.install_rate)?,
            churn_rate: kv.parsed_or("churn_rate", d.churn_rate)?,
            twin_burstiness: kv.parsed_or("twin_burstiness", d.twin_burstiness)?,
            twin_install_rate: kv.parsed_or("twin_install_rate", d.twin_install_rate)?,
            twin_churn_rate: kv.parsed_or("twin_churn_rate", d.twin_churn_rate)?,
        })
    }

    /// Genre `g` prefers its own random ranking of the apps; twin pairs
    /// share one ranking and differ in rates.
    pub fn config(&self, num_apps: usize) -> GeneratorConfig {
        let genres = (0..self.n_genres)
            .map(|g| {
                let (key, odd) = if self.twin_mode { (g / 2, g % 2 == 1) } else { (g, false) };
                let affinity = power_law_affinity(
                    num_apps,
                    self.affinity_exponent,
                    stream_seed(self.seed, key as u64, "affinity", ""),
                );
                let (burstiness, install_rate, churn_rate) = if odd {
                    (self.twin_burstiness, self.twin_install_rate, self.twin_churn_rate)
                } else {
                    (self.burstiness, self.install_rate, self.churn_rate)
                };
                GenreProfile {
                    genre_id: g as u32,
                    affinity,
                    install_rate,
                    burstiness,
                    churn_rate,
                }
            })
            .collect();
        GeneratorConfig {
            n_users: self.n_users,
            genres,
            window_days: self.window_days,
            seed: self.seed,
            twin_mode: self.twin_mode,
            end_date: self.end_date,
            initial_apps: self.initial_apps,
            twin_templates: self.twin_templates,
        }
    }
}
