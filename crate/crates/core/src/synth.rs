//! Synthetic check-in streams with planted homes.
//!
//! Every user owns a home, up to two work venues, a handful of leisure venues
//! and possibly a second night venue that competes with home on weekday
//! evenings and nights.
//! Days are simulated one at a time; each check-in draws a time-of-day band,
//! then a venue. A share of check-ins lands on fresh one-off venues, which
//! supplies the long tail of location records per user.

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{feature, CheckIn, Dataset, FEATURE_NAMES, N_FEATURES};
use crate::error::{Error, Result};
use crate::geo::{haversine_m, GeoPoint};
use crate::rng::{derive_seed, stream};

const METERS_PER_DEGREE: f64 = 111_194.93;
const SYNTH_TAG: u64 = 0x53594e;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Default for BoundingBox {
    fn default() -> Self {
        BoundingBox {
            lat_min: 41.65,
            lat_max: 42.00,
            lon_min: -87.90,
            lon_max: -87.55,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_users: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    /// Median check-ins per day; per-user rates are log-normal around it.
    pub activity_median: f64,
    pub activity_sigma: f64,
    pub work_venues_max: usize,
    pub leisure_venues_min: usize,
    pub leisure_venues_max: usize,
    /// Probability that a user has a second night venue.
    pub alt_night_prob: f64,
    /// On weekdays the second venue takes a per-user share, uniform on
    /// `[0, alt_share_max]`, of night and evening check-ins that would otherwise
    /// be at home.
    pub alt_share_max: f64,
    /// Mean probability that a night check-in is home-like.
    pub home_night_prob: f64,
    /// Half-width of the uniform per-user spread around `home_night_prob`.
    pub home_night_noise: f64,
    pub home_day_prob: f64,
    /// Multiplier on `home_day_prob` for weekend daytime.
    pub weekend_home_boost: f64,
    pub home_evening_prob: f64,
    pub work_hours_prob: f64,
    /// Probability that a non-night check-in goes to a fresh one-off venue.
    pub explore_prob: f64,
    /// Relative weights of the night [00,07), day [07,17) and evening [17,24) bands.
    pub band_weights: [f64; 3],
    pub bbox: BoundingBox,
    pub min_separation_m: f64,
    /// Check-ins scatter uniformly within this radius around their venue.
    pub jitter_m: f64,
    /// Clustering radius the layout must stay compatible with.
    pub cluster_eps_m: f64,
    pub max_placement_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 42,
            n_users: 500,
            days: 120,
            start_date: NaiveDate::from_ymd_opt(2014, 6, 1).expect("valid date"),
            activity_median: 1.6,
            activity_sigma: 0.6,
            work_venues_max: 2,
            leisure_venues_min: 3,
            leisure_venues_max: 8,
            alt_night_prob: 0.85,
            alt_share_max: 1.0,
            home_night_prob: 0.6,
            home_night_noise: 0.35,
            home_day_prob: 0.12,
            weekend_home_boost: 3.0,
            home_evening_prob: 0.45,
            work_hours_prob: 0.55,
            explore_prob: 0.25,
            band_weights: [0.2, 0.45, 0.35],
            bbox: BoundingBox::default(),
            min_separation_m: 300.0,
            jitter_m: 40.0,
            cluster_eps_m: 100.0,
            max_placement_attempts: 500,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("alt_night_prob", self.alt_night_prob),
            ("alt_share_max", self.alt_share_max),
            ("home_night_prob", self.home_night_prob),
            ("home_night_noise", self.home_night_noise),
            ("home_day_prob", self.home_day_prob),
            ("home_evening_prob", self.home_evening_prob),
            ("work_hours_prob", self.work_hours_prob),
            ("explore_prob", self.explore_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.n_users == 0 || self.days == 0 {
            return Err(Error::Config("n_users and days must be positive".into()));
        }
        if !(self.activity_median > 0.0) || !(self.activity_sigma >= 0.0) {
            return Err(Error::Config(
                "activity_median must be positive, activity_sigma non-negative".into(),
            ));
        }
        if !(self.weekend_home_boost >= 0.0) {
            return Err(Error::Config(
                "weekend_home_boost must be non-negative".into(),
            ));
        }
        if self.leisure_venues_min == 0 || self.leisure_venues_min > self.leisure_venues_max {
            return Err(Error::Config(
                "need 1 <= leisure_venues_min <= leisure_venues_max".into(),
            ));
        }
        if self.band_weights.iter().any(|w| !(*w >= 0.0))
            || self.band_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(
                "band_weights must be non-negative with a positive sum".into(),
            ));
        }
        let b = &self.bbox;
        GeoPoint::new(b.lat_min, b.lon_min)?;
        GeoPoint::new(b.lat_max, b.lon_max)?;
        if !(b.lat_min < b.lat_max && b.lon_min < b.lon_max) {
            return Err(Error::Config("empty bounding box".into()));
        }
        if !(self.jitter_m >= 0.0) || 2.0 * self.jitter_m > self.cluster_eps_m {
            return Err(Error::Config(
                "jitter diameter must fit inside cluster_eps_m".into(),
            ));
        }
        if !(self.min_separation_m - 2.0 * self.jitter_m > self.cluster_eps_m) {
            return Err(Error::Config(
                "min_separation_m must exceed cluster_eps_m plus the jitter diameter".into(),
            ));
        }
        if self.max_placement_attempts == 0 {
            return Err(Error::Config(
                "max_placement_attempts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Band {
    Night,
    Day,
    Evening,
}

impl Band {
    fn seconds(self) -> (u32, u32) {
        match self {
            Band::Night => (0, 7 * 3600),
            Band::Day => (7 * 3600, 17 * 3600),
            Band::Evening => (17 * 3600, 24 * 3600),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Home,
    Work(usize),
    Leisure(usize),
    AltNight,
    Explore,
}

struct Layout {
    venues: Vec<GeoPoint>,
}

impl Layout {
    fn place(&mut self, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
        let b = &cfg.bbox;
        for _ in 0..cfg.max_placement_attempts {
            let p = GeoPoint {
                lat: rng.gen_range(b.lat_min..b.lat_max),
                lon: rng.gen_range(b.lon_min..b.lon_max),
            };
            if self
                .venues
                .iter()
                .all(|&v| haversine_m(v, p) >= cfg.min_separation_m)
            {
                self.venues.push(p);
                return Ok(self.venues.len() - 1);
            }
        }
        Err(Error::Config(format!(
            "cannot place venue {} at {} m separation after {} attempts",
            self.venues.len() + 1,
            cfg.min_separation_m,
            cfg.max_placement_attempts
        )))
    }
}

fn jitter(center: GeoPoint, radius_m: f64, rng: &mut ChaCha8Rng) -> GeoPoint {
    let r = radius_m * rng.gen::<f64>().sqrt();
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let dlat = r * theta.sin() / METERS_PER_DEGREE;
    let dlon = r * theta.cos() / (METERS_PER_DEGREE * center.lat.to_radians().cos());
    GeoPoint {
        lat: center.lat + dlat,
        lon: center.lon + dlon,
    }
}

struct UserPlan {
    home_night: f64,
    n_work: usize,
    n_leisure: usize,
    alt_share: f64,
    rate: f64,
}

fn pick_leisure(n: usize, rng: &mut ChaCha8Rng) -> usize {
    let weights: Vec<f64> = (0..n).map(|k| 1.0 / (k + 1) as f64).collect();
    WeightedIndex::new(&weights)
        .expect("positive weights")
        .sample(rng)
}

fn pick_slot(
    cfg: &GeneratorConfig,
    plan: &UserPlan,
    band: Band,
    weekend: bool,
    rng: &mut ChaCha8Rng,
) -> Slot {
    let homelike = |rng: &mut ChaCha8Rng| {
        if !weekend && rng.gen::<f64>() < plan.alt_share {
            Slot::AltNight
        } else {
            Slot::Home
        }
    };
    if band == Band::Night {
        if rng.gen::<f64>() < plan.home_night {
            return homelike(rng);
        }
        return if rng.gen::<f64>() < 0.5 {
            Slot::Explore
        } else {
            Slot::Leisure(pick_leisure(plan.n_leisure, rng))
        };
    }
    if rng.gen::<f64>() < cfg.explore_prob {
        return Slot::Explore;
    }
    match (band, weekend) {
        (Band::Evening, _) => {
            if rng.gen::<f64>() < cfg.home_evening_prob {
                return homelike(rng);
            }
        }
        (_, false) => {
            if rng.gen::<f64>() < cfg.home_day_prob {
                return Slot::Home;
            }
            if plan.n_work > 0 && rng.gen::<f64>() < cfg.work_hours_prob {
                return Slot::Work(rng.gen_range(0..plan.n_work));
            }
        }
        (_, true) => {
            if rng.gen::<f64>() < (cfg.home_day_prob * cfg.weekend_home_boost).min(1.0) {
                return Slot::Home;
            }
        }
    }
    Slot::Leisure(pick_leisure(plan.n_leisure, rng))
}

fn user_id(i: usize) -> String {
    format!("u{i:05}")
}

fn generate_user(cfg: &GeneratorConfig, index: usize) -> Result<(Vec<CheckIn>, GeoPoint)> {
    let mut rng = stream(derive_seed(cfg.seed, SYNTH_TAG), index as u64);
    let user = user_id(index);
    let lo = (cfg.home_night_prob - cfg.home_night_noise).max(0.0);
    let hi = (cfg.home_night_prob + cfg.home_night_noise).min(1.0);
    let plan = UserPlan {
        home_night: if hi > lo { rng.gen_range(lo..=hi) } else { lo },
        n_work: rng.gen_range(0..=cfg.work_venues_max),
        n_leisure: rng.gen_range(cfg.leisure_venues_min..=cfg.leisure_venues_max),
        alt_share: if rng.gen::<f64>() < cfg.alt_night_prob {
            rng.gen_range(0.0..=cfg.alt_share_max)
        } else {
            0.0
        },
        rate: LogNormal::new(cfg.activity_median.ln(), cfg.activity_sigma)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng),
    };

    let mut layout = Layout { venues: Vec::new() };
    let home = layout.place(cfg, &mut rng)?;
    let work: Vec<usize> = (0..plan.n_work)
        .map(|_| layout.place(cfg, &mut rng))
        .collect::<Result<_>>()?;
    let leisure: Vec<usize> = (0..plan.n_leisure)
        .map(|_| layout.place(cfg, &mut rng))
        .collect::<Result<_>>()?;
    let alt = if plan.alt_share > 0.0 {
        Some(layout.place(cfg, &mut rng)?)
    } else {
        None
    };

    let bands = WeightedIndex::new(cfg.band_weights).map_err(|e| Error::Config(e.to_string()))?;
    let per_day = Poisson::new(plan.rate).map_err(|e| Error::Config(e.to_string()))?;
    let mut out: Vec<(NaiveDateTime, usize)> = Vec::new();
    let mut home_at_night = false;
    for d in 0..cfg.days {
        let date = cfg.start_date + Duration::days(d as i64);
        let n = per_day.sample(&mut rng) as usize;
        for _ in 0..n {
            let band = [Band::Night, Band::Day, Band::Evening][bands.sample(&mut rng)];
            let (s0, s1) = band.seconds();
            let secs = rng.gen_range(s0..s1);
            let time = NaiveTime::from_num_seconds_from_midnight_opt(secs, 0).expect("in range");
            // Early-morning hours belong to the previous day's routine.
            let routine_day = if band == Band::Night && secs < 3 * 3600 {
                date - Duration::days(1)
            } else {
                date
            };
            let weekend = crate::features::LogicalDay(routine_day).is_weekend();
            let venue = match pick_slot(cfg, &plan, band, weekend, &mut rng) {
                Slot::Home => home,
                Slot::Work(k) => work[k],
                Slot::Leisure(k) => leisure[k],
                Slot::AltNight => alt.expect("alt venue present"),
                Slot::Explore => layout.place(cfg, &mut rng)?,
            };
            home_at_night |= venue == home && band == Band::Night;
            out.push((date.and_time(time), venue));
        }
    }
    if !home_at_night {
        let d = rng.gen_range(0..cfg.days) as i64;
        let secs = rng.gen_range(0..7 * 3600);
        let time = NaiveTime::from_num_seconds_from_midnight_opt(secs, 0).expect("in range");
        out.push(((cfg.start_date + Duration::days(d)).and_time(time), home));
    }
    out.sort_by_key(|&(t, _)| t);
    let checkins = out
        .into_iter()
        .map(|(t, v)| {
            let p = jitter(layout.venues[v], cfg.jitter_m, &mut rng);
            CheckIn::new(user.clone(), t, p.lat, p.lon)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((checkins, layout.venues[home]))
}

/// A user id and the planted home point.
pub type TruthRow = (String, GeoPoint);

/// Check-ins for all users (grouped by user, time-ordered) and the true home
/// point of each user.
pub fn generate(config: &GeneratorConfig) -> Result<(Vec<CheckIn>, Vec<TruthRow>)> {
    config.validate()?;
    let users: Vec<(Vec<CheckIn>, GeoPoint)> = (0..config.n_users)
        .into_par_iter()
        .map(|i| generate_user(config, i))
        .collect::<Result<_>>()?;
    let mut checkins = Vec::new();
    let mut truth = Vec::with_capacity(users.len());
    for (i, (c, home)) in users.into_iter().enumerate() {
        checkins.extend(c);
        truth.push((user_id(i), home));
    }
    Ok((checkins, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGap {
    pub feature: String,
    pub home_mean: f64,
    pub other_mean: f64,
    pub pooled_sd: f64,
    /// (home_mean - other_mean) / pooled_sd; 0 when the pooled deviation is 0.
    pub standardized_gap: f64,
    /// Accuracy of picking, per user, the record with the largest value.
    pub argmax_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub n_users: usize,
    pub n_records: usize,
    pub mean_records_per_user: f64,
    pub features: Vec<FeatureGap>,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v)
}

/// Per-feature separation between home and non-home records of a labeled dataset.
pub fn bayes_gap_report(dataset: &Dataset) -> GapReport {
    let truth = dataset.home_clusters();
    let features = (0..N_FEATURES)
        .map(|f| {
            let (home, other): (Vec<&crate::data::LocationRecord>, Vec<_>) =
                dataset.records().iter().partition(|r| r.is_home);
            let hv: Vec<f64> = home.iter().map(|r| r.features[f]).collect();
            let ov: Vec<f64> = other.iter().map(|r| r.features[f]).collect();
            let (hm, hvar) = mean_var(&hv);
            let (om, ovar) = mean_var(&ov);
            let n = (hv.len() + ov.len()) as f64;
            let pooled = if n > 0.0 {
                ((hvar * hv.len() as f64 + ovar * ov.len() as f64) / n).sqrt()
            } else {
                0.0
            };
            let preds = crate::evaluation::argmax_predictions(dataset, |_, r| r.features[f]);
            FeatureGap {
                feature: FEATURE_NAMES[f].to_string(),
                home_mean: hm,
                other_mean: om,
                pooled_sd: pooled,
                standardized_gap: if pooled > 0.0 {
                    (hm - om) / pooled
                } else {
                    0.0
                },
                argmax_accuracy: crate::evaluation::home_accuracy(&preds, &truth),
            }
        })
        .collect();
    GapReport {
        n_users: dataset.n_users(),
        n_records: dataset.len(),
        mean_records_per_user: if dataset.n_users() == 0 {
            0.0
        } else {
            dataset.len() as f64 / dataset.n_users() as f64
        },
        features,
    }
}

/// Share of users whose home record has the largest midnight ratio.
pub fn midnight_baseline_accuracy(dataset: &Dataset) -> f64 {
    let preds =
        crate::evaluation::argmax_predictions(dataset, |_, r| r.features[feature::MIDNIGHT_RATIO]);
    crate::evaluation::home_accuracy(&preds, &dataset.home_clusters())
}
