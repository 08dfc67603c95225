//! Seeded synthetic interaction generators.
//!
//! Real O2O logs are proprietary, so experiments and the test suite run on
//! generated data with planted structure: every interaction happens under a
//! hidden regime (think meal-time vs late-night), items belong to regime
//! types, and the label says whether the item's type matched the regime.
//! The regime is never emitted directly; dense context columns carry a
//! noisy, redundant encoding of it, which is exactly the situation the
//! pre-trained representations are meant to exploit. A second generator
//! plants a single all-deciding column next to a pure-noise one, for
//! feature-importance checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Knobs for the regime-structured generators.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub rows_per_user: usize,
    /// Number of hidden regimes; items are typed `item % regimes`.
    pub regimes: usize,
    /// Gaussian noise added to each dense regime-encoding column.
    pub context_noise: f64,
    /// Probability the categorical slot column lies about the regime.
    pub category_noise: f64,
    /// Probability a label flips against the regime-match rule.
    pub label_noise: f64,
    /// Extra dense columns of pure uniform noise.
    pub noise_columns: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 40,
            items: 120,
            rows_per_user: 60,
            regimes: 4,
            context_noise: 0.18,
            category_noise: 0.1,
            label_noise: 0.05,
            noise_columns: 2,
            seed: 7,
        }
    }
}

struct Row {
    user: u64,
    item: u64,
    matched: bool,
    slot: usize,
    dense: Vec<f64>,
}

fn generate_rows(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Row> {
    let r = config.regimes;
    let mut rows = Vec::with_capacity(config.users * config.rows_per_user);
    for user in 0..config.users as u64 {
        for row in 0..config.rows_per_user {
            let regime = rng.gen_range(0..r);
            // the first two rows of every user are guaranteed on-regime
            // positives so every split strategy keeps at least one positive
            // on each side
            let forced = row < 2;
            let item = if forced {
                (regime + r * rng.gen_range(0..config.items / r)) as u64
            } else {
                rng.gen_range(0..config.items) as u64
            };
            let mut matched = item as usize % r == regime;
            if !forced && rng.gen_bool(config.label_noise) {
                matched = !matched;
            }
            let slot = if rng.gen_bool(config.category_noise) {
                rng.gen_range(0..r)
            } else {
                regime
            };
            let mut dense = Vec::with_capacity(2 * r + config.noise_columns);
            for j in 0..r {
                let base = if j == regime { 0.9 } else { 0.1 };
                let noise: f64 = rng.sample(StandardNormal);
                dense.push((base + config.context_noise * noise).clamp(0.0, 1.0));
            }
            // the item's type is observable too, with the same noise; the
            // label is the (hidden) agreement of the two noisy blocks
            for j in 0..r {
                let base = if j == item as usize % r { 0.9 } else { 0.1 };
                let noise: f64 = rng.sample(StandardNormal);
                dense.push((base + config.context_noise * noise).clamp(0.0, 1.0));
            }
            for _ in 0..config.noise_columns {
                dense.push(rng.gen_range(0.0..1.0));
            }
            rows.push(Row {
                user,
                item,
                matched,
                slot,
                dense,
            });
        }
    }
    rows
}

fn header(value_column: &str, timestamp: bool, config: &SynthConfig) -> String {
    let mut h = format!("user_id\titem_id\t{value_column}");
    if timestamp {
        h.push_str("\ttimestamp");
    }
    h.push_str("\tc.slot");
    for j in 0..config.regimes {
        h.push_str(&format!("\td.ctx{j}"));
    }
    for j in 0..config.regimes {
        h.push_str(&format!("\td.it{j}"));
    }
    for j in 0..config.noise_columns {
        h.push_str(&format!("\td.noise{j}"));
    }
    h.push('\n');
    h
}

fn push_context(line: &mut String, row: &Row) {
    line.push_str(&format!("\ts{}", row.slot));
    for v in &row.dense {
        line.push_str(&format!("\t{v:.6}"));
    }
    line.push('\n');
}

/// Review-style TSV: 1-5 star ratings, 4-5 on regime match, 1-3 otherwise.
pub fn review_tsv(config: &SynthConfig) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = header("rating", false, config);
    for row in generate_rows(config, &mut rng) {
        let rating = if row.matched {
            4 + rng.gen_range(0..2)
        } else {
            1 + rng.gen_range(0..3)
        };
        out.push_str(&format!("{}\t{}\t{}", row.user, row.item, rating));
        push_context(&mut out, &row);
    }
    out
}

/// Click-log-style TSV: explicit 0/1 labels and a monotone timestamp.
pub fn ctr_tsv(config: &SynthConfig) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = header("label", true, config);
    for (ts, row) in generate_rows(config, &mut rng).into_iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{ts}",
            row.user,
            row.item,
            u8::from(row.matched)
        ));
        push_context(&mut out, &row);
    }
    out
}

/// Feature-importance probe: the label is decided entirely by `d.signal`
/// (positive iff above 0.5) while `d.noise` is seeded noise. Ablating
/// `signal` must crater AUC; ablating `noise` must not move it.
pub fn ablation_tsv(users: usize, items: usize, rows_per_user: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("user_id\titem_id\tlabel\td.signal\td.noise\n");
    for user in 0..users as u64 {
        for row in 0..rows_per_user {
            let item = rng.gen_range(0..items) as u64;
            // pin one positive and one negative per user
            let signal: f64 = match row {
                0 => rng.gen_range(0.55..1.0),
                1 => rng.gen_range(0.0..0.45),
                _ => rng.gen_range(0.0..1.0),
            };
            let label = u8::from(signal > 0.5);
            let noise: f64 = rng.gen_range(0.0..1.0);
            out.push_str(&format!(
                "{user}\t{item}\t{label}\t{signal:.6}\t{noise:.6}\n"
            ));
        }
    }
    out
}
