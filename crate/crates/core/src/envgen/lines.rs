//! The Cross-Lines configuration table.

use crate::error::{Error, Result};

const TABLE: &str = include_str!("../../data/cross_lines_configs.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    Vertical,
    Horizontal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LineSlot {
    pub channel: usize,
    pub orientation: Orientation,
    /// `+1` or `-1`.
    pub sign: i8,
}

/// One configuration: a vertical line on each of the three channels plus a
/// horizontal line on channel 0, in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LineConfig {
    pub id: usize,
    pub slots: [LineSlot; 4],
}

impl LineConfig {
    pub fn signs(&self) -> [i8; 4] {
        self.slots.map(|s| s.sign)
    }
}

const SLOT_ORDER: [(usize, Orientation); 4] = [
    (0, Orientation::Vertical),
    (1, Orientation::Vertical),
    (2, Orientation::Vertical),
    (0, Orientation::Horizontal),
];

/// Parses the whitespace table `config channel orientation sign`, one line
/// slot per row, `#` comments allowed.
pub fn parse_line_table(text: &str) -> Result<Vec<LineConfig>> {
    let mut rows: Vec<(usize, LineSlot)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("line table row {}: `{raw}`", lineno + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        let id: usize = cols[0].parse().map_err(|_| bad())?;
        let channel: usize = cols[1].parse().map_err(|_| bad())?;
        let orientation = match cols[2] {
            "vertical" => Orientation::Vertical,
            "horizontal" => Orientation::Horizontal,
            _ => return Err(bad()),
        };
        let sign = match cols[3] {
            "+" => 1,
            "-" => -1,
            _ => return Err(bad()),
        };
        if channel > 2 {
            return Err(bad());
        }
        rows.push((id, LineSlot { channel, orientation, sign }));
    }
    let n_configs = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut configs = Vec::with_capacity(n_configs);
    for id in 0..n_configs {
        let slots: Vec<LineSlot> = rows.iter().filter(|r| r.0 == id).map(|r| r.1).collect();
        if slots.len() != 4 {
            return Err(Error::Format(format!("configuration {id} has {} line slots, need 4", slots.len())));
        }
        let mut ordered = [slots[0]; 4];
        for (k, (ch, orient)) in SLOT_ORDER.iter().enumerate() {
            ordered[k] = *slots
                .iter()
                .find(|s| s.channel == *ch && s.orientation == *orient)
                .ok_or_else(|| Error::Format(format!("configuration {id} lacks the channel-{ch} {orient:?} line")))?;
        }
        configs.push(LineConfig { id, slots: ordered });
    }
    Ok(configs)
}

/// The checked-in table: eleven rows labeled 0 to 10, ten distinct sign
/// patterns (rows 0 and 3 coincide).
pub fn line_table() -> Vec<LineConfig> {
    parse_line_table(TABLE).expect("checked-in line table parses")
}

/// Pairs of row ids that share a sign pattern.
pub fn duplicate_patterns(configs: &[LineConfig]) -> Vec<(usize, usize)> {
    let mut dups = Vec::new();
    for (i, a) in configs.iter().enumerate() {
        for b in &configs[i + 1..] {
            if a.signs() == b.signs() {
                dups.push((a.id, b.id));
            }
        }
    }
    dups
}
