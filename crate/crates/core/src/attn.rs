//! Attention visibility plans.
//!
//! Encoder rules for levitated markers, with `[CLS]`/`[SEP]` counted as text:
//!
//! * text tokens see every text token and no marker;
//! * a marker sees every text token, itself and its pair partner, and no
//!   marker of another pair.
//!
//! Decoder plans put the span-representation prefix in front of the target
//! slots. Every target row sees the whole prefix. Target slot `t` is fed the
//! token of slot `t - 1`, so with window `k` row `t` sees target columns
//! `t - k + 1 ..= t`, which hold exactly the `k` tokens preceding `y_t`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{EncoderInput, Role};

/// Row-major boolean matrix; `get(q, k)` is true when query `q` may attend
/// to key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visibility {
    n: usize,
    cells: Vec<bool>,
}

impl Visibility {
    pub fn new(n: usize) -> Self {
        Visibility {
            n,
            cells: vec![false; n * n],
        }
    }

    pub fn full(n: usize) -> Self {
        Visibility {
            n,
            cells: vec![true; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.cells[q * self.n + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.cells[q * self.n + k] = v;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.cells[q * self.n..(q + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.cells
    }

    /// 0/1 grid, one row per line.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for q in 0..self.n {
            for &c in self.row(q) {
                s.push(if c { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_grid(grid: &str) -> Result<Self> {
        let rows: Vec<&str> = grid.lines().filter(|l| !l.is_empty()).collect();
        let n = rows.len();
        let mut v = Visibility::new(n);
        for (q, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!("grid row {q} has {} cells, expected {n}", row.len())));
            }
            for (k, c) in row.chars().enumerate() {
                match c {
                    '1' => v.set(q, k, true),
                    '0' => {}
                    other => return Err(Error::Shape(format!("unexpected grid cell `{other}`"))),
                }
            }
        }
        Ok(v)
    }
}

impl fmt::Display for Visibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_grid())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPlan {
    pub visibility: Visibility,
    pub position_ids: Vec<usize>,
}

pub fn encoder_plan(input: &EncoderInput) -> AttentionPlan {
    let n = input.len();
    let mut vis = Visibility::new(n);
    // pair id per index, None for text
    let mut owner = vec![None; n];
    for (p, pair) in input.pairs.iter().enumerate() {
        owner[pair.open] = Some(p);
        owner[pair.close] = Some(p);
    }
    for q in 0..n {
        for k in 0..n {
            let visible = match (owner[q], owner[k]) {
                (_, None) => true,
                (None, Some(_)) => false,
                (Some(a), Some(b)) => a == b,
            };
            vis.set(q, k, visible);
        }
    }
    debug_assert!(input.roles[..input.text_len()].iter().all(|r| *r == Role::Text));
    AttentionPlan {
        visibility: vis,
        position_ids: input.positions.clone(),
    }
}

/// Decoder attention window over target slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Each prediction sees the previous `k` target tokens.
    Last(usize),
    /// Ordinary causal attention over all previous target tokens.
    All,
}

impl Window {
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Window::All);
        }
        let k: usize = s
            .parse()
            .map_err(|_| Error::Config(format!("window `{s}` is neither a count nor `all`")))?;
        if k == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        Ok(Window::Last(k))
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Last(k) => write!(f, "{k}"),
            Window::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderPlan {
    pub visibility: Visibility,
    pub prefix_len: usize,
    pub target_len: usize,
    pub window: Window,
}

impl DecoderPlan {
    pub fn len(&self) -> usize {
        self.prefix_len + self.target_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Plan index of target slot `t`.
    pub fn target_index(&self, t: usize) -> usize {
        self.prefix_len + t
    }
}

pub fn decoder_plan(target_len: usize, prefix_len: usize, window: Window) -> Result<DecoderPlan> {
    if target_len == 0 {
        return Err(Error::Config("decoder target length must be >= 1".into()));
    }
    if prefix_len == 0 {
        return Err(Error::Config("decoder prefix length must be >= 1".into()));
    }
    if window == Window::Last(0) {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let n = prefix_len + target_len;
    let mut vis = Visibility::new(n);
    for q in 0..prefix_len {
        for k in 0..prefix_len {
            vis.set(q, k, true);
        }
    }
    for t in 0..target_len {
        let row = prefix_len + t;
        for k in 0..prefix_len {
            vis.set(row, k, true);
        }
        let first = match window {
            Window::All => 0,
            Window::Last(k) => (t + 1).saturating_sub(k),
        };
        for j in first..=t {
            vis.set(row, prefix_len + j, true);
        }
    }
    Ok(DecoderPlan {
        visibility: vis,
        prefix_len,
        target_len,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{assemble_from_ids, MarkerKind};

    #[test]
    fn no_markers_is_all_visible() {
        let inp = assemble_from_ids(&[20, 21, 22], &[]).unwrap();
        let plan = encoder_plan(&inp);
        assert_eq!(plan.visibility, Visibility::full(5));
    }

    #[test]
    fn single_pair_grid() {
        // one text token between [CLS] and [SEP]: indices 0..=2 text, 3,4 markers
        let inp = assemble_from_ids(&[20], &[(0, 0, MarkerKind::Entity)]).unwrap();
        let plan = encoder_plan(&inp);
        let expected = "11100\n11100\n11100\n11111\n11111\n";
        assert_eq!(plan.visibility.to_grid(), expected);
        assert_eq!(plan.position_ids, vec![0, 1, 2, 1, 1]);
        assert_eq!(Visibility::from_grid(expected).unwrap(), plan.visibility);
    }

    #[test]
    fn pairs_do_not_see_each_other() {
        let inp = assemble_from_ids(&[20], &[(0, 0, MarkerKind::Entity), (0, 0, MarkerKind::Relation)])
            .unwrap();
        let v = encoder_plan(&inp).visibility;
        assert!(!v.get(3, 5));
        assert!(!v.get(5, 3));
        assert!(v.get(5, 6) && v.get(6, 5));
    }

    #[test]
    fn default_width_two_window() {
        // prefix 1, 4 targets, k = 2: the row predicting y4 (slot 3) sees slots 2, 3,
        // whose inputs are y2 and y3
        let plan = decoder_plan(4, 1, Window::Last(2)).unwrap();
        let row = plan.target_index(3);
        let seen: Vec<usize> = (0..plan.len()).filter(|&k| plan.visibility.get(row, k)).collect();
        assert_eq!(seen, vec![0, 3, 4]);
    }

    #[test]
    fn all_window_is_causal() {
        let plan = decoder_plan(3, 1, Window::All).unwrap();
        assert_eq!(plan.visibility.to_grid(), "1000\n1100\n1110\n1111\n");
    }

    #[test]
    fn decoder_plan_rejects_empty_target() {
        assert!(decoder_plan(0, 1, Window::All).is_err());
        assert!(decoder_plan(2, 1, Window::Last(0)).is_err());
        assert!(Window::parse("0").is_err());
        assert_eq!(Window::parse("ALL").unwrap(), Window::All);
        assert_eq!(Window::parse("16").unwrap(), Window::Last(16));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::text::{assemble_from_ids, MarkerKind};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn decoder_causality_and_tightness(len in 1usize..20, k in 1usize..8, all in any::<bool>()) {
            let window = if all { Window::All } else { Window::Last(k) };
            let plan = decoder_plan(len, 1, window).unwrap();
            for t in 0..len {
                let row = plan.target_index(t);
                prop_assert!(plan.visibility.get(row, 0));
                prop_assert!(plan.visibility.get(row, row));
                for t2 in t + 1..len {
                    prop_assert!(!plan.visibility.get(row, plan.target_index(t2)));
                }
                if let Window::Last(k) = window {
                    if t >= k + 1 {
                        prop_assert!(!plan.visibility.get(row, plan.target_index(t - k - 1)));
                    }
                }
            }
        }

        #[test]
        fn adding_a_pair_changes_no_existing_entry(n in 1usize..10, a in 0usize..10, b in 0usize..10) {
            let ids: Vec<u32> = (0..n as u32).map(|i| 20 + i).collect();
            let (s, e) = ((a % n).min(b % n), (a % n).max(b % n));
            let one = assemble_from_ids(&ids, &[(s, e, MarkerKind::Entity)]).unwrap();
            let two = assemble_from_ids(&ids, &[(s, e, MarkerKind::Entity), (0, n - 1, MarkerKind::Relation)]).unwrap();
            let v1 = encoder_plan(&one).visibility;
            let v2 = encoder_plan(&two).visibility;
            for q in 0..one.len() {
                for k in 0..one.len() {
                    prop_assert_eq!(v1.get(q, k), v2.get(q, k));
                }
            }
        }
    }
}
