//! Candidate date recognition.
//!
//! Two surface forms are recognised:
//!
//! * numeric: `D<sep>M<sep>Y` where `D` is 1-31, `M` is 1-12, `Y` has two or
//!   four digits, and both separators are the same character from `/ . -`;
//! * textual: `[the] <day>[st|nd|rd|th] of <month>[,] <year>`, e.g.
//!   "the 5th of May, 1998" or "11th of Jun 62".
//!
//! Every surface is canonicalised to a [`CanonicalDate`]. A digit run is never
//! split: a match may not start right after a digit or end right before one.
//! Calendar-invalid surfaces are discarded, and the surviving matches are
//! selected left to right, longest first, without overlap.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Two-digit years strictly above this value belong to the 1900s.
pub const TWO_DIGIT_YEAR_PIVOT: u32 = 25;

/// Accepted range for four-digit years.
pub const FOUR_DIGIT_YEAR_RANGE: std::ops::RangeInclusive<u32> = 1000..=2999;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DateError {
    #[error("{day:02}/{month:02}/{year:04} is not a valid calendar date")]
    InvalidCalendarDate { day: u32, month: u32, year: u32 },
    #[error("cannot parse {0:?} as DD/MM/YYYY")]
    Unparseable(String),
}

/// A validated Gregorian calendar day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CanonicalDate {
    // Field order gives chronological ordering.
    year: u16,
    month: u8,
    day: u8,
}

impl CanonicalDate {
    pub fn new(day: u32, month: u32, year: u32) -> Result<Self, DateError> {
        let invalid = DateError::InvalidCalendarDate { day, month, year };
        if year > 9999 {
            return Err(invalid);
        }
        match NaiveDate::from_ymd_opt(year as i32, month, day) {
            Some(_) => Ok(Self {
                year: year as u16,
                month: month as u8,
                day: day as u8,
            }),
            None => Err(invalid),
        }
    }

    pub fn day(&self) -> u32 {
        self.day.into()
    }

    pub fn month(&self) -> u32 {
        self.month.into()
    }

    pub fn year(&self) -> u32 {
        self.year.into()
    }
}

impl fmt::Display for CanonicalDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}/{:02}/{:04}", self.day, self.month, self.year)
    }
}

impl FromStr for CanonicalDate {
    type Err = DateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_strict_ddmmyyyy(s).ok_or_else(|| DateError::Unparseable(s.to_string()))
    }
}

impl Serialize for CanonicalDate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CanonicalDate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One recognised date surface in a text. Spans are character offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DateMatch {
    pub date: CanonicalDate,
    pub span_start: usize,
    pub span_end: usize,
    pub surface: String,
}

/// All candidate answers found in a text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateSet {
    matches: Vec<DateMatch>,
    distinct_dates: BTreeSet<CanonicalDate>,
}

impl CandidateSet {
    fn from_matches(matches: Vec<DateMatch>) -> Self {
        let distinct_dates = matches.iter().map(|m| m.date).collect();
        Self {
            matches,
            distinct_dates,
        }
    }

    /// Matches in text order.
    pub fn matches(&self) -> &[DateMatch] {
        &self.matches
    }

    pub fn distinct_dates(&self) -> &BTreeSet<CanonicalDate> {
        &self.distinct_dates
    }

    pub fn contains(&self, date: &CanonicalDate) -> bool {
        self.distinct_dates.contains(date)
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// The earliest match in the text, if any.
    pub fn first(&self) -> Option<&DateMatch> {
        self.matches.first()
    }
}

/// Maps a two-digit year onto a four-digit one: `26..=99` go to the 1900s and
/// `0..=25` to the 2000s.
///
/// # Panics
///
/// Panics if `yy > 99`.
pub fn resolve_two_digit_year(yy: u32) -> u32 {
    assert!(yy <= 99, "two-digit year out of range: {yy}");
    if yy > TWO_DIGIT_YEAR_PIVOT {
        1900 + yy
    } else {
        2000 + yy
    }
}

/// Resolves a 2- or 4-digit year token. Other lengths, and four-digit years
/// outside [`FOUR_DIGIT_YEAR_RANGE`], yield `None`.
fn resolve_year_token(token: &str) -> Option<u32> {
    let value: u32 = token.parse().ok()?;
    match token.len() {
        2 => Some(resolve_two_digit_year(value)),
        4 if FOUR_DIGIT_YEAR_RANGE.contains(&value) => Some(value),
        _ => None,
    }
}

const MONTHS: [&str; 12] = [
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];

/// Case-insensitive lookup of a full English month name or its three-letter
/// abbreviation.
pub fn month_number(name: &str) -> Option<u32> {
    let lower = name.to_ascii_lowercase();
    MONTHS
        .iter()
        .position(|full| *full == lower || (lower.len() == 3 && full.starts_with(&lower)))
        .map(|i| i as u32 + 1)
}

static NUMERIC: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^([0-9]{1,2})([/.\-])([0-9]{1,2})([/.\-])([0-9]{4}|[0-9]{2})").unwrap()
});

static STRICT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([0-9]{1,2})/([0-9]{1,2})/([0-9]{4}|[0-9]{2})$").unwrap());

const MONTH_ALTERNATION: &str = "january|february|march|april|may|june|july|august|september|\
october|november|december|jan|feb|mar|apr|jun|jul|aug|sep|oct|nov|dec";

fn textual_pattern() -> String {
    format!(
        r"(?i)(?:\bthe\s+)?([0-9]{{1,2}})(?:st|nd|rd|th)?\s+of\s+({MONTH_ALTERNATION})\b\.?\s*,?\s*([0-9]{{4}}|[0-9]{{2}})"
    )
}

static TEXTUAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(&textual_pattern()).unwrap());

static TEXTUAL_EXACT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!("^(?:{})$", textual_pattern())).unwrap());

fn is_ascii_digit_at(text: &str, byte_index: usize) -> bool {
    text.as_bytes()
        .get(byte_index)
        .is_some_and(u8::is_ascii_digit)
}

fn preceded_by_digit(text: &str, byte_index: usize) -> bool {
    byte_index > 0 && is_ascii_digit_at(text, byte_index - 1)
}

fn date_from_tokens(day: &str, month: u32, year: &str) -> Option<CanonicalDate> {
    let day: u32 = day.parse().ok()?;
    let year = resolve_year_token(year)?;
    CanonicalDate::new(day, month, year).ok()
}

/// A syntactic match with byte offsets, before overlap resolution.
struct RawMatch {
    start: usize,
    end: usize,
    date: CanonicalDate,
}

fn numeric_matches(text: &str, out: &mut Vec<RawMatch>) {
    let bytes = text.as_bytes();
    for start in 0..bytes.len() {
        // Only the first digit of a run can open a match.
        if !bytes[start].is_ascii_digit() || preceded_by_digit(text, start) {
            continue;
        }
        let Some(caps) = NUMERIC.captures(&text[start..]) else {
            continue;
        };
        if caps[2] != caps[4] {
            continue;
        }
        let end = start + caps[0].len();
        if is_ascii_digit_at(text, end) {
            continue;
        }
        let month: u32 = caps[3].parse().expect("regex guarantees digits");
        if !(1..=12).contains(&month) {
            continue;
        }
        if let Some(date) = date_from_tokens(&caps[1], month, &caps[5]) {
            out.push(RawMatch { start, end, date });
        }
    }
}

fn textual_matches(text: &str, out: &mut Vec<RawMatch>) {
    for caps in TEXTUAL.captures_iter(text) {
        let whole = caps.get(0).expect("group 0 always present");
        let day = caps.get(1).expect("day group is mandatory");
        if preceded_by_digit(text, day.start()) || is_ascii_digit_at(text, whole.end()) {
            continue;
        }
        let month = month_number(&caps[2]).expect("alternation only admits month names");
        if let Some(date) = date_from_tokens(day.as_str(), month, &caps[3]) {
            out.push(RawMatch {
                start: whole.start(),
                end: whole.end(),
                date,
            });
        }
    }
}

/// Finds every candidate date in `text`.
pub fn extract_candidates(text: &str) -> CandidateSet {
    let mut raw = Vec::new();
    numeric_matches(text, &mut raw);
    textual_matches(text, &mut raw);
    raw.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));

    let mut selected = Vec::new();
    let mut last_end = 0;
    for m in raw {
        if m.start >= last_end {
            last_end = m.end;
            selected.push(m);
        }
    }
    if selected.is_empty() {
        return CandidateSet::default();
    }

    // Convert byte offsets to character offsets in one pass.
    let mut boundaries: Vec<usize> = selected.iter().flat_map(|m| [m.start, m.end]).collect();
    boundaries.sort_unstable();
    boundaries.dedup();
    let mut char_offsets = std::collections::HashMap::with_capacity(boundaries.len());
    let mut next = boundaries.iter().peekable();
    for (char_index, (byte_index, _)) in text
        .char_indices()
        .chain(std::iter::once((text.len(), ' ')))
        .enumerate()
    {
        while let Some(&&b) = next.peek() {
            if b == byte_index {
                char_offsets.insert(b, char_index);
                next.next();
            } else {
                break;
            }
        }
    }

    let matches = selected
        .into_iter()
        .map(|m| DateMatch {
            date: m.date,
            span_start: char_offsets[&m.start],
            span_end: char_offsets[&m.end],
            surface: text[m.start..m.end].to_string(),
        })
        .collect();
    CandidateSet::from_matches(matches)
}

/// Canonicalises a complete textual date surface such as "11th of Jun 62".
pub fn normalize_textual_date(surface: &str) -> Option<CanonicalDate> {
    let caps = TEXTUAL_EXACT.captures(surface.trim())?;
    let month = month_number(&caps[2])?;
    date_from_tokens(&caps[1], month, &caps[3])
}

/// Parses `D/M/Y` with `/` separators only and a 2- or 4-digit year.
pub fn parse_strict_ddmmyyyy(s: &str) -> Option<CanonicalDate> {
    let caps = STRICT.captures(s.trim())?;
    let month: u32 = caps[2].parse().ok()?;
    date_from_tokens(&caps[1], month, &caps[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(day: u32, month: u32, year: u32) -> CanonicalDate {
        CanonicalDate::new(day, month, year).unwrap()
    }

    fn dates_of(text: &str) -> Vec<CanonicalDate> {
        extract_candidates(text)
            .matches()
            .iter()
            .map(|m| m.date)
            .collect()
    }

    #[test]
    fn textual_examples() {
        assert_eq!(dates_of("the 5th of May, 1998"), vec![d(5, 5, 1998)]);
        assert_eq!(dates_of("11th of Jun 62"), vec![d(11, 6, 1962)]);
        assert_eq!(dates_of("seen on 1st of JANUARY 2000."), vec![d(1, 1, 2000)]);
        assert_eq!(dates_of("3 of sept 2001"), vec![]);
        assert_eq!(dates_of("3rd of Sep. 2001"), vec![d(3, 9, 2001)]);
    }

    #[test]
    fn textual_surface_includes_leading_article() {
        let set = extract_candidates("DOB: the 5th of May, 1998.");
        let m = &set.matches()[0];
        assert_eq!(m.surface, "the 5th of May, 1998");
        assert_eq!((m.span_start, m.span_end), (5, 25));
    }

    #[test]
    fn separators_must_agree() {
        assert!(extract_candidates("12/06-98").is_empty());
        assert!(extract_candidates("12.06/1998").is_empty());
        assert_eq!(dates_of("12-06-98"), vec![d(12, 6, 1998)]);
        assert_eq!(dates_of("12.06.1998"), vec![d(12, 6, 1998)]);
    }

    #[test]
    fn invalid_calendar_dates_are_dropped() {
        assert!(extract_candidates("31/02/2001").is_empty());
        assert!(extract_candidates("29/02/2001").is_empty());
        assert_eq!(dates_of("29/02/2000"), vec![d(29, 2, 2000)]);
        assert!(extract_candidates("00/01/2000").is_empty());
        assert!(extract_candidates("01/13/2000").is_empty());
    }

    #[test]
    fn same_date_two_surfaces() {
        let set = extract_candidates("01.01.2020 and 01/01/2020");
        assert_eq!(set.matches().len(), 2);
        assert_eq!(set.distinct_dates().len(), 1);
        assert!(set.contains(&d(1, 1, 2020)));
    }

    #[test]
    fn digit_runs_are_not_split() {
        assert!(extract_candidates("123/4/2000").is_empty());
        assert!(extract_candidates("1/4/20001").is_empty());
        assert!(extract_candidates("1/4/200").is_empty());
        assert_eq!(dates_of("x1/4/2000y"), vec![d(1, 4, 2000)]);
    }

    #[test]
    fn four_digit_year_range() {
        assert!(extract_candidates("01/01/0999").is_empty());
        assert!(extract_candidates("01/01/3000").is_empty());
        assert_eq!(dates_of("01/01/1000 01/01/2999").len(), 2);
    }

    #[test]
    fn overlaps_resolve_left_to_right() {
        // "1/1/20" wins over the later "20/1/2000".
        assert_eq!(dates_of("1/1/20/1/2000"), vec![d(1, 1, 2020)]);
        // An invalid leading candidate does not block a later valid one.
        assert_eq!(dates_of("31/02/01/01/2000"), vec![d(2, 1, 2001)]);
    }

    #[test]
    fn spans_are_character_offsets() {
        let set = extract_candidates("né le 05/05/1998");
        let m = &set.matches()[0];
        assert_eq!((m.span_start, m.span_end), (6, 16));
        let chars: String = "né le 05/05/1998".chars().skip(6).take(10).collect();
        assert_eq!(chars, m.surface);
    }

    #[test]
    fn two_digit_year_pivot() {
        assert_eq!(resolve_two_digit_year(62), 1962);
        assert_eq!(resolve_two_digit_year(26), 1926);
        assert_eq!(resolve_two_digit_year(25), 2025);
        assert_eq!(resolve_two_digit_year(0), 2000);
        assert_eq!(resolve_two_digit_year(99), 1999);
    }

    #[test]
    #[should_panic]
    fn two_digit_year_rejects_three_digits() {
        resolve_two_digit_year(100);
    }

    #[test]
    fn textual_normalisation() {
        assert_eq!(normalize_textual_date("11th of Jun 62"), Some(d(11, 6, 1962)));
        assert_eq!(
            normalize_textual_date("1st of January 2000"),
            Some(d(1, 1, 2000))
        );
        assert_eq!(normalize_textual_date("32nd of Jan 2000"), None);
        assert_eq!(normalize_textual_date("the 5th of May, 1998"), Some(d(5, 5, 1998)));
        assert_eq!(normalize_textual_date("5th of May, 1998 and more"), None);
    }

    #[test]
    fn strict_parsing() {
        assert_eq!(parse_strict_ddmmyyyy("05/05/1998"), Some(d(5, 5, 1998)));
        assert_eq!(parse_strict_ddmmyyyy("5/5/98"), Some(d(5, 5, 1998)));
        assert_eq!(parse_strict_ddmmyyyy("05-05-1998"), None);
        assert_eq!(parse_strict_ddmmyyyy("31/02/2001"), None);
        assert_eq!(parse_strict_ddmmyyyy("05/05/998"), None);
    }

    #[test]
    fn month_table() {
        assert_eq!(month_number("Jun"), Some(6));
        assert_eq!(month_number("SEPTEMBER"), Some(9));
        assert_eq!(month_number("ju"), None);
        assert_eq!(month_number("junk"), None);
    }

    #[test]
    fn serde_uses_canonical_rendering() {
        let json = serde_json::to_string(&d(3, 4, 1985)).unwrap();
        assert_eq!(json, "\"03/04/1985\"");
        let back: CanonicalDate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d(3, 4, 1985));
    }

    fn valid_date() -> impl Strategy<Value = CanonicalDate> {
        (1u32..=31, 1u32..=12, 1000u32..=2999)
            .prop_filter_map("calendar-valid", |(d, m, y)| CanonicalDate::new(d, m, y).ok())
    }

    proptest! {
        #[test]
        fn strict_round_trip(date in valid_date()) {
            prop_assert_eq!(parse_strict_ddmmyyyy(&date.to_string()), Some(date));
        }

        #[test]
        fn pivot_preserves_last_two_digits(yy in 0u32..=99) {
            prop_assert_eq!(resolve_two_digit_year(yy) % 100, yy);
        }

        #[test]
        fn outputs_are_valid_and_spans_consistent(text in "[0-9a-zA-Z /.,\\-]{0,40}") {
            let set = extract_candidates(&text);
            let chars: Vec<char> = text.chars().collect();
            for m in set.matches() {
                prop_assert!(m.span_start < m.span_end);
                let surface: String = chars[m.span_start..m.span_end].iter().collect();
                prop_assert_eq!(&surface, &m.surface);
                prop_assert!(CanonicalDate::new(m.date.day(), m.date.month(), m.date.year()).is_ok());
            }
            prop_assert_eq!(extract_candidates(&text), set);
        }
    }
}
