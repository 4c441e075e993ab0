//! Human-readable flag values: durations (`90s`, `30m`, `24h`, `2d`) and
//! sizes (`1e6`, `10k`, `2M`), plus lists and decade ranges of sizes.

use crate::error::{usage, CliResult};

/// Seconds from `<number>[s|m|h|d]`; a bare number is seconds.
pub fn parse_duration(s: &str) -> CliResult<i64> {
    let s = s.trim();
    let (num, unit) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => (&s[..i], c),
        _ => (s, 's'),
    };
    let scale = match unit {
        's' => 1.0,
        'm' => 60.0,
        'h' => 3600.0,
        'd' => 86_400.0,
        _ => return usage(format!("bad duration '{s}': unit must be s, m, h or d")),
    };
    let x: f64 = num.parse().or_else(|_| usage(format!("bad duration '{s}'")))?;
    let secs = x * scale;
    if !secs.is_finite() || secs < 0.0 || secs.fract() != 0.0 {
        return usage(format!("bad duration '{s}': must be a whole, nonnegative number of seconds"));
    }
    Ok(secs as i64)
}

pub fn parse_durations(s: &str) -> CliResult<Vec<i64>> {
    s.split(',').map(parse_duration).collect()
}

/// A positive integer count: `1000`, `1e6`, `10k`, `2M`, `1G`.
pub fn parse_size(s: &str) -> CliResult<usize> {
    let s = s.trim();
    let (num, scale) = match s.chars().last() {
        Some('k' | 'K') => (&s[..s.len() - 1], 1e3),
        Some('M') => (&s[..s.len() - 1], 1e6),
        Some('G') => (&s[..s.len() - 1], 1e9),
        _ => (s, 1.0),
    };
    let x: f64 = num.parse().or_else(|_| usage(format!("bad size '{s}'")))?;
    let v = x * scale;
    if !v.is_finite() || v < 1.0 || v.fract() != 0.0 || v > 1e15 {
        return usage(format!("bad size '{s}': must be a positive integer"));
    }
    Ok(v as usize)
}

/// Comma-separated sizes, or `lo..hi` for every power of ten in between
/// (`1e3..1e7` gives five values).
pub fn parse_size_list(s: &str) -> CliResult<Vec<usize>> {
    if let Some((lo, hi)) = s.split_once("..") {
        let (lo, hi) = (parse_size(lo)?, parse_size(hi)?);
        if lo > hi {
            return usage(format!("empty range '{s}'"));
        }
        let mut out = Vec::new();
        let mut v = lo;
        while v <= hi {
            out.push(v);
            v = match v.checked_mul(10) {
                Some(n) => n,
                None => break,
            };
        }
        return Ok(out);
    }
    s.split(',').map(parse_size).collect()
}

pub fn format_duration(secs: i64) -> String {
    match secs {
        0 => "0".into(),
        s if s % 86_400 == 0 => format!("{}d", s / 86_400),
        s if s % 3600 == 0 => format!("{}h", s / 3600),
        s if s % 60 == 0 => format!("{}m", s / 60),
        s => format!("{s}s"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations() {
        assert_eq!(parse_duration("24h").unwrap(), 86_400);
        assert_eq!(parse_duration("90").unwrap(), 90);
        assert_eq!(parse_duration("1.5h").unwrap(), 5400);
        assert_eq!(parse_duration("2d").unwrap(), 172_800);
        assert_eq!(parse_duration("30m").unwrap(), 1800);
        assert!(parse_duration("3w").is_err());
        assert!(parse_duration("-1h").is_err());
        assert!(parse_duration("h").is_err());
        assert_eq!(parse_durations("0,24h,48h").unwrap(), vec![0, 86_400, 172_800]);
        assert_eq!(format_duration(172_800), "2d");
        assert_eq!(format_duration(3600 * 5), "5h");
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("1e6").unwrap(), 1_000_000);
        assert_eq!(parse_size("10k").unwrap(), 10_000);
        assert_eq!(parse_size("2M").unwrap(), 2_000_000);
        assert_eq!(parse_size("512").unwrap(), 512);
        assert!(parse_size("0").is_err());
        assert!(parse_size("1.5").is_err());
        assert!(parse_size("x").is_err());
        assert_eq!(parse_size_list("1e3..1e7").unwrap(), vec![1000, 10_000, 100_000, 1_000_000, 10_000_000]);
        assert_eq!(parse_size_list("1e6,1e7").unwrap(), vec![1_000_000, 10_000_000]);
        assert!(parse_size_list("1e7..1e6").is_err());
    }
}
