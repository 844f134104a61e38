//! Plain-text configuration and trajectory files.
//!
//! Both formats are line oriented. Floats are written in shortest round-trip
//! exponent form, so reading a written file reproduces the values bit for bit.
//!
//! Configuration file:
//! ```text
//! globules <n>
//! meta <key> <value>        (any number)
//! g <i> <x> <y> <z> <r>     (n lines, i = 0..n)
//! ```
//!
//! Trajectory file, one block per recorded time:
//! ```text
//! trajectory <n> dt <dt> records <K>
//! meta <key> <value>
//! refine <step> <depth>
//! <t> <i> <x> <y> <z> <r>   (n lines per block)
//! L <i> <j> <value>         (ledger checkpoint, nonzero entries)
//! Lplus <i> <value>
//! Lminus <i> <value>
//! ```
//! A block of a trajectory without globules is the single line `empty <t>`.

use std::io::Write;
use std::str::SplitWhitespace;

use crate::dynamics::{LocalTimeLedger, Refinement, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::geometry::{Configuration, Globule};

/// Ordered key-value metadata carried by a file.
pub type Meta = Vec<(String, String)>;

fn write_meta<W: Write>(w: &mut W, meta: &[(String, String)]) -> Result<()> {
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') || v.is_empty() {
            return Err(Error::param("meta", format!("unwritable entry `{k}`")));
        }
        writeln!(w, "meta {k} {v}")?;
    }
    Ok(())
}

fn write_globules<W: Write>(w: &mut W, c: &Configuration) -> Result<()> {
    for (i, g) in c.iter().enumerate() {
        writeln!(
            w,
            "g {i} {:e} {:e} {:e} {:e}",
            g.center.x, g.center.y, g.center.z, g.radius
        )?;
    }
    Ok(())
}

pub fn write_configuration<W: Write>(w: &mut W, c: &Configuration, meta: &[(String, String)]) -> Result<()> {
    writeln!(w, "globules {}", c.len())?;
    write_meta(w, meta)?;
    write_globules(w, c)
}

pub fn configuration_to_string(c: &Configuration, meta: &[(String, String)]) -> Result<String> {
    let mut buf = Vec::new();
    write_configuration(&mut buf, c, meta)?;
    Ok(String::from_utf8(buf).expect("ascii output"))
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate().peekable(),
        }
    }

    /// Next nonblank line as (line number, tag, remaining fields).
    fn next(&mut self) -> Option<(usize, &'a str, SplitWhitespace<'a>)> {
        loop {
            let (n, line) = self.inner.next()?;
            let mut f = line.split_whitespace();
            if let Some(tag) = f.next() {
                return Some((n + 1, tag, f));
            }
        }
    }

    fn peek_tag(&mut self) -> Option<&'a str> {
        while let Some((_, line)) = self.inner.peek() {
            match line.split_whitespace().next() {
                Some(tag) => return Some(tag),
                None => {
                    self.inner.next();
                }
            }
        }
        None
    }
}

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

fn field<T: std::str::FromStr>(f: &mut SplitWhitespace<'_>, line: usize, what: &str) -> Result<T> {
    let s = f.next().ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    s.parse().map_err(|_| parse_err(line, format!("bad {what} `{s}`")))
}

fn finish(f: &mut SplitWhitespace<'_>, line: usize) -> Result<()> {
    match f.next() {
        Some(extra) => Err(parse_err(line, format!("unexpected field `{extra}`"))),
        None => Ok(()),
    }
}

fn read_meta(lines: &mut Lines<'_>) -> Result<Meta> {
    let mut meta = Meta::new();
    while lines.peek_tag() == Some("meta") {
        let (n, _, mut f) = lines.next().expect("peeked");
        let key: String = field(&mut f, n, "meta key")?;
        let value: Vec<&str> = f.collect();
        if value.is_empty() {
            return Err(parse_err(n, "missing meta value"));
        }
        meta.push((key, value.join(" ")));
    }
    Ok(meta)
}

fn read_globules(lines: &mut Lines<'_>, count: usize) -> Result<Configuration> {
    let mut gs = Vec::with_capacity(count);
    for k in 0..count {
        let (n, tag, mut f) = lines
            .next()
            .ok_or_else(|| parse_err(0, format!("expected {count} globules, found {k}")))?;
        if tag != "g" {
            return Err(parse_err(n, format!("expected `g`, found `{tag}`")));
        }
        gs.push(read_globule_fields(&mut f, n, k)?);
    }
    Ok(Configuration::new(gs))
}

/// `<i> <x> <y> <z> <r>` with `i` required to equal `k`.
fn read_globule_fields(f: &mut SplitWhitespace<'_>, n: usize, k: usize) -> Result<Globule> {
    let i: usize = field(f, n, "index")?;
    if i != k {
        return Err(parse_err(n, format!("expected globule {k}, found {i}")));
    }
    let x = field(f, n, "x")?;
    let y = field(f, n, "y")?;
    let z = field(f, n, "z")?;
    let r: f64 = field(f, n, "radius")?;
    finish(f, n)?;
    Ok(Globule::new([x, y, z], r))
}

pub fn read_configuration(text: &str) -> Result<(Configuration, Meta)> {
    let mut lines = Lines::new(text);
    let (n, tag, mut f) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    if tag != "globules" {
        return Err(parse_err(n, "expected `globules <n>` header"));
    }
    let count: usize = field(&mut f, n, "globule count")?;
    finish(&mut f, n)?;
    let meta = read_meta(&mut lines)?;
    let c = read_globules(&mut lines, count)?;
    if let Some((n, tag, _)) = lines.next() {
        return Err(parse_err(n, format!("trailing `{tag}` line")));
    }
    Ok((c, meta))
}

pub fn write_trajectory<W: Write>(w: &mut W, traj: &TrajectoryRecord, meta: &[(String, String)]) -> Result<()> {
    let n = traj.n_globules();
    writeln!(w, "trajectory {n} dt {:e} records {}", traj.dt, traj.states.len())?;
    write_meta(w, meta)?;
    for r in &traj.refinements {
        writeln!(w, "refine {} {}", r.step, r.depth)?;
    }
    for (k, (t, c)) in traj.times.iter().zip(&traj.states).enumerate() {
        if c.is_empty() {
            writeln!(w, "empty {t:e}")?;
        }
        for (i, g) in c.iter().enumerate() {
            writeln!(
                w,
                "{t:e} {i} {:e} {:e} {:e} {:e}",
                g.center.x, g.center.y, g.center.z, g.radius
            )?;
        }
        if let Some(ledger) = traj.ledgers.get(k) {
            for (&(i, j), v) in &ledger.pair {
                writeln!(w, "L {i} {j} {v:e}")?;
            }
            for (i, v) in ledger.cap_plus.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                writeln!(w, "Lplus {i} {v:e}")?;
            }
            for (i, v) in ledger.cap_minus.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                writeln!(w, "Lminus {i} {v:e}")?;
            }
        }
    }
    Ok(())
}

pub fn trajectory_to_string(traj: &TrajectoryRecord, meta: &[(String, String)]) -> Result<String> {
    let mut buf = Vec::new();
    write_trajectory(&mut buf, traj, meta)?;
    Ok(String::from_utf8(buf).expect("ascii output"))
}

/// Parses a trajectory file. Stored drive increments are not part of the
/// format, so `drive` is always `None`.
pub fn read_trajectory(text: &str) -> Result<(TrajectoryRecord, Meta)> {
    let mut lines = Lines::new(text);
    let (n, tag, mut f) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    if tag != "trajectory" {
        return Err(parse_err(n, "expected `trajectory` header"));
    }
    let count: usize = field(&mut f, n, "globule count")?;
    let mut keyed = |key: &str| -> Result<String> {
        let k: String = field(&mut f, n, key)?;
        if k != key {
            return Err(parse_err(n, format!("expected `{key}`, found `{k}`")));
        }
        field(&mut f, n, key)
    };
    let dt: f64 = keyed("dt")?
        .parse()
        .map_err(|_| parse_err(n, "bad dt"))?;
    let records: usize = keyed("records")?
        .parse()
        .map_err(|_| parse_err(n, "bad record count"))?;
    finish(&mut f, n)?;
    let meta = read_meta(&mut lines)?;

    let mut refinements = Vec::new();
    while lines.peek_tag() == Some("refine") {
        let (n, _, mut f) = lines.next().expect("peeked");
        let step = field(&mut f, n, "step")?;
        let depth = field(&mut f, n, "depth")?;
        finish(&mut f, n)?;
        refinements.push(Refinement { step, depth });
    }

    let mut times = Vec::with_capacity(records);
    let mut states = Vec::with_capacity(records);
    let mut ledgers = Vec::with_capacity(records);
    for _ in 0..records {
        let (n, tag, mut f) = lines.next().ok_or_else(|| parse_err(0, "missing record block"))?;
        if count == 0 {
            if tag != "empty" {
                return Err(parse_err(n, format!("expected `empty`, found `{tag}`")));
            }
            times.push(field::<f64>(&mut f, n, "time")?);
            finish(&mut f, n)?;
            states.push(Configuration::empty());
        } else {
            let t: f64 = tag.parse().map_err(|_| parse_err(n, format!("expected a record, found `{tag}`")))?;
            let mut globules = Vec::with_capacity(count);
            let (mut n, mut f) = (n, f);
            for i in 0..count {
                if i > 0 {
                    let (m, tag, g) = lines.next().ok_or_else(|| parse_err(0, "truncated record block"))?;
                    if tag.parse::<f64>().ok() != Some(t) {
                        return Err(parse_err(m, format!("expected a record at time {t:e}, found `{tag}`")));
                    }
                    (n, f) = (m, g);
                }
                globules.push(read_globule_fields(&mut f, n, i)?);
            }
            times.push(t);
            states.push(Configuration::new(globules));
        }
        let mut ledger = LocalTimeLedger::new(count);
        while let Some(tag @ ("L" | "Lplus" | "Lminus")) = lines.peek_tag() {
            let (n, _, mut f) = lines.next().expect("peeked");
            let i: usize = field(&mut f, n, "index")?;
            let check = |k: usize| {
                if k < count {
                    Ok(k)
                } else {
                    Err(parse_err(n, format!("index {k} out of range")))
                }
            };
            check(i)?;
            match tag {
                "L" => {
                    let j: usize = check(field(&mut f, n, "index")?)?;
                    if i >= j {
                        return Err(parse_err(n, "pair indices must satisfy i < j"));
                    }
                    ledger.pair.insert((i, j), field(&mut f, n, "value")?);
                }
                "Lplus" => ledger.cap_plus[i] = field(&mut f, n, "value")?,
                _ => ledger.cap_minus[i] = field(&mut f, n, "value")?,
            }
            finish(&mut f, n)?;
        }
        ledgers.push(ledger);
    }
    if let Some((n, tag, _)) = lines.next() {
        return Err(parse_err(n, format!("trailing `{tag}` line")));
    }
    Ok((
        TrajectoryRecord {
            times,
            states,
            ledgers,
            drive: None,
            dt,
            refinements,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ContactKind;
    use proptest::prelude::*;

    fn meta() -> Meta {
        vec![("sigma".into(), "1.5".into()), ("note".into(), "two words".into())]
    }

    #[test]
    fn configuration_round_trip() {
        let c = Configuration::new(vec![
            Globule::new([0.1, -2.0, 1.0 / 3.0], 0.7),
            Globule::new([1e-300, 5.0, 7.25], 0.30000000000000004),
        ]);
        let text = configuration_to_string(&c, &meta()).unwrap();
        let (back, m) = read_configuration(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(m, meta());
        assert_eq!(read_configuration("globules 0\n").unwrap().0, Configuration::empty());
    }

    #[test]
    fn configuration_errors_name_the_line() {
        let err = read_configuration("globules 2\ng 0 0 0 0 1\ng 1 0 0 x 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(read_configuration("globules 2\ng 0 0 0 0 1\n").is_err());
        assert!(read_configuration("globules 1\ng 0 0 0 0 1 9\n").is_err());
    }

    #[test]
    fn trajectory_round_trip() {
        let c0 = Configuration::new(vec![Globule::new([0.0; 3], 0.5), Globule::new([1.0, 0.0, 0.0], 0.5)]);
        let mut c1 = c0.clone();
        c1.globules[1].center.x = 1.25;
        let l0 = LocalTimeLedger::new(2);
        let mut l1 = l0.clone();
        l1.add(ContactKind::Pair(0, 1), 0.125);
        l1.add(ContactKind::CapPlus(1), 1e-7);
        let traj = TrajectoryRecord {
            times: vec![0.0, 0.1],
            states: vec![c0, c1],
            ledgers: vec![l0, l1],
            drive: None,
            dt: 0.1,
            refinements: vec![Refinement { step: 0, depth: 2 }],
        };
        let text = trajectory_to_string(&traj, &meta()).unwrap();
        let (back, m) = read_trajectory(&text).unwrap();
        assert_eq!(m, meta());
        assert_eq!(back.times, traj.times);
        assert_eq!(back.states, traj.states);
        assert_eq!(back.ledgers, traj.ledgers);
        assert_eq!(back.refinements, traj.refinements);
        assert_eq!(trajectory_to_string(&back, &m).unwrap(), text);
        assert!(text.contains("\n1e-1 1 1.25e0 0e0 0e0 5e-1\n"), "{text}");
    }

    #[test]
    fn empty_trajectory_round_trip() {
        let traj = TrajectoryRecord {
            times: vec![0.0, 0.5],
            states: vec![Configuration::empty(); 2],
            ledgers: vec![LocalTimeLedger::new(0); 2],
            drive: None,
            dt: 0.5,
            refinements: vec![],
        };
        let text = trajectory_to_string(&traj, &[]).unwrap();
        let back = read_trajectory(&text).unwrap().0;
        assert_eq!(back.times, traj.times);
        assert_eq!(back.states, traj.states);
    }

    #[test]
    fn trajectory_errors_name_the_line() {
        let text = "trajectory 2 dt 1e-1 records 1\n0e0 0 0 0 0 1\n1e-1 1 0 0 0 1\n";
        let err = read_trajectory(text).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn any_configuration_round_trips(
            pts in proptest::collection::vec((any::<f64>(), -1e6..1e6f64, -1e6..1e6f64, 0.0..10.0f64), 0..8)
        ) {
            let pts: Vec<_> = pts.into_iter().filter(|p| p.0.is_finite()).collect();
            let c: Configuration = pts.iter().map(|&(x, y, z, r)| Globule::new([x, y, z], r)).collect();
            let text = configuration_to_string(&c, &[]).unwrap();
            prop_assert_eq!(read_configuration(&text).unwrap().0, c);
        }
    }
}
