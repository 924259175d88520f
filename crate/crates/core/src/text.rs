//! Plain-text blueprint format.
//!
//! ```text
//! HF#
//! ###
//!
//! .#.
//! ...
//! ```
//!
//! Layers run upward from `z = 0` and are separated by a blank line. Within a
//! layer, row `i` is `y = origin_y + i` and column `j` is `x = origin_x + j`.
//! `#` is a block, `.` is empty, `H` the home block, `F` the feeding cell, and
//! `*` a cell that is both. An optional `origin x y` line before the first
//! layer shifts the grid (default `0 0`). Lines starting with `# ` (hash,
//! space) are comments.

use thiserror::Error;

use crate::lattice::{Blueprint, BlueprintError, GridCoord};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("no home marker")]
    NoHome,
    #[error("no feeding marker")]
    NoFeeding,
    #[error(transparent)]
    Blueprint(#[from] BlueprintError),
}

fn syntax(line: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax { line, message: message.into() }
}

pub fn parse_blueprint(text: &str) -> Result<Blueprint, ParseError> {
    let mut origin = (0, 0);
    let mut z = 0;
    let mut row = 0;
    let mut started = false;
    let mut width: Option<usize> = None;
    let mut cells = Vec::new();
    let mut home = None;
    let mut feeding = None;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.starts_with("# ") {
            continue;
        }
        if line.is_empty() {
            if row > 0 {
                z += 1;
                row = 0;
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("origin ") {
            if started {
                return Err(syntax(n, "origin must come before the first layer"));
            }
            let nums: Vec<i32> = rest
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| syntax(n, format!("bad origin value `{t}`"))))
                .collect::<Result<_, _>>()?;
            let [x, y] = nums[..] else { return Err(syntax(n, "origin takes two integers")) };
            origin = (x, y);
            continue;
        }
        started = true;
        let w = line.chars().count();
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(syntax(n, format!("row has {w} columns, expected {expected}")));
            }
            _ => {}
        }
        for (j, ch) in line.chars().enumerate() {
            let c = GridCoord::new(origin.0 + j as i32, origin.1 + row, z);
            let (block, is_home, is_feed) = match ch {
                '.' => (false, false, false),
                '#' => (true, false, false),
                'H' => (true, true, false),
                'F' => (true, false, true),
                '*' => (true, true, true),
                other => return Err(syntax(n, format!("unexpected character `{other}`"))),
            };
            if !block {
                continue;
            }
            if (is_home || is_feed) && z != 0 {
                return Err(syntax(n, "home and feeding markers belong in the first layer"));
            }
            cells.push(c);
            if is_home && home.replace(c).is_some() {
                return Err(syntax(n, "more than one home marker"));
            }
            if is_feed && feeding.replace(c).is_some() {
                return Err(syntax(n, "more than one feeding marker"));
            }
        }
        row += 1;
    }
    let home = home.ok_or(ParseError::NoHome)?;
    let feeding = feeding.ok_or(ParseError::NoFeeding)?;
    Ok(Blueprint::new(cells, home, feeding)?)
}

/// Canonical text form; [`parse_blueprint`] reads it back unchanged.
pub fn format_blueprint(bp: &Blueprint) -> String {
    let cells = bp.cells();
    let min_x = cells.iter().map(|c| c.x).min().unwrap_or(0);
    let max_x = cells.iter().map(|c| c.x).max().unwrap_or(0);
    let min_y = cells.iter().map(|c| c.y).min().unwrap_or(0);
    let max_y = cells.iter().map(|c| c.y).max().unwrap_or(0);
    let mut out = String::new();
    if (min_x, min_y) != (0, 0) {
        out.push_str(&format!("origin {min_x} {min_y}\n"));
    }
    for z in 0..=bp.max_z() {
        if z > 0 {
            out.push('\n');
        }
        for y in min_y..=max_y {
            for x in min_x..=max_x {
                let c = GridCoord::new(x, y, z);
                let ch = match (bp.contains(c), c == bp.home(), c == bp.feeding()) {
                    (false, _, _) => '.',
                    (true, true, true) => '*',
                    (true, true, false) => 'H',
                    (true, false, true) => 'F',
                    (true, false, false) => '#',
                };
                out.push(ch);
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "HF#\n###\n\n.#.\n...\n";
        let bp = parse_blueprint(text).unwrap();
        assert_eq!(bp.len(), 7);
        assert_eq!(bp.home(), GridCoord::new(0, 0, 0));
        assert_eq!(bp.feeding(), GridCoord::new(1, 0, 0));
        assert!(bp.contains(GridCoord::new(1, 0, 1)));
        assert_eq!(format_blueprint(&bp), text);
    }

    #[test]
    fn origin_and_comments() {
        let text = "# a comment line\norigin -1 2\n*#\n";
        let bp = parse_blueprint(text).unwrap();
        assert_eq!(bp.home(), GridCoord::new(-1, 2, 0));
        assert_eq!(format_blueprint(&bp), "origin -1 2\n*#\n");
    }

    #[test]
    fn extra_blank_lines_are_one_separator() {
        let bp = parse_blueprint("\nHF\n\n\n#.\n\n").unwrap();
        assert_eq!(bp.max_z(), 1);
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_blueprint("H#\n#\n"), Err(ParseError::Syntax { line: 2, .. })));
        assert!(matches!(parse_blueprint("Hx\n"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_blueprint("#F\n\nH.\n"), Err(ParseError::Syntax { line: 3, .. })));
        assert!(matches!(parse_blueprint("HF\norigin 1 1\n"), Err(ParseError::Syntax { line: 2, .. })));
        assert_eq!(parse_blueprint("##\n"), Err(ParseError::NoHome));
        assert_eq!(parse_blueprint("H#\n"), Err(ParseError::NoFeeding));
        assert!(matches!(parse_blueprint("HF\n\n..\n\n#.\n"), Err(ParseError::Blueprint(_))));
    }
}
