use std::fmt::Write;

use crate::error::{Error, Result};

/// Triangle mesh.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }
}

struct Tokens<'a> {
    lines: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let lines: Box<dyn Iterator<Item = (usize, &'a str)>> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
                .filter(|(_, l)| !l.is_empty()),
        );
        Tokens {
            lines: lines.peekable(),
            line: 0,
        }
    }

    /// Next non-empty line, split into tokens.
    fn next_line(&mut self) -> Option<Vec<&'a str>> {
        let (n, l) = self.lines.next()?;
        self.line = n;
        Some(l.split_whitespace().collect())
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }
}

fn number<T: std::str::FromStr>(tokens: &Tokens, s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| tokens.err(format!("expected {what}, found `{s}`")))
}

/// Parses an OFF mesh. Polygonal faces are fan-triangulated.
///
/// Accepts the malformed header found in parts of ModelNet40, where the
/// counts follow `OFF` without a line break (`OFF492 564 0`).
pub fn parse_off(text: &str) -> Result<Mesh> {
    let mut tokens = Tokens::new(text);
    let first = tokens
        .next_line()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
    let head = first[0];
    if !head.starts_with("OFF") {
        return Err(tokens.err(format!("expected `OFF` header, found `{head}`")));
    }
    let mut counts: Vec<&str> = Vec::new();
    if head.len() > 3 {
        counts.push(&head[3..]);
    }
    counts.extend(&first[1..]);
    if counts.is_empty() {
        counts = tokens
            .next_line()
            .ok_or_else(|| tokens.err("missing element counts"))?;
    }
    if counts.len() < 2 {
        return Err(tokens.err("expected vertex and face counts"));
    }
    let n_vertices: usize = number(&tokens, counts[0], "vertex count")?;
    let n_faces: usize = number(&tokens, counts[1], "face count")?;

    let mut mesh = Mesh {
        vertices: Vec::with_capacity(n_vertices),
        triangles: Vec::with_capacity(n_faces),
    };
    for _ in 0..n_vertices {
        let line = tokens
            .next_line()
            .ok_or_else(|| tokens.err("unexpected end of file in vertex list"))?;
        if line.len() < 3 {
            return Err(tokens.err("vertex needs three coordinates"));
        }
        let mut v = [0.0f64; 3];
        for (k, c) in v.iter_mut().enumerate() {
            *c = number(&tokens, line[k], "coordinate")?;
            if !c.is_finite() {
                return Err(tokens.err("non-finite coordinate"));
            }
        }
        mesh.vertices.push(v);
    }
    for _ in 0..n_faces {
        let line = tokens
            .next_line()
            .ok_or_else(|| tokens.err("unexpected end of file in face list"))?;
        let n: usize = number(&tokens, line[0], "face vertex count")?;
        if n < 3 || line.len() < n + 1 {
            return Err(tokens.err(format!("face with {n} vertices and {} indices", line.len() - 1)));
        }
        let mut idx = Vec::with_capacity(n);
        for s in &line[1..=n] {
            let i: usize = number(&tokens, s, "vertex index")?;
            if i >= n_vertices {
                return Err(tokens.err(format!("vertex index {i} out of range (have {n_vertices})")));
            }
            idx.push(i);
        }
        for k in 1..n - 1 {
            mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    Ok(mesh)
}

pub fn write_off(mesh: &Mesh) -> String {
    let mut s = String::new();
    writeln!(s, "OFF").unwrap();
    writeln!(s, "{} {} 0", mesh.vertices.len(), mesh.triangles.len()).unwrap();
    for v in &mesh.vertices {
        writeln!(s, "{} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(s, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    s
}
