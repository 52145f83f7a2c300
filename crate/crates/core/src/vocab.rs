//! Scene attributes, structured tokens and the ordered vocabulary.
//!
//! Every token has a canonical string form; `Vocab` enumerates all tokens the
//! corpus can emit for a given grid size.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];
            pub const COUNT: usize = [$($s),+].len();

            pub fn name(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($s => Some($name::$var),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                $name::parse(&s).ok_or_else(|| {
                    serde::de::Error::custom(format!(concat!("unknown ", stringify!($name), " `{}`"), s))
                })
            }
        }
    };
}

named_enum!(
    /// Object kind. Kinds come in confusable pairs sharing a category.
    Kind { Dog => "dog", Cat => "cat", Horse => "horse", Cow => "cow", Car => "car", Bus => "bus" }
);
named_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
named_enum!(Size { Small => "small", Medium => "medium", Large => "large" });
named_enum!(
    /// Facing direction of an object.
    Orient { Up => "up", Down => "down", Left => "left", Right => "right" }
);
named_enum!(
    /// Direction of one object relative to another (dominant axis).
    Dir { Above => "above", Below => "below", LeftOf => "left-of", RightOf => "right-of" }
);
named_enum!(
    /// Knowledge payload attached to a kind by a fact token.
    Food { Meat => "meat", Fish => "fish", Hay => "hay", Grass => "grass", Fuel => "fuel", Seeds => "seeds" }
);
named_enum!(
    /// Query intent carried by the answer-start marker.
    Intent {
        Exists => "exists",
        LocateKind => "locate_kind",
        LocateColor => "locate_color",
        RelDirKind => "rel_dir_kind",
        RelDirColor => "rel_dir_color",
        OrientNamed => "orient_named",
        OrientAt => "orient_at",
        ColorAt => "color_at",
        SizeAt => "size_at",
        Count => "count",
        Recall => "recall",
        Extract => "extract",
        RelFacing => "rel_facing",
        RelMatch => "rel_match",
        RelCount => "rel_count",
        RelSize => "rel_size",
        Decide => "decide",
    }
);

impl Kind {
    pub const CATEGORIES: usize = 3;

    pub fn category(self) -> usize {
        self.index() / 2
    }
}

impl Size {
    /// Ordinal used by size comparison (1-based).
    pub fn rank(self) -> usize {
        self.index() + 1
    }
}

impl Orient {
    /// The relative direction an object with this orientation faces toward.
    pub fn toward(self) -> Dir {
        match self {
            Orient::Up => Dir::Above,
            Orient::Down => Dir::Below,
            Orient::Left => Dir::LeftOf,
            Orient::Right => Dir::RightOf,
        }
    }
}

impl Dir {
    /// Direction of `to` as seen from `from`: horizontal when |dc| ≥ |dr|.
    pub fn between(from: (usize, usize), to: (usize, usize)) -> Option<Dir> {
        let dr = to.0 as i64 - from.0 as i64;
        let dc = to.1 as i64 - from.1 as i64;
        if dr == 0 && dc == 0 {
            return None;
        }
        Some(if dc.abs() >= dr.abs() {
            if dc > 0 {
                Dir::RightOf
            } else {
                Dir::LeftOf
            }
        } else if dr > 0 {
            Dir::Below
        } else {
            Dir::Above
        })
    }
}

/// Closed list of question words; anything that is not a payload or kind.
pub const WORDS: &[&str] = &[
    "is", "there", "a", "the", "in", "scene", "where", "relative", "to", "which", "way", "at",
    "facing", "what", "color", "size", "object", "how", "many", "objects", "are", "more", "than",
    "does", "like", "did", "step", "report", "so", "statement", "or", "toward",
    "larger", "that", "of", "one", "from", "answer", "?",
];

/// An answer value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Payload {
    Yes,
    No,
    True,
    False,
    Color(Color),
    Size(Size),
    Orient(Orient),
    Dir(Dir),
    Loc(u8, u8),
    Count(u8),
    Food(Food),
}

impl Payload {
    /// All payloads for a grid of side `n`, in vocabulary order.
    pub fn all(n: usize) -> Vec<Payload> {
        let mut out = vec![Payload::Yes, Payload::No, Payload::True, Payload::False];
        out.extend(Color::ALL.iter().map(|&c| Payload::Color(c)));
        out.extend(Size::ALL.iter().map(|&s| Payload::Size(s)));
        out.extend(Orient::ALL.iter().map(|&o| Payload::Orient(o)));
        out.extend(Dir::ALL.iter().map(|&d| Payload::Dir(d)));
        for r in 0..n {
            for c in 0..n {
                out.push(Payload::Loc(r as u8, c as u8));
            }
        }
        out.extend((0..=n * n).map(|k| Payload::Count(k as u8)));
        out.extend(Food::ALL.iter().map(|&f| Payload::Food(f)));
        out
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Yes => f.write_str("yes"),
            Payload::No => f.write_str("no"),
            Payload::True => f.write_str("true"),
            Payload::False => f.write_str("false"),
            Payload::Color(c) => f.write_str(c.name()),
            Payload::Size(s) => f.write_str(s.name()),
            Payload::Orient(o) => f.write_str(o.name()),
            Payload::Dir(d) => f.write_str(d.name()),
            Payload::Loc(r, c) => write!(f, "r{r}c{c}"),
            Payload::Count(k) => write!(f, "n{k}"),
            Payload::Food(x) => f.write_str(x.name()),
        }
    }
}

fn parse_loc(s: &str) -> Option<(u8, u8)> {
    let rest = s.strip_prefix('r')?;
    let (r, c) = rest.split_once('c')?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

impl FromStr for Payload {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p = match s {
            "yes" => Payload::Yes,
            "no" => Payload::No,
            "true" => Payload::True,
            "false" => Payload::False,
            _ => {
                if let Some(c) = Color::parse(s) {
                    Payload::Color(c)
                } else if let Some(x) = Size::parse(s) {
                    Payload::Size(x)
                } else if let Some(o) = Orient::parse(s) {
                    Payload::Orient(o)
                } else if let Some(d) = Dir::parse(s) {
                    Payload::Dir(d)
                } else if let Some(x) = Food::parse(s) {
                    Payload::Food(x)
                } else if let Some((r, c)) = parse_loc(s) {
                    Payload::Loc(r, c)
                } else if let Some(k) = s.strip_prefix('n').and_then(|k| k.parse().ok()) {
                    Payload::Count(k)
                } else {
                    return Err(Error::UnknownToken(s.to_string()));
                }
            }
        };
        Ok(p)
    }
}

/// Query carried by the answer-start marker: an intent plus its arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct QueryArgs {
    pub obj: Option<Kind>,
    pub obj2: Option<Kind>,
    pub color: Option<Color>,
    pub color2: Option<Color>,
    pub loc: Option<(u8, u8)>,
    pub size: Option<Size>,
    pub dir: Option<Dir>,
    pub count: Option<u8>,
    /// Bitmask over 1-based step numbers (bit j-1 for step j).
    pub steps: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Query {
    pub intent: Intent,
    pub args: QueryArgs,
}

impl Query {
    pub fn new(intent: Intent) -> Self {
        Query { intent, args: QueryArgs::default() }
    }

    pub fn obj(mut self, k: Kind) -> Self {
        self.args.obj = Some(k);
        self
    }
    pub fn obj2(mut self, k: Kind) -> Self {
        self.args.obj2 = Some(k);
        self
    }
    pub fn color(mut self, c: Color) -> Self {
        self.args.color = Some(c);
        self
    }
    pub fn color2(mut self, c: Color) -> Self {
        self.args.color2 = Some(c);
        self
    }
    pub fn loc(mut self, r: usize, c: usize) -> Self {
        self.args.loc = Some((r as u8, c as u8));
        self
    }
    pub fn size(mut self, s: Size) -> Self {
        self.args.size = Some(s);
        self
    }
    pub fn dir(mut self, d: Dir) -> Self {
        self.args.dir = Some(d);
        self
    }
    pub fn count(mut self, k: usize) -> Self {
        self.args.count = Some(k as u8);
        self
    }
    /// Adds a 1-based step reference.
    pub fn step(mut self, j: usize) -> Self {
        self.args.steps |= 1 << (j - 1);
        self
    }

    pub fn step_list(&self) -> Vec<usize> {
        (0..8).filter(|b| self.args.steps & (1 << b) != 0).map(|b| b + 1).collect()
    }

    /// Every well-formed query for a grid of side `n` with up to `max_steps` steps.
    pub fn enumerate(n: usize, max_steps: usize) -> Vec<Query> {
        let mut out = Vec::new();
        let locs: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
        for &intent in Intent::ALL {
            let q = Query::new(intent);
            match intent {
                Intent::Exists | Intent::LocateKind | Intent::Recall => {
                    out.extend(Kind::ALL.iter().map(|&k| q.obj(k)))
                }
                Intent::LocateColor | Intent::Count => {
                    out.extend(Color::ALL.iter().map(|&c| q.color(c)))
                }
                Intent::RelDirKind => {
                    for &a in Kind::ALL {
                        for &b in Kind::ALL {
                            if a != b {
                                out.push(q.obj(a).obj2(b));
                            }
                        }
                    }
                }
                Intent::RelDirColor => {
                    for &a in Color::ALL {
                        for &b in Color::ALL {
                            if a != b {
                                out.push(q.color(a).color2(b));
                            }
                        }
                    }
                }
                Intent::OrientNamed => {
                    for &k in Kind::ALL {
                        out.extend(locs.iter().map(|&(r, c)| q.obj(k).loc(r, c)));
                    }
                }
                Intent::OrientAt | Intent::ColorAt | Intent::SizeAt => {
                    out.extend(locs.iter().map(|&(r, c)| q.loc(r, c)))
                }
                Intent::Extract | Intent::Decide => {
                    out.extend((1..=max_steps).map(|j| q.step(j)))
                }
                Intent::RelFacing => {
                    for a in 1..=max_steps {
                        for b in a + 1..=max_steps {
                            out.push(q.step(a).step(b));
                        }
                    }
                }
                Intent::RelMatch => {
                    for &d in Dir::ALL {
                        out.extend((1..=max_steps).map(|j| q.dir(d).step(j)));
                    }
                }
                Intent::RelCount => {
                    for t in 0..=n * n {
                        out.extend((1..=max_steps).map(|j| q.count(t).step(j)));
                    }
                }
                Intent::RelSize => {
                    for &s in Size::ALL {
                        out.extend((1..=max_steps).map(|j| q.size(s).step(j)));
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.args;
        let mut parts: Vec<String> = Vec::new();
        if let Some(k) = a.obj {
            parts.push(format!("obj={k}"));
        }
        if let Some(k) = a.obj2 {
            parts.push(format!("obj2={k}"));
        }
        if let Some(c) = a.color {
            parts.push(format!("color={c}"));
        }
        if let Some(c) = a.color2 {
            parts.push(format!("color2={c}"));
        }
        if let Some((r, c)) = a.loc {
            parts.push(format!("loc=r{r}c{c}"));
        }
        if let Some(s) = a.size {
            parts.push(format!("size={s}"));
        }
        if let Some(d) = a.dir {
            parts.push(format!("dir={d}"));
        }
        if let Some(t) = a.count {
            parts.push(format!("count={t}"));
        }
        if a.steps != 0 {
            let s: Vec<String> = self.step_list().iter().map(|j| j.to_string()).collect();
            parts.push(format!("steps={}", s.join("+")));
        }
        write!(f, "<ans:{}:{}>", self.intent, parts.join(","))
    }
}

impl FromStr for Query {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownToken(s.to_string());
        let body = s.strip_prefix("<ans:").and_then(|b| b.strip_suffix('>')).ok_or_else(bad)?;
        let (intent, rest) = body.split_once(':').ok_or_else(bad)?;
        let mut q = Query::new(Intent::parse(intent).ok_or_else(bad)?);
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (key, val) = part.split_once('=').ok_or_else(bad)?;
            match key {
                "obj" => q.args.obj = Some(Kind::parse(val).ok_or_else(bad)?),
                "obj2" => q.args.obj2 = Some(Kind::parse(val).ok_or_else(bad)?),
                "color" => q.args.color = Some(Color::parse(val).ok_or_else(bad)?),
                "color2" => q.args.color2 = Some(Color::parse(val).ok_or_else(bad)?),
                "loc" => q.args.loc = Some(parse_loc(val).ok_or_else(bad)?),
                "size" => q.args.size = Some(Size::parse(val).ok_or_else(bad)?),
                "dir" => q.args.dir = Some(Dir::parse(val).ok_or_else(bad)?),
                "count" => q.args.count = Some(val.parse().map_err(|_| bad())?),
                "steps" => {
                    for j in val.split('+') {
                        let j: usize = j.parse().map_err(|_| bad())?;
                        if !(1..=8).contains(&j) {
                            return Err(bad());
                        }
                        q = q.step(j);
                    }
                }
                _ => return Err(bad()),
            }
        }
        Ok(q)
    }
}

/// Contents of one scene cell as seen by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellContent {
    Empty,
    /// `kind` is `None` when identity channels are masked.
    Object { kind: Option<Kind>, color: Color, size: Size, orient: Orient },
}

/// A vocabulary item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    /// Answer emitted when no head supplies evidence.
    Null,
    Bos,
    Eoa,
    Payload(Payload),
    Kind(Kind),
    Word(u16),
    StepMarker(u8),
    Context { step: u8, payload: Payload },
    Fact { kind: Kind, food: Food },
    Cell { row: u8, col: u8, content: CellContent },
    BBox { kind: Kind, row: u8, col: u8 },
    Query(Query),
}

impl Token {
    pub fn word(w: &str) -> Token {
        let i = WORDS.iter().position(|x| *x == w).unwrap_or_else(|| panic!("not a word: {w}"));
        Token::Word(i as u16)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Null => f.write_str("<null>"),
            Token::Bos => f.write_str("<bos>"),
            Token::Eoa => f.write_str("<eoa>"),
            Token::Payload(p) => write!(f, "{p}"),
            Token::Kind(k) => write!(f, "{k}"),
            Token::Word(i) => f.write_str(WORDS[*i as usize]),
            Token::StepMarker(j) => write!(f, "<s{j}>"),
            Token::Context { step, payload } => write!(f, "a{step}:{payload}"),
            Token::Fact { kind, food } => write!(f, "fact:{kind}={food}"),
            Token::Cell { row, col, content } => match content {
                CellContent::Empty => write!(f, "cell:r{row}c{col}:empty"),
                CellContent::Object { kind, color, size, orient } => {
                    let k = kind.map(|k| k.name()).unwrap_or("?");
                    write!(f, "cell:r{row}c{col}:{k}:{color}:{size}:{orient}")
                }
            },
            Token::BBox { kind, row, col } => write!(f, "box:{kind}@r{row}c{col}"),
            Token::Query(q) => write!(f, "{q}"),
        }
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownToken(s.to_string());
        match s {
            "<null>" => return Ok(Token::Null),
            "<bos>" => return Ok(Token::Bos),
            "<eoa>" => return Ok(Token::Eoa),
            _ => {}
        }
        if s.starts_with("<ans:") {
            return Ok(Token::Query(s.parse()?));
        }
        if let Some(j) = s.strip_prefix("<s").and_then(|r| r.strip_suffix('>')) {
            return Ok(Token::StepMarker(j.parse().map_err(|_| bad())?));
        }
        if let Some(rest) = s.strip_prefix("fact:") {
            let (k, v) = rest.split_once('=').ok_or_else(bad)?;
            return Ok(Token::Fact {
                kind: Kind::parse(k).ok_or_else(bad)?,
                food: Food::parse(v).ok_or_else(bad)?,
            });
        }
        if let Some(rest) = s.strip_prefix("box:") {
            let (k, loc) = rest.split_once('@').ok_or_else(bad)?;
            let (row, col) = parse_loc(loc).ok_or_else(bad)?;
            return Ok(Token::BBox { kind: Kind::parse(k).ok_or_else(bad)?, row, col });
        }
        if let Some(rest) = s.strip_prefix("cell:") {
            let fields: Vec<&str> = rest.split(':').collect();
            let (row, col) = parse_loc(fields[0]).ok_or_else(bad)?;
            let content = match fields.as_slice() {
                [_, "empty"] => CellContent::Empty,
                [_, k, c, z, o] => CellContent::Object {
                    kind: if *k == "?" { None } else { Some(Kind::parse(k).ok_or_else(bad)?) },
                    color: Color::parse(c).ok_or_else(bad)?,
                    size: Size::parse(z).ok_or_else(bad)?,
                    orient: Orient::parse(o).ok_or_else(bad)?,
                },
                _ => return Err(bad()),
            };
            return Ok(Token::Cell { row, col, content });
        }
        if let Some(rest) = s.strip_prefix('a') {
            if let Some((j, p)) = rest.split_once(':') {
                if let Ok(step) = j.parse() {
                    return Ok(Token::Context { step, payload: p.parse()? });
                }
            }
        }
        if let Some(k) = Kind::parse(s) {
            return Ok(Token::Kind(k));
        }
        if let Some(i) = WORDS.iter().position(|w| *w == s) {
            return Ok(Token::Word(i as u16));
        }
        Ok(Token::Payload(s.parse()?))
    }
}

impl Serialize for Token {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered token list with a reverse index. Index 0 is always `<null>`.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<Token>,
    index: HashMap<Token, u32>,
}

impl Vocab {
    pub fn new(grid: usize, max_steps: usize) -> Vocab {
        let mut tokens = vec![Token::Null, Token::Bos, Token::Eoa];
        let payloads = Payload::all(grid);
        tokens.extend(payloads.iter().map(|&p| Token::Payload(p)));
        tokens.extend(Kind::ALL.iter().map(|&k| Token::Kind(k)));
        tokens.extend((0..WORDS.len()).map(|i| Token::Word(i as u16)));
        tokens.extend((1..=max_steps).map(|j| Token::StepMarker(j as u8)));
        for j in 1..=max_steps {
            tokens.extend(payloads.iter().map(|&p| Token::Context { step: j as u8, payload: p }));
        }
        for &kind in Kind::ALL {
            tokens.extend(Food::ALL.iter().map(|&food| Token::Fact { kind, food }));
        }
        for r in 0..grid as u8 {
            for c in 0..grid as u8 {
                tokens.push(Token::Cell { row: r, col: c, content: CellContent::Empty });
                let kinds = Kind::ALL.iter().map(|&k| Some(k)).chain(std::iter::once(None));
                for kind in kinds {
                    for &color in Color::ALL {
                        for &size in Size::ALL {
                            for &orient in Orient::ALL {
                                let content = CellContent::Object { kind, color, size, orient };
                                tokens.push(Token::Cell { row: r, col: c, content });
                            }
                        }
                    }
                }
            }
        }
        for &kind in Kind::ALL {
            for r in 0..grid as u8 {
                for c in 0..grid as u8 {
                    tokens.push(Token::BBox { kind, row: r, col: c });
                }
            }
        }
        tokens.extend(Query::enumerate(grid, max_steps).into_iter().map(Token::Query));
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<Token>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (*t, i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, t: &Token) -> Option<u32> {
        self.index.get(t).copied()
    }

    pub fn token(&self, id: u32) -> Token {
        self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn contains(&self, t: &Token) -> bool {
        self.index.contains_key(t)
    }

    pub fn strings(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_token_string_round_trips() {
        let v = Vocab::new(4, 6);
        for t in v.tokens() {
            let s = t.to_string();
            assert_eq!(&s.parse::<Token>().unwrap(), t, "{s}");
        }
        let strings = v.strings();
        let mut uniq = strings.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), strings.len());
    }

    #[test]
    fn null_is_first() {
        assert_eq!(Vocab::new(4, 6).token(0), Token::Null);
    }

    #[test]
    fn dominant_axis_direction() {
        assert_eq!(Dir::between((1, 1), (1, 3)), Some(Dir::RightOf));
        assert_eq!(Dir::between((1, 1), (3, 2)), Some(Dir::Below));
        assert_eq!(Dir::between((2, 2), (0, 0)), Some(Dir::LeftOf));
        assert_eq!(Dir::between((2, 2), (2, 2)), None);
    }
}
