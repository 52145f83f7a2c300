//! Main-question templates and their function-labelled decompositions.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Augment, MainQa, Scene, SceneObject, SubQaf, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::function::FunctionLabel::{self, *};
use crate::vocab::{Dir, Food, Intent, Kind, Payload, Query, Token};

pub const TEMPLATES: &[&str] = &[
    "facing",
    "relative_position",
    "counting",
    "size_comparison",
    "recall_fact",
    "extract_answer",
];

pub(crate) const DEFAULT_WEIGHTS: [f64; 6] = [1.0, 1.0, 1.6, 0.6, 1.6, 1.6];

enum Piece {
    W(&'static str),
    K(Kind),
    P(Payload),
}

fn tokens(pieces: &[Piece]) -> Vec<Token> {
    let mut out = Vec::new();
    for p in pieces {
        match p {
            Piece::W(s) => out.extend(s.split(' ').map(Token::word)),
            Piece::K(k) => out.push(Token::Kind(*k)),
            Piece::P(x) => out.push(Token::Payload(*x)),
        }
    }
    out
}

fn decide_words() -> Vec<Token> {
    use Piece::*;
    tokens(&[W("so is the statement"), P(Payload::True), W("or"), P(Payload::False), W("?")])
}

fn loc(o: &SceneObject) -> Payload {
    Payload::Loc(o.row as u8, o.col as u8)
}

struct Builder {
    subs: Vec<SubQaf>,
}

impl Builder {
    fn push(&mut self, question: Vec<Token>, query: Query, answer: Payload, functions: &[FunctionLabel]) -> usize {
        let step = self.subs.len() + 1;
        self.subs.push(SubQaf {
            step,
            question,
            query,
            answer: vec![Token::Payload(answer)],
            functions: functions.to_vec(),
        });
        step
    }
}

fn inapplicable(template: &str, reason: &str) -> Error {
    Error::Inapplicable { template: template.to_string(), reason: reason.to_string() }
}

fn yes_no(b: bool) -> Payload {
    if b {
        Payload::Yes
    } else {
        Payload::No
    }
}

fn true_false(b: bool) -> Payload {
    if b {
        Payload::True
    } else {
        Payload::False
    }
}

/// Builds one main question of the given template over `scene`.
pub fn compose_qa(scene: &Scene, template: &str, seed: u64) -> Result<MainQa> {
    use Piece::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E3A_11C0);
    let mut b = Builder { subs: Vec::new() };
    let main_q: Vec<Token>;
    let main_a: Payload;
    let mut named: Vec<Kind>;
    if scene.objects.is_empty() {
        return Err(inapplicable(template, "empty scene"));
    }

    match template {
        "facing" => {
            let kinds = scene.unique_kinds();
            if kinds.len() < 2 {
                return Err(inapplicable(template, "needs two uniquely present kinds"));
            }
            let mut pairs = Vec::new();
            for &x in &kinds {
                for &y in &kinds {
                    if x != y {
                        let ox = scene.unique_kind(x).unwrap();
                        let oy = scene.unique_kind(y).unwrap();
                        let d = Dir::between(ox.loc(), oy.loc()).unwrap();
                        pairs.push((x, y, ox.orient.toward() == d));
                    }
                }
            }
            let want_yes = rng.random_bool(0.5);
            let pool: Vec<_> = pairs.iter().filter(|p| p.2 == want_yes).collect();
            let &&(x, y, facing) = if pool.is_empty() { pairs.iter().collect::<Vec<_>>() } else { pool }
                .choose(&mut rng)
                .unwrap();
            let ox = *scene.unique_kind(x).unwrap();
            let oy = *scene.unique_kind(y).unwrap();
            let d = Dir::between(ox.loc(), oy.loc()).unwrap();
            named = vec![x, y];
            b.push(
                tokens(&[W("is there a"), K(y), W("in the scene ?")]),
                Query::new(Intent::Exists).obj(y),
                Payload::Yes,
                &[HighLevelVisual],
            );
            let s2 = b.push(
                tokens(&[W("where is the"), K(y), W("relative to the"), K(x), W("?")]),
                Query::new(Intent::RelDirKind).obj(x).obj2(y),
                Payload::Dir(d),
                &[SpatialPerception, HighLevelVisual],
            );
            let s3 = b.push(
                tokens(&[W("which way is the"), K(x), W("at"), P(loc(&ox)), W("facing ?")]),
                Query::new(Intent::OrientNamed).obj(x).loc(ox.row, ox.col),
                Payload::Orient(ox.orient),
                &[SpatialPerception, HighLevelVisual],
            );
            let s4 = b.push(
                tokens(&[W("is the"), K(x), W("facing toward the"), K(y), W("?")]),
                Query::new(Intent::RelFacing).step(s2).step(s3),
                yes_no(facing),
                &[RelationalReasoning],
            );
            b.push(
                decide_words(),
                Query::new(Intent::Decide).step(s4),
                true_false(facing),
                &[DecisionMaking],
            );
            main_q = tokens(&[W("is the"), K(x), W("facing toward the"), K(y), W("?")]);
            main_a = true_false(facing);
        }
        "relative_position" => {
            let kinds = scene.unique_kinds();
            if kinds.len() < 2 {
                return Err(inapplicable(template, "needs two uniquely present kinds"));
            }
            let picked: Vec<Kind> = kinds.choose_multiple(&mut rng, 2).copied().collect();
            let (ka, kb) = (picked[0], picked[1]);
            let oa = *scene.unique_kind(ka).unwrap();
            let ob = *scene.unique_kind(kb).unwrap();
            let truth = Dir::between(ob.loc(), oa.loc()).unwrap();
            let d = if rng.random_bool(0.5) { truth } else { *Dir::ALL.choose(&mut rng).unwrap() };
            let holds = d == truth;
            named = vec![ka, kb];
            b.push(
                tokens(&[W("where is the"), K(ka), W("?")]),
                Query::new(Intent::LocateKind).obj(ka),
                loc(&oa),
                &[SpatialPerception],
            );
            let s2 = b.push(
                tokens(&[W("where is the"), K(ka), W("relative to the"), K(kb), W("?")]),
                Query::new(Intent::RelDirKind).obj(kb).obj2(ka),
                Payload::Dir(truth),
                &[SpatialPerception, HighLevelVisual],
            );
            let s3 = b.push(
                tokens(&[W("is that"), P(Payload::Dir(d)), W("?")]),
                Query::new(Intent::RelMatch).dir(d).step(s2),
                yes_no(holds),
                &[RelationalReasoning],
            );
            b.push(decide_words(), Query::new(Intent::Decide).step(s3), true_false(holds), &[DecisionMaking]);
            main_q = tokens(&[W("is the"), K(ka), P(Payload::Dir(d)), W("the"), K(kb), W("?")]);
            main_a = true_false(holds);
        }
        "counting" => {
            let p = *scene.objects.choose(&mut rng).unwrap();
            let count = scene.objects.iter().filter(|o| o.color == p.color).count();
            let t = rng.random_range(0..=4usize);
            let more = count > t;
            named = vec![p.kind];
            b.push(
                tokens(&[W("what color is the object at"), P(loc(&p)), W("?")]),
                Query::new(Intent::ColorAt).loc(p.row, p.col),
                Payload::Color(p.color),
                &[LowLevelVisual],
            );
            let s2 = b.push(
                tokens(&[W("how many objects are"), P(Payload::Color(p.color)), W("?")]),
                Query::new(Intent::Count).color(p.color),
                Payload::Count(count as u8),
                &[MathReasoning],
            );
            let s3 = b.push(
                tokens(&[W("is that more than"), P(Payload::Count(t as u8)), W("?")]),
                Query::new(Intent::RelCount).count(t).step(s2),
                yes_no(more),
                &[RelationalReasoning],
            );
            b.push(
                decide_words(),
                Query::new(Intent::Decide).step(s3),
                true_false(more),
                &[DecisionMaking],
            );
            main_q = tokens(&[
                W("are there more than"),
                P(Payload::Count(t as u8)),
                W("objects of the color of the object at"),
                P(loc(&p)),
                W("?"),
            ]);
            main_a = true_false(more);
        }
        "size_comparison" => {
            if scene.objects.len() < 2 {
                return Err(inapplicable(template, "needs two objects"));
            }
            let two: Vec<SceneObject> = scene.objects.choose_multiple(&mut rng, 2).copied().collect();
            let (ox, oy) = (two[0], two[1]);
            let larger = ox.size.rank() > oy.size.rank();
            named = vec![ox.kind];
            if oy.kind != ox.kind {
                named.push(oy.kind);
            }
            b.push(
                tokens(&[W("what size is the"), K(ox.kind), W("at"), P(loc(&ox)), W("?")]),
                Query::new(Intent::SizeAt).loc(ox.row, ox.col),
                Payload::Size(ox.size),
                &[LowLevelVisual],
            );
            let s2 = b.push(
                tokens(&[W("what size is the"), K(oy.kind), W("at"), P(loc(&oy)), W("?")]),
                Query::new(Intent::SizeAt).loc(oy.row, oy.col),
                Payload::Size(oy.size),
                &[LowLevelVisual],
            );
            let s3 = b.push(
                tokens(&[W("is"), P(Payload::Size(ox.size)), W("larger than that ?")]),
                Query::new(Intent::RelSize).size(ox.size).step(s2),
                yes_no(larger),
                &[RelationalReasoning],
            );
            b.push(
                decide_words(),
                Query::new(Intent::Decide).step(s3),
                true_false(larger),
                &[DecisionMaking],
            );
            main_q = tokens(&[
                W("is the"),
                K(ox.kind),
                W("at"),
                P(loc(&ox)),
                W("larger than the"),
                K(oy.kind),
                W("at"),
                P(loc(&oy)),
                W("?"),
            ]);
            main_a = true_false(larger);
        }
        "recall_fact" => {
            let mut cands: Vec<(Kind, Food)> = scene
                .facts
                .iter()
                .copied()
                .filter(|(k, _)| scene.objects.iter().any(|o| o.kind == *k))
                .collect();
            if cands.is_empty() {
                return Err(inapplicable(template, "no present kind has a fact"));
            }
            cands.shuffle(&mut rng);
            let (x, food) = cands[0];
            let others: Vec<Kind> = Kind::ALL.iter().copied().filter(|&k| k != x).collect();
            let z = *others.choose(&mut rng).unwrap();
            let z_present = scene.objects.iter().any(|o| o.kind == z);
            named = vec![x, z];
            b.push(
                tokens(&[W("is there a"), K(x), W("in the scene ?")]),
                Query::new(Intent::Exists).obj(x),
                Payload::Yes,
                &[HighLevelVisual],
            );
            b.push(
                tokens(&[W("is there a"), K(z), W("in the scene ?")]),
                Query::new(Intent::Exists).obj(z),
                yes_no(z_present),
                &[HighLevelVisual],
            );
            b.push(
                tokens(&[W("what does the"), K(x), W("like ?")]),
                Query::new(Intent::Recall).obj(x),
                Payload::Food(food),
                &[KnowledgeRecall],
            );
            main_q = tokens(&[W("what does the"), K(x), W("in the scene like ?")]);
            main_a = Payload::Food(food);
        }
        "extract_answer" => {
            let kinds = scene.unique_kinds();
            let Some(&x) = kinds.choose(&mut rng) else {
                return Err(inapplicable(template, "needs a uniquely present kind"));
            };
            let p = *scene.unique_kind(x).unwrap();
            let want_color = rng.random_bool(0.5);
            named = vec![x];
            b.push(
                tokens(&[W("where is the"), K(x), W("?")]),
                Query::new(Intent::LocateKind).obj(x),
                loc(&p),
                &[SpatialPerception],
            );
            let (q2, a2, attr) = if want_color {
                (Query::new(Intent::ColorAt), Payload::Color(p.color), "color")
            } else {
                (Query::new(Intent::SizeAt), Payload::Size(p.size), "size")
            };
            let s2 = b.push(
                tokens(&[W("what"), W(attr), W("is the object at"), P(loc(&p)), W("?")]),
                q2.loc(p.row, p.col),
                a2,
                &[LowLevelVisual],
            );
            b.push(
                tokens(&[W("report the answer from step ?")]),
                Query::new(Intent::Extract).step(s2),
                a2,
                &[InfoExtraction],
            );
            main_q = tokens(&[W("what"), W(attr), W("is the"), K(x), W("?")]);
            main_a = a2;
        }
        other => return Err(Error::Config(format!("unknown template `{other}`"))),
    }

    let importance = b.subs.iter().map(|_| vec![0, 1]).collect();
    Ok(MainQa {
        schema_version: SCHEMA_VERSION,
        id: 0,
        seed,
        scene: scene.clone(),
        template_id: template.to_string(),
        main_q,
        main_a: vec![Token::Payload(main_a)],
        named,
        subqafs: b.subs,
        importance,
        augment: Augment::None,
    })
}

