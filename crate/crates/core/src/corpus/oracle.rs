//! Reference answers computed directly from the scene description.

use super::Scene;
use crate::vocab::{Dir, Intent, Payload, Query};

fn yn(b: bool) -> Payload {
    if b {
        Payload::Yes
    } else {
        Payload::No
    }
}

/// Answer to `query` given the scene and the answers of earlier steps
/// (`prior[j - 1]` for step `j`). `None` when the query is ill-posed.
pub fn evaluate_query(scene: &Scene, query: &Query, prior: &[Payload]) -> Option<Payload> {
    let a = &query.args;
    let step = |j: usize| prior.get(j.checked_sub(1)?).copied();
    let only_step = || {
        let s = query.step_list();
        if s.len() == 1 {
            step(s[0])
        } else {
            None
        }
    };
    let by_kind = |k| {
        let v: Vec<_> = scene.objects.iter().filter(|o| o.kind == k).collect();
        (v.len() == 1).then(|| v[0])
    };
    let by_color = |c| {
        let v: Vec<_> = scene.objects.iter().filter(|o| o.color == c).collect();
        (v.len() == 1).then(|| v[0])
    };
    let at = || {
        let (r, c) = a.loc?;
        scene.objects.iter().find(|o| o.row == r as usize && o.col == c as usize)
    };
    match query.intent {
        Intent::Exists => Some(yn(scene.objects.iter().any(|o| Some(o.kind) == a.obj))),
        Intent::LocateKind => by_kind(a.obj?).map(|o| Payload::Loc(o.row as u8, o.col as u8)),
        Intent::LocateColor => by_color(a.color?).map(|o| Payload::Loc(o.row as u8, o.col as u8)),
        Intent::RelDirKind => {
            let (x, y) = (by_kind(a.obj?)?, by_kind(a.obj2?)?);
            Dir::between((x.row, x.col), (y.row, y.col)).map(Payload::Dir)
        }
        Intent::RelDirColor => {
            let (x, y) = (by_color(a.color?)?, by_color(a.color2?)?);
            Dir::between((x.row, x.col), (y.row, y.col)).map(Payload::Dir)
        }
        Intent::OrientNamed => at().filter(|o| Some(o.kind) == a.obj).map(|o| Payload::Orient(o.orient)),
        Intent::OrientAt => at().map(|o| Payload::Orient(o.orient)),
        Intent::ColorAt => at().map(|o| Payload::Color(o.color)),
        Intent::SizeAt => at().map(|o| Payload::Size(o.size)),
        Intent::Count => {
            let c = a.color?;
            Some(Payload::Count(scene.objects.iter().filter(|o| o.color == c).count() as u8))
        }
        Intent::Recall => scene.facts.iter().find(|f| Some(f.0) == a.obj).map(|f| Payload::Food(f.1)),
        Intent::Extract => match only_step()? {
            p @ (Payload::Color(_) | Payload::Size(_)) => Some(p),
            _ => None,
        },
        Intent::RelFacing => {
            let s = query.step_list();
            if s.len() != 2 {
                return None;
            }
            match (step(s[0])?, step(s[1])?) {
                (Payload::Dir(d), Payload::Orient(o)) => Some(yn(o.toward() == d)),
                _ => None,
            }
        }
        Intent::RelMatch => match only_step()? {
            Payload::Dir(d) => Some(yn(Some(d) == a.dir)),
            _ => None,
        },
        Intent::RelCount => match only_step()? {
            Payload::Count(k) => Some(yn(k > a.count?)),
            _ => None,
        },
        Intent::RelSize => match only_step()? {
            Payload::Size(z) => Some(yn(a.size?.rank() > z.rank())),
            _ => None,
        },
        Intent::Decide => match only_step()? {
            Payload::Yes => Some(Payload::True),
            Payload::No => Some(Payload::False),
            _ => None,
        },
    }
}
