//! Prompt rendering for one subquestion with gold context from earlier steps.

use super::MainQa;
use crate::error::{Error, Result};
use crate::vocab::{CellContent, Token};

/// Prompt for subquestion `k` (0-based). Earlier steps appear as question
/// words, a step marker and their gold answer; the prompt ends with the
/// answer-start token carrying the structured query.
pub fn render_example(main: &MainQa, k: usize) -> Result<Vec<Token>> {
    if k >= main.subqafs.len() {
        return Err(Error::StepOutOfRange { step: k, len: main.subqafs.len() });
    }
    let scene = &main.scene;
    let n = scene.grid_size;
    let mask = main.augment.mask();
    let mut out = vec![Token::Bos];
    out.extend(scene.facts.iter().map(|&(kind, food)| Token::Fact { kind, food }));
    for r in 0..n {
        for c in 0..n {
            let content = match scene.at(r, c) {
                None => CellContent::Empty,
                Some(o) => CellContent::Object {
                    kind: if mask { None } else { Some(o.kind) },
                    color: o.color,
                    size: o.size,
                    orient: o.orient,
                },
            };
            out.push(Token::Cell { row: r as u8, col: c as u8, content });
        }
    }
    if main.augment.bbox() {
        for &kind in &main.named {
            for o in scene.objects.iter().filter(|o| o.kind == kind) {
                out.push(Token::BBox { kind, row: o.row as u8, col: o.col as u8 });
            }
        }
    }
    for sub in &main.subqafs[..k] {
        out.extend_from_slice(&sub.question);
        out.push(Token::StepMarker(sub.step as u8));
        for t in &sub.answer {
            let Token::Payload(p) = t else {
                return Err(Error::EmptyAnswer);
            };
            out.push(Token::Context { step: sub.step as u8, payload: *p });
        }
    }
    let sub = &main.subqafs[k];
    out.extend_from_slice(&sub.question);
    out.push(Token::Query(sub.query));
    Ok(out)
}
