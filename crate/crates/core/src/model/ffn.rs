//! Fixed piecewise-linear readout applied after the relational layer.
//!
//! Every rule is intent-gated and reads only scratch channels written by heads
//! plus query arguments, so all answer evidence flows through attention.

use super::layout::ChannelLayout;
use crate::vocab::{Dir, Intent};

#[derive(Debug, Clone)]
pub struct Readout {
    n: usize,
    inv_k: f64,
    intent: usize,
    type_answer: usize,
    q_color: usize,
    q_dir: usize,
    q_count: usize,
    q_size: usize,
    s_conf: usize,
    s_absent: usize,
    s_row_a: usize,
    s_col_a: usize,
    s_row_b: usize,
    s_col_b: usize,
    s_orient: usize,
    s_color: usize,
    s_size: usize,
    s_food: usize,
    s_ext_color: usize,
    s_ext_size: usize,
    s_frac: usize,
    s_cells: usize,
    s_rel_dir: usize,
    s_rel_orient: usize,
    s_rel_count: usize,
    s_rel_size: usize,
    s_rel_present: usize,
    s_yesno: usize,
    o_loc: usize,
    o_dir: usize,
    o_orient: usize,
    o_color: usize,
    o_size: usize,
    o_count: usize,
    o_yesno: usize,
    o_truefalse: usize,
    o_food: usize,
    o_eoa: usize,
    /// Cell pairs (p1, p2) grouped by the direction of p2 seen from p1.
    pairs: [Vec<(usize, usize, usize, usize)>; 4],
}

#[inline]
fn pos(v: f64) -> f64 {
    v.max(0.0)
}

#[inline]
fn gate(i: f64, v: f64) -> f64 {
    pos(i).min(pos(v))
}

impl Readout {
    pub fn new(layout: &ChannelLayout, n: usize, value_gain: f64) -> Readout {
        let a = |name: &str| layout.at(name);
        let mut pairs: [Vec<(usize, usize, usize, usize)>; 4] = Default::default();
        for r1 in 0..n {
            for c1 in 0..n {
                for r2 in 0..n {
                    for c2 in 0..n {
                        if let Some(d) = Dir::between((r1, c1), (r2, c2)) {
                            pairs[d.index()].push((r1, c1, r2, c2));
                        }
                    }
                }
            }
        }
        Readout {
            n,
            inv_k: 1.0 / value_gain,
            intent: a("intent"),
            type_answer: layout.type_channel("answer").expect("answer type"),
            q_color: a("q_color"),
            q_dir: a("q_dir"),
            q_count: a("q_count"),
            q_size: a("q_size"),
            s_conf: a("s_conf"),
            s_absent: a("s_absent"),
            s_row_a: a("s_row_a"),
            s_col_a: a("s_col_a"),
            s_row_b: a("s_row_b"),
            s_col_b: a("s_col_b"),
            s_orient: a("s_orient"),
            s_color: a("s_color"),
            s_size: a("s_size"),
            s_food: a("s_food"),
            s_ext_color: a("s_ext_color"),
            s_ext_size: a("s_ext_size"),
            s_frac: a("s_frac"),
            s_cells: a("s_cells"),
            s_rel_dir: a("s_rel_dir"),
            s_rel_orient: a("s_rel_orient"),
            s_rel_count: a("s_rel_count"),
            s_rel_size: a("s_rel_size"),
            s_rel_present: a("s_rel_present"),
            s_yesno: a("s_yesno"),
            o_loc: a("o_loc"),
            o_dir: a("o_dir"),
            o_orient: a("o_orient"),
            o_color: a("o_color"),
            o_size: a("o_size"),
            o_count: a("o_count"),
            o_yesno: a("o_yesno"),
            o_truefalse: a("o_truefalse"),
            o_food: a("o_food"),
            o_eoa: a("o_eoa"),
            pairs,
        }
    }

    /// Adds the readout to one residual row in place.
    pub fn apply(&self, x: &mut [f64]) {
        let out = self.evaluate(x);
        for (ch, v) in out {
            x[ch] += v;
        }
    }

    fn evaluate(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let n = self.n;
        let k = self.inv_k;
        let s = |ch: usize| x[ch] * k;
        let it = |i: Intent| pos(x[self.intent + i.index()]);
        let mut out: Vec<(usize, f64)> = vec![(self.o_eoa, pos(x[self.type_answer]))];
        if !Intent::ALL.iter().any(|&i| it(i) > 0.0) {
            return out;
        }
        let mut yes = 0.0f64;
        let mut no = 0.0f64;

        let conf = s(self.s_conf);
        let ex = it(Intent::Exists);
        if ex > 0.0 {
            yes = yes.max(gate(ex, conf));
            no = no.max(gate(ex, s(self.s_absent)));
        }

        let lk = it(Intent::LocateKind);
        let lc = it(Intent::LocateColor);
        if lk > 0.0 || lc > 0.0 {
            for r in 0..n {
                for c in 0..n {
                    let m = s(self.s_row_a + r).min(s(self.s_col_a + c));
                    let v = gate(lk, m).max(gate(lc, m));
                    out.push((self.o_loc + r * n + c, v));
                }
            }
        }

        let rk = it(Intent::RelDirKind);
        let rc = it(Intent::RelDirColor);
        if rk > 0.0 || rc > 0.0 {
            for (d, pairs) in self.pairs.iter().enumerate() {
                let mut best = 0.0f64;
                for &(r1, c1, r2, c2) in pairs {
                    let m = s(self.s_row_a + r1)
                        .min(s(self.s_col_a + c1))
                        .min(s(self.s_row_b + r2))
                        .min(s(self.s_col_b + c2));
                    best = best.max(m);
                }
                let v = gate(rk, best).max(gate(rc, best));
                out.push((self.o_dir + d, v));
            }
        }

        let on = it(Intent::OrientNamed);
        let oa = it(Intent::OrientAt);
        if on > 0.0 || oa > 0.0 {
            for o in 0..4 {
                let m = s(self.s_orient + o);
                out.push((self.o_orient + o, gate(on, m.min(conf)).max(gate(oa, m))));
            }
        }

        let ca = it(Intent::ColorAt);
        let ext = it(Intent::Extract);
        if ca > 0.0 || ext > 0.0 {
            for c in 0..4 {
                let v = gate(ca, s(self.s_color + c)).max(gate(ext, s(self.s_ext_color + c)));
                out.push((self.o_color + c, v));
            }
        }
        let sa = it(Intent::SizeAt);
        if sa > 0.0 || ext > 0.0 {
            for z in 0..3 {
                let v = gate(sa, s(self.s_size + z)).max(gate(ext, s(self.s_ext_size + z)));
                out.push((self.o_size + z, v));
            }
        }

        let cnt = it(Intent::Count);
        if cnt > 0.0 {
            let cells = s(self.s_cells);
            let mut frac = 0.0;
            for c in 0..4 {
                frac += s(self.s_frac + c).min(x[self.q_color + c]);
            }
            let total = (n * n) as f64 * frac;
            for j in 0..=n * n {
                let tent = 1.0 - (total - j as f64).abs();
                out.push((self.o_count + j, gate(cnt, tent.min(cells))));
            }
        }

        let rec = it(Intent::Recall);
        if rec > 0.0 {
            for f in 0..6 {
                out.push((self.o_food + f, gate(rec, s(self.s_food + f))));
            }
        }

        let present = s(self.s_rel_present);
        let rf = it(Intent::RelFacing);
        if rf > 0.0 {
            let mut eq = 0.0;
            for d in 0..4 {
                eq += s(self.s_rel_dir + d).min(s(self.s_rel_orient + d));
            }
            let eq = 2.0 * eq;
            yes = yes.max(gate(rf, present.min(eq)));
            no = no.max(gate(rf, present - eq));
        }
        let rm = it(Intent::RelMatch);
        if rm > 0.0 {
            let mut eq = 0.0;
            for d in 0..4 {
                eq += s(self.s_rel_dir + d).min(x[self.q_dir + d]);
            }
            yes = yes.max(gate(rm, present.min(eq)));
            no = no.max(gate(rm, present - eq));
        }
        let rcnt = it(Intent::RelCount);
        if rcnt > 0.0 {
            let diff = (n * n) as f64 * (s(self.s_rel_count) - x[self.q_count]);
            let gt = diff.clamp(0.0, 1.0);
            yes = yes.max(gate(rcnt, present.min(gt)));
            no = no.max(gate(rcnt, present.min(1.0 - gt)));
        }
        let rs = it(Intent::RelSize);
        if rs > 0.0 {
            let mut vx = 0.0;
            let mut vy = 0.0;
            for z in 0..3 {
                vx += (z + 1) as f64 * x[self.q_size + z];
                vy += (z + 1) as f64 * s(self.s_rel_size + z);
            }
            let gt = (vx - vy).clamp(0.0, 1.0);
            yes = yes.max(gate(rs, present.min(gt)));
            no = no.max(gate(rs, present.min(1.0 - gt)));
        }
        out.push((self.o_yesno, yes));
        out.push((self.o_yesno + 1, no));

        let dec = it(Intent::Decide);
        if dec > 0.0 {
            out.push((self.o_truefalse, gate(dec, s(self.s_yesno))));
            out.push((self.o_truefalse + 1, gate(dec, s(self.s_yesno + 1))));
        }
        out
    }
}
