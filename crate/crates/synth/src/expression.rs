//! Templated referring expressions and their brute-force semantics.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, SynthError};
use crate::scene::{Color, SceneSpec, ShapeInstance, ShapeKind, SizeClass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Signed offset of `target` from `anchor` along the relation's axis;
    /// positive means the relation holds.
    pub fn offset(self, target: &ShapeInstance, anchor: &ShapeInstance) -> f64 {
        let (tx, ty) = target.center();
        let (ax, ay) = anchor.center();
        match self {
            Relation::LeftOf => ax - tx,
            Relation::RightOf => tx - ax,
            Relation::Above => ay - ty,
            Relation::Below => ty - ay,
        }
    }
}

/// Centre offsets closer than this are treated as ambiguous.
pub const RELATION_MARGIN: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    Attribute,
    Relational,
}

impl TemplateKind {
    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::Attribute => "attribute",
            TemplateKind::Relational => "relational",
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attribute" => Ok(TemplateKind::Attribute),
            "relational" => Ok(TemplateKind::Relational),
            other => Err(format!("unknown template `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Query {
    Attribute {
        size: SizeClass,
        color: Color,
        kind: ShapeKind,
    },
    Relational {
        kind: ShapeKind,
        relation: Relation,
        anchor_color: Color,
        anchor_kind: ShapeKind,
    },
}

impl Query {
    pub fn template(&self) -> TemplateKind {
        match self {
            Query::Attribute { .. } => TemplateKind::Attribute,
            Query::Relational { .. } => TemplateKind::Relational,
        }
    }

    pub fn text(&self) -> String {
        match *self {
            Query::Attribute { size, color, kind } => format!("the {size} {color} {kind}"),
            Query::Relational {
                kind,
                relation,
                anchor_color,
                anchor_kind,
            } => format!("the {kind} {} the {anchor_color} {anchor_kind}", relation.phrase()),
        }
    }

    /// Parses text produced by [`Query::text`].
    pub fn parse(text: &str) -> Option<Query> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let kind = |w: &str| ShapeKind::ALL.into_iter().find(|k| k.word() == w);
        let color = |w: &str| Color::ALL.into_iter().find(|c| c.word() == w);
        let size = |w: &str| [SizeClass::Small, SizeClass::Large].into_iter().find(|s| s.word() == w);
        match words.as_slice() {
            ["the", s, c, k] => Some(Query::Attribute {
                size: size(s)?,
                color: color(c)?,
                kind: kind(k)?,
            }),
            ["the", k, rest @ ..] => {
                let (relation, tail) = match rest {
                    ["left", "of", tail @ ..] => (Relation::LeftOf, tail),
                    ["right", "of", tail @ ..] => (Relation::RightOf, tail),
                    ["above", tail @ ..] => (Relation::Above, tail),
                    ["below", tail @ ..] => (Relation::Below, tail),
                    _ => return None,
                };
                match tail {
                    ["the", c, ak] => Some(Query::Relational {
                        kind: kind(k)?,
                        relation,
                        anchor_color: color(c)?,
                        anchor_kind: kind(ak)?,
                    }),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// Indices of every shape the query denotes. A relational target is
    /// compared against its nearest anchor (centre distance).
    pub fn evaluate(&self, scene: &SceneSpec) -> Vec<usize> {
        let shapes = &scene.shapes;
        match *self {
            Query::Attribute { size, color, kind } => (0..shapes.len())
                .filter(|&i| {
                    let s = &shapes[i];
                    s.size == size && s.color == color && s.kind == kind
                })
                .collect(),
            Query::Relational {
                kind,
                relation,
                anchor_color,
                anchor_kind,
            } => (0..shapes.len())
                .filter(|&i| {
                    shapes[i].kind == kind
                        && nearest_anchor(scene, i, anchor_color, anchor_kind)
                            .is_some_and(|a| relation.offset(&shapes[i], &shapes[a]) > 0.0)
                })
                .collect(),
        }
    }
}

fn center_distance2(a: &ShapeInstance, b: &ShapeInstance) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).powi(2) + (ay - by).powi(2)
}

fn anchors_of(scene: &SceneSpec, target: usize, color: Color, kind: ShapeKind) -> Vec<usize> {
    (0..scene.shapes.len())
        .filter(|&j| j != target && scene.shapes[j].color == color && scene.shapes[j].kind == kind)
        .collect()
}

/// Nearest shape other than `target` with the given colour and kind. Ties go
/// to the lower index.
pub fn nearest_anchor(scene: &SceneSpec, target: usize, color: Color, kind: ShapeKind) -> Option<usize> {
    let t = &scene.shapes[target];
    anchors_of(scene, target, color, kind)
        .into_iter()
        .min_by(|&a, &b| {
            center_distance2(t, &scene.shapes[a])
                .partial_cmp(&center_distance2(t, &scene.shapes[b]))
                .unwrap()
        })
}

/// A relational query is uncontested when it denotes exactly one shape and
/// no candidate of the target kind sits near a decision boundary: every
/// candidate's nearest anchor is strictly nearest, and its offset clears the
/// margin.
fn relational_is_clean(scene: &SceneSpec, q: &Query) -> bool {
    let Query::Relational {
        kind,
        relation,
        anchor_color,
        anchor_kind,
    } = *q
    else {
        return false;
    };
    for (i, s) in scene.shapes.iter().enumerate() {
        if s.kind != kind {
            continue;
        }
        let anchors = anchors_of(scene, i, anchor_color, anchor_kind);
        if anchors.is_empty() {
            continue;
        }
        let mut d: Vec<f64> = anchors
            .iter()
            .map(|&a| center_distance2(s, &scene.shapes[a]))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if d.len() > 1 && d[1] - d[0] < 1.0 {
            return false;
        }
        let a = nearest_anchor(scene, i, anchor_color, anchor_kind).unwrap();
        if relation.offset(s, &scene.shapes[a]).abs() < RELATION_MARGIN {
            return false;
        }
    }
    q.evaluate(scene).len() == 1
}

/// Every uncontested relational query naming `target`.
pub fn relational_candidates(scene: &SceneSpec, target: usize) -> Vec<Query> {
    let kind = scene.shapes[target].kind;
    let mut out = Vec::new();
    for anchor in &scene.shapes {
        for relation in Relation::ALL {
            let q = Query::Relational {
                kind,
                relation,
                anchor_color: anchor.color,
                anchor_kind: anchor.kind,
            };
            if !out.contains(&q) && relational_is_clean(scene, &q) && q.evaluate(scene) == [target] {
                out.push(q);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expression {
    pub query: Query,
    pub text: String,
    pub referent: usize,
}

/// Draws a template (relational with probability `relational_prob`), then a
/// uniformly random uncontested expression of that template. Relational
/// expressions prefer targets whose kind alone is ambiguous, so the relation
/// carries information.
pub fn generate_expression<R: Rng>(scene: &SceneSpec, relational_prob: f64, rng: &mut R) -> Result<Expression> {
    if scene.shapes.is_empty() {
        return Err(SynthError::Generation("empty scene".into()));
    }
    let relational = rng.gen_bool(relational_prob.clamp(0.0, 1.0));
    let mut pool: Vec<(usize, Query)> = Vec::new();
    if relational {
        let mut hard = Vec::new();
        for t in 0..scene.shapes.len() {
            let same_kind = scene.shapes.iter().filter(|s| s.kind == scene.shapes[t].kind).count();
            for q in relational_candidates(scene, t) {
                if same_kind > 1 {
                    hard.push((t, q));
                }
                pool.push((t, q));
            }
        }
        if !hard.is_empty() {
            pool = hard;
        }
    } else {
        for (t, s) in scene.shapes.iter().enumerate() {
            let q = Query::Attribute {
                size: s.size,
                color: s.color,
                kind: s.kind,
            };
            if q.evaluate(scene) == [t] {
                pool.push((t, q));
            }
        }
    }
    let &(referent, query) = pool.choose(rng).ok_or_else(|| {
        SynthError::Generation(format!(
            "no uniquely identifying {} expression",
            if relational { "relational" } else { "attribute" }
        ))
    })?;
    Ok(Expression {
        query,
        text: query.text(),
        referent,
    })
}
