//! Harness vocabulary and templated route instructions.

use crate::encoder::UNK_ID;
use crate::geometry::{angle_diff_deg, Point};

use super::{shortest_polyline, Environment};

/// Fixed vocabulary; ids are indices. The first three entries are reserved.
pub const VOCAB: &[&str] = &[
    "<pad>", "<unk>", "<mask>", "walk", "go", "turn", "left", "right", "around", "forward", "past", "the", "to",
    "stop", "at", "and", "then", "near", "chair", "table", "sofa", "bed", "plant", "lamp", "tv", "sink", "shelf",
    "door", "fridge", "desk", "piano", "clock",
];

/// Vocabulary entries usable as landmark labels.
pub const LANDMARK_LABELS: &[&str] = &[
    "chair", "table", "sofa", "bed", "plant", "lamp", "tv", "sink", "shelf", "door", "fridge", "desk", "piano", "clock",
];

pub fn token_id(word: &str) -> u32 {
    VOCAB.iter().position(|w| *w == word).map_or(UNK_ID, |i| i as u32)
}

pub fn tokenize(text: &str) -> Vec<u32> {
    text.split_whitespace().map(|w| token_id(&w.to_lowercase())).collect()
}

pub fn detokenize(tokens: &[u32]) -> String {
    tokens.iter().map(|&t| VOCAB.get(t as usize).copied().unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
}

/// Distance from `p` to segment `ab` and the segment parameter of the
/// closest point.
fn seg_dist(p: Point, a: Point, b: Point) -> (f64, f64) {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 { (((p.x - a.x) * dx + (p.y - a.y) * dy) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (p.dist(&Point::new(a.x + t * dx, a.y + t * dy)), t)
}

fn turn_phrase(delta: f64) -> Option<&'static str> {
    if delta.abs() > 135.0 {
        Some("turn around")
    } else if delta > 45.0 {
        Some("turn left")
    } else if delta < -45.0 {
        Some("turn right")
    } else {
        None
    }
}

pub const MAX_INSTRUCTION_LEN: usize = 24;

/// Describes the expert route: turns along the shortest path, landmarks
/// passed within 1.5 m, and the landmark nearest the goal.
pub fn generate_instruction(env: &Environment) -> Vec<u32> {
    let start = env.start();
    let goal = env.goal();
    let path = shortest_polyline(&env.raster, start.position(), goal).unwrap_or_else(|_| vec![start.position(), goal]);
    let goal_lm =
        env.scene.landmarks.iter().min_by(|a, b| a.position().dist(&goal).total_cmp(&b.position().dist(&goal)));

    // (position along the path, phrase)
    let mut events: Vec<(f64, String)> = Vec::new();
    let mut heading = start.heading;
    let mut along = 0.0;
    for (k, w) in path.windows(2).enumerate() {
        let seg_len = w[0].dist(&w[1]);
        if seg_len < 1e-9 {
            continue;
        }
        let dir = (w[1].y - w[0].y).atan2(w[1].x - w[0].x).to_degrees();
        if let Some(ph) = turn_phrase(angle_diff_deg(dir, heading)) {
            events.push((along, ph.to_string()));
        } else if k == 0 {
            events.push((along, "walk forward".into()));
        }
        heading = dir;
        along += seg_len;
    }
    let mut seg_start = 0.0;
    let mut passed: Vec<(f64, &str)> = Vec::new();
    for w in path.windows(2) {
        for lm in &env.scene.landmarks {
            if goal_lm.is_some_and(|g| std::ptr::eq(g, lm)) {
                continue;
            }
            let (d, t) = seg_dist(lm.position(), w[0], w[1]);
            if d < 1.5 && !passed.iter().any(|(_, l)| *l == lm.label) {
                passed.push((seg_start + t * w[0].dist(&w[1]), lm.label.as_str()));
            }
        }
        seg_start += w[0].dist(&w[1]);
    }
    for (pos, label) in passed {
        events.push((pos, format!("go past the {label}")));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let ending = match goal_lm {
        Some(l) => format!("stop at the {}", l.label),
        None => "stop".to_string(),
    };
    let end_tokens = tokenize(&ending);
    let mut tokens = Vec::new();
    for (i, (_, ph)) in events.iter().enumerate() {
        let mut t = if i > 0 { tokenize(&format!("then {ph}")) } else { tokenize(ph) };
        if tokens.len() + t.len() + end_tokens.len() + 2 > MAX_INSTRUCTION_LEN {
            break;
        }
        tokens.append(&mut t);
    }
    if !tokens.is_empty() {
        tokens.extend(tokenize("and"));
    }
    tokens.extend(end_tokens);
    tokens.truncate(MAX_INSTRUCTION_LEN);
    tokens
}
