//! Following a template answer's directives from the current node must
//! retrace the shortest path. The parser and the turn ranking here are
//! written from the phrase list, not from the generator.

use proptest::prelude::*;
use vdn_core::dialogue::{template_generate, DialogueContext};
use vdn_core::navgraph::{generate_environment, EnvConfig, NavGraph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Class {
    Straight,
    Left,
    Right,
    Around,
}

#[derive(Debug)]
struct Move {
    class: Class,
    ordinal: usize,
    room: Option<String>,
}

fn classify(delta: f64) -> Class {
    if delta.abs() < 30.0 {
        Class::Straight
    } else if (30.0..150.0).contains(&delta) {
        Class::Left
    } else if delta > -150.0 && delta <= -30.0 {
        Class::Right
    } else {
        Class::Around
    }
}

fn ideal(class: Class) -> f64 {
    match class {
        Class::Straight => 0.0,
        Class::Left => 90.0,
        Class::Right => -90.0,
        Class::Around => 180.0,
    }
}

fn wrap(d: f64) -> f64 {
    let d = d.rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

fn bearing(g: &NavGraph, a: &NodeId, b: &NodeId) -> f64 {
    let (p, q) = (g.node(a).unwrap().position, g.node(b).unwrap().position);
    (q[1] - p[1]).atan2(q[0] - p[0]).to_degrees()
}

const ORDINALS: [&str; 6] = ["first", "second", "third", "fourth", "fifth", "sixth"];

fn parse(answer: &[String]) -> (Vec<Move>, Option<String>) {
    let text = answer.join(" ");
    let clauses: Vec<&str> = text.split(" , ").collect();
    let mut moves = Vec::new();
    let mut goal_room = None;
    for clause in clauses {
        let (head, room) = match clause.split_once(" into the ") {
            Some((h, r)) => (h, Some(r.to_string())),
            None => (clause, None),
        };
        let w: Vec<&str> = head.split(' ').collect();
        let one = |class| Move {
            class,
            ordinal: 0,
            room: room.clone(),
        };
        match w.as_slice() {
            ["go", "straight"] => moves.push(one(Class::Straight)),
            ["go", "straight", "for", n, "steps"] => {
                for _ in 0..n.parse::<usize>().unwrap() {
                    moves.push(one(Class::Straight));
                }
            }
            ["turn", "left"] => moves.push(one(Class::Left)),
            ["turn", "right"] => moves.push(one(Class::Right)),
            ["turn", "around"] => moves.push(one(Class::Around)),
            ["take", "the", ord, way @ ..] => {
                let ordinal = ORDINALS
                    .iter()
                    .position(|o| o == ord)
                    .unwrap_or_else(|| ord.trim_end_matches("th").parse::<usize>().unwrap() - 1);
                let class = match way {
                    ["straight", "path"] => Class::Straight,
                    ["left"] => Class::Left,
                    ["right"] => Class::Right,
                    ["way", "back"] => Class::Around,
                    other => panic!("unknown way {other:?}"),
                };
                moves.push(Move {
                    class,
                    ordinal,
                    room: room.clone(),
                });
            }
            ["the", ..] if head.contains(" is in the ") => {
                let room = head.split(" is in the ").nth(1).unwrap();
                goal_room = Some(room.trim_end_matches(" .").to_string());
            }
            ["stop", "here", ..] | ["the", .., "right", "here", "."] => {}
            other => panic!("unparsed clause {other:?} in `{text}`"),
        }
    }
    (moves, goal_room)
}

/// Walks the parsed moves and returns the visited nodes.
fn follow(g: &NavGraph, start: &NodeId, heading: usize, moves: &[Move]) -> Vec<NodeId> {
    let mut at = start.clone();
    let mut facing = heading as f64 * 60.0;
    let mut walk = vec![at.clone()];
    for m in moves {
        let mut options: Vec<(f64, NodeId)> = g
            .neighbors(&at)
            .unwrap()
            .filter_map(|(n, _)| {
                let delta = wrap(bearing(g, &at, n) - facing);
                (classify(delta) == m.class).then(|| ((wrap(delta - ideal(m.class))).abs(), n.clone()))
            })
            .collect();
        options.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let next = options[m.ordinal].1.clone();
        facing = bearing(g, &at, &next);
        if let Some(room) = &m.room {
            assert_eq!(&g.node(&next).unwrap().room, room);
            assert_ne!(g.node(&at).unwrap().room, *room);
        }
        at = next;
        walk.push(at.clone());
    }
    walk
}

fn check(g: &NavGraph, from: &NodeId, to: &NodeId, heading: usize, max_future: usize, seed: u64) {
    let ctx = DialogueContext::from_graph(g, from, heading, to, "lamp", max_future).unwrap();
    let qa = template_generate(&ctx, seed).unwrap();
    let (moves, goal_room) = parse(&qa.answer);
    let walk = follow(g, from, heading, &moves);
    let path = g.dijkstra(from, to).unwrap();
    let expect = &path.nodes[..path.nodes.len().min(max_future + 1)];
    assert_eq!(walk, expect, "answer: {}", qa.answer.join(" "));
    if from != to {
        assert_eq!(goal_room.as_deref(), Some(g.node(to).unwrap().room.as_str()));
    }
}

#[test]
fn every_pair_in_generated_environments() {
    let mut checked = 0;
    for seed in 0..6 {
        let g = generate_environment(seed, &EnvConfig::new(4, 4)).unwrap();
        let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id.clone()).collect();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids {
                check(&g, a, b, i % 6, 20, seed);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 6 * 16 * 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncated_routes_retrace_their_prefix(seed in 0u64..500, a in 0usize..24, b in 0usize..24, heading in 0usize..6, k in 0usize..6) {
        let g = generate_environment(seed, &EnvConfig::default()).unwrap();
        let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id.clone()).collect();
        check(&g, &ids[a % ids.len()], &ids[b % ids.len()], heading, k, seed);
    }
}
