//! Test-side reference evaluators for the synthetic tasks.

use arena::tasks::pathfinder::{Dash, PathfinderScene};

/// Stack evaluation of serialized ListOps text, without the crate's parser.
pub fn listops_oracle(text: &str) -> Option<u8> {
    let mut stack: Vec<(String, Vec<u32>)> = Vec::new();
    let mut result = None;
    let spaced = text.replace(']', " ] ").replace(',', " ");
    for tok in spaced.split_whitespace() {
        if let Some(op) = tok.strip_prefix('[') {
            stack.push((op.to_string(), Vec::new()));
        } else if tok == "]" {
            let (op, mut args) = stack.pop()?;
            if args.is_empty() {
                return None;
            }
            args.sort_unstable();
            let n = args.len() as u32;
            let v = match op.as_str() {
                "MAX" => *args.last()?,
                "MIN" => args[0],
                "SUM_MOD" => args.iter().sum::<u32>() % 10,
                "MEAN" => args.iter().sum::<u32>() / n,
                "MEDIAN" if n % 2 == 1 => args[args.len() / 2],
                "MEDIAN" => (args[args.len() / 2 - 1] + args[args.len() / 2]) / 2,
                _ => return None,
            };
            match stack.last_mut() {
                Some(parent) => parent.1.push(v),
                None if result.is_none() => result = Some(v as u8),
                None => return None,
            }
        } else {
            let d: u32 = tok.parse().ok().filter(|d| *d < 10)?;
            match stack.last_mut() {
                Some(parent) => parent.1.push(d),
                None if result.is_none() => result = Some(d as u8),
                None => return None,
            }
        }
    }
    if stack.is_empty() {
        result
    } else {
        None
    }
}

fn samples(d: &Dash, k: usize) -> Vec<(f64, f64)> {
    (0..=k)
        .map(|s| {
            let t = s as f64 / k as f64;
            (d.a.0 + t * (d.b.0 - d.a.0), d.a.1 + t * (d.b.1 - d.a.1))
        })
        .collect()
}

fn near(a: &[(f64, f64)], b: &[(f64, f64)], tol: f64) -> bool {
    a.iter().any(|p| b.iter().any(|q| (p.0 - q.0).hypot(p.1 - q.1) <= tol))
}

/// Breadth-first search over the scene's dashes, treating two dashes as
/// adjacent when sampled points come within `tol`, and each marker as
/// touching the dashes it lies on.
pub fn pathfinder_oracle(scene: &PathfinderScene, tol: f64) -> bool {
    let dashes: Vec<Vec<(f64, f64)>> = scene.contours.iter().flatten().map(|d| samples(d, 16)).collect();
    let on = |m: (f64, f64)| -> Vec<usize> { (0..dashes.len()).filter(|&i| near(&dashes[i], &[m], 0.5)).collect() };
    let mut seen = vec![false; dashes.len()];
    let mut frontier = on(scene.markers[0].center);
    for &i in &frontier {
        seen[i] = true;
    }
    while let Some(i) = frontier.pop() {
        for j in 0..dashes.len() {
            if !seen[j] && near(&dashes[i], &dashes[j], tol) {
                seen[j] = true;
                frontier.push(j);
            }
        }
    }
    on(scene.markers[1].center).into_iter().any(|j| seen[j])
}
