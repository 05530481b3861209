//! Builds a scene from parsed instructions, renders it, recovers it from the
//! pixels and scores a corrupted copy against it.
//!
//! cargo run --release --example scene_world -- [out.png]

use sscr::instructions::parse;
use sscr::metrics::{f1, relsim};
use sscr::scene::Scene;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "scene.png".into());
    let mut scene = Scene::empty();
    for text in [
        "add a red cube at the center",
        "add a blue sphere on the left of the red cube",
        "add a green cylinder behind the blue sphere",
        "add a yellow cube in front of the red cube",
    ] {
        scene = scene.apply_edit(&parse(text)?)?;
        println!("{text:48} -> {} objects", scene.len());
    }
    for p in scene.placements() {
        println!("  {} at ({}, {})", p.spec, p.x, p.y);
    }

    let image = scene.render();
    image.write_png(out.as_ref())?;
    println!("wrote {out}");
    assert_eq!(image.detect(), scene);

    let graph = scene.scene_graph();
    println!("{} vertices, {} edges", graph.vertices.len(), graph.edges.len());
    for e in graph.edges.iter().take(4) {
        println!("  {} {} {}", e.src, e.relation, e.dst);
    }

    // Drop the last object and score the result against the full scene.
    let partial = Scene::from_placements(scene.placements()[..scene.len() - 1].to_vec())?;
    let prf = f1(&partial, &scene);
    let rs = relsim(&graph, &partial.scene_graph(), prf.recall);
    println!(
        "without the last object: precision {:.3} recall {:.3} F1 {:.3} RelSim {:.3}",
        prf.precision, prf.recall, prf.f1, rs
    );
    Ok(())
}
