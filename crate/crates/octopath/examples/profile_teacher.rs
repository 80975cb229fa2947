use octopath::kinematics::KinematicParams;
use octopath::world::*;
use octopath::geom::{Rect, Vec2};

fn main() {
    let mut world = World::empty(Rect::new(Vec2::ZERO, Vec2::new(20.0, 20.0)), 0);
    world.statics.push(Shape::Rect { min: Vec2::new(9.7, 0.0), max: Vec2::new(10.3, 11.2) });
    world.statics.push(Shape::Rect { min: Vec2::new(9.7, 13.2), max: Vec2::new(10.3, 20.0) });
    let route = make_route(
        &RouteKind::Line { start: Vec2::new(2.0, 10.0), end: Vec2::new(18.0, 10.0) },
        0.25,
    ).unwrap();
    let teacher = TeacherConfig::default();
    let log = collect_run(&world, &route, &KinematicParams::default(), 0.25, 400, &teacher, 0).unwrap();
    println!("aborted={} ticks={}", log.aborted, log.ticks.len());
    for t in log.ticks.iter().rev().take(12).collect::<Vec<_>>().iter().rev() {
        println!("tick {:3} pose ({:5.2},{:5.2},{:5.2}) v={:.2} w={:5.2}", t.tick, t.state.x, t.state.y, t.state.theta, t.state.v_x, t.state.omega_z);
    }
}
