use dualmap_core::geometry::{Point, Pose};
use dualmap_core::policy::{execute_to, ARRIVAL_TOLERANCE_M};
use dualmap_core::sim_env::generator::{generate_scene, Family};
use dualmap_core::sim_env::{Environment, SimConfig};
use dualmap_core::util::rng_from;
use rand::Rng;

#[test]
fn executor_arrives_whenever_a_path_exists() {
    let mut tried = 0;
    let mut failures = Vec::new();
    for family in Family::ALL {
        for idx in 0..6 {
            let env = Environment::new(generate_scene(family, idx, 21), SimConfig::default()).unwrap();
            let mut rng = rng_from(idx as u64, &[7]);
            let r = &env.raster;
            let mut n = 0;
            while n < 10 {
                let p = Point::new(rng.gen_range(0.0..r.width), rng.gen_range(0.0..r.height));
                let q = Point::new(rng.gen_range(0.0..r.width), rng.gen_range(0.0..r.height));
                if !r.is_free(p) || !r.is_free(q) || r.astar(r.cell_of(p).unwrap(), r.cell_of(q).unwrap()).is_none() {
                    continue;
                }
                n += 1;
                tried += 1;
                let start = Pose::new(p.x, p.y, 15.0 * rng.gen_range(0..24) as f64);
                let e = execute_to(&env, start, q, 2000);
                if e.pose.position().dist(&q) > ARRIVAL_TOLERANCE_M {
                    failures.push((family, idx, p, q, e.pose, e.actions));
                }
            }
        }
    }
    assert!(failures.is_empty(), "{} of {tried} failed: {:?}", failures.len(), &failures[..failures.len().min(5)]);
}
