//! A small facility-style MIQP solved by branch and bound and by exhaustive
//! enumeration, with the search tree printed.
//!
//! Each of four units either stays off or produces between 2 and 10 units of
//! output at a quadratic cost plus a fixed charge; total output must meet the
//! demand.

use microgrid_empc::miqp::{solve_bnb, solve_enumerate, Layout, MiqpProblem, SolverOptions};

fn main() -> microgrid_empc::Result<()> {
    let demand = 17.0;
    let fixed = [3.0, 5.0, 2.0, 4.0];
    let lin = [1.0, 0.6, 1.4, 0.8];
    let quad = [0.05, 0.08, 0.02, 0.06];

    let mut names: Vec<String> = (0..4).map(|i| format!("p[{i}]")).collect();
    names.extend((0..4).map(|i| format!("on[{i}]")));
    let mut p = MiqpProblem::with_layout(Layout::from_names(names)?);
    for i in 0..4 {
        let (x, d) = (i, 4 + i);
        p.set_binary(d);
        p.lower[x] = 0.0;
        p.c[x] = lin[i];
        p.c[d] = fixed[i];
        p.add_q(x, x, 2.0 * quad[i]);
        // 2 d <= p <= 10 d
        p.push_le(vec![(x, -1.0), (d, 2.0)], 0.0);
        p.push_le(vec![(x, 1.0), (d, -10.0)], 0.0);
    }
    p.push_eq((0..4).map(|i| (i, 1.0)).collect(), demand);

    let opts = SolverOptions {
        record_tree: true,
        ..SolverOptions::default()
    };
    let bb = solve_bnb(&p, &opts);
    let en = solve_enumerate(&p, &opts)?;
    println!("branch and bound: {:?} objective {:.6} after {} nodes", bb.status, bb.objective, bb.nodes_explored);
    println!("enumeration:      {:?} objective {:.6} after {} nodes", en.status, en.objective, en.nodes_explored);
    if let Some(x) = &bb.incumbent {
        for (n, v) in p.layout.names().iter().zip(x) {
            println!("  {n:6} = {v:.4}");
        }
    }
    println!("tree:");
    for r in &bb.tree {
        println!("  node {:3} parent {:>4} bound {:.4}", r.id, r.parent.map_or("-".into(), |q| q.to_string()), r.objective);
    }
    Ok(())
}
