use flower::data::CovariateLayout;
use flower::partition::*;
use flower::rng::stream;

fn main() {
    let layout =
        CovariateLayout::from_codes(vec![vec![0, 1, 2, 0, 1], vec![0, 0, 1, 1, 0]], vec![3, 2])
            .unwrap();
    let combo_hist: Vec<Vec<u32>> =
        vec![vec![1, 1, 0], vec![0, 2, 1], vec![1, 0, 0], vec![2, 0, 1], vec![0, 1, 1]];
    let ctx = PartitionCtx {
        layout: &layout,
        combo_hist: &combo_hist,
        lambda0: &[0.2, 0.5, 0.3],
        alpha: 1.1,
        phi: 0.7,
        phi_star: 1.0,
    };
    let mut part = CoordPartition::init_single(&layout, 3, 4);
    part.rebuild_caches(&ctx);
    let mut rng = stream(27, "fuzz");
    for step in 0..3000 {
        let h = step % 2;
        eprintln!("step {step} h={h} shape={:?} clusters={:?} assigns={:?}",
            part.tensor.shape(),
            part.levels.iter().map(|l| l.cluster_count()).collect::<Vec<_>>(),
            part.levels.iter().map(|l| l.assignments().to_vec()).collect::<Vec<_>>());
        let acc = part.joint_update(h, &ctx, &mut rng);
        eprintln!("  joint done accepted={acc}");
        part.gibbs_sweep(&ctx, &mut rng);
        eprintln!("  gibbs done");
    }
    println!("no desync");
}
