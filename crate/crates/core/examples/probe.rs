// scratch probe: desk-scale attack effectiveness
use cloudcube::attack::*;
use cloudcube::cubes::*;
use cloudcube::detector::*;
use cloudcube::grad::AdamHyper;
use cloudcube::spectra::*;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let mk = |seed: u64, n: usize| ScenegenConfig {
        size: 128,
        cloud_density: DensitySpec::Beta { beta: [0.5, 0.5] },
        terrain: TerrainChoice::Variety,
        seed,
        counts: SplitCounts { train: n * 7 / 10, val: n * 15 / 100, test: n - n * 7 / 10 - n * 15 / 100 },
        cloud_margin: 0.25,
    };
    let cfg30 = mk(1001, 400);
    let cfg70 = mk(2002, 160);
    let th30 = assemble_bundle(&gen_scene_set(&cfg30).unwrap(), 0.30, &cfg30.counts).unwrap();
    let th70 = assemble_bundle(&gen_scene_set(&cfg70).unwrap(), 0.70, &cfg70.counts).unwrap();
    let model = build_detector(&ArchConfig::compact(), 7).unwrap();
    let trained = train_two_stage(model, &th30, &th70, &TrainConfig { seed: 42, ..TrainConfig::default() }).unwrap();
    let det = trained.model;
    eprintln!("detector ready {:.0}s", t0.elapsed().as_secs_f32());

    let att_cfg = ScenegenConfig {
        size: 128,
        cloud_density: DensitySpec::Uniform { uniform: [0.0, 0.25] },
        terrain: TerrainChoice::Variety,
        seed: 9090,
        counts: SplitCounts { train: 1, val: 0, test: 0 },
        cloud_margin: 0.25,
    };
    let sets = build_attack_sets(&att_cfg, |c| det.confidence_cube(c), 40, 20).unwrap();
    let base_train: f64 = sets.train.iter().map(|c| c.baseline_confidence).sum::<f64>() / sets.train.len() as f64;
    eprintln!("attack sets ready {:.0}s; baseline mean conf on D: {:.4}", t0.elapsed().as_secs_f32(), base_train);

    let index = build_spectral_index(&embedded_material_library(), &solar_reference(), &BandTable::sentinel2a()).unwrap();

    for lr in [0.02, 0.1] {
        let acfg = AttackConfig {
            alpha: 0.0, beta: 0.0, steps: 250, adam: AdamHyper::with_lr(lr),
            batch_size: 8, augment: AugmentConfig::default(),
            layout: vec![CubeSize { rows: 25, cols: 25 }],
            proximity: Proximity::Low, parametrization: Parametrization::Hull,
            seed: 3, best_window: 50,
        };
        let t1 = Instant::now();
        let params0 = acfg.fresh_params(index.material_count()).unwrap();
        let hosts: Vec<&DataCube> = sets.train.iter().map(|c| &c.cube).collect();
        let run = optimize_cube(params0, &hosts, None, &det, &index, &acfg).unwrap();
        eprintln!("lr {lr}: {:.0}s for 250 steps", t1.elapsed().as_secs_f32());
        for (i, r) in run.trace.iter().enumerate() {
            if i % 25 == 0 || i + 1 == run.trace.len() {
                eprintln!("  step {:3} psi {:.4} mean_conf {:.4}", r.step, r.psi, r.mean_conf);
            }
        }
        // eval on test with fresh transforms
        let best = &run.best[0];
        let rendered = best.realize(&index).unwrap();
        let mut accs = 0usize; let mut confs = 0.0f64;
        for (i, c) in sets.test.iter().enumerate() {
            let mut rng = cloudcube::rng::stream(777, cloudcube::rng::Domain::Eval, i as u64);
            let t = sample_transforms(&mut rng, &acfg.augment, (128,128), &[(25,25)], Proximity::Low).unwrap();
            let emb = embed(&c.cube, &rendered, &t[0]).unwrap();
            let conf = det.confidence_cube(&emb).unwrap();
            confs += conf;
            if conf <= 0.5 { accs += 1; }
        }
        eprintln!("  TEST: accuracy {:.3} cloudy {:.3}", accs as f64 / 20.0, confs / 20.0);
    }
    eprintln!("total {:.0}s", t0.elapsed().as_secs_f32());
}
