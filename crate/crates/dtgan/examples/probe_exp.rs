use dtgan::config::EvalConfig;
use dtgan::datagen::{generate_procedural, write_dataset, ProceduralSpec, Split};
use dtgan::domain::ImageTensor;
use dtgan::evaluation::{probe_accuracy, train_probe, Embedder};

fn main() {
    for (counts, epochs) in [([50usize, 40, 40], 8), ([50, 40, 40], 12), ([40, 30, 30], 12)] {
        let t0 = std::time::Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let spec = ProceduralSpec { image_size: 32, seed: 33, counts: vec![counts; 2],
            textures: dtgan::datagen::default_textures(2), ..Default::default() };
        let samples = generate_procedural(&spec).unwrap();
        let manifest = write_dataset(&spec, &samples, dir.path()).unwrap();
        let np = manifest.n_products();
        let cfg = EvalConfig { probe_epochs: epochs, ..Default::default() };
        let embedder = train_probe(&manifest, &cfg, 7).unwrap();
        let Embedder::Probe(probe) = &embedder else { panic!() };
        let val: Vec<(ImageTensor, usize)> = manifest
            .entries_in(Split::Val)
            .map(|e| (manifest.load_image(e).unwrap(), e.domain * np + e.product))
            .collect();
        println!("counts {counts:?} epochs {epochs}: val acc {:.3} ({:.0}s)", probe_accuracy(probe, &val), t0.elapsed().as_secs_f64());
    }
}
