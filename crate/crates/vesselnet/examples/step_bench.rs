use std::time::Instant;
use vesselnet::fft::FftCache;
use vesselnet::frontend::Mode;
use vesselnet::model::*;
use vesselnet::types::ClassLabel;

fn main() {
    let config = ModelConfig {
        sample_rate: 16000, n_samples: 16000, n_filters: 32,
        f_min_hz: 60.0, f_max_hz: 8000.0, kernel_width: 401, hop: 160,
        encoder_channels: vec![16, 32, 64], attention_dim: 64,
        pooling: PoolingMode::Attention, use_ctdsv: true,
    };
    let model = ModelState::<f32>::init(config, 0).unwrap();
    let batch: Vec<ClipInput<f32>> = (0..32).map(|i| ClipInput {
        samples: (0..16000).map(|t| 0.3 * ((0.05 + 0.01 * i as f32) * t as f32).sin()).collect(),
        ctdsv: [0.1; 5],
        label: ClassLabel::from_index(i % 5).unwrap(),
    }).collect();

    for threads in [1usize, 2] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let ffts = FftCache::new();
            // warmup
            model_step(&model, &batch, Mode::Train, true, &ffts).unwrap();
            let reps = 5;
            let t0 = Instant::now();
            for _ in 0..reps {
                model_step(&model, &batch, Mode::Train, true, &ffts).unwrap();
            }
            println!("threads={threads}: {:.0} ms/step (fwd+bwd)", t0.elapsed().as_secs_f64()*1e3/reps as f64);
            let t0 = Instant::now();
            for _ in 0..reps {
                model_step(&model, &batch, Mode::Train, false, &ffts).unwrap();
            }
            println!("threads={threads}: {:.0} ms/step (fwd only)", t0.elapsed().as_secs_f64()*1e3/reps as f64);
        });
    }
}
