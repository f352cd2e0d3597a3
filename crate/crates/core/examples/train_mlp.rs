//! Trains a 33-12-12-12-4 GELU network to imitate a random teacher network
//! and reports the held-out error, then saves and reloads the model.

use microgrid_empc::neural::{fit, load_model, save_model, MlpParams, MlpSpec, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> microgrid_empc::Result<()> {
    let spec = MlpSpec::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let teacher = MlpParams::glorot(&spec, &mut rng);
    let n = 3000;
    let xs: Vec<Vec<f64>> = (0..n + 300).map(|_| (0..33).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| teacher.forward(x)).collect::<Result<_, _>>()?;

    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = TrainConfig {
        seed: 3,
        max_epochs: epochs,
        ..TrainConfig::default()
    };
    let (model, log) = fit(&spec, &xs[..n], &ys[..n], &cfg, serde_json::Value::Null)?;
    for e in log.epochs.iter().filter(|e| e.epoch == 1 || e.epoch % 50 == 0) {
        println!("epoch {:5}  train {:.4e}  val {:.4e}", e.epoch, e.train_loss, e.val_loss);
    }
    let mut se = 0.0;
    for (x, y) in xs[n..].iter().zip(&ys[n..]) {
        let p = model.predict(x)?;
        se += p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    println!("best epoch {}; held-out RMSE {:.3e}", log.best_epoch, (se / (300.0 * 4.0)).sqrt());

    let path = std::env::temp_dir().join("teacher_student_model.json");
    save_model(&path, &model)?;
    let back = load_model(&path)?;
    println!("reloaded from {}: identical = {}", path.display(), back == model);
    Ok(())
}
