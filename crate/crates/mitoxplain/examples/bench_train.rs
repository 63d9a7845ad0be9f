//! Rough single-core training throughput check:
//! `cargo run --release -p mitoxplain --example bench_train [size] [n] [epochs]`

use std::time::Instant;

use mitoxplain::nn::small_cnn;
use mitoxplain::patch::Patch;
use mitoxplain::split::DatasetSplit;
use mitoxplain::stack::ClassLabel;
use mitoxplain::trainer::{train, ChannelSelection, TrainConfig};
use ndarray::Array3;

fn main() {
    let mut args = std::env::args().skip(1);
    let size: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(256);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(16);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);

    let patches: Vec<Patch> = (0..n + 4)
        .map(|i| Patch {
            source_subject: format!("s{i}"),
            class_label: if i % 2 == 0 { ClassLabel::Control } else { ClassLabel::Patient },
            origin: (0, 0),
            data: Array3::from_shape_fn((size, size, 1), |(r, c, _)| {
                (((r * 31 + c * 17 + i * 7) % 97) as f64 / 97.0) * if i % 2 == 0 { 0.4 } else { 1.0 }
            }),
            channel_names: vec!["NDUFB8".to_string()],
        })
        .collect();
    let split = DatasetSplit {
        train: (0..n).collect(),
        validation: vec![n, n + 1],
        test: vec![n + 2, n + 3],
        ratios: [0.8, 0.1, 0.1],
        seed: 0,
        grouped_by_subject: false,
    };
    let config = TrainConfig {
        max_epochs: epochs,
        early_stop_patience: epochs,
        batch_size: 8,
        ..TrainConfig::smallcnn(1, ChannelSelection::Channels(vec!["NDUFB8".to_string()]))
    };
    let model = small_cnn(1, 2, true, 1);
    let start = Instant::now();
    let trained = train(model, &patches, &split, &config).unwrap();
    let elapsed = start.elapsed();
    println!(
        "{} samples of {size}x{size}, {epochs} epochs: {:.2}s total, {:.2}s/epoch (stopped {})",
        n,
        elapsed.as_secs_f64(),
        elapsed.as_secs_f64() / trained.history.len() as f64,
        trained.stopped_epoch,
    );
}
