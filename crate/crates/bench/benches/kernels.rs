use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unite::masking::{disjoint_masks, sample_mask};
use unite::video::Domain;
use unite::{AttentionMap, StudentModel, Tape, Tensor, VideoClip, ViTConfig};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_forward_backward");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [16usize, 64, 128] {
        let a = Tensor::from_fn(&[n, n], |_| rng.gen_range(-1.0..1.0)).with_grad();
        let b = Tensor::from_fn(&[n, n], |_| rng.gen_range(-1.0..1.0)).with_grad();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.leaf(&a), tape.leaf(&b));
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum(z);
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn student(c: &mut Criterion) {
    let cfg = ViTConfig::default();
    let model = StudentModel::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = cfg.frames * cfg.frame_size * cfg.frame_size;
    let clips: Vec<VideoClip> = (0..8)
        .map(|i| {
            let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            VideoClip::new([1, cfg.frames, cfg.frame_size, cfg.frame_size], data, Some(i % 8), Domain::Source).unwrap()
        })
        .collect();
    let refs: Vec<&VideoClip> = clips.iter().collect();
    let labels: Vec<usize> = (0..8).collect();

    c.bench_function("student_forward_batch8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, false);
            black_box(model.batch_logits(&mut tape, &p, &refs, None).unwrap());
        })
    });
    c.bench_function("student_forward_backward_batch8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let logits = model.batch_logits(&mut tape, &p, &refs, None).unwrap();
            let loss = tape.cross_entropy(logits, &labels, &[1.0; 8]).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn masking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w: Vec<f32> = (0..8 * 196).map(|_| rng.gen_range(0.0..1.0)).collect();
    let attn = AttentionMap::new(8, 196, w).unwrap();
    c.bench_function("sample_mask_8x196_r0.8", |b| b.iter(|| black_box(sample_mask(&attn, 0.8, &mut rng).unwrap())));
    c.bench_function("disjoint_masks_8x196_k2", |b| b.iter(|| black_box(disjoint_masks(&attn, 2, 0.8).unwrap())));
}

criterion_group!(benches, matmul, student, masking);
criterion_main!(benches);
