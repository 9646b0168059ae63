use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umamba2::inference::*;
use umamba2::network::{ArchConfig, Model};
use umamba2::prompts::ClickPrompt;
use umamba2::schema::LabelSchema;
use umamba2::ssd::SsdConfig;
use umamba2::volume::{Image, LabelVolume, LR_AXIS};
use umamba2::Result;

/// Predicts each voxel's class from its own intensity (one-hot), so the
/// sliding-window blend must reproduce it exactly.
struct Threshold {
    k: usize,
    patch: [usize; 3],
}

impl Predictor for Threshold {
    fn num_classes(&self) -> usize {
        self.k
    }
    fn patch_extents(&self) -> [usize; 3] {
        self.patch
    }
    fn predict_patch(&self, patch: &Image, _clicks: &[ClickPrompt]) -> Result<Vec<f32>> {
        let v = patch.len();
        let mut out = vec![0.0; self.k * v];
        for (i, &x) in patch.data.iter().enumerate() {
            let c = (x.max(0.0) as usize).min(self.k - 1);
            out[c * v + i] = 1.0;
        }
        Ok(out)
    }
}

/// Labels every voxel by which half of the window it sits in along LR, so
/// its output depends on position and exercises the channel swap.
struct Sided {
    schema: LabelSchema,
    patch: [usize; 3],
}

impl Predictor for Sided {
    fn num_classes(&self) -> usize {
        self.schema.num_classes()
    }
    fn patch_extents(&self) -> [usize; 3] {
        self.patch
    }
    fn predict_patch(&self, patch: &Image, _clicks: &[ClickPrompt]) -> Result<Vec<f32>> {
        let v = patch.len();
        let k = self.num_classes();
        let mut out = vec![0.0; k * v];
        for i in 0..v {
            let z = patch.coord(i)[LR_AXIS];
            let c = if patch.data[i] > 0.5 {
                if 2 * z < patch.dims[LR_AXIS] {
                    1
                } else {
                    2
                }
            } else {
                0
            };
            out[c * v + i] = 1.0;
        }
        Ok(out)
    }
}

fn random_classes(dims: [usize; 3], k: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(dims, 0.0);
    for v in &mut img.data {
        *v = rng.random_range(0..k) as f32;
    }
    img
}

#[test]
fn windows_tile_the_volume() {
    for (dims, patch, frac) in [
        ([40, 33, 64], [16, 16, 16], 0.5),
        ([40, 33, 64], [16, 16, 16], 0.9),
        ([16, 16, 16], [16, 16, 16], 0.5),
        ([17, 50, 31], [8, 12, 16], 0.5),
        ([17, 50, 31], [8, 12, 16], 0.9),
    ] {
        let pos = window_positions(dims, patch, frac);
        let mut covered = vec![0u8; dims.iter().product()];
        for p in &pos {
            for a in 0..3 {
                assert!(p[a] + patch[a] <= dims[a]);
            }
            for i in 0..patch[0] {
                for j in 0..patch[1] {
                    for k in 0..patch[2] {
                        covered[((p[0] + i) * dims[1] + p[1] + j) * dims[2] + p[2] + k] = 1;
                    }
                }
            }
        }
        assert!(covered.iter().all(|&c| c == 1), "{dims:?} at {frac}");
    }
}

#[test]
fn sixty_four_over_thirty_two_gives_three_offsets_per_axis() {
    let pos = window_positions([64, 64, 64], [32, 32, 32], 0.5);
    assert_eq!(pos.len(), 27);
    for a in 0..3 {
        let mut offs: Vec<usize> = pos.iter().map(|p| p[a]).collect();
        offs.sort();
        offs.dedup();
        assert_eq!(offs, vec![0, 16, 32]);
    }
}

#[test]
fn window_count_never_grows_with_the_step() {
    for size in [16, 33, 48, 64, 97] {
        let mut last = usize::MAX;
        for frac in [0.25, 0.5, 0.75, 0.9, 1.0] {
            let n = window_positions([size, size, 20], [16, 16, 16], frac).len();
            assert!(n <= last, "size {size}, step {frac}");
            last = n;
        }
    }
}

#[test]
fn coarser_step_uses_fewer_windows_and_less_time() {
    let cfg = ArchConfig {
        num_stages: 2,
        base_channels: 4,
        num_classes: 12,
        patch_extents: [16, 16, 16],
        encoder_blocks: 1,
        ssd: SsdConfig { state_dim: 4, num_heads: 2, chunk_len: 8, ..Default::default() },
        ..Default::default()
    };
    let model = Model::<f32>::build(&cfg).unwrap();
    let img = random_classes([48, 48, 48], 2, 12);
    let schema = LabelSchema::dental();
    let off = TtaConfig { enabled: false, allow_lr: true };
    let mut reports = Vec::new();
    for frac in [0.5, 0.9] {
        let sw = SlidingWindowConfig { step_fraction: frac, ..Default::default() };
        let (_, rep) = tta_predict(&model, &img, &[], &schema, &sw, &off).unwrap();
        assert_eq!(rep.windows_per_pass, window_positions(img.dims, cfg.patch_extents, frac).len());
        reports.push(rep);
    }
    assert!(reports[1].windows_per_pass < reports[0].windows_per_pass);
    assert!(reports[1].seconds < reports[0].seconds, "{reports:?}");
}

#[test]
fn window_step_never_exceeds_fraction() {
    for size in 16..120 {
        let s = window_starts(size, 16, 0.5);
        assert_eq!(s[0], 0);
        assert_eq!(*s.last().unwrap(), size.saturating_sub(16));
        for w in s.windows(2) {
            assert!(w[1] - w[0] <= 8 && w[1] > w[0]);
        }
    }
}

#[test]
fn gaussian_weights_are_positive_and_centred() {
    let g = gaussian_importance([16, 16, 16], 0.125);
    assert!(g.iter().all(|&w| w > 0.0));
    let centre = g[(7 * 16 + 7) * 16 + 7];
    let corner = g[0];
    assert!(centre > 0.99 && corner < 1e-3);
}

#[test]
fn blending_consistent_predictions_is_exact() {
    let p = Threshold { k: 4, patch: [8, 8, 8] };
    let img = random_classes([21, 13, 8], 4, 3);
    let probs = sliding_window_predict(&p, &img, &[], &SlidingWindowConfig::default()).unwrap();
    let lab = probs.argmax();
    for (l, &x) in lab.data.iter().zip(&img.data) {
        assert_eq!(*l as f32, x);
    }
    for i in 0..probs.voxels() {
        let s: f32 = (0..4).map(|c| probs.data[c * probs.voxels() + i]).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn small_images_are_padded_and_cropped_back() {
    let p = Threshold { k: 3, patch: [8, 8, 8] };
    let img = random_classes([5, 8, 3], 3, 4);
    let probs = sliding_window_predict(&p, &img, &[], &SlidingWindowConfig::default()).unwrap();
    assert_eq!(probs.dims, [5, 8, 3]);
    assert_eq!(probs.argmax().data, img.data.iter().map(|&x| x as u8).collect::<Vec<_>>());
}

#[test]
fn thread_count_does_not_change_the_result() {
    let cfg = ArchConfig {
        num_stages: 2,
        base_channels: 4,
        num_classes: 12,
        patch_extents: [16, 16, 16],
        encoder_blocks: 1,
        ssd: SsdConfig { state_dim: 4, num_heads: 2, chunk_len: 8, ..Default::default() },
        ..Default::default()
    };
    let model = Model::<f32>::build(&cfg).unwrap();
    let mut img = Image::filled([24, 20, 28], 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for v in &mut img.data {
        *v = rng.random();
    }
    let one = SlidingWindowConfig { threads: 1, ..Default::default() };
    let three = SlidingWindowConfig { threads: 3, ..Default::default() };
    let a = sliding_window_predict(&model, &img, &[], &one).unwrap();
    let b = sliding_window_predict(&model, &img, &[], &three).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tta_of_an_equivariant_predictor_is_exact() {
    let schema = LabelSchema::dental();
    let p = Threshold { k: 12, patch: [8, 8, 8] };
    // laterality-free classes so the channel swap is a no-op here
    let mut img = random_classes([16, 8, 8], 12, 5);
    let perm = schema.laterality_permutation();
    for v in &mut img.data {
        if perm[*v as usize] != *v as usize {
            *v = 0.0;
        }
    }
    let (probs, rep) =
        tta_predict(&p, &img, &[], &schema, &SlidingWindowConfig::default(), &TtaConfig::default()).unwrap();
    assert_eq!(rep.passes, 8);
    assert_eq!(probs.argmax().data, img.data.iter().map(|&x| x as u8).collect::<Vec<_>>());
}

#[test]
fn lr_passes_swap_partner_channels() {
    let schema = LabelSchema::dental();
    assert_eq!(schema.partner(1), Some(2));
    let p = Sided { schema: schema.clone(), patch: [4, 4, 8] };
    let img = Image::filled([4, 4, 8], 1.0);
    let sw = SlidingWindowConfig::default();
    // the identity pass labels the low-z half 1 and the high half 2; the
    // mirrored pass sees the halves exchanged and, after un-flipping and
    // swapping channels, must agree
    let plain = sliding_window_predict(&p, &img, &[], &sw).unwrap();
    let lr_only = TtaConfig { enabled: true, allow_lr: true };
    let (avg, _) = tta_predict(&p, &img, &[], &schema, &sw, &lr_only).unwrap();
    assert_eq!(avg.argmax(), plain.argmax());

    // without the swap the mirrored pass would contradict the plain one
    let flipped = sliding_window_predict(&p, &img.flip(&[LR_AXIS]), &[], &sw).unwrap().flip(&[LR_AXIS]);
    assert_ne!(flipped.argmax(), plain.argmax());
    assert_eq!(swap_laterality_channels(&flipped, &schema).unwrap().argmax(), plain.argmax());
}

#[test]
fn swap_is_an_involution() {
    let schema = LabelSchema::dental();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f32> = (0..12 * 27).map(|_| rng.random()).collect();
    let p = ProbMap { num_classes: 12, dims: [3, 3, 3], spacing_mm: [1.0; 3], data };
    let twice = swap_laterality_channels(&swap_laterality_channels(&p, &schema).unwrap(), &schema).unwrap();
    assert_eq!(twice, p);
}

#[test]
fn tta_disabled_is_one_plain_pass() {
    let schema = LabelSchema::dental();
    let p = Threshold { k: 12, patch: [8, 8, 8] };
    let img = random_classes([8, 8, 8], 12, 9);
    let sw = SlidingWindowConfig::default();
    let (a, rep) = tta_predict(&p, &img, &[], &schema, &sw, &TtaConfig { enabled: false, allow_lr: true }).unwrap();
    assert_eq!(rep.passes, 1);
    assert_eq!(a, sliding_window_predict(&p, &img, &[], &sw).unwrap());
    assert_eq!(TtaConfig { enabled: true, allow_lr: false }.passes().len(), 4);
}

#[test]
fn out_of_bounds_clicks_are_rejected() {
    let p = Threshold { k: 3, patch: [8, 8, 8] };
    let img = Image::filled([8, 8, 8], 0.0);
    let bad = [ClickPrompt { x: 8, y: 0, z: 0, class_id: 1 }];
    assert!(sliding_window_predict(&p, &img, &bad, &SlidingWindowConfig::default()).is_err());
}

#[test]
fn argmax_prefers_lower_class_on_ties() {
    let p = ProbMap { num_classes: 3, dims: [1, 1, 1], spacing_mm: [1.0; 3], data: vec![0.2, 0.4, 0.4] };
    assert_eq!(p.argmax(), LabelVolume::new([1, 1, 1], [1.0; 3], vec![1]).unwrap());
}
