use piqa::image::ImageTensor;
use piqa::local_iqa::RECEPTIVE_RADIUS;
use piqa::model::{ForwardOptions, NetConfig, PiqaNet};
use piqa::nn::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 31;
const CENTER: usize = 15;

fn local_only() -> PiqaNet<f32> {
    let mut cfg = NetConfig {
        use_highlevel: false,
        use_roi: false,
        ..NetConfig::default()
    };
    cfg.local.channels = 8;
    PiqaNet::new(cfg).unwrap()
}

fn center_pmos(net: &mut PiqaNet<f32>, img: &ImageTensor) -> f32 {
    let out = net
        .forward(&img.to_tensor(), Mode::Eval, ForwardOptions::default())
        .unwrap();
    out.pmos.at(0, 0, CENTER, CENTER)
}

fn inside(x: usize, y: usize) -> bool {
    x.abs_diff(CENTER) <= RECEPTIVE_RADIUS && y.abs_diff(CENTER) <= RECEPTIVE_RADIUS
}

#[test]
fn window_is_fifteen_pixels() {
    assert_eq!(2 * RECEPTIVE_RADIUS + 1, 15);
}

#[test]
fn center_pmos_ignores_pixels_outside_window() {
    let mut net = local_only();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let base = ImageTensor::new(SIZE, SIZE, (0..3 * SIZE * SIZE).map(|_| rng.random()).collect()).unwrap();
    let reference = center_pmos(&mut net, &base);
    for trial in 0..20 {
        let mut img = base.clone();
        for y in 0..SIZE {
            for x in 0..SIZE {
                if inside(x, y) {
                    continue;
                }
                for c in 0..3 {
                    let v = if trial % 2 == 0 { rng.random() } else { 1.0e3 };
                    img.set(x, y, c, v);
                }
            }
        }
        assert_eq!(center_pmos(&mut net, &img).to_bits(), reference.to_bits());
    }
}

#[test]
fn window_edge_pixels_can_change_center_pmos() {
    let mut net = local_only();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let base = ImageTensor::new(SIZE, SIZE, (0..3 * SIZE * SIZE).map(|_| rng.random()).collect()).unwrap();
    let reference = center_pmos(&mut net, &base);
    // the corner of the window is still connected; a large change there must show
    let mut img = base.clone();
    let edge = CENTER - RECEPTIVE_RADIUS;
    for y in edge..=edge + 1 {
        for x in edge..CENTER {
            for c in 0..3 {
                img.set(x, y, c, 50.0);
            }
        }
    }
    assert_ne!(center_pmos(&mut net, &img).to_bits(), reference.to_bits());
}
