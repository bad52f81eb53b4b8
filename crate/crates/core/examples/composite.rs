//! Volume-renders an analytic density (a soft red ball in front of a blue
//! slab) with the compositing primitives directly, no network involved, and
//! writes the color and depth images.
//!
//! cargo run --release -p volseg --example composite -- [out_dir]

use std::path::PathBuf;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volseg::rendering::{composite, generate_rays, sample_along_ray, Camera, Pose};
use volseg::scene::{encode_gray_png, encode_rgb_png};

const SIZE: u32 = 96;
const SAMPLES: usize = 128;

fn density(p: &Vector3<f64>) -> (f64, [f64; 3]) {
    let ball = (p - Vector3::new(0.0, 0.0, 0.2)).norm();
    if ball < 0.45 {
        return (40.0 * (0.45 - ball) / 0.45 + 5.0, [0.9, 0.2, 0.15]);
    }
    if p.z < -0.3 && p.z > -0.5 {
        return (30.0, [0.15, 0.3, 0.85]);
    }
    (0.0, [0.0; 3])
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "composite-out".into()));
    std::fs::create_dir_all(&out)?;
    let pose = Pose::look_at(Vector3::new(0.0, -0.4, 1.8), Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0));
    let camera = Camera::from_fov(SIZE, SIZE, 50.0, pose);
    let pixels: Vec<(f64, f64)> = (0..SIZE * SIZE)
        .map(|i| ((i % SIZE) as f64 + 0.5, (i / SIZE) as f64 + 0.5))
        .collect();
    let rays = generate_rays(&camera, &pixels, 0.5, 3.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut rgb = Vec::with_capacity(rays.len());
    let mut depth = Vec::with_capacity(rays.len());
    let mut max_opacity: f64 = 0.0;
    for ray in &rays {
        let s = sample_along_ray(ray, SAMPLES, false, &mut rng);
        let mut sigma = Vec::with_capacity(SAMPLES);
        // Channels: color then distance, so one pass yields both images.
        let mut values = Vec::with_capacity(SAMPLES * 4);
        for (p, &t) in s.points.iter().zip(&s.t) {
            let (d, c) = density(p);
            sigma.push(d);
            values.extend_from_slice(&[c[0], c[1], c[2], t]);
        }
        let c = composite(&sigma, &values, &s.deltas, 4);
        max_opacity = max_opacity.max(c.opacity());
        rgb.push([c.value[0] as f32, c.value[1] as f32, c.value[2] as f32]);
        depth.push(c.value[3]);
    }
    let far = depth.iter().cloned().fold(0.0, f64::max).max(1e-9);
    let gray: Vec<u8> = depth.iter().map(|d| (255.0 * d / far) as u8).collect();
    std::fs::write(out.join("color.png"), encode_rgb_png(SIZE, SIZE, &rgb))?;
    std::fs::write(out.join("depth.png"), encode_gray_png(SIZE, SIZE, &gray))?;
    println!("wrote {} (max opacity {max_opacity:.4})", out.display());
    Ok(())
}
