//! The denoiser network: token embedding, person encoding, stacked
//! spatial/temporal attention blocks and the regression head.

mod checkpoint;
mod config;
mod denoiser;
pub(crate) mod ops;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_SCHEMA_VERSION};
pub use config::{AttentionScope, ModelConfig};
pub use denoiser::{Denoiser, Mode, INPUT_CHANNELS};
pub use params::{layout, ParamSpec, ParamStore};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::RootNormStats;
    use candle_core::{DType, Device, IndexOp, Tensor};
    use ndarray::{Array, Array4, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(cfg: ModelConfig, seed: u64) -> Denoiser {
        Denoiser::new(cfg, RootNormStats::identity(), DType::F64, seed).unwrap()
    }

    fn small_cfg(joints: usize) -> ModelConfig {
        ModelConfig {
            channels: 8,
            depth: 2,
            heads: 2,
            max_persons: 8,
            joints,
            max_frames: 16,
            ..ModelConfig::tiny(joints)
        }
    }

    fn vec_of(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    fn param(m: &Denoiser, name: &str) -> Vec<f64> {
        vec_of(m.params().var(name).unwrap().as_tensor())
    }

    fn set_param(m: &Denoiser, name: &str, values: Vec<f64>) {
        let v = m.params().var(name).unwrap();
        v.set(&Tensor::from_vec(values, v.shape(), &Device::Cpu).unwrap()).unwrap();
    }

    fn random_z(rng: &mut impl Rng, t: usize, p: usize, j: usize) -> Array4<f64> {
        Array::from_shape_fn((t, p, j, 5), |_| rng.random_range(-1.0..1.0))
    }

    // ---- plain-loop reference sublayer ----

    fn ln_ref(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    }

    fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
        (0..cols)
            .map(|c| x.iter().enumerate().map(|(r, v)| v * w[r * cols + c]).sum())
            .collect()
    }

    fn gelu_ref(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    /// Reference for one pre-norm sublayer over `tokens` (N rows of C).
    fn sublayer_ref(m: &Denoiser, prefix: &str, tokens: &[Vec<f64>], pos: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
        let cfg = m.config();
        let (c, heads) = (cfg.channels, cfg.heads);
        let d = c / heads;
        let h_dim = cfg.ffn_hidden();
        let g = |n: &str| param(m, &format!("{prefix}.{n}"));
        let (g1, b1, g2, b2) = (g("norm1.weight"), g("norm1.bias"), g("norm2.weight"), g("norm2.bias"));
        let (wq, wk, wv, wo, bo) = (g("q.weight"), g("k.weight"), g("v.weight"), g("out.weight"), g("out.bias"));
        let (w1, bb1, w2, bb2) = (g("fc1.weight"), g("fc1.bias"), g("fc2.weight"), g("fc2.bias"));
        let n = tokens.len();
        let h: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut y = ln_ref(x, &g1, &b1);
                if let Some(pos) = pos {
                    for k in 0..c {
                        y[k] += pos[i][k];
                    }
                }
                y
            })
            .collect();
        let q: Vec<Vec<f64>> = h.iter().map(|x| matvec(x, &wq, c)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|x| matvec(x, &wk, c)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|x| matvec(x, &wv, c)).collect();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut mixed = vec![0.0; c];
            for hd in 0..heads {
                let r = hd * d..(hd + 1) * d;
                let scores: Vec<f64> = (0..n)
                    .map(|jx| r.clone().map(|e| q[i][e] * k[jx][e]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for jx in 0..n {
                    for e in r.clone() {
                        mixed[e] += ex[jx] / z * v[jx][e];
                    }
                }
            }
            let proj = matvec(&mixed, &wo, c);
            let x1: Vec<f64> = (0..c).map(|e| tokens[i][e] + proj[e] + bo[e]).collect();
            let hh = ln_ref(&x1, &g2, &b2);
            let f1: Vec<f64> = matvec(&hh, &w1, h_dim).iter().zip(&bb1).map(|(a, b)| gelu_ref(a + b)).collect();
            let f2 = matvec(&f1, &w2, c);
            out.push((0..c).map(|e| x1[e] + f2[e] + bb2[e]).collect());
        }
        out
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
    }

    fn assert_close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) {
        for (ra, rb) in a.iter().zip(b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < tol, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn embed_examples() {
        let cfg = ModelConfig { channels: 4, heads: 2, ..small_cfg(3) };
        let m = model(cfg, 1);
        // zero input with zero bias
        let zeros = Tensor::zeros((2, 1, 3, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(vec_of(&m.embed_tokens(&zeros).unwrap()).iter().all(|v| *v == 0.0));
        // identical tokens map identically, and match a hand matrix-vector product
        let input = [0.5, -1.0, 2.0, 0.25, 3.0];
        let mut z = Array4::zeros((1, 2, 3, 5));
        for p in 0..2 {
            for j in 0..3 {
                for c in 0..5 {
                    z[[0, p, j, c]] = input[c];
                }
            }
        }
        set_param(&m, "embed.bias", vec![0.1, 0.2, 0.3, 0.4]);
        let w = param(&m, "embed.weight");
        let zt = ops::to_tensor(z.view().into_dyn(), DType::F64).unwrap();
        let out = m.embed_tokens(&zt).unwrap();
        let first = vec_of(&out.i((0, 0, 0)).unwrap());
        for c in 0..4 {
            let expected: f64 = (0..5).map(|r| input[r] * w[r * 4 + c]).sum::<f64>() + [0.1, 0.2, 0.3, 0.4][c];
            assert!((first[c] - expected).abs() < 1e-12);
        }
        assert_eq!(first, vec_of(&out.i((0, 1, 2)).unwrap()));
        // wrong channel count
        let bad = Tensor::zeros((1, 1, 3, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(m.embed_tokens(&bad).is_err());
    }

    #[test]
    fn person_encoding_examples() {
        let m = model(small_cfg(3), 2);
        let tokens = Tensor::randn(0f64, 1.0, (2, 3, 3, 8), &Device::Cpu).unwrap();
        // all-zero encodings leave tokens unchanged
        let mut mz = m.clone();
        mz.zero_person_encodings().unwrap();
        assert_eq!(vec_of(&mz.add_person_encoding(&tokens, &[0, 1, 2]).unwrap()), vec_of(&tokens));
        // single person: every token shifted by E[0]
        let one = tokens.narrow(1, 0, 1).unwrap();
        let e0 = param(&m, "person_encoding")[..8].to_vec();
        let shifted = m.add_person_encoding(&one, &[0]).unwrap();
        let diff = vec_of(&(shifted - &one).unwrap());
        for (i, v) in diff.iter().enumerate() {
            assert!((v - e0[i % 8]).abs() < 1e-12);
        }
        // permuting persons and slots together permutes the output
        let perm = [2usize, 0, 1];
        let base = m.add_person_encoding(&tokens, &[4, 1, 6]).unwrap();
        let idx = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let permuted_in = tokens.index_select(&idx, 1).unwrap();
        let slots: Vec<usize> = perm.iter().map(|&k| [4, 1, 6][k]).collect();
        let out = m.add_person_encoding(&permuted_in, &slots).unwrap();
        assert_eq!(vec_of(&out), vec_of(&base.index_select(&idx, 1).unwrap()));
        // invalid slots
        assert!(m.add_person_encoding(&tokens, &[0, 0, 1]).is_err());
        assert!(m.add_person_encoding(&tokens, &[0, 1, 8]).is_err());
    }

    #[test]
    fn spatial_single_token_is_feed_forward_pipeline() {
        let m = model(small_cfg(1), 3);
        let x = Tensor::randn(0f64, 1.0, (1, 8), &Device::Cpu).unwrap();
        let got = rows(&m.spatial_attention(0, &x).unwrap());
        let expected = sublayer_ref(&m, "blocks.0.spatial", &rows(&x), None);
        assert_close(&got, &expected, 1e-10);
    }

    #[test]
    fn spatial_matches_reference_and_ignores_duplication() {
        let m = model(small_cfg(3), 4);
        let x = Tensor::randn(0f64, 1.0, (6, 8), &Device::Cpu).unwrap();
        let got = rows(&m.spatial_attention(1, &x).unwrap());
        assert_close(&got, &sublayer_ref(&m, "blocks.1.spatial", &rows(&x), None), 1e-10);
        let doubled = Tensor::cat(&[&x, &x], 0).unwrap();
        let got2 = rows(&m.spatial_attention(1, &doubled).unwrap());
        assert_close(&got2[..6], &got, 1e-12);
        assert_close(&got2[6..], &got, 1e-12);
    }

    #[test]
    fn spatial_handles_any_group_size() {
        let m = model(small_cfg(15), 5);
        for p in [2usize, 8] {
            let x = Tensor::randn(0f64, 1.0, (p * 15, 8), &Device::Cpu).unwrap();
            let y = m.spatial_attention(0, &x).unwrap();
            assert_eq!(y.dims(), &[p * 15, 8]);
        }
    }

    #[test]
    fn temporal_examples() {
        let cfg = ModelConfig { channels: 2, heads: 1, ..small_cfg(1) };
        let m = model(cfg, 6);
        let pos = param(&m, "temporal_pos");
        let pos_rows: Vec<Vec<f64>> = pos.chunks(2).map(|c| c.to_vec()).collect();
        // T = 2, C = 2 against the reference
        let x = Tensor::new(&[[0.3f64, -1.2], [1.5, 0.7]], &Device::Cpu).unwrap();
        let got = rows(&m.temporal_attention(0, &x).unwrap());
        assert_close(&got, &sublayer_ref(&m, "blocks.0.temporal", &rows(&x), Some(&pos_rows[..2])), 1e-10);
        // T = 1
        let one = Tensor::new(&[[0.3f64, -1.2]], &Device::Cpu).unwrap();
        let got = rows(&m.temporal_attention(0, &one).unwrap());
        assert_close(&got, &sublayer_ref(&m, "blocks.0.temporal", &rows(&one), Some(&pos_rows[..1])), 1e-10);
        // too many frames
        let long = Tensor::zeros((17, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(m.temporal_attention(0, &long).is_err());
    }

    #[test]
    fn temporal_constant_input_stays_constant_without_position_embedding() {
        let m = model(small_cfg(1), 7);
        let v = m.params().var("temporal_pos").unwrap();
        v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        let row = Tensor::randn(0f64, 1.0, (1, 8), &Device::Cpu).unwrap();
        let x = row.broadcast_as((5, 8)).unwrap().contiguous().unwrap();
        let y = rows(&m.temporal_attention(1, &x).unwrap());
        for r in &y[1..] {
            for (a, b) in r.iter().zip(&y[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn denoise_shape_and_determinism() {
        let m = Denoiser::new(ModelConfig::tiny(19), RootNormStats::identity(), DType::F32, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_z(&mut rng, 4, 3, 19);
        let a = m.denoise(z.view(), 17, &[0, 1, 2]).unwrap();
        let b = m.denoise(z.view(), 17, &[0, 1, 2]).unwrap();
        assert_eq!(a.dim(), (4, 3, 19, 3));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn denoise_rejects_over_capacity_and_bad_channels() {
        let cfg = ModelConfig { max_persons: 2, ..small_cfg(3) };
        let m = model(cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random_z(&mut rng, 2, 3, 3);
        assert!(matches!(m.denoise(z.view(), 0, &[0, 1, 2]), Err(crate::Error::Capacity(_))));
        let z4 = Array4::<f64>::zeros((2, 1, 3, 4));
        assert!(m.denoise(z4.view(), 0, &[0]).is_err());
    }

    fn permute(a: &Array4<f64>, perm: &[usize]) -> Array4<f64> {
        a.select(Axis(1), perm)
    }

    #[test]
    fn equivariant_without_person_encoding() {
        let mut m = model(small_cfg(4), 10);
        m.zero_person_encodings().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_z(&mut rng, 3, 3, 4);
        let perm = [1usize, 2, 0];
        let out = m.denoise(z.view(), 5, &[0, 1, 2]).unwrap();
        let out_p = m.denoise(permute(&z, &perm).view(), 5, &[0, 1, 2]).unwrap();
        let expected = permute(&out, &perm);
        for (a, b) in out_p.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_travels_with_slot() {
        let m = model(small_cfg(4), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_z(&mut rng, 3, 3, 4);
        let slots = [3usize, 0, 5];
        let perm = [2usize, 0, 1];
        let out = m.denoise(z.view(), 5, &slots).unwrap();
        let slots_p: Vec<usize> = perm.iter().map(|&k| slots[k]).collect();
        let out_p = m.denoise(permute(&z, &perm).view(), 5, &slots_p).unwrap();
        let expected = permute(&out, &perm);
        for (a, b) in out_p.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        // with positional slots the encodings break the symmetry
        let out_q = m.denoise(permute(&z, &perm).view(), 5, &slots).unwrap();
        assert!(out_q.iter().zip(expected.iter()).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn parameter_count_is_independent_of_input_size() {
        let cfg = small_cfg(5);
        let m = model(cfg.clone(), 12);
        let n = m.num_parameters();
        let expected: usize = layout(&cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(n, expected);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (t, p) in [(1, 1), (16, 8), (7, 3)] {
            let z = random_z(&mut rng, t, p, 5);
            let slots: Vec<usize> = (0..p).collect();
            let y = m.denoise(z.view(), 1, &slots).unwrap();
            assert_eq!(y.dim(), (t, p, 5, 3));
            assert!(y.iter().all(|v| v.is_finite()));
            assert_eq!(m.num_parameters(), n);
        }
    }

    #[test]
    fn per_person_scope_isolates_people() {
        let mut cfg = small_cfg(4);
        cfg.attention_scope = AttentionScope::PerPerson;
        let m = model(cfg, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random_z(&mut rng, 3, 3, 4);
        let full = m.denoise(z.view(), 4, &[0, 1, 2]).unwrap();
        for p in 0..3 {
            let alone = m.denoise(z.select(Axis(1), &[p]).view(), 4, &[0]).unwrap();
            for (a, b) in alone.iter().zip(full.select(Axis(1), &[p]).iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
