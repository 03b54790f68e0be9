//! Acceptance gate: one pass/fail line per criterion, checked against oracles written
//! independently of the library code. Exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use erasure_core::denoiser::{
    framewise_cross_attention, noise_latent, sample, velocity_target, ConditionSequence,
    CrossAttention, DiTConfig, LatentTensor, Remover,
};
use erasure_core::evalbench::{psnr, psnr_region, ssim};
use erasure_core::kgp::{keyframe_stride, plan, remove_long};
use erasure_core::maskops::{diff_mask, side_effect_mask, TokenIndexSets, DEFAULT_DELTA};
use erasure_core::nn::{Dense, VarStore};
use erasure_core::relation::{
    oird_loss, relation_matrix, FeatureSource, FrozenPatchEncoder, TokenFeatures,
};
use erasure_core::synthdata::{generate_pairs, GeneratedPair, SpecDistribution};
use erasure_core::trainer::{GradCheckConfig, TrainConfig, TrainSample, Trainer, ToyProblem};
use erasure_core::{MaskTensor, VideoTensor};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn host(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

fn rand_video(rng: &mut ChaCha8Rng, f: usize, h: usize, w: usize) -> VideoTensor {
    VideoTensor::from_fn(f, h, w, |_, _, _, _| rng.random_range(0.0..=1.0f32)).unwrap()
}

// ---------------------------------------------------------------- 1. mask algebra

fn mask_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut pixels = 0usize;
    for trial in 0..10_000 {
        let (f, h, w) = (rng.random_range(1..=3), rng.random_range(1..=8), rng.random_range(1..=8));
        let v_ori = rand_video(&mut rng, f, h, w);
        // Ground truth equals the input on a random subset of pixels, so both sides of the
        // threshold are exercised.
        let keep = rng.random_range(0.0..1.0f64);
        let noise = rng.random_range(0.01..0.4f32);
        let v_gt = VideoTensor::from_fn(f, h, w, |c, t, y, x| {
            let base = v_ori.data()[(c, t, y, x)];
            if rng.random_bool(keep) {
                base
            } else {
                (base + rng.random_range(-noise..=noise)).clamp(0.0, 1.0)
            }
        })
        .unwrap();
        let p_obj = rng.random_range(0.0..1.0f64);
        let m_obj = MaskTensor::from_fn(f, h, w, |_, _, _| rng.random_bool(p_obj));
        let delta = if trial % 2 == 0 { DEFAULT_DELTA } else { rng.random_range(0.01..0.3f32) };

        let m_diff = diff_mask(&v_ori, &v_gt, delta).map_err(|e| e.to_string())?;
        let m_se = side_effect_mask(&m_diff, &m_obj).map_err(|e| e.to_string())?;
        for t in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let mut sq = 0.0f64;
                    for c in 0..3 {
                        let d = f64::from(v_ori.data()[(c, t, y, x)]) - f64::from(v_gt.data()[(c, t, y, x)]);
                        sq += d * d;
                    }
                    let expect = sq.sqrt() > f64::from(delta);
                    check(m_diff.get(t, y, x) == expect, || {
                        format!("trial {trial}: diff mask wrong at ({t},{y},{x})")
                    })?;
                    check(!(m_se.get(t, y, x) && m_obj.get(t, y, x)), || {
                        format!("trial {trial}: side-effect overlaps object at ({t},{y},{x})")
                    })?;
                    check(!m_se.get(t, y, x) || m_diff.get(t, y, x), || {
                        format!("trial {trial}: side-effect outside difference at ({t},{y},{x})")
                    })?;
                    pixels += 1;
                }
            }
        }
    }
    Ok(format!("10000 triples, {pixels} pixels, exact"))
}

// ---------------------------------------------------------------- 2. relation distillation

fn features(rng: &mut ChaCha8Rng, f: usize, grid: (usize, usize), d: usize) -> (Vec<f64>, TokenFeatures) {
    let n = grid.0 * grid.1;
    let data: Vec<f64> = (0..f * n * d)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            // keep every token away from zero norm
            if v.abs() < 0.05 { 0.5 } else { v }
        })
        .collect();
    let t = Tensor::from_vec(data.clone(), (f, n, d), &Device::Cpu).unwrap();
    (data, TokenFeatures::new(t, grid, FeatureSource::StudentHidden).unwrap())
}

fn cosine(data: &[f64], n: usize, d: usize, f: usize, i: usize, j: usize) -> f64 {
    let a = &data[(f * n + i) * d..(f * n + i + 1) * d];
    let b = &data[(f * n + j) * d..(f * n + j + 1) * d];
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn oird_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let f = rng.random_range(1..=4);
        let grid = (rng.random_range(1..=5), rng.random_range(1..=5));
        let n = grid.0 * grid.1;
        let d = rng.random_range(1..=6);
        let (ds, fs) = features(&mut rng, f, grid, d);
        let (dt, ft) = features(&mut rng, f, grid, d);
        let mut sets = TokenIndexSets { object: vec![], side_effect: vec![] };
        for _ in 0..f {
            // each token: object, side effect or neither
            let mut obj = vec![];
            let mut se = vec![];
            for i in 0..n {
                match rng.random_range(0..3) {
                    0 => obj.push(i),
                    1 => se.push(i),
                    _ => {}
                }
            }
            sets.object.push(obj);
            sets.side_effect.push(se);
        }
        let loss = oird_loss(&relation_matrix(&fs).unwrap(), &relation_matrix(&ft).unwrap(), &sets)
            .map_err(|e| e.to_string())?;
        let got = host(&loss.value)[0];

        let mut frame_sum = 0.0;
        let mut active = 0;
        for fr in 0..f {
            let (o, s) = (&sets.object[fr], &sets.side_effect[fr]);
            if o.is_empty() || s.is_empty() {
                continue;
            }
            let mut acc = 0.0;
            for &i in o {
                for &j in s {
                    acc += (cosine(&ds, n, d, fr, i, j) - cosine(&dt, n, d, fr, i, j)).abs();
                }
            }
            frame_sum += acc / (o.len() * s.len()) as f64;
            active += 1;
        }
        let expect = if active == 0 { 0.0 } else { frame_sum / active as f64 };
        check(loss.active_frames == active, || format!("trial {trial}: active frame count"))?;
        worst = worst.max((got - expect).abs());
        check((got - expect).abs() <= 1e-6, || {
            format!("trial {trial}: {got} vs oracle {expect}")
        })?;
    }

    // Hand example: cos 0 against cos 1 over one object/side-effect pair.
    let s = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 1.0], (1, 2, 2), &Device::Cpu).unwrap();
    let t = Tensor::from_vec(vec![1.0f64, 0.0, 1.0, 0.0], (1, 2, 2), &Device::Cpu).unwrap();
    let rs = relation_matrix(&TokenFeatures::new(s, (1, 2), FeatureSource::StudentHidden).unwrap()).unwrap();
    let rt = relation_matrix(&TokenFeatures::new(t, (1, 2), FeatureSource::TeacherAdapted).unwrap()).unwrap();
    let sets = TokenIndexSets { object: vec![vec![0]], side_effect: vec![vec![1]] };
    let hand = host(&oird_loss(&rs, &rt, &sets).unwrap().value)[0];
    check(hand == 1.0, || format!("hand example gave {hand}, expected 1"))?;
    Ok(format!("1000 instances, max |err| {worst:.2e}; hand example = 1"))
}

// ---------------------------------------------------------------- 3. relation matrix

fn relation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let tol = 1e-6;
    for trial in 0..1000 {
        let f = rng.random_range(1..=4);
        let grid = (rng.random_range(1..=5), rng.random_range(1..=5));
        let n = grid.0 * grid.1;
        let d = rng.random_range(1..=16);
        let (data, feat) = features(&mut rng, f, grid, d);
        let r = relation_matrix(&feat).unwrap().to_vec3().unwrap();
        let scales: Vec<f64> = (0..f * n).map(|_| rng.random_range(0.01..100.0)).collect();
        let scaled: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(k, v)| v * scales[k / d])
            .collect();
        let ts = Tensor::from_vec(scaled, (f, n, d), &Device::Cpu).unwrap();
        let rs = relation_matrix(&TokenFeatures::new(ts, grid, FeatureSource::StudentHidden).unwrap())
            .unwrap()
            .to_vec3()
            .unwrap();
        for fr in 0..f {
            for i in 0..n {
                check((r[fr][i][i] - 1.0).abs() <= tol, || format!("trial {trial}: diagonal {}", r[fr][i][i]))?;
                for j in 0..n {
                    let v = r[fr][i][j];
                    check((v - r[fr][j][i]).abs() <= tol, || format!("trial {trial}: asymmetric"))?;
                    check((-1.0 - tol..=1.0 + tol).contains(&v), || format!("trial {trial}: {v} out of range"))?;
                    check((v - rs[fr][i][j]).abs() <= tol, || format!("trial {trial}: not scale invariant"))?;
                }
            }
        }
    }
    Ok("1000 feature sets: symmetric, unit diagonal, bounded, scale invariant".into())
}

// ---------------------------------------------------------------- 4. framewise cross-attention

struct HostDense {
    w: Vec<f64>,
    b: Vec<f64>,
    n_in: usize,
    n_out: usize,
}

impl HostDense {
    fn from(d: &Dense) -> Self {
        let (n_in, n_out) = (d.in_dim(), d.out_dim());
        Self {
            w: host(&d.weight),
            b: d.bias.as_ref().map(host).unwrap_or_else(|| vec![0.0; n_out]),
            n_in,
            n_out,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| self.b[o] + (0..self.n_in).map(|i| x[i] * self.w[i * self.n_out + o]).sum::<f64>())
            .collect()
    }
}

/// Standard multi-head attention of `queries` over `context`, one frame at a time.
fn attend(q: &HostDense, k: &HostDense, v: &HostDense, o: &HostDense, heads: usize, queries: &[Vec<f64>], context: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q.n_out;
    let dh = d / heads;
    let ks: Vec<Vec<f64>> = context.iter().map(|c| k.apply(c)).collect();
    let vs: Vec<Vec<f64>> = context.iter().map(|c| v.apply(c)).collect();
    queries
        .iter()
        .map(|x| {
            let qx = q.apply(x);
            let mut merged = vec![0.0; d];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|kk| qx[r.clone()].iter().zip(&kk[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (wgt, vv) in e.iter().zip(&vs) {
                    for c in r.clone() {
                        merged[c] += wgt / z * vv[c];
                    }
                }
            }
            o.apply(&merged)
        })
        .collect()
}

fn fcca_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let dev = Device::Cpu;
    let (mut worst, mut worst_perm) = (0.0f64, 0.0f64);
    for trial in 0..100u64 {
        let b = rng.random_range(1..=3);
        let f = rng.random_range(1..=8);
        let n = rng.random_range(1..=32);
        let heads = rng.random_range(1..=2);
        let d = heads * rng.random_range(2..=4);
        let dc = rng.random_range(2..=6);
        let (tp, tv) = (rng.random_range(1..=3), rng.random_range(1..=6));
        let mut vs = VarStore::new(DType::F32, &dev, trial);
        let attn = CrossAttention::new(&mut vs, "x", d, dc, heads).unwrap();
        let mut draw = |len: usize| -> Vec<f32> { (0..len).map(|_| rng.random_range(-1.0..1.0f32)).collect() };
        let lat = draw(b * f * n * d);
        let prompt = draw(tp * dc);
        let bg = draw(b * f * tv * dc);
        let lat_t = Tensor::from_vec(lat.clone(), (b, f, n, d), &dev).unwrap();
        let cond = ConditionSequence::new(
            Tensor::from_vec(prompt.clone(), (tp, dc), &dev).unwrap(),
            Tensor::from_vec(bg.clone(), (b, f, tv, dc), &dev).unwrap(),
        )
        .unwrap();
        let out = host(&framewise_cross_attention(&lat_t, &cond, &attn).map_err(|e| e.to_string())?);

        let (q, k, v, o) = (HostDense::from(&attn.q), HostDense::from(&attn.k), HostDense::from(&attn.v), HostDense::from(&attn.out));
        let row = |src: &[f32], start: usize, len: usize| -> Vec<f64> { src[start..start + len].iter().map(|&x| f64::from(x)).collect() };
        for bi in 0..b {
            for fi in 0..f {
                let queries: Vec<Vec<f64>> = (0..n).map(|i| row(&lat, ((bi * f + fi) * n + i) * d, d)).collect();
                let mut context: Vec<Vec<f64>> = (0..tp).map(|i| row(&prompt, i * dc, dc)).collect();
                context.extend((0..tv).map(|i| row(&bg, ((bi * f + fi) * tv + i) * dc, dc)));
                let expect = attend(&q, &k, &v, &o, heads, &queries, &context);
                for (i, e) in expect.iter().enumerate() {
                    for c in 0..d {
                        let got = out[((bi * f + fi) * n + i) * d + c];
                        worst = worst.max((got - e[c]).abs());
                    }
                }
            }
        }
        check(worst <= 1e-5, || format!("trial {trial}: max |err| {worst:.3e}"))?;

        // Permuting frames of latents and background permutes the output the same way.
        let mut perm: Vec<usize> = (0..f).collect();
        for i in (1..f).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let idx = Tensor::from_vec(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), f, &dev).unwrap();
        let lat_p = lat_t.index_select(&idx, 1).unwrap();
        let cond_p = ConditionSequence::new(cond.prompt_tokens.clone(), cond.background_tokens.index_select(&idx, 1).unwrap()).unwrap();
        let out_p = framewise_cross_attention(&lat_p, &cond_p, &attn).unwrap();
        let expect_p = framewise_cross_attention(&lat_t, &cond, &attn).unwrap().index_select(&idx, 1).unwrap();
        let diff = host(&(out_p - expect_p).unwrap().abs().unwrap()).into_iter().fold(0.0, f64::max);
        worst_perm = worst_perm.max(diff);
        check(diff <= 1e-6, || format!("trial {trial}: permutation error {diff:.3e}"))?;
    }
    Ok(format!("100 instances, max |err| {worst:.2e} vs per-frame loop, permutation {worst_perm:.1e}"))
}

// ---------------------------------------------------------------- 5. gradient check

fn gradient_check() -> Outcome {
    let toy = ToyProblem::new(11).map_err(|e| e.to_string())?;
    let params = toy.vs.num_params();
    check(params <= 50_000, || format!("{params} parameters"))?;
    let cfg = GradCheckConfig { probes: 50, tolerance: 1e-4, seed: 5, ..GradCheckConfig::default() };
    let report = toy.check(0.1, &cfg).map_err(|e| e.to_string())?;
    Ok(format!(
        "{} probes on {params} params, worst relative error {:.2e}",
        report.probes.len(),
        report.max_rel_error
    ))
}

// ---------------------------------------------------------------- 6. keyframe-guided propagation

/// Returns the input unchanged, so a correct merge must reproduce the clip exactly.
struct Identity;

impl Remover for Identity {
    fn remove(&self, v: &VideoTensor, _: &MaskTensor, _: u64) -> erasure_core::Result<VideoTensor> {
        Ok(v.clone())
    }
}

fn kgp_schedule() -> Outcome {
    let w = 81;
    for frames in 1..=1000usize {
        let k = frames.div_ceil(w);
        check(keyframe_stride(frames, w) == k, || format!("F={frames}: stride"))?;
        let (schedule, wp) = plan(frames, w).map_err(|e| e.to_string())?;
        check(schedule.stride == k, || format!("F={frames}: schedule stride"))?;
        let expect_keys: Vec<usize> = (0..frames).step_by(k).collect();
        check(schedule.keyframes == expect_keys, || format!("F={frames}: keyframes"))?;

        let mut hits = vec![0u32; frames];
        for seg in wp.kept_segments() {
            for h in &mut hits[seg.start..seg.end] {
                *h += 1;
            }
        }
        check(hits.iter().all(|&h| h == 1), || format!("F={frames}: coverage {hits:?}"))?;
        check(wp.windows.iter().all(|win| win.len() <= w && !win.is_empty()), || format!("F={frames}: window length"))?;
        check(wp.windows.first().map(|x| x.start) == Some(0), || format!("F={frames}: first window"))?;
        check(wp.windows.last().map(|x| x.end) == Some(frames), || format!("F={frames}: last window"))?;
        if k > 1 {
            for (i, pair) in wp.windows.windows(2).enumerate() {
                let (a, b) = (pair[0], pair[1]);
                let last_key_a = (a.start..a.end).filter(|f| f % k == 0).max().unwrap();
                check(b.start % k == 0, || format!("F={frames}: window {} starts off a keyframe", i + 1))?;
                check(b.start == last_key_a, || format!("F={frames}: window {} does not start at the previous last keyframe", i + 1))?;
                check(wp.overlaps[i].shared_keyframe == Some(b.start), || format!("F={frames}: overlap directive {i}"))?;
            }
        }

        let video = VideoTensor::from_fn(frames, 1, 2, |c, t, _, x| ((t * 7 + c * 3 + x) % 256) as f32 / 255.0).unwrap();
        let mask = MaskTensor::from_fn(frames, 1, 2, |t, _, x| (t + x) % 3 == 0);
        let merged = remove_long(&Identity, &video, &mask, w, 0).map_err(|e| e.to_string())?;
        check(merged == video, || format!("F={frames}: merged output is not the identity"))?;
    }
    let (s290, p290) = plan(290, w).unwrap();
    check(s290.stride == 4, || format!("F=290 gave k={}", s290.stride))?;
    Ok(format!("F in [1, 1000], W = {w}; F=290 -> k=4 with {} windows", p290.windows.len()))
}

// ---------------------------------------------------------------- 7. flow-matching algebra

fn flow_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let dev = Device::Cpu;
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = rng.random_range(1..=64);
        let z0v: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let epsv: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lat = |v: &Vec<f64>| LatentTensor::new(Tensor::from_vec(v.clone(), (3, 1, 1, n), &dev).unwrap()).unwrap();
        let (z0, eps) = (lat(&z0v), lat(&epsv));
        check(host(noise_latent(&z0, &eps, 0.0).unwrap().data()) == z0v, || format!("trial {trial}: t=0"))?;
        check(host(noise_latent(&z0, &eps, 1.0).unwrap().data()) == epsv, || format!("trial {trial}: t=1"))?;
        let t: f64 = rng.random_range(0.0..=1.0);
        let zt = host(noise_latent(&z0, &eps, t).unwrap().data());
        let v = host(velocity_target(&z0, &eps).unwrap().data());
        for i in 0..3 * n {
            let rec = zt[i] - t * v[i];
            // A few roundings of operands bounded by 3 in magnitude.
            let bound = 8.0 * f64::EPSILON * 4.0;
            let err = (rec - z0v[i]).abs();
            worst = worst.max(err);
            check(err <= bound, || format!("trial {trial}: reconstruction error {err:.3e}"))?;
        }
    }
    Ok(format!("200 random latents, endpoints exact, reconstruction error <= {worst:.1e}"))
}

// ---------------------------------------------------------------- 8 / 9. training smoke runs

const SMOKE_STEPS: usize = 1000;
const SMOKE_SAMPLE_STEPS: usize = 20;

struct SmokeData {
    train: Vec<TrainSample>,
    test: Vec<GeneratedPair>,
}

struct SmokeScore {
    diff_base: f64,
    diff_model: f64,
    se_base: f64,
    se_model: f64,
    seconds: f64,
}

fn smoke_data() -> SmokeData {
    let dist = SpecDistribution::shadows(16, (64, 64));
    let teacher = FrozenPatchEncoder::new(8, 64, 0x7eac_4e55).unwrap();
    let train = generate_pairs(200, &dist, 1)
        .unwrap()
        .into_iter()
        .map(|p| TrainSample::from_encoder(p.v_ori, p.v_gt, p.m_obj, &teacher).unwrap())
        .collect();
    // A different master seed gives held-out scenes.
    let test = generate_pairs(20, &dist, 2).unwrap();
    SmokeData { train, test }
}

fn smoke_run(data: &SmokeData, lambda: f64, seed: u64) -> SmokeScore {
    let start = Instant::now();
    let dit = DiTConfig::default();
    let cfg = TrainConfig { steps: SMOKE_STEPS, lambda, seed, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&dit, &cfg, data.train[0].teacher.dim(), DType::F32).unwrap();
    for _ in 0..SMOKE_STEPS {
        trainer.train_step(&data.train).unwrap();
    }
    let n = data.test.len() as f64;
    let mut s = SmokeScore { diff_base: 0.0, diff_model: 0.0, se_base: 0.0, se_model: 0.0, seconds: 0.0 };
    for (i, p) in data.test.iter().enumerate() {
        let out = sample(&trainer.model, &p.v_ori, &p.m_obj, SMOKE_SAMPLE_STEPS, 1000 + i as u64).unwrap();
        let m_diff = diff_mask(&p.v_ori, &p.v_gt, DEFAULT_DELTA).unwrap();
        let m_se = side_effect_mask(&m_diff, &p.m_obj).unwrap();
        s.diff_base += psnr_region(&p.v_ori, &p.v_gt, &m_diff).unwrap().unwrap() / n;
        s.diff_model += psnr_region(&out, &p.v_gt, &m_diff).unwrap().unwrap() / n;
        s.se_base += psnr_region(&p.v_ori, &p.v_gt, &m_se).unwrap().unwrap() / n;
        s.se_model += psnr_region(&out, &p.v_gt, &m_se).unwrap().unwrap() / n;
    }
    s.seconds = start.elapsed().as_secs_f64();
    println!(
        "    smoke run lambda={lambda} seed={seed}: diff-region {:.2} -> {:.2} dB, side-effect region {:.2} -> {:.2} dB ({:.0}s)",
        s.diff_base, s.diff_model, s.se_base, s.se_model, s.seconds
    );
    s
}

fn end_to_end(first: &SmokeScore) -> Outcome {
    let gain = first.diff_model - first.diff_base;
    let line = format!(
        "{SMOKE_STEPS} steps, diff-region PSNR {:.2} dB vs copy-input {:.2} dB (gain {gain:+.2} dB, {:.0}s)",
        first.diff_model, first.diff_base, first.seconds
    );
    if gain >= 3.0 { Ok(line) } else { Err(line) }
}

fn ablation(with: &[SmokeScore], without: &[SmokeScore]) -> Outcome {
    let mean = |s: &[SmokeScore]| s.iter().map(|x| x.se_model).sum::<f64>() / s.len() as f64;
    let (a, b) = (mean(with), mean(without));
    let line = format!(
        "mean side-effect PSNR over {} seeds: lambda=0.1 {a:.3} dB, lambda=0 {b:.3} dB (delta {:+.3} dB)",
        with.len(),
        a - b
    );
    if a >= b - 0.1 { Ok(line) } else { Err(line) }
}

// ---------------------------------------------------------------- 10. metrics

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let a = rand_video(&mut rng, 2, 16, 16);
    let p_id = psnr(&a, &a).unwrap();
    let s_id = ssim(&a, &a).unwrap();
    check(p_id == 99.0, || format!("identity PSNR {p_id}"))?;
    check(s_id == 1.0, || format!("identity SSIM {s_id}"))?;
    let zero = VideoTensor::zeros(2, 16, 16);
    let tenth = VideoTensor::from_fn(2, 16, 16, |_, _, _, _| 0.1).unwrap();
    let p_u = psnr(&zero, &tenth).unwrap();
    // 0.1 is not exact in single precision; the residual is ~1e-7 dB.
    check((p_u - 20.0).abs() < 1e-6, || format!("uniform 0.1 PSNR {p_u}"))?;
    Ok(format!("identity {p_id} dB / SSIM {s_id}; uniform 0.1 -> {p_u:.7} dB"))
}

// ---------------------------------------------------------------- driver

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]"),
        Err(detail) => println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1}s]"),
    }
    result.is_ok()
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; listing must not run anything.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut ok = Vec::new();
    ok.push(run(1, "mask algebra", mask_algebra));
    ok.push(run(2, "relation distillation oracle", oird_oracle));
    ok.push(run(3, "relation matrix properties", relation_properties));
    ok.push(run(4, "framewise cross-attention", fcca_equivalence));
    ok.push(run(5, "gradient check", gradient_check));
    ok.push(run(6, "keyframe scheduler", kgp_schedule));
    ok.push(run(7, "flow-matching algebra", flow_algebra));

    println!("    training 6 smoke models ({SMOKE_STEPS} steps each)");
    let data = smoke_data();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..3 {
        with.push(smoke_run(&data, 0.1, seed));
        without.push(smoke_run(&data, 0.0, seed));
    }
    ok.push(run(8, "end-to-end smoke", || end_to_end(&with[0])));
    ok.push(run(9, "relation-loss ablation", || ablation(&with, &without)));
    ok.push(run(10, "metrics", metrics));

    let passed = ok.iter().filter(|&&x| x).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
