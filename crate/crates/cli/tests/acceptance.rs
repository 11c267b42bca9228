//! Acceptance checks, one PASS/FAIL line each. Runs as its own binary so the
//! lines show up without `--nocapture`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use codesign_cli::sim::{simulate, SimConfig};
use codesign_core::attribution::{
    attribute_user, coalition_feature, shapley_exact, shapley_exact_ppnn, AttributionConfig, COALITIONS,
};
use codesign_core::consensus::{consensus, geometric_mean, upu, PreferenceTally};
use codesign_core::design_space::{AttributeId, DesignSpace, DIMENSION_COUNT, ONE_HOT_LEN};
use codesign_core::elicitation::{rasterize_mask, BrushRegion, Gender, InteractionKind, Polarity, UserProfile};
use codesign_core::palette::{Classification, NodeRef, LOSS_WEIGHTS};
use codesign_core::preference::{
    build_feature, entropy, HybridFeature, LogitModel, Ppnn, Strategy, FEATURE_DIM, HIDDEN_DIM, PARAM_COUNT,
};
use codesign_gateway::demo::run_demo;
use codesign_gateway::service::{CreateProject, InteractionRequest, VoteRequest};
use codesign_gateway::{Event, EventLog, Gateway, ProjectState, TrainCache, WriteOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------- consensus ----------

fn upu_exactness() -> Check {
    check!(upu(0, 0) == 0.5, "upu(0,0) = {}", upu(0, 0));
    check!((upu(3, 1) - 2.0 / 3.0).abs() <= 1e-15, "upu(3,1) = {}", upu(3, 1));
    check!((upu(0, 8) - 0.1).abs() <= 1e-15, "upu(0,8) = {}", upu(0, 8));
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1_000 {
        let (l, d) = (rng.gen_range(0..1_000_000u64), rng.gen_range(0..1_000_000u64));
        let (num, den) = ((l + 1) as f64, (l + d + 2) as f64);
        let q = upu(l, d);
        // q*den - num evaluated without rounding, so this is the exact error of q.
        let err = (q.mul_add(den, -num) / den).abs();
        worst = worst.max(err);
        check!(err <= 1e-12, "upu({l},{d}) off by {err:e}");
    }
    Ok(format!("worst abs error {worst:.1e}"))
}

fn random_tally(rng: &mut impl Rng, users: &[String]) -> PreferenceTally {
    let mut t = PreferenceTally::default();
    for u in users {
        for a in DesignSpace::canonical().all_attributes() {
            for _ in 0..rng.gen_range(0..4) {
                t.add(u, a, if rng.gen_bool(0.5) { Polarity::Like } else { Polarity::Dislike });
            }
        }
    }
    t
}

fn acs_exactness() -> Check {
    let space = DesignSpace::canonical();
    let attrs: Vec<AttributeId> = space.all_attributes().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut dominance_pairs = 0u64;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=8);
        let mut users: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let t = random_tally(&mut rng, &users);
        let base = consensus(&t, &users, 0);
        let table: Vec<Vec<f64>> = attrs
            .iter()
            .map(|a| users.iter().map(|u| { let c = t.get(u, *a); upu(c.likes, c.dislikes) }).collect())
            .collect();
        for (a, vals) in attrs.iter().zip(&table) {
            let direct = vals.iter().product::<f64>().powf(1.0 / n as f64);
            check!((base.acs_raw(*a) - direct).abs() <= 1e-12 * direct, "log-space {} vs direct {direct}", base.acs_raw(*a));
            check!((geometric_mean(vals) - direct).abs() <= 1e-12 * direct, "geometric_mean off");
        }
        users.shuffle(&mut rng);
        let shuffled = consensus(&t, &users, 0);
        for a in &attrs {
            check!(shuffled.acs_raw(*a) == base.acs_raw(*a), "permutation changed acs of {a}");
        }
        for (i, a) in table.iter().enumerate() {
            for (j, b) in table.iter().enumerate() {
                if i != j && a.iter().zip(b).all(|(x, y)| x >= y) {
                    dominance_pairs += 1;
                    check!(base.acs_raw(attrs[i]) >= base.acs_raw(attrs[j]), "dominance violated");
                }
            }
        }
    }
    Ok(format!("10000 tallies, {dominance_pairs} dominated pairs"))
}

// ---------- preference ----------

fn entropy_criterion() -> Check {
    check!(entropy(0.5) == 1.0, "h(0.5) = {}", entropy(0.5));
    let oracle = -(0.25f64 * 0.25f64.log2() + 0.75 * 0.75f64.log2());
    check!((entropy(0.25) - 0.811_278_124_5).abs() < 1e-9, "h(0.25) = {}", entropy(0.25));
    check!((entropy(0.25) - oracle).abs() < 1e-12, "h(0.25) vs oracle");
    for i in 0..=10_000 {
        let p = i as f64 / 10_000.0;
        check!((entropy(p) - entropy(1.0 - p)).abs() <= 1e-12, "asymmetric at p = {p}");
    }
    Ok("10001-point grid symmetric".into())
}

fn profile(user: &str) -> UserProfile {
    UserProfile { user_id: user.into(), gender: Gender::M, height_cm: 175.0, weight_kg: 70.0 }
}

fn vote_pending(gw: &Gateway, sid: &str, like: impl Fn(&str) -> bool) -> Result<(), String> {
    let view = gw.round(sid).map_err(|e| e.to_string())?;
    for id in view.pending_items {
        let polarity = if like(&id) { Polarity::Like } else { Polarity::Dislike };
        gw.vote(sid, VoteRequest { item_id: id, polarity, comment: None }, &WriteOptions::default()).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn round_shape() -> Check {
    let gw = Gateway::in_memory(0);
    let pid = gw.create_project(CreateProject { name: "shape".into(), seed: Some(4), ..Default::default() }).unwrap().project_id;
    gw.generate_library(&pid, 80, &WriteOptions::default()).map_err(|e| e.to_string())?;
    let sid = gw.open_session(&pid, profile("u"), &WriteOptions::default()).map_err(|e| e.to_string())?.session_id;
    let mut sizes = Vec::new();
    let mut seen = BTreeSet::new();
    while !gw.round(&sid).unwrap().finished {
        let round = gw.round(&sid).unwrap().round;
        check!(round.round_index == sizes.len(), "round index {}", round.round_index);
        sizes.push(round.item_ids.len());
        for id in &round.item_ids {
            check!(seen.insert(id.clone()), "{id} shown twice");
        }
        vote_pending(&gw, &sid, |id| id.ends_with(['3', '6', '9']))?;
        check!(sizes.len() <= 10, "session never ends");
    }
    check!(sizes == [10, 5, 5, 5, 5, 5], "round sizes {sizes:?}");
    let labels = gw.round(&sid).unwrap().labels;
    check!(labels == 35, "{labels} labels");
    Ok(format!("sizes {sizes:?}, {labels} labels"))
}

// ---------- attribution ----------

struct Linear {
    w: Vec<f64>,
}

impl LogitModel for Linear {
    fn logit(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, x)| w * x).sum()
    }
}

fn block(d: usize) -> std::ops::Range<usize> {
    let s = DesignSpace::canonical();
    s.offsets()[d]..s.offsets()[d] + s.attribute_count(d)
}

fn random_vec(rng: &mut impl Rng) -> Vec<f64> {
    (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_net(rng: &mut impl Rng) -> Ppnn {
    Ppnn::from_params((0..PARAM_COUNT).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap()
}

/// Independent 512-coalition sum with factorial weights.
fn brute_force<M: LogitModel>(m: &M, x: &[f64], z: &[f64]) -> [f64; DIMENSION_COUNT] {
    let fact = |k: u32| (1..=k as u64).product::<u64>() as f64;
    let mut phi = [0.0; DIMENSION_COUNT];
    for (d, phi_d) in phi.iter_mut().enumerate() {
        for s in 0..COALITIONS {
            if s >> d & 1 == 0 {
                let k = (s as u32).count_ones();
                let w = fact(k) * fact(8 - k) / fact(9);
                *phi_d += w * (m.logit(&coalition_feature(x, z, s | 1 << d)) - m.logit(&coalition_feature(x, z, s)));
            }
        }
    }
    phi
}

fn shapley() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let net = random_net(&mut rng);
        let (x, z) = (random_vec(&mut rng), random_vec(&mut rng));
        let phi = shapley_exact_ppnn(&net, &x, &z);
        // The empty coalition keeps the instance's visual block.
        let gap = net.logit(&x) - net.logit(&coalition_feature(&x, &z, 0));
        let err = (phi.iter().sum::<f64>() - gap).abs();
        worst = worst.max(err);
        check!(err < 1e-6, "efficiency off by {err:e}");
    }
    for _ in 0..50 {
        let m = Linear { w: random_vec(&mut rng) };
        let (x, z) = (random_vec(&mut rng), random_vec(&mut rng));
        let brute = brute_force(&m, &x, &z);
        let lib = shapley_exact(&m, &x, &z);
        for d in 0..DIMENSION_COUNT {
            let closed: f64 = block(d).map(|i| m.w[i] * (x[i] - z[i])).sum();
            check!((brute[d] - closed).abs() < 1e-9 && (lib[d] - closed).abs() < 1e-9, "linear dim {d}");
        }
    }
    // Dummy: a dimension the model ignores gets exactly zero.
    // Symmetry: two interchangeable dimensions get equal credit.
    let (a, b) = (block(1), block(3));
    for _ in 0..100 {
        let mut lin = Linear { w: random_vec(&mut rng) };
        for j in block(6) {
            lin.w[j] = 0.0;
        }
        let (mut x, mut z) = (random_vec(&mut rng), random_vec(&mut rng));
        check!(shapley_exact(&lin, &x, &z)[6] == 0.0, "dummy dimension got credit");
        let mut net = random_net(&mut rng);
        for (i, j) in a.clone().zip(b.clone()) {
            x[j] = x[i];
            z[j] = z[i];
            let wi = net.input_weights(i).to_vec();
            net.params_mut()[j * HIDDEN_DIM..(j + 1) * HIDDEN_DIM].copy_from_slice(&wi);
        }
        let phi = shapley_exact_ppnn(&net, &x, &z);
        check!((phi[1] - phi[3]).abs() < 1e-9, "symmetry {} vs {}", phi[1], phi[3]);
    }
    // Runtime of one user's attribution on one item, end to end.
    let items: Vec<HybridFeature> = (0..40)
        .map(|_| HybridFeature::from_values(random_vec(&mut rng)).unwrap())
        .collect();
    let cfg = AttributionConfig { baseline: HybridFeature::from_values(random_vec(&mut rng)).unwrap() };
    let nets: Vec<Ppnn> = (0..3).map(|s| Ppnn::init(s)).collect();
    let start = Instant::now();
    for x in &items {
        for (k, net) in nets.iter().enumerate() {
            std::hint::black_box(attribute_user(&format!("u{k}"), net, x, &cfg));
        }
    }
    let per = start.elapsed() / (items.len() * nets.len()) as u32;
    check!(per < Duration::from_millis(5), "{per:?} per user per item");
    Ok(format!("worst efficiency error {worst:.1e}, {per:?} per user per item"))
}

// ---------- encoding, masks ----------

fn feature_shape() -> Check {
    let gw = Gateway::in_memory(0);
    let pid = gw.create_project(CreateProject { name: "f".into(), seed: Some(6), ..Default::default() }).unwrap().project_id;
    let lib = gw.generate_library(&pid, 300, &WriteOptions::default()).map_err(|e| e.to_string())?;
    let space = DesignSpace::canonical();
    for item in &lib.items {
        let f = build_feature(item).map_err(|e| e.to_string())?;
        let x = f.as_slice();
        check!(x.len() == 101, "length {}", x.len());
        let prefix = &x[..ONE_HOT_LEN];
        check!(prefix.iter().all(|v| *v == 0.0 || *v == 1.0), "non-binary one-hot");
        check!(prefix.iter().filter(|v| **v == 1.0).count() == 9, "{} ones", prefix.iter().sum::<f64>());
        for d in 0..DIMENSION_COUNT {
            let ones: Vec<usize> = block(d).filter(|&i| prefix[i] == 1.0).collect();
            check!(ones == [space.flat_index(item.design_vector.attribute(d))], "dimension {d} block {ones:?}");
        }
        check!(x[ONE_HOT_LEN..].iter().all(|v| v.is_finite()), "non-finite visual entry");
    }
    Ok(format!("{} items", lib.items.len()))
}

const GOLDEN_MASKS: [(u32, u32, u32, u32, u32, u32, &str); 3] = [
    (0, 92, 184, 614, 768, 768, "dbb7c2c7e53a1ef712fa18b8a0d367c3baa582a3d543e4ec9a2946461e830aee"),
    (230, 0, 538, 123, 768, 768, "b919d15cbd2f959507c368845e644b540c6b7d5909fbd337d50f40e2d0013d91"),
    (3, 5, 17, 9, 21, 13, "39bd626fa32d66f3bec8618970a813027db006865ee2b9b2500b5eafebd64565"),
];

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn mask_bit_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for _ in 0..1_000 {
        let (w, h) = (rng.gen_range(1..400u32), rng.gen_range(1..400u32));
        let (xa, xb) = (rng.gen_range(0..w), rng.gen_range(0..w));
        let (ya, yb) = (rng.gen_range(0..h), rng.gen_range(0..h));
        let r = BrushRegion::new(xa.min(xb), ya.min(yb), xa.max(xb) + 1, ya.max(yb) + 1, w, h).map_err(|e| e.to_string())?;
        let m = rasterize_mask(&r);
        check!(m.popcount() == r.area(), "popcount {} != area {}", m.popcount(), r.area());
    }
    for (x0, y0, x1, y1, w, h, pinned) in GOLDEN_MASKS {
        let r = BrushRegion::new(x0, y0, x1, y1, w, h).unwrap();
        let a = rasterize_mask(&r).to_png().map_err(|e| e.to_string())?;
        let b = rasterize_mask(&r).to_png().map_err(|e| e.to_string())?;
        check!(a == b, "PNG bytes differ between runs");
        check!(sha256_hex(&a) == pinned, "golden PNG digest changed for {r:?}");
    }
    Ok("1000 regions, 3 golden PNGs".into())
}

// ---------- manifest ----------

fn manifest_gate() -> Check {
    let gw = Gateway::in_memory(0);
    let none = WriteOptions::default();
    let e = |e: codesign_gateway::GatewayError| e.to_string();
    let pid = gw.create_project(CreateProject { name: "m".into(), seed: Some(8), ..Default::default() }).unwrap().project_id;
    gw.generate_library(&pid, 20, &none).map_err(e)?;
    let sessions: Vec<_> = ["a", "b", "c"]
        .iter()
        .map(|u| gw.open_session(&pid, profile(u), &none).map(|v| v.session_id))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    let view = gw.round(&sessions[0]).map_err(e)?;
    let item = view.items[0].clone();
    let attr = item.design_vector.attribute(2);
    let region = codesign_gateway::demo::zone_region(2, item.image_width, item.image_height).map_err(e)?;
    gw.interact(
        &sessions[0],
        InteractionRequest {
            item_id: item.item_id.clone(),
            kind: InteractionKind::Brush,
            polarity: Polarity::Like,
            region: Some(region),
            confirmed_dimensions: [2].into(),
            comment: None,
        },
        &none,
    )
    .map_err(e)?;
    let vote = |sid: &str, p: Polarity| {
        gw.vote(sid, VoteRequest { item_id: item.item_id.clone(), polarity: p, comment: None }, &none).map(|r| r.record.record_id)
    };
    vote(&sessions[0], Polarity::Like).map_err(e)?;
    vote(&sessions[1], Polarity::Dislike).map_err(e)?;

    let node = |gw: &Gateway| gw.tree(&pid, attr).map(|t| t.tree.node(&item.item_id).cloned().unwrap());
    let n = node(&gw).map_err(e)?;
    check!(n.like_ratio == 0.5 && n.classification == Classification::Disliked, "tie classified {:?}", n.classification);
    let tie = gw.export_manifest(&pid, attr, &none);
    check!(
        matches!(&tie, Err(err) if err.status_and_code().1 == "EMPTY_MANIFEST"),
        "garment at ratio 0.5 was exported"
    );

    let decisive = vote(&sessions[2], Polarity::Like).map_err(e)?;
    check!(node(&gw).map_err(e)?.classification == Classification::Liked, "2 of 3 likes not Liked");
    let m = gw.export_manifest(&pid, attr, &none).map_err(e)?.manifest;
    check!(m.entries.iter().any(|x| x.item_id == item.item_id), "liked garment missing from manifest");
    check!(m.loss_weights.clip == 0.6 && m.loss_weights.local == 0.4, "loss weights {:?}", m.loss_weights);
    check!(LOSS_WEIGHTS.clip + LOSS_WEIGHTS.local == 1.0, "loss weights do not sum to 1");
    let s = &m.stage1_config;
    check!(
        s.lora_rank == 64 && s.learning_rate == 4e-4 && s.steps == 1500 && s.resolution == 768 && s.trigger == "real garment",
        "stage-1 config {s:?}"
    );

    gw.prune(&pid, attr, NodeRef::Record(decisive), true, &none).map_err(e)?;
    check!(node(&gw).map_err(e)?.classification == Classification::Disliked, "pruning the decisive vote did not flip");
    let after = gw.export_manifest(&pid, attr, &none);
    let still_there = matches!(&after, Ok(r) if r.manifest.entries.iter().any(|x| x.item_id == item.item_id));
    check!(!still_there, "pruned-out garment remained in the next manifest");
    Ok(format!("attribute {attr}"))
}

// ---------- replay ----------

const GOLDEN_HASH: &str = "8e7ddeca008abec3a003a6f648b62f8e2ebfadadfef30fb768c1ad5e1b6f9ec9";

fn replay_determinism() -> Check {
    let start = Instant::now();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../gateway/tests/data/golden_session.jsonl");
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let (events, torn) = EventLog::parse(&bytes).map_err(|e| e.to_string())?;
    check!(torn.is_none(), "golden log has a torn tail");
    let full = ProjectState::replay(&events, None).map_err(|e| e.to_string())?;
    check!(full.state_hash() == GOLDEN_HASH, "golden replay hash {}", full.state_hash());

    let gw = Gateway::in_memory(0);
    let pid = run_demo(&gw, 11).map_err(|e| e.to_string())?;
    let strip = |ev: &[Event]| ev.iter().map(|e| Event { ts: 0, ..e.clone() }.to_line()).collect::<String>();
    check!(strip(&gw.events(&pid).unwrap()) == strip(&events), "script no longer reproduces the golden log");

    let cache = TrainCache::default();
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for _ in 0..100 {
        let cut = rng.gen_range(0..=events.len());
        let mut s = ProjectState::replay(&events[..cut], Some(&cache)).map_err(|e| e.to_string())?;
        for ev in &events[cut..] {
            s.apply(ev, Some(&cache)).map_err(|e| e.to_string())?;
        }
        check!(s == full, "cut {cut} diverged");
    }
    let elapsed = start.elapsed();
    check!(elapsed < Duration::from_secs(120), "replay suite took {elapsed:?}");
    Ok(format!("{} events, 100 cuts, {elapsed:.2?}", events.len()))
}

// ---------- learning ----------

fn learning() -> Check {
    let start = Instant::now();
    let cfg = SimConfig::default();
    check!(cfg.seeds.len() == 20 && cfg.catalog == 200 && cfg.rounds == 6 && cfg.noise == 0.0, "unexpected defaults {cfg:?}");
    let report = simulate(&cfg).map_err(|e| format!("{e:#}"))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    report.write(dir.path()).map_err(|e| e.to_string())?;
    let paired = std::fs::read_to_string(dir.path().join("paired.csv")).map_err(|e| e.to_string())?;
    check!(paired.starts_with("seed,entropy_auc,random_auc,difference\n"), "paired CSV header");
    check!(paired.lines().count() == 21, "paired CSV has {} lines", paired.lines().count());
    let auc = report.mean_final_auc(Strategy::Entropy).unwrap();
    let random = report.mean_final_auc(Strategy::Random).unwrap();
    let elapsed = start.elapsed();
    check!(auc >= 0.6, "mean entropy AUC {auc:.4}");
    check!(elapsed < Duration::from_secs(600), "simulation took {elapsed:?}");
    Ok(format!("entropy AUC {auc:.4}, random {random:.4}, {elapsed:.1?}"))
}

// ---------- gradients ----------

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let space = DesignSpace::canonical();
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let net = Ppnn::init(1_000 + trial);
        let data: Vec<(HybridFeature, f64)> = (0..5)
            .map(|_| {
                let v = codesign_core::DesignVector::new(std::array::from_fn(|d| rng.gen_range(0..space.attribute_count(d)))).unwrap();
                let visual: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let f = HybridFeature::new(&codesign_core::encode_one_hot(&v), &visual).unwrap();
                (f, rng.gen_range(0..2) as f64)
            })
            .collect();
        let (_, analytic) = net.loss_gradient(&data);
        let mut probe = net.clone();
        let h = 1e-5;
        for (k, a) in analytic.iter().enumerate() {
            let orig = probe.params()[k];
            probe.params_mut()[k] = orig + h;
            let up = probe.loss(&data);
            probe.params_mut()[k] = orig - h;
            let down = probe.loss(&data);
            probe.params_mut()[k] = orig;
            let n = (up - down) / (2.0 * h);
            let scale = a.abs().max(n.abs());
            if scale < 1e-7 {
                check!((a - n).abs() < 1e-9, "trial {trial} param {k}: {a} vs {n}");
                continue;
            }
            let rel = (a - n).abs() / scale;
            worst = worst.max(rel);
            check!(rel < 1e-4, "trial {trial} param {k}: relative error {rel:e}");
        }
    }
    Ok(format!("worst relative error {worst:.1e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("UPU exactness", upu_exactness),
        ("ACS exactness", acs_exactness),
        ("Entropy", entropy_criterion),
        ("Round shape", round_shape),
        ("Shapley", shapley),
        ("Feature/encoding shape", feature_shape),
        ("Mask bit-exactness", mask_bit_exactness),
        ("Manifest gate", manifest_gate),
        ("Replay determinism", replay_determinism),
        ("Learning/selection", learning),
        ("Gradient check", gradient_check),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{took:.1?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
