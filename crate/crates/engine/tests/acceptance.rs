//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use kipa_core::cc3d::{connected_components, Connectivity, RoiBox};
use kipa_core::loss_check::{run_loss_check, LossCheckPlan};
use kipa_core::metrics::{avg_hausdorff, dsc, evaluate_case, hausdorff};
use kipa_core::pipeline::{
    generate_phantom_with, make_stub_predictor, run_case, BlobRegion, CaseResult, InjectedBlob, Intermediate,
    Phantom, PhantomOptions, PipelineSettings, StageId, StagePredictors, StubMode,
};
use kipa_core::postprocess::{ensemble_vein, Rule};
use kipa_core::preprocess::{
    compute_foreground_stats, expand_box, resample, resample_labels, Interpolation, DEFAULT_CROP_EXPANSION,
    TARGET_SPACING,
};
use kipa_core::volume::{Class, LabelVolume, ScalarVolume, VolumeHeader};
use kipa_engine::config::PipelineConfig;
use kipa_engine::nifti;
use kipa_engine::report::evaluate_dirs;
use kipa_engine::runner::{inference_grid, run_batch, truth_path};
use oracles::{brute_dsc, brute_hd_avd, brute_nearest, flood_fill_labels, random_mask, same_partition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- losses

fn loss_correctness() -> Check {
    let plan = LossCheckPlan::default();
    let tensors = plan.sizes.len() * plan.thresholds.len() * plan.trials;
    let report = run_loss_check(&plan).map_err(err)?;
    let max_grad = report.rows.iter().map(|r| r.max_rel_grad_err).fold(0.0, f64::max);
    let ce = report.rows.iter().filter_map(|r| r.ce_match_err).fold(0.0, f64::max);
    let ce_rows = report.rows.iter().filter(|r| r.ce_match_err.is_some()).count();
    ensure(tensors >= 100, || format!("only {tensors} random tensors"))?;
    ensure(ce_rows == plan.sizes.len(), || format!("{ce_rows} T=0 CE rows"))?;
    ensure(max_grad <= 1e-4, || format!("max relative gradient error {max_grad:.3e} > 1e-4"))?;
    ensure(ce <= 1e-9, || format!("HRA-CE at T=0 differs from CE by {ce:.3e}"))?;
    ensure(report.pass, || "harness reported a failing row".into())?;
    Ok(format!(
        "{tensors} tensors, {} rows, max rel grad err {max_grad:.2e}, |HRA-CE(T=0) - CE| {ce:.1e}",
        report.rows.len()
    ))
}

// ---------------------------------------------------------------- components

fn connected_components_criterion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xcc3d);
    let mut comps = 0usize;
    for i in 0..200 {
        let density = rng.random_range(0.05..0.65);
        let m = random_mask(&mut rng, [16; 3], density);
        for (six, conn) in [(true, Connectivity::Six), (false, Connectivity::TwentySix)] {
            let set = connected_components(&m, conn);
            let oracle = flood_fill_labels(&m, six);
            ensure(same_partition(set.label_map.data(), &oracle), || {
                format!("mask {i} ({conn:?}): partition differs from flood fill")
            })?;
            comps += set.len();
        }
    }
    Ok(format!("200 masks x 2 connectivities, {comps} components, all partitions identical"))
}

// ---------------------------------------------------------------- metrics

fn metrics_criterion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let close = |a: f64, b: f64| (a.is_infinite() && b.is_infinite() && a == b) || (a - b).abs() <= 1e-9;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let spacing = [0; 3].map(|_| rng.random_range(0.5..2.0));
        let h = VolumeHeader::new([12; 3], spacing).unwrap();
        let (da, db) = if i < 2 { (0.0, 0.3) } else { (rng.random_range(0.02..0.5), rng.random_range(0.02..0.5)) };
        let a = random_mask(&mut rng, [12; 3], da).map(|&v| v);
        let b = random_mask(&mut rng, [12; 3], db).map(|&v| v);
        let (mut a, mut b) = (a, b);
        *a.header_mut() = h.clone();
        *b.header_mut() = h;
        let d = dsc(&a, &b).map_err(err)?;
        let hd = hausdorff(&a, &b, spacing).map_err(err)?;
        let avd = avg_hausdorff(&a, &b, spacing).map_err(err)?;
        let (ohd, oavd) = brute_hd_avd(&a, &b, spacing);
        let od = brute_dsc(&a, &b);
        ensure(close(d, od) && close(hd, ohd) && close(avd, oavd), || {
            format!("pair {i}: (dsc, hd, avd) = ({d}, {hd}, {avd}), oracle ({od}, {ohd}, {oavd})")
        })?;
        ensure(avd <= hd, || format!("pair {i}: avd {avd} > hd {hd}"))?;
        if hd.is_finite() {
            worst = worst.max((hd - ohd).abs()).max((avd - oavd).abs());
        }
    }
    Ok(format!("100 pairs match all-pairs oracles (max |diff| {worst:.1e}), avd <= hd everywhere"))
}

// ---------------------------------------------------------------- resampling

fn linear_volume(shape: [usize; 3], spacing: [f64; 3], c: f64, g: [f64; 3]) -> ScalarVolume {
    let h = VolumeHeader::new(shape, spacing).unwrap();
    let mut data = Vec::new();
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let p = [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]];
                data.push((c + g[0] * p[0] + g[1] * p[1] + g[2] * p[2]) as f32);
            }
        }
    }
    ScalarVolume::scalar(h, data).unwrap()
}

fn resampling_criterion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e5);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let shape = [0; 3].map(|_| rng.random_range(4..14));
        let s_in = [0; 3].map(|_| rng.random_range(0.4..2.5));
        let s_out = [0; 3].map(|_| rng.random_range(0.4..2.5));
        let c = rng.random_range(-50.0..50.0);
        let g = [0; 3].map(|_| rng.random_range(-2.0..2.0));

        let v = linear_volume(shape, s_in, c, g);
        let r = resample(&v, s_out, Interpolation::Linear).map_err(err)?;
        let expect = linear_volume(r.shape(), s_out, c, g);
        for (a, b) in r.data().iter().zip(expect.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
        ensure(worst <= 1e-4, || format!("volume {i}: linear field error {worst:.2e}"))?;

        ensure(resample(&v, s_in, Interpolation::Linear).map_err(err)? == v, || {
            format!("volume {i}: identity-spacing resample changed voxels")
        })?;

        let n = shape.iter().product();
        let labels =
            LabelVolume::labels(VolumeHeader::new(shape, s_in).unwrap(), (0..n).map(|_| rng.random_range(0..5)).collect())
                .unwrap();
        let rl = resample_labels(&labels, s_out).map_err(err)?;
        ensure(rl.data() == &brute_nearest(&labels, rl.shape(), s_out)[..], || {
            format!("volume {i}: label resampling differs from nearest-neighbor oracle")
        })?;
        ensure(resample_labels(&labels, s_in).map_err(err)? == labels, || {
            format!("volume {i}: identity label resample changed voxels")
        })?;
    }
    Ok(format!("50 volumes: linear max err {worst:.1e}, identity exact, labels equal nearest oracle"))
}

// ---------------------------------------------------------------- engine helpers

const CASE_SIZE: [usize; 3] = [64, 64, 64];

fn write_phantoms(dir: &Path, seeds: &[u64], opts: &PhantomOptions) -> Vec<(String, Phantom)> {
    seeds
        .iter()
        .map(|&s| {
            let id = format!("case_{s:03}");
            let ph = generate_phantom_with(s, CASE_SIZE, opts).unwrap();
            nifti::write_scalar(&dir.join(format!("{id}_image.nii.gz")), &ph.image).unwrap();
            nifti::write_labels(&truth_path(dir, &id), &ph.labels).unwrap();
            (id, ph)
        })
        .collect()
}

fn oracle_config(truth_dir: &Path, phantoms: &[(String, Phantom)], seed: u64, stub: &str) -> PipelineConfig {
    let pairs: Vec<_> = phantoms.iter().map(|(_, p)| (&p.image, &p.labels)).collect();
    let stats = compute_foreground_stats(&pairs).unwrap();
    let predictor = |stage: &str| {
        format!(
            "[stages.{stage}.predictor]\nkind = \"stub-oracle\"\nendpoint = {:?}\nstub = {stub}\n",
            truth_dir.display().to_string()
        )
    };
    let text = format!(
        "seed = {seed}\nworkers = 2\n[preprocess]\nstats = {{ mean = {:?}, std = {:?}, voxel_count = {} }}\n{}{}{}",
        stats.mean,
        stats.std,
        stats.voxel_count,
        predictor("coarse_i"),
        predictor("coarse_ii"),
        predictor("fine_tumor"),
    );
    PipelineConfig::from_toml_str(&text).unwrap()
}

fn case_list(dir: &Path, phantoms: &[(String, Phantom)]) -> Vec<(String, std::path::PathBuf)> {
    phantoms
        .iter()
        .map(|(id, _)| (id.clone(), dir.join(format!("{id}_image.nii.gz"))))
        .collect()
}

fn end_to_end_identity() -> Check {
    let data = tempfile::tempdir().map_err(err)?;
    let out = tempfile::tempdir().map_err(err)?;
    let phantoms = write_phantoms(data.path(), &[1, 2, 3, 4, 5], &PhantomOptions::default());
    let cfg = oracle_config(data.path(), &phantoms, 0, "{ mode = \"ideal\" }");
    let summary = run_batch(&cfg, &case_list(data.path(), &phantoms), out.path()).map_err(err)?;
    ensure(summary.failures.is_empty(), || format!("failures: {:?}", summary.failures))?;
    let report = evaluate_dirs(out.path(), data.path(), &cfg.io).map_err(err)?;
    ensure(report.cases.len() == 5 && report.errors.is_empty(), || {
        format!("{} cases evaluated, errors {:?}", report.cases.len(), report.errors)
    })?;
    for c in &report.cases {
        for s in &c.structures {
            ensure(s.dsc == 1.0 && s.hd == 0.0, || {
                format!("{} {}: DSC {} HD {}", c.case_id, s.structure.name(), s.dsc, s.hd)
            })?;
        }
    }
    Ok("5 phantoms through NIfTI IO and the runner: DSC 1.0, HD 0 for all four structures".into())
}

// ---------------------------------------------------------------- scenarios

/// Long phantom with the anatomy near one end, leaving room for distant artifacts.
const SCENARIO_SIZE: [usize; 3] = [64, 64, 160];
const SCENARIO_ANATOMY: [f64; 3] = [32.0, 32.0, 36.0];

fn scenario_phantom(seed: u64, cyst: bool) -> Phantom {
    let opts = PhantomOptions {
        cyst,
        anatomy_center: Some(SCENARIO_ANATOMY),
        ..Default::default()
    };
    generate_phantom_with(seed, SCENARIO_SIZE, &opts).unwrap()
}

fn class_centroid(labels: &LabelVolume, class: Class) -> [f64; 3] {
    let h = labels.header();
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for (i, &l) in labels.data().iter().enumerate() {
        if l == class.code() {
            let p = h.coords(i);
            for a in 0..3 {
                acc[a] += p[a] as f64;
            }
            n += 1.0;
        }
    }
    acc.map(|v| v / n)
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// True when every voxel within Chebyshev distance `margin` of `voxels` is background.
fn clear_of_anatomy(labels: &LabelVolume, voxels: &[[usize; 3]], margin: i64) -> bool {
    let s = labels.shape();
    voxels.iter().all(|p| {
        (-margin..=margin).all(|dz| {
            (-margin..=margin).all(|dy| {
                (-margin..=margin).all(|dx| {
                    let q = [p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz];
                    (0..3).any(|a| q[a] < 0 || q[a] >= s[a] as i64)
                        || *labels.get([q[0] as usize, q[1] as usize, q[2] as usize]) == 0
                })
            })
        })
    })
}

/// Thin artery FP far from the anatomy (beyond the 92-voxel rule).
fn far_artery_line(ph: &Phantom) -> BlobRegion {
    BlobRegion::Line { from: [20, 32, 150], to: [44, 32, 150] }.validated(ph, 3)
}

/// Tumor FP blob of `n` voxels far from the anatomy, 3 x 3 x (n / 9).
fn far_tumor_box(ph: &Phantom) -> BlobRegion {
    BlobRegion::Box { lower: [40, 10, 120], upper: [43, 13, 131] }.validated(ph, 3)
}

trait Validated {
    fn validated(self, ph: &Phantom, margin: i64) -> Self;
}

impl Validated for BlobRegion {
    fn validated(self, ph: &Phantom, margin: i64) -> Self {
        assert!(clear_of_anatomy(&ph.labels, &self.voxels(ph.labels.shape()), margin), "artifact overlaps anatomy");
        self
    }
}

/// Thin artery segment inside the 92-voxel radius but clear of all structures.
fn near_artery_line(ph: &Phantom) -> BlobRegion {
    let centroid = class_centroid(&ph.labels, Class::Artery);
    for (y, z) in [(4, 8), (4, 64), (60, 8), (60, 64), (8, 70), (56, 70), (4, 36), (60, 36)] {
        let line = BlobRegion::Line { from: [8, y, z], to: [24, y, z] };
        let vox = line.voxels(ph.labels.shape());
        let mid = [16.0, y as f64, z as f64];
        if clear_of_anatomy(&ph.labels, &vox, 3) && distance(mid, centroid) < 60.0 {
            return line;
        }
    }
    panic!("no free location for the near artery segment");
}

/// 99-voxel tumor blob inside the tumor crop box but disconnected from the tumor.
fn tumor_roi_blob(ph: &Phantom) -> BlobRegion {
    let shape = ph.labels.shape();
    let tumor = ph.labels.class_mask(Class::Tumor);
    let comps = connected_components(&tumor, Connectivity::TwentySix);
    let tight = comps.largest().expect("tumor present").bbox;
    let roi: RoiBox = expand_box(&tight, DEFAULT_CROP_EXPANSION, shape);
    let dims = [[3, 3, 11], [3, 11, 3], [11, 3, 3]];
    for d in dims {
        for corner in 0..8 {
            let lower: [usize; 3] = std::array::from_fn(|a| {
                if corner >> a & 1 == 1 {
                    roi.upper[a] - 1 - d[a]
                } else {
                    roi.lower[a] + 1
                }
            });
            let upper: [usize; 3] = std::array::from_fn(|a| lower[a] + d[a]);
            let region = BlobRegion::Box { lower, upper };
            let vox = region.voxels(shape);
            let near_tumor = vox.iter().any(|p| {
                (-2i64..=2).any(|dz| {
                    (-2i64..=2).any(|dy| {
                        (-2i64..=2).any(|dx| {
                            let q = [p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz];
                            (0..3).all(|a| q[a] >= 0 && q[a] < shape[a] as i64)
                                && *ph.labels.get([q[0] as usize, q[1] as usize, q[2] as usize]) == Class::Tumor.code()
                        })
                    })
                })
            });
            if vox.len() == 99 && !near_tumor {
                return region;
            }
        }
    }
    panic!("no room for the tumor blob inside the crop box");
}

fn inject(sigma: f64, blobs: Vec<(Class, BlobRegion)>) -> StubMode {
    StubMode::FpInject {
        sigma,
        blobs: blobs.into_iter().map(|(class, region)| InjectedBlob { class, region }).collect(),
    }
}

fn run_stubs(ph: &Phantom, image: &ScalarVolume, modes: [&StubMode; 3], seed: u64) -> CaseResult {
    let grid = inference_grid(image.header(), TARGET_SPACING);
    let preds: Vec<_> = StageId::ALL
        .iter()
        .zip(modes)
        .map(|(&s, m)| make_stub_predictor(m, &ph.labels, &grid, s, seed).unwrap())
        .collect();
    let stats = compute_foreground_stats(&[(image, &ph.labels)]).unwrap();
    let settings = PipelineSettings::new(stats);
    let p = StagePredictors {
        coarse_i: &preds[0],
        coarse_ii: &preds[1],
        fine_tumor: &preds[2],
    };
    run_case("scenario", image, &settings, p, &mut ()).unwrap()
}

fn set_hu(image: &ScalarVolume, voxels: &[[usize; 3]], hu: f32) -> ScalarVolume {
    let mut out = image.clone();
    for &p in voxels {
        out.set(p, hu);
    }
    out
}

/// Checks that the artifact voxels carry their true labels and all structures keep DSC >= 0.99.
fn check_scenario(
    name: &str,
    ph: &Phantom,
    res: &CaseResult,
    artifact: &[[usize; 3]],
    structure: Class,
    rule: Rule,
) -> Result<String, String> {
    let fired = res
        .audit
        .removals
        .iter()
        .filter(|r| r.structure == structure && r.removal.rule == rule)
        .count();
    ensure(fired >= 1, || format!("({name}) no {structure:?} removal by {rule:?}: {:?}", res.audit.removals))?;
    let leaked = artifact.iter().filter(|&&p| res.exported.get(p) != ph.labels.get(p)).count();
    ensure(leaked == 0, || format!("({name}) {leaked} artifact voxels survive"))?;
    let m = evaluate_case("s", &res.exported, &ph.labels).map_err(err)?;
    let worst = m.structures.iter().map(|s| s.dsc).fold(1.0, f64::min);
    ensure(worst >= 0.99, || format!("({name}) structure DSC fell to {worst:.4}"))?;
    Ok(format!("({name}) {rule:?} fired, min DSC {worst:.4}"))
}

fn rule_firing() -> Check {
    let mut lines = Vec::new();

    let ph = scenario_phantom(21, false);
    let line = far_artery_line(&ph);
    let centroid_dist = distance(class_centroid(&ph.labels, Class::Artery), [32.0, 32.0, 150.0]);
    ensure(centroid_dist > 92.0, || format!("far artery blob only {centroid_dist:.1} voxels away"))?;
    let m = inject(0.0, vec![(Class::Artery, line.clone())]);
    let res = run_stubs(&ph, &ph.image, [&m, &m, &StubMode::Ideal], 1);
    lines.push(check_scenario("a", &ph, &res, &line.voxels(SCENARIO_SIZE), Class::Artery, Rule::CenterDistance)?);

    let ph = scenario_phantom(22, false);
    let blob = tumor_roi_blob(&ph);
    let vox = blob.voxels(SCENARIO_SIZE);
    let image = set_hu(&ph.image, &vox, 60.0);
    let fine = inject(0.0, vec![(Class::Tumor, blob)]);
    let res = run_stubs(&ph, &image, [&StubMode::Ideal, &StubMode::Ideal, &fine], 2);
    ensure(res.audit.removals.iter().any(|r| r.removal.rule == Rule::MinSize && r.removal.size == 99), || {
        format!("(b) no 99-voxel size removal: {:?}", res.audit.removals)
    })?;
    lines.push(check_scenario("b", &ph, &res, &vox, Class::Tumor, Rule::MinSize)?);

    let ph = scenario_phantom(23, true);
    let (center, radius) = ph.info.cyst.expect("cyst requested");
    let cyst = BlobRegion::Sphere { center, radius };
    let vox = cyst.voxels(SCENARIO_SIZE);
    let mean_hu = vox.iter().map(|&p| *ph.image.get(p) as f64).sum::<f64>() / vox.len() as f64;
    ensure(mean_hu < 20.0, || format!("(c) cyst mean HU {mean_hu:.1}"))?;
    let m = inject(0.05, vec![(Class::Tumor, cyst)]);
    let res = run_stubs(&ph, &ph.image, [&m, &m, &m], 3);
    lines.push(check_scenario("c", &ph, &res, &vox, Class::Tumor, Rule::Cyst)?);

    let ph = scenario_phantom(24, false);
    let line = near_artery_line(&ph);
    let vox = line.voxels(SCENARIO_SIZE);
    let image = set_hu(&ph.image, &vox, 2500.0);
    let m = inject(0.0, vec![(Class::Artery, line)]);
    let res = run_stubs(&ph, &image, [&m, &m, &StubMode::Ideal], 4);
    lines.push(check_scenario("d", &ph, &res, &vox, Class::Artery, Rule::HuCeiling)?);

    Ok(lines.join("; "))
}

// ---------------------------------------------------------------- ensemble

fn ensemble_arithmetic() -> Check {
    // p_i = i/20 and p_ii = j/20: 0.4 p_i + 0.6 p_ii >= 0.5 exactly when 2i + 3j >= 50.
    let h = VolumeHeader::new([21, 21, 1], [1.0; 3]).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for j in 0..21 {
        for i in 0..21 {
            a.push(i as f32 / 20.0);
            b.push(j as f32 / 20.0);
        }
    }
    let pa = ScalarVolume::scalar(h.clone(), a).unwrap();
    let pb = ScalarVolume::scalar(h, b).unwrap();
    let fused = ensemble_vein(&pa, &pb, [0.4, 0.6]).map_err(err)?;
    let mut on = 0;
    for j in 0..21 {
        for i in 0..21 {
            let expect = 2 * i + 3 * j >= 50;
            ensure(*fused.get([i, j, 0]) == expect, || format!("p_i={i}/20 p_ii={j}/20: got {}", !expect))?;
            on += expect as usize;
        }
    }
    Ok(format!("441 constructed voxels, {on} in the hand-computed set, exact match"))
}

// ---------------------------------------------------------------- noise

fn noise_robustness() -> Check {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 100..120u64 {
        let ph = scenario_phantom(seed, false);
        let artery = far_artery_line(&ph);
        let tumor = far_tumor_box(&ph);
        let coarse_i = inject(0.15, vec![(Class::Artery, artery.clone()), (Class::Tumor, tumor)]);
        let coarse_ii = inject(0.15, vec![(Class::Artery, artery)]);
        let fine = StubMode::Noisy { sigma: 0.15 };
        let res = run_stubs(&ph, &ph.image, [&coarse_i, &coarse_ii, &fine], seed);
        let Some(Intermediate::Labels(pre)) = res.intermediate("coarse_i_labels") else {
            return Err("coarse_i_labels intermediate missing".into());
        };
        let d = |labels: &LabelVolume, c: Class| brute_dsc(&labels.class_mask(c), &ph.labels.class_mask(c));
        let (pa, pt) = (d(pre, Class::Artery), d(pre, Class::Tumor));
        let (qa, qt) = (d(&res.final_labels, Class::Artery), d(&res.final_labels, Class::Tumor));
        if qa > pa && qt > pt {
            wins += 1;
        }
        rows.push(format!("{seed}:A{pa:.3}->{qa:.3},T{pt:.3}->{qt:.3}"));
    }
    ensure(wins >= 18, || format!("post > pre on {wins}/20 cases: {}", rows.join(" ")))?;
    Ok(format!("post-processing improved artery and tumor DSC on {wins}/20 cases"))
}

// ---------------------------------------------------------------- determinism

fn hash_tree(dir: &Path) -> BTreeMap<String, String> {
    let pattern = format!("{}/**/*", dir.display());
    glob::glob(&pattern)
        .unwrap()
        .filter_map(|p| p.ok())
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "timings.json"))
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            let digest = Sha256::digest(std::fs::read(&p).unwrap());
            (rel, format!("{digest:x}"))
        })
        .collect()
}

fn determinism() -> Check {
    let data = tempfile::tempdir().map_err(err)?;
    let phantoms = write_phantoms(data.path(), &[7, 8, 9], &PhantomOptions { cyst: true, ..Default::default() });
    let mut cfg = oracle_config(data.path(), &phantoms, 42, "{ mode = \"noisy\", sigma = 0.15 }");
    let cases = case_list(data.path(), &phantoms);
    let mut hashes = Vec::new();
    for workers in [2, 2, 1] {
        cfg.workers = workers;
        let out = tempfile::tempdir().map_err(err)?;
        let s = run_batch(&cfg, &cases, out.path()).map_err(err)?;
        ensure(s.failures.is_empty(), || format!("failures: {:?}", s.failures))?;
        hashes.push(hash_tree(out.path()));
    }
    for (run, h) in hashes.iter().enumerate().skip(1) {
        ensure(*h == hashes[0], || {
            let diff: Vec<_> = hashes[0].iter().filter(|(k, v)| h.get(*k) != Some(v)).map(|(k, _)| k).collect();
            format!("run {run} differs from run 0 in {diff:?}")
        })?;
    }
    Ok(format!("3 runs (2, 2 and 1 workers) x 3 noisy cases, {} output files bit-identical", hashes[0].len()))
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [(&str, f64, fn() -> Check); 9] = [
        ("loss-correctness", 60.0, loss_correctness),
        ("connected-components", 30.0, connected_components_criterion),
        ("metrics", 60.0, metrics_criterion),
        ("resampling", 30.0, resampling_criterion),
        ("end-to-end-identity", 180.0, end_to_end_identity),
        ("rule-firing", 180.0, rule_firing),
        ("ensemble-arithmetic", 5.0, ensemble_arithmetic),
        ("noise-robustness", 300.0, noise_robustness),
        ("determinism", 180.0, determinism),
    ];
    let mut failed = 0;
    for (name, budget, f) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(d) if secs > budget => Err(format!("{d} (over the {budget:.0} s budget)")),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        println!("{tag} {name:<22} {secs:>7.2}s  {detail}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
