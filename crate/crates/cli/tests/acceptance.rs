//! Acceptance criteria, one line each. Run with `cargo test --test acceptance`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};
use tower::ServiceExt;
use wealthtax_core::correction::{
    fit_pareto, rescale, run_pipeline, AssetShares, NaCategory, NationalAccountsTable, PipelineConfig,
    TopPortfolioModel,
};
use wealthtax_core::dataset::{Asset, AssetVector, HouseholdRecord, MultiImplicateDataset, Population, WealthBase};
use wealthtax_core::goals::{apply_tax, goal4_emissions};
use wealthtax_core::report::{top_shares, InputSource, RunConfig, Snapshot};
use wealthtax_core::stats::{gini, kakwani, WeightedSeries};
use wealthtax_core::syngen::{LognormalParams, ParetoParams, Scenario, SynthSpec};
use wealthtax_core::tax::{self, presets, BandSchedule, TaxDesign};
use wealthtax_service::{router, AppState};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn model(label: &str) -> TaxDesign {
    presets().into_iter().find(|d| d.display_label() == label).unwrap()
}

fn record(id: usize, implicate: u8, weight: f64, assets: AssetVector, liabilities: f64) -> HouseholdRecord {
    HouseholdRecord {
        id: format!("h{id}"),
        country: "XX".into(),
        implicate,
        weight,
        assets,
        liabilities,
        gross_income: 30_000.0,
        synthetic: false,
    }
}

fn schedule_fixture() -> Result<String, String> {
    let net = [629_352.0, 973_265.0, 2_406_940.0];
    let m1 = tax::liability(1_000_000.0, &BandSchedule::new(net, model("Model1-net").rates));
    let m2 = tax::liability(3_406_940.0, &BandSchedule::new(net, model("Model2-net").rates));
    ensure((m1 - 3_973.83).abs() <= 0.01, || format!("Model 1 liability {m1}"))?;
    ensure((m2 - 96_449.38).abs() <= 0.01, || format!("Model 2 liability {m2}"))?;
    Ok(format!("M1 {m1:.2}, M2 {m2:.2}"))
}

fn elasticity() -> Result<String, String> {
    let c = goal4_emissions(0.574, 0.5684).map_err(|e| e.to_string())?;
    ensure((c - (-0.776)).abs() <= 0.005, || format!("got {c}"))?;
    Ok(format!("{c:.4}%"))
}

fn random_series(rng: &mut ChaCha8Rng, max_n: usize) -> WeightedSeries {
    let n = rng.random_range(2..=max_n);
    let values = (0..n).map(|_| rng.random_range(1.0..1e6)).collect();
    let weights = (0..n).map(|_| rng.random_range(0.1..100.0)).collect();
    WeightedSeries::new(values, weights).unwrap()
}

fn kakwani_suite() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_prop, mut worst_lump) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let wealth = random_series(&mut rng, 200);
        let rate = rng.random_range(0.001..0.1);
        let prop = wealth.with_values(wealth.values().iter().map(|v| v * rate).collect()).unwrap();
        let k = kakwani(&prop, &wealth).unwrap();
        worst_prop = worst_prop.max(k.abs());
        let lump = wealth.with_values(vec![500.0; wealth.len()]).unwrap();
        let k = kakwani(&lump, &wealth).unwrap();
        worst_lump = worst_lump.max((k + gini(&wealth).unwrap()).abs());
    }
    ensure(worst_prop <= 1e-12, || format!("proportional |K| up to {worst_prop:e}"))?;
    ensure(worst_lump <= 1e-12, || format!("lump-sum |K + G| up to {worst_lump:e}"))?;
    let wealth = WeightedSeries::unweighted(vec![1.0, 2.0, 3.0, 4.0]);
    let k = kakwani(&WeightedSeries::unweighted(vec![0.0, 0.0, 0.0, 1.0]), &wealth).unwrap();
    ensure(k == 0.5, || format!("fixture K = {k}"))?;
    Ok(format!("max |K| {worst_prop:.1e}, max |K+G| {worst_lump:.1e}, fixture {k}"))
}

fn gini_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let s = random_series(&mut rng, 200);
        let (x, w) = (s.values(), s.weights());
        let total_w: f64 = w.iter().sum();
        let mu = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total_w;
        let mut diff = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                diff += w[i] * w[j] * (x[i] - x[j]).abs();
            }
        }
        let oracle = diff / (2.0 * total_w * total_w * mu);
        let g = gini(&s).unwrap();
        worst = worst.max((g - oracle).abs() / oracle);
    }
    ensure(worst <= 1e-9, || format!("relative error up to {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e}"))
}

fn hill_recovery() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let xs: Vec<f64> = (0..100_000).map(|_| 1e6 * (1.0 - rng.random::<f64>()).powf(-1.0 / 1.5)).collect();
    let a = fit_pareto(&xs, 1e6).map_err(|e| e.to_string())?.alpha;
    ensure((1.47..=1.53).contains(&a), || format!("alpha {a}"))?;
    Ok(format!("alpha {a:.4}"))
}

/// Top share of a lognormal body mixed with a Pareto tail, from the
/// closed-form partial expectations of both components.
fn mixture_top_share(body: LognormalParams, tail: ParetoParams, p_tail: f64, top: f64) -> f64 {
    let z = Normal::new(0.0, 1.0).unwrap();
    let ln_surv = |t: f64| 1.0 - z.cdf((t.ln() - body.mu) / body.sigma);
    let par_surv = |t: f64| if t <= tail.w_min { 1.0 } else { (tail.w_min / t).powf(tail.alpha) };
    let surv = |t: f64| (1.0 - p_tail) * ln_surv(t) + p_tail * par_surv(t);
    let (mut lo, mut hi) = (1.0f64.ln(), 1e12f64.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if surv(mid.exp()) > top {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (0.5 * (lo + hi)).exp();
    let ln_mean = (body.mu + body.sigma * body.sigma / 2.0).exp();
    let par_mean = tail.alpha * tail.w_min / (tail.alpha - 1.0);
    let ln_above = ln_mean * z.cdf((body.mu + body.sigma * body.sigma - t.ln()) / body.sigma);
    let par_above = if t <= tail.w_min {
        par_mean
    } else {
        tail.alpha * tail.w_min.powf(tail.alpha) * t.powf(1.0 - tail.alpha) / (tail.alpha - 1.0)
    };
    ((1.0 - p_tail) * ln_above + p_tail * par_above) / ((1.0 - p_tail) * ln_mean + p_tail * par_mean)
}

fn restoration_scenario(seed: u64) -> Scenario {
    Scenario {
        spec: SynthSpec {
            n_households: 100_000,
            body: LognormalParams { mu: 11.0, sigma: 0.8 },
            tail: ParetoParams { alpha: 2.0, w_min: 1e6 },
            tail_fraction: 0.03,
            asset_split: AssetShares::from_pairs(&[
                (Asset::Deposits, 0.1),
                (Asset::ListedShares, 0.15),
                (Asset::Funds, 0.05),
                (Asset::MainResidence, 0.35),
                (Asset::InvestmentProperty, 0.15),
                (Asset::BusinessWealth, 0.2),
            ]),
            liability_ratio: 0.1,
            seed,
            income: LognormalParams { mu: 10.3, sigma: 0.6 },
            weight: 100.0,
            countries: vec!["EA".into()],
            implicate_noise: 0.0,
            tail_truncation: Some(0.999),
            reference_year: 2017,
        },
        richlist_floor: 1e8,
        household_scale: 1.0,
    }
}

fn pipeline_restoration() -> Result<String, String> {
    let scenario = restoration_scenario(20_240_917);
    let spec = &scenario.spec;
    let data = scenario.build().map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig { seed: 99, ..PipelineConfig::default() };
    // imputed households get the survey's own portfolio structure; liabilities
    // as a fraction of net wealth equal r / (1 - r) for a gross-based ratio r
    cfg.top_portfolio = TopPortfolioModel {
        liability_ratio: spec.liability_ratio / (1.0 - spec.liability_ratio),
        allocation_shares: spec.asset_split,
    };
    let (corrected, _) =
        run_pipeline(&data.observed, &data.national_accounts, &data.rich_list, &cfg).map_err(|e| e.to_string())?;
    let before = top_shares(&data.observed).map_err(|e| e.to_string())?.top5;
    let after = top_shares(&corrected).map_err(|e| e.to_string())?.top5;
    let analytic = mixture_top_share(spec.body, spec.tail, spec.tail_fraction, 0.05);
    ensure(before < after, || format!("uncorrected {before} not below corrected {after}"))?;
    ensure((after - analytic).abs() <= 0.01, || format!("corrected {after:.4} vs analytic {analytic:.4}"))?;
    Ok(format!("top 5%: uncorrected {:.2}%, corrected {:.2}%, analytic {:.2}%", before * 100.0, after * 100.0, analytic * 100.0))
}

fn rescaling_exactness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut negatives = 0;
    for _ in 0..100 {
        let n = rng.random_range(20..300);
        let recs: Vec<HouseholdRecord> = (0..n)
            .map(|i| {
                let assets = AssetVector::from_array(std::array::from_fn(|_| {
                    if rng.random_bool(0.7) {
                        rng.random_range(0.0..5e5)
                    } else {
                        0.0
                    }
                }));
                // a fifth of the households are under water
                let debt = if rng.random_bool(0.2) {
                    assets.gross() + rng.random_range(1.0..1e5)
                } else {
                    assets.gross() * rng.random_range(0.0..0.6) + 1.0
                };
                record(i, 1, rng.random_range(1.0..200.0), assets, debt)
            })
            .collect();
        let pop = Population::new(recs, 2017).unwrap();
        let mut na = NationalAccountsTable::from_population(&pop);
        for cat in Asset::ALL.map(NaCategory::Asset).into_iter().chain([NaCategory::Liabilities]) {
            if let Some(v) = na.aggregate("XX", cat) {
                na.set_aggregate("XX", cat, v * rng.random_range(0.5..2.5));
            }
        }
        let out = rescale(&pop, &na).map_err(|e| e.to_string())?;
        for cat in Asset::ALL.map(NaCategory::Asset).into_iter().chain([NaCategory::Liabilities]) {
            let target = na.aggregate("XX", cat).unwrap_or(0.0);
            let got: f64 = out
                .records()
                .iter()
                .map(|r| {
                    r.weight
                        * match cat {
                            NaCategory::Asset(a) => r.assets.get(a),
                            NaCategory::Liabilities => r.liabilities,
                        }
                })
                .sum();
            let err = if target == 0.0 { got.abs() } else { (got - target).abs() / target.abs() };
            worst = worst.max(err);
        }
        for (a, b) in pop.records().iter().zip(out.records()) {
            if a.net_wealth() < 0.0 {
                negatives += 1;
                ensure(b.net_wealth() >= a.net_wealth(), || format!("{} fell from {} to {}", a.id, a.net_wealth(), b.net_wealth()))?;
            }
        }
    }
    ensure(worst <= 1e-9, || format!("aggregate error up to {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e}; {negatives} net-negative households checked"))
}

fn random_dataset(rng: &mut ChaCha8Rng) -> MultiImplicateDataset {
    let n = rng.random_range(30..200);
    let base: Vec<(f64, [f64; 9], f64)> = (0..n)
        .map(|_| {
            let scale = (rng.random_range(9.0..16.0f64)).exp();
            let assets = std::array::from_fn(|_| rng.random_range(0.0..1.0) * scale);
            (rng.random_range(1.0..500.0), assets, rng.random_range(0.0..0.5) * scale)
        })
        .collect();
    let pops = (1..=5u8)
        .map(|k| {
            let recs = base
                .iter()
                .enumerate()
                .map(|(i, (w, a, l))| {
                    let jitter = 1.0 + 0.05 * rng.random_range(-1.0..1.0);
                    record(i, k, *w, AssetVector::from_array(a.map(|x| x * jitter)), *l)
                })
                .collect();
            Population::new(recs, 2017).unwrap()
        })
        .collect();
    MultiImplicateDataset::new(pops, "random").unwrap()
}

fn scan_quantile(pairs: &[(f64, f64)], p: f64) -> f64 {
    let mut v = pairs.to_vec();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = v.iter().map(|x| x.1).sum();
    let mut cum = 0.0;
    for (x, w) in &v {
        cum += w;
        if cum >= p * total - 1e-12 * total {
            return *x;
        }
    }
    v.last().unwrap().0
}

fn brute_force_revenue(ds: &MultiImplicateDataset, d: &TaxDesign) -> f64 {
    let mut sum = 0.0;
    for pop in ds.implicates() {
        let pairs: Vec<(f64, f64)> = pop.records().iter().map(|r| (r.wealth_base(d.base), r.weight)).collect();
        let t = [0.90, 0.95, 0.99].map(|p| scan_quantile(&pairs, p));
        let bands = [(t[0], t[1], d.rates[0]), (t[1], t[2], d.rates[1]), (t[2], f64::INFINITY, d.rates[2])];
        for (v, w) in &pairs {
            let mut due = 0.0;
            for (lo, hi, r) in bands {
                if *v > lo {
                    due += r * (v.min(hi) - lo);
                }
            }
            sum += w * due;
        }
    }
    sum / ds.implicates().len() as f64
}

fn revenue_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ds = random_dataset(&mut rng);
        for d in presets() {
            let engine = tax::revenue(&ds, &d).map_err(|e| e.to_string())?;
            let oracle = brute_force_revenue(&ds, &d);
            worst = worst.max((engine - oracle).abs() / oracle.abs().max(1e-300));
        }
        for base in WealthBase::ALL {
            let m1 = tax::revenue(&ds, &model(&format!("Model1-{base}"))).unwrap();
            let m2 = tax::revenue(&ds, &model(&format!("Model2-{base}"))).unwrap();
            ensure(m2 >= m1, || format!("{base}: Model 2 {m2} below Model 1 {m1}"))?;
        }
    }
    ensure(worst <= 1e-9, || format!("relative error up to {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e} over 1200 design runs"))
}

fn accounting_identity() -> Result<String, String> {
    let cfg = RunConfig::new(InputSource::Synthetic(Scenario::demo(10_000, 8)));
    let snap = Snapshot::prepare(&cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for d in presets() {
        for pop in snap.corrected.implicates() {
            let sched = tax::resolve(&d, pop).map_err(|e| e.to_string())?;
            let taxed = apply_tax(pop, &d, &sched).map_err(|e| e.to_string())?;
            let loss: f64 =
                pop.records().iter().zip(taxed.post.records()).map(|(a, b)| a.weight * (a.net_wealth() - b.net_wealth())).sum();
            let rev = tax::implicate_revenue(pop, d.base, &sched);
            worst = worst.max((loss - rev).abs() / rev);
        }
    }
    ensure(worst <= 1e-9, || format!("relative gap up to {worst:e}"))?;
    Ok(format!("max relative gap {worst:.1e} over 12 designs x 5 implicates"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let cfg = json!({ "input": { "synthetic": Scenario::demo(3_000, 21) }, "seed": 77 });
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn batch(config: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_wealthtax"))
        .args(["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    batch(&config, &dir.path().join("a"))?;
    batch(&config, &dir.path().join("b"))?;
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    ensure(a.len() == 13, || format!("{} files written", a.len()))?;
    ensure(a == b, || "outputs differ".into())?;
    Ok(format!("{} files byte-identical", a.len()))
}

fn parity() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    batch(&config, &dir.path().join("out"))?;
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();

    let cfg = RunConfig::load(&config).map_err(|e| e.to_string())?;
    let state = AppState::with_snapshot(Snapshot::prepare(&cfg).map_err(|e| e.to_string())?)?;
    let rt = tokio::runtime::Runtime::new().unwrap();
    let designs = summary["designs"].as_array().unwrap();
    ensure(designs.len() == 12, || format!("{} designs in summary", designs.len()))?;
    for entry in designs {
        let req = Request::post("/api/simulate")
            .header("content-type", "application/json")
            .body(Body::from(json!({ "design": entry["design"] }).to_string()))
            .unwrap();
        let resp = rt.block_on(router(state.clone()).oneshot(req)).unwrap();
        ensure(resp.status() == StatusCode::OK, || format!("status {}", resp.status()))?;
        let bytes = rt.block_on(resp.into_body().collect()).unwrap().to_bytes();
        let got: Value = serde_json::from_slice(&bytes).unwrap();
        for (field, want) in entry["report"].as_object().unwrap() {
            ensure(&got[field] == want, || format!("{} {field}: {} vs {want}", entry["label"], got[field]))?;
        }
        let thresholds: Vec<Value> = entry["thresholds"].as_array().unwrap().clone();
        ensure(got["thresholds"].as_array().unwrap() == &thresholds, || format!("{} thresholds", entry["label"]))?;
    }
    Ok("12 presets equal field-for-field".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, f64, Check); 11] = [
        ("schedule fixture", 1.0, schedule_fixture),
        ("elasticity consistency", 1.0, elasticity),
        ("kakwani suite", 10.0, kakwani_suite),
        ("gini oracle equivalence", 30.0, gini_oracle),
        ("hill estimator recovery", 5.0, hill_recovery),
        ("pipeline restoration", 60.0, pipeline_restoration),
        ("rescaling exactness", 10.0, rescaling_exactness),
        ("revenue oracle", 30.0, revenue_oracle),
        ("accounting identity", 30.0, accounting_identity),
        ("determinism", f64::INFINITY, determinism),
        ("batch/service parity", f64::INFINITY, parity),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if secs > limit => Err(format!("{detail}; took {secs:.2}s, limit {limit}s")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name:<26} {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<26} {why} [{secs:.2}s]");
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
