//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 7 to 9 run the full leave-one-domain-out protocol (5 variants,
//! 4 held-out domains, 10 seeds, 2000 iterations) and take most of the runtime.
//! `METADG_ACCEPTANCE_FAST=1` skips them and reports them as SKIP.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use metadg::datagen::{load_dataset, save_dataset, synth_domains};
use metadg::metalearn::{
    load_checkpoint, save_checkpoint, train, train_until, Checkpoint, MetaConfig, TrainState, Variant,
};
use metadg::nets::Network;
use metadg::protocol::{benchmark_meta, benchmark_net, benchmark_spec, run_ablation, AblationPlan, AblationResult};
use metadg::verify::fixtures::{micro_domains, micro_net_config};
use metadg::verify::{autodiff, meta, scoring, Check, OP_INSTANCES};

const UNIT_BUDGET: Duration = Duration::from_secs(60);
const PROTOCOL_BUDGET: Duration = Duration::from_secs(30 * 60);
const PROTOCOL_SEEDS: u64 = 10;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: u32,
    title: &'static str,
    verdict: Verdict,
    details: Vec<String>,
}

impl Line {
    fn new(id: u32, title: &'static str, pass: bool, details: Vec<String>) -> Self {
        Line { id, title, verdict: if pass { Verdict::Pass } else { Verdict::Fail }, details }
    }

    fn from_checks(id: u32, title: &'static str, checks: &[Check], elapsed: Option<Duration>) -> Self {
        let mut details: Vec<String> = checks.iter().filter(|c| !c.pass).map(Check::to_string).collect();
        let mut pass = !checks.is_empty() && details.is_empty();
        if details.is_empty() {
            details.push(format!("{} checks", checks.len()));
        }
        if let Some(t) = elapsed {
            pass &= t < UNIT_BUDGET;
            details.push(format!("runtime {:.1}s (< {}s)", t.as_secs_f64(), UNIT_BUDGET.as_secs()));
        }
        Line::new(id, title, pass, details)
    }

    fn error(id: u32, title: &'static str, e: impl std::fmt::Display) -> Self {
        Line::new(id, title, false, vec![format!("error: {e}")])
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn checks_line(id: u32, title: &'static str, budget: bool, f: impl FnOnce() -> metadg::Result<Vec<Check>>) -> Line {
    let (checks, t) = timed(f);
    match checks {
        Ok(c) => Line::from_checks(id, title, &c, budget.then_some(t)),
        Err(e) => Line::error(id, title, e),
    }
}

fn autodiff_line() -> Line {
    checks_line(1, "autodiff oracle suite", true, || {
        let mut c = autodiff::op_gradient_checks(OP_INSTANCES)?;
        c.push(autodiff::second_order_check()?);
        Ok(c)
    })
}

fn persistence() -> Result<Vec<String>, Box<dyn std::error::Error>> {
    let mut failures = Vec::new();
    let tmp = tempfile::tempdir()?;

    let domains = micro_domains(3, 12)?;
    let net = Network::new(micro_net_config(3))?;
    let cfg = MetaConfig { iters: 20, alpha: 0.02, batch_per_domain: 4, seed: 11, ..MetaConfig::default() };

    let (a, ha) = train(&net, &cfg, &domains)?;
    let (b, hb) = train(&net, &cfg, &domains)?;
    if a != b || ha != hb {
        failures.push("two fixed-seed runs differ".into());
    }

    let half = MetaConfig { iters: 10, ..cfg.clone() };
    let (first, _) = train(&net, &half, &domains)?;
    let dir = tmp.path().join("ckpt");
    let ckpt = Checkpoint { net: net.config().clone(), meta: half, state: first };
    save_checkpoint(&ckpt, &dir)?;
    let loaded = load_checkpoint(&dir)?;
    if loaded != ckpt {
        failures.push("checkpoint round trip differs".into());
    }
    let mut resumed: TrainState = loaded.state;
    train_until(&net, &mut resumed, &domains, &cfg, |_, _| Ok(()))?;
    if resumed != a {
        failures.push("resumed run differs from uninterrupted run".into());
    }

    let data_dir = tmp.path().join("data");
    save_dataset(&domains, &data_dir)?;
    let back = load_dataset(&data_dir)?;
    if back != domains {
        failures.push("dataset round trip differs".into());
    }
    Ok(failures)
}

fn persistence_line() -> Line {
    let title = "determinism and persistence";
    match persistence() {
        Ok(f) if f.is_empty() => Line::new(
            10,
            title,
            true,
            vec!["fixed-seed rerun, resume, checkpoint and dataset round trips are bit-identical".into()],
        ),
        Ok(f) => Line::new(10, title, false, f),
        Err(e) => Line::error(10, title, e),
    }
}

fn mean_std(s: &metadg::protocol::MeanStd) -> String {
    format!("{:.4} ± {:.4}", s.mean, s.std)
}

fn protocol_lines(result: &AblationResult, elapsed: Duration) -> Vec<Line> {
    let pooled = |v| result.pooled(v).expect("every variant ran");
    let fg = pooled(Variant::Finegrained);
    let erm = pooled(Variant::Erm);
    let within_budget = elapsed < PROTOCOL_BUDGET;
    let runtime =
        format!("protocol runtime {:.1} min (< {} min)", elapsed.as_secs_f64() / 60.0, PROTOCOL_BUDGET.as_secs() / 60);
    let table = |vs: &[Variant]| -> Vec<String> {
        vs.iter()
            .map(|&v| {
                let s = pooled(v);
                format!("{v:<12} hter {}  auc {}", mean_std(&s.hter), mean_std(&s.auc))
            })
            .collect()
    };

    let auc_gap = fg.auc.mean - erm.auc.mean;
    let hter_gap = erm.hter.mean - fg.hter.mean;
    let (auc_se, hter_se) = (fg.auc.pooled_se(&erm.auc), fg.hter.pooled_se(&erm.hter));
    let mut d7 = table(&[Variant::Finegrained, Variant::Erm]);
    d7.push(format!("auc gap {auc_gap:+.4} vs se {auc_se:.4}; hter gap {hter_gap:+.4} vs se {hter_se:.4}"));
    d7.push(runtime.clone());
    let loss_drop = result
        .cells
        .iter()
        .filter(|c| c.variant == Variant::Finegrained)
        .filter(|c| c.late_loss < c.early_loss)
        .count();
    d7.push(format!("finegrained objective fell in {loss_drop}/{} runs", result.cells.len() / Variant::ALL.len()));
    let l7 = Line::new(7, "finegrained beats erm", auc_gap > auc_se && hter_gap > hter_se && within_budget, d7);

    let agg = pooled(Variant::Aggregated);
    let fo = pooled(Variant::FirstOrder);
    let mut d8 = table(&[Variant::Finegrained, Variant::Aggregated, Variant::FirstOrder]);
    d8.push(runtime.clone());
    let l8 = Line::new(
        8,
        "finegrained hter <= aggregated and first_order",
        fg.hter.mean <= agg.hter.mean && fg.hter.mean <= fo.hter.mean && within_budget,
        d8,
    );

    let noreg = pooled(Variant::Noreg);
    let mut d9 = table(&[Variant::Finegrained, Variant::Noreg, Variant::Erm]);
    d9.push(runtime);
    let l9 = Line::new(
        9,
        "finegrained auc > noreg and erm",
        fg.auc.mean > noreg.auc.mean && fg.auc.mean > erm.auc.mean && within_budget,
        d9,
    );
    vec![l7, l8, l9]
}

fn protocol() -> Vec<Line> {
    const TITLES: [(u32, &str); 3] = [
        (7, "finegrained beats erm"),
        (8, "finegrained hter <= aggregated and first_order"),
        (9, "finegrained auc > noreg and erm"),
    ];
    if std::env::var_os("METADG_ACCEPTANCE_FAST").is_some() {
        return TITLES
            .iter()
            .map(|&(id, title)| Line {
                id,
                title,
                verdict: Verdict::Skip,
                details: vec!["METADG_ACCEPTANCE_FAST set".into()],
            })
            .collect();
    }
    let run = || -> metadg::Result<(AblationResult, Duration)> {
        let domains = synth_domains(&benchmark_spec())?;
        let plan = AblationPlan { seeds: PROTOCOL_SEEDS, ..AblationPlan::default() };
        let start = Instant::now();
        let result = run_ablation(&benchmark_net(), &benchmark_meta(), &domains, &plan, |_| {})?;
        Ok((result, start.elapsed()))
    };
    match run() {
        Ok((result, t)) => {
            print!("{}", result.to_csv());
            protocol_lines(&result, t)
        }
        Err(e) => TITLES.iter().map(|&(id, title)| Line::error(id, title, &e)).collect(),
    }
}

fn main() -> ExitCode {
    let mut lines = vec![
        autodiff_line(),
        checks_line(2, "second-order meta-gradient", true, meta::meta_gradient_checks),
        checks_line(3, "taylor expansion", false, meta::taylor_checks),
        checks_line(4, "first-order vs second-order gap", false, meta::order_checks),
        checks_line(5, "gradient isolation", false, meta::isolation_checks),
        checks_line(6, "metrics oracles", false, || {
            let mut c = vec![scoring::auc_agreement_check(1000)?];
            c.extend(scoring::hter_example_checks()?);
            Ok(c)
        }),
    ];
    lines.extend(protocol());
    lines.push(persistence_line());
    lines.push(checks_line(11, "literal sgd meta-step", false, || Ok(vec![meta::sgd_literal_check()?])));
    lines.sort_by_key(|l| l.id);

    let mut failed = 0;
    for l in &lines {
        let tag = match l.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag} criterion {:>2}: {}", l.id, l.title);
        for d in &l.details {
            println!("      {d}");
        }
    }
    println!("{} of {} criteria failed", failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
