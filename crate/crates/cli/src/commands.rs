use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use uqroute::checkpoint;
use uqroute::config::{ExperimentConfig, JudgeBackend};
use uqroute::data::{generate, load_prompts, save_prompts, Dataset, PreferenceRecord, Split, SyntheticWorld};
use uqroute::judge::mock::{MockBehavior, MockConfig, MockJudgeServer};
use uqroute::judge::{Judge, RemoteJudge, SimJudge};
use uqroute::report::{fmt_float, mean, quantile_report, sweep_table, uncertainty_gap, SweepRow, Table};
use uqroute::rloo;
use uqroute::router::{
    adaptive_threshold, evaluate_accuracy, evaluate_scored, score_records, CostLedger, EvalReport, RouterConfig,
    RoutingMode, ScoreSource,
};
use uqroute::sngp::GpHead;
use uqroute::Error;

pub const DATA_FILE: &str = "data.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const HEAD_FILE: &str = "head.ckpt";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::InvalidInput(_) | Error::State(_) => 2,
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                Error::Divergence { .. } | Error::Singular(_) => 4,
                Error::JudgeUnavailable { .. } | Error::Protocol(_) => 5,
                _ => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn missing(path: &Path, hint: &str) -> CliError {
    CliError::Usage(format!("missing input {} ({hint})", path.display()))
}

/// Pairs scored by every evaluation command: the held-out ID split plus OOD.
fn eval_records(ds: &Dataset) -> Vec<PreferenceRecord> {
    ds.records.iter().filter(|r| r.split != Split::IdTrain).cloned().collect()
}

/// Fails when a judge was configured but not a single routed call succeeded.
fn check_judge(ledger: &CostLedger) -> Result<()> {
    if ledger.fallbacks > 0 && ledger.judge_calls == 0 {
        return Err(Error::JudgeUnavailable {
            attempts: ledger.fallbacks as u32,
            detail: "every routed comparison fell back to the model".into(),
        }
        .into());
    }
    if ledger.fallbacks > 0 {
        tracing::warn!(fallbacks = ledger.fallbacks, "some routed comparisons fell back to the model");
    }
    Ok(())
}

pub struct Ctx {
    pub config: ExperimentConfig,
}

impl Ctx {
    pub fn new(config: ExperimentConfig) -> Self {
        Self { config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn prepare_out(&self) -> Result<()> {
        self.config.write_resolved(&self.config.out_dir)?;
        Ok(())
    }

    fn write(&self, name: &str, table: &Table) -> Result<()> {
        self.write_to(&None, name, table)
    }

    fn dataset(&self, inputs: &super::Inputs) -> Result<Dataset> {
        let path = inputs.data.clone().unwrap_or_else(|| self.out(DATA_FILE));
        load_dataset(&path)
    }

    fn head_path(&self, inputs: &super::Inputs) -> PathBuf {
        inputs.checkpoint.clone().unwrap_or_else(|| self.out(HEAD_FILE))
    }

    fn head(&self, inputs: &super::Inputs) -> Result<GpHead> {
        let path = self.head_path(inputs);
        if !path.exists() {
            return Err(missing(&path, "run `train` and `calibrate-cov` first"));
        }
        let head = checkpoint::load_head(&path)?;
        if head.covariance.is_none() {
            return Err(CliError::Usage(format!(
                "checkpoint {} has no covariance; run `calibrate-cov` first",
                path.display()
            )));
        }
        Ok(head)
    }

    fn judge(&self, ds: &Dataset) -> Result<Box<dyn Judge>> {
        Ok(match self.config.judge.backend {
            JudgeBackend::Sim => Box::new(SimJudge::new(self.config.judge.sim.clone(), ds.world()?.truth)?),
            JudgeBackend::Remote => Box::new(RemoteJudge::new(self.config.judge.remote.clone())?),
        })
    }

    pub fn gen_data(&self) -> Result<()> {
        self.prepare_out()?;
        let cfg = &self.config;
        let (ds, _) = generate(&cfg.data)?;
        let path = self.out(DATA_FILE);
        ds.save(&path)?;
        println!("wrote {} ({} pairs)", path.display(), ds.len());
        let world = SyntheticWorld::new(cfg.data.world, cfg.data.seed)?;
        let prompts = world.prompt_pool(
            cfg.prompts.n_prompts,
            cfg.prompts.candidates,
            cfg.prompts.ood_fraction,
            cfg.data.ood_shift,
            cfg.data.ood_spread,
            cfg.prompts.seed,
        )?;
        let path = self.out(PROMPTS_FILE);
        save_prompts(&path, &prompts)?;
        println!("wrote {} ({} prompts)", path.display(), prompts.len());
        Ok(())
    }

    pub fn train(&self, inputs: &super::Inputs) -> Result<()> {
        let ds = self.dataset(inputs)?;
        self.prepare_out()?;
        let train = ds.filter_split(Split::IdTrain).augment_swap()?;
        let mut head = self.config.build_head(&ds.layout())?;
        let report = head.train(&train.records)?;
        tracing::info!(initial = report.initial_loss, last = report.final_loss, steps = report.steps, "trained");
        let path = self.head_path(inputs);
        checkpoint::save_head(&path, &head)?;
        println!("wrote {}", path.display());
        let mut t = Table::new(&["epoch", "mean_loss"]);
        t.push(vec!["0".into(), fmt_float(report.initial_loss)]);
        for (i, l) in report.epoch_losses.iter().enumerate() {
            t.push(vec![(i + 1).to_string(), fmt_float(*l)]);
        }
        self.write("train_loss.csv", &t)
    }

    pub fn calibrate_cov(&self, inputs: &super::Inputs) -> Result<()> {
        let ds = self.dataset(inputs)?;
        let path = self.head_path(inputs);
        if !path.exists() {
            return Err(missing(&path, "run `train` first"));
        }
        self.prepare_out()?;
        let mut head = checkpoint::load_head(&path)?;
        let train = ds.filter_split(Split::IdTrain).augment_swap()?;
        let cov = head.compute_covariance(&train.records)?;
        tracing::info!(n = cov.n_samples(), dim = cov.dim(), "covariance pass done");
        checkpoint::save_head(&path, &head)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    pub async fn eval(&self, inputs: &super::Inputs) -> Result<()> {
        let ds = self.dataset(inputs)?;
        let head = self.head(inputs)?;
        self.prepare_out()?;
        let records = eval_records(&ds);
        let report = evaluate_accuracy(&head, &RouterConfig::no_routing(), &ds.layout(), &records, None).await?;
        let mut t = Table::new(&["split", "n", "accuracy", "mean_u", "mean_abs_p"]);
        let mut row = |name: String, keep: &dyn Fn(Split) -> bool| {
            let idx: Vec<usize> = (0..records.len()).filter(|&i| keep(records[i].split)).collect();
            let pick = |f: &dyn Fn(usize) -> f64| mean(&idx.iter().map(|&i| f(i)).collect::<Vec<_>>());
            t.push(vec![
                name,
                idx.len().to_string(),
                fmt_float(pick(&|i| report.correct[i])),
                fmt_float(pick(&|i| report.scores[i].u)),
                fmt_float(pick(&|i| report.scores[i].p.abs())),
            ]);
        };
        for split in report.counts.keys() {
            row(split.to_string(), &|s| s == *split);
        }
        row("all".into(), &|_| true);
        self.write("eval.csv", &t)
    }

    fn write_to(&self, out: &Option<PathBuf>, default_name: &str, table: &Table) -> Result<()> {
        let path = out.clone().unwrap_or_else(|| self.out(default_name));
        table.write(&path)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn optional_judge(&self, ds: &Dataset, args: &super::RouterArgs) -> Result<Option<Box<dyn Judge>>> {
        if args.use_judge() {
            self.judge(ds).map(Some)
        } else {
            Ok(None)
        }
    }

    pub async fn route_eval(&self, inputs: &super::Inputs, args: &super::RouterArgs) -> Result<()> {
        let ds = self.dataset(inputs)?;
        let head = self.head(inputs)?;
        let judge = self.optional_judge(&ds, args)?;
        self.prepare_out()?;
        let records = eval_records(&ds);
        let report = evaluate_accuracy(&head, &self.config.router, &ds.layout(), &records, judge.as_deref()).await?;
        if judge.is_some() {
            check_judge(&report.ledger)?;
        }
        let rows = sweep_rows(&self.config.router, &records, &report);
        self.write_to(&args.out, "route_eval.csv", &sweep_table(&rows))
    }

    pub async fn sweep(&self, inputs: &super::Inputs) -> Result<()> {
        let ds = self.dataset(inputs)?;
        let head = self.head(inputs)?;
        let judge = self.judge(&ds)?;
        self.prepare_out()?;
        let layout = ds.layout();
        let records = eval_records(&ds);
        let started = Instant::now();
        let scores = score_records(&head, &layout, &records)?;
        let scoring_time = started.elapsed();
        let mut rows = Vec::new();
        for &threshold in &self.config.sweep.thresholds {
            for &mode in &self.config.sweep.modes {
                let router = RouterConfig {
                    threshold,
                    mode,
                    ..self.config.router.clone()
                };
                let report =
                    evaluate_scored(&router, &layout, &records, scores.clone(), Some(judge.as_ref()), scoring_time)
                        .await?;
                check_judge(&report.ledger)?;
                rows.extend(sweep_rows(&router, &records, &report));
            }
        }
        self.write("sweep.csv", &sweep_table(&rows))
    }

    pub async fn quantile_report(&self, inputs: &super::Inputs) -> Result<()> {
        let ds = self.dataset(inputs)?;
        let head = self.head(inputs)?;
        self.prepare_out()?;
        let records = eval_records(&ds);
        let report = evaluate_accuracy(&head, &RouterConfig::no_routing(), &ds.layout(), &records, None).await?;
        let u: Vec<f64> = report.scores.iter().map(|s| s.u).collect();
        let q = quantile_report(&u, &report.correct)?;
        println!("spearman rho {} p {}", fmt_float(q.spearman.rho), fmt_float(q.spearman.p_value));
        self.write("quantile.csv", &q.table())
    }

    pub fn uncertainty_gap(&self, inputs: &super::Inputs, files: Option<(PathBuf, PathBuf)>) -> Result<()> {
        let head = self.head(inputs)?;
        let (layout, records, splits) = match files {
            Some((id, ood)) => {
                let id = load_dataset(&id)?;
                let ood = load_dataset(&ood)?;
                if id.layout() != ood.layout() {
                    return Err(CliError::Usage("ID and OOD datasets have different layouts".into()));
                }
                let splits = std::iter::repeat_n(Split::IdVal, id.len())
                    .chain(std::iter::repeat_n(Split::Ood, ood.len()))
                    .collect::<Vec<_>>();
                let records = id.records.into_iter().chain(ood.records).collect::<Vec<_>>();
                (id.manifest.layout, records, splits)
            }
            None => {
                let ds = self.dataset(inputs)?;
                let records = eval_records(&ds);
                let splits = records.iter().map(|r| r.split).collect();
                (ds.layout(), records, splits)
            }
        };
        self.prepare_out()?;
        let scores = score_records(&head, &layout, &records)?;
        let p: Vec<f64> = scores.iter().map(|s| s.p).collect();
        let u: Vec<f64> = scores.iter().map(|s| s.u).collect();
        let gap = uncertainty_gap(&splits, &p, &u)?;
        self.write("uncertainty_gap.csv", &gap.table())?;
        let mut t = Table::new(&["mean_diff", "t", "df", "p_two_sided", "p_greater"]);
        if let Some(tt) = gap.ood_vs_id {
            t.push(vec![
                fmt_float(tt.mean_diff),
                fmt_float(tt.t),
                fmt_float(tt.df),
                fmt_float(tt.p_value),
                fmt_float(tt.p_greater()),
            ]);
        }
        self.write("uncertainty_gap_test.csv", &t)
    }

    pub async fn align(&self, inputs: &super::Inputs, prompts: Option<PathBuf>, args: &super::RouterArgs) -> Result<()> {
        let ds = self.dataset(inputs)?;
        let head = self.head(inputs)?;
        let ppath = prompts.unwrap_or_else(|| self.out(PROMPTS_FILE));
        if !ppath.exists() {
            return Err(missing(&ppath, "run `gen-data` first"));
        }
        let prompts = load_prompts(&ppath)?;
        let judge = self.optional_judge(&ds, args)?;
        self.prepare_out()?;
        let truth = ds.world()?.truth;
        let report = rloo::align(&self.config.align, &prompts, &head, judge.as_deref(), &truth).await?;
        if judge.is_some() {
            check_judge(&report.ledger)?;
        }
        tracing::info!(
            initial = report.initial_reward(),
            last = report.final_reward(),
            calls = report.ledger.judge_calls,
            "alignment done"
        );
        let mut t = Table::new(&["step", "mean_true_reward", "kl", "judge_calls", "fallbacks", "loss"]);
        for c in &report.curve {
            t.push(vec![
                c.step.to_string(),
                fmt_float(c.mean_true_reward),
                fmt_float(c.kl),
                c.judge_calls.to_string(),
                c.fallbacks.to_string(),
                fmt_float(c.loss),
            ]);
        }
        self.write_to(&args.out, "align_curve.csv", &t)
    }

    pub async fn mock_judge_server(
        &self,
        addr: SocketAddr,
        behavior: &str,
        fail_first: usize,
        delay_ms: u64,
        data: Option<PathBuf>,
    ) -> Result<()> {
        let behavior = match behavior {
            "sim" => {
                let path = data.unwrap_or_else(|| self.out(DATA_FILE));
                let ds = load_dataset(&path)?;
                MockBehavior::Sim(SimJudge::new(self.config.judge.sim.clone(), ds.world()?.truth)?)
            }
            "malformed" => MockBehavior::Malformed,
            other => match other.strip_prefix("fixed:").and_then(|l| l.parse::<u8>().ok()) {
                Some(label) if label <= 2 => MockBehavior::Fixed(label),
                _ => return Err(CliError::Usage(format!("unknown behavior {other:?}"))),
            },
        };
        let server = MockJudgeServer::bind(
            addr,
            MockConfig {
                behavior,
                fail_first,
                delay: Duration::from_millis(delay_ms),
            },
        )
        .await?;
        println!("listening on {}", server.endpoint());
        tokio::signal::ctrl_c().await.map_err(Error::from)?;
        server.shutdown().await;
        Ok(())
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(missing(path, "run `gen-data` first"));
    }
    Ok(Dataset::load(path)?)
}

/// One row per split plus `all`; wall time is the whole batch's.
fn sweep_rows(router: &RouterConfig, records: &[PreferenceRecord], report: &EvalReport) -> Vec<SweepRow> {
    let threshold = match router.mode {
        RoutingMode::Adaptive => {
            let u: Vec<f64> = report.scores.iter().map(|s| s.u).collect();
            adaptive_threshold(&u, router.target_ratio)
        }
        _ => router.threshold,
    };
    let wall = report.ledger.wall_time().as_secs_f64();
    let row = |name: String, keep: &dyn Fn(Split) -> bool| {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| keep(records[i].split)).collect();
        let calls = idx.iter().filter(|&&i| report.routed[i].source == ScoreSource::Judge).count();
        let n = idx.len();
        SweepRow {
            split: name,
            threshold,
            mode: router.mode.to_string(),
            calls,
            calls_ratio: if n == 0 { 0.0 } else { calls as f64 / n as f64 },
            accuracy: mean(&idx.iter().map(|&i| report.correct[i]).collect::<Vec<_>>()),
            wall_time: wall,
        }
    };
    let mut rows: Vec<SweepRow> = report.counts.keys().map(|&s| row(s.to_string(), &|x| x == s)).collect();
    rows.push(row("all".into(), &|_| true));
    rows
}
