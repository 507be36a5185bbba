use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use masnn::asrv_viz::{self, AsrMap};
use masnn::attention::{AttentionConfig, Dimension, Location};
use masnn::config::{derive_seed, ModelConfig, RunConfig};
use masnn::energy::{anchor_on_vanilla, count_flops, EnergyReport, FlopProfile};
use masnn::event_ingest::synth_events;
use masnn::isometry;
use masnn::network::{run, Model, PlainNet};
use masnn::params::Binder;
use masnn::residual::ResNet;
use masnn::training::{self, bptt_train, evaluate, examples_from_streams, Checkpoint, Example};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Ctx {
    pub cfg: RunConfig,
    pub quiet: bool,
}

impl Ctx {
    pub fn new(cfg: RunConfig, quiet: bool) -> Self {
        Ctx { cfg, quiet }
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    /// Path of an artifact; every artifact lives under the output directory.
    fn artifact(&self, rel: &str) -> Result<PathBuf> {
        let p = self.cfg.out_dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.artifact(rel)?;
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

fn datasets(cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let window = cfg.data.window()?;
    let train = examples_from_streams(&synth_events(&cfg.data.synth)?, window, cfg.data.steps)?;
    let val = examples_from_streams(&synth_events(&cfg.val_spec())?, window, cfg.data.steps)?;
    Ok((train, val))
}

/// Fresh model for `cfg` with the given attention. Plain networks share
/// their base weights across attention settings for one seed.
fn build_model(cfg: &RunConfig, attention: &AttentionConfig) -> Result<Box<dyn Model>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed());
    Ok(match &cfg.model {
        ModelConfig::Plain(spec) => {
            let base = PlainNet::new(spec.clone(), cfg.data.steps, cfg.lif, AttentionConfig::none(), &mut rng)?;
            let mut gate_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "model.gates"));
            Box::new(base.with_attention(attention.clone(), &mut gate_rng)?)
        }
        ModelConfig::Res(spec) => Box::new(ResNet::new(
            spec.clone(),
            cfg.data.steps,
            cfg.lif,
            attention.clone(),
            &mut rng,
        )?),
    })
}

fn checkpoint_path(ctx: &Ctx, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| ctx.cfg.out_dir.join("checkpoint.bin"))
}

/// Model and configuration stored in a checkpoint.
fn load_checkpoint(path: &Path) -> Result<(RunConfig, Box<dyn Model>, Checkpoint)> {
    let ck = Checkpoint::load(path).context("loading checkpoint")?;
    let cfg = RunConfig::from_text(&ck.config, &[]).context("checkpoint configuration")?;
    let mut model = build_model(&cfg, &cfg.attention)?;
    ck.restore_into(&mut *model)?;
    Ok((cfg, model, ck))
}

/// Copy every tensor `to` shares by name with `from`.
fn copy_shared(from: &dyn Model, to: &mut dyn Model) {
    let ck = Checkpoint::capture(from, "", None);
    let stored: std::collections::BTreeMap<&str, _> = ck.tensors.iter().map(|(n, _, t)| (n.as_str(), t)).collect();
    to.visit_mut(&mut |name, _, t| {
        if let Some(s) = stored.get(name) {
            if s.shape() == t.shape() {
                *t = (*s).clone();
            }
        }
    });
}

pub fn synth_data(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    for (split, spec) in [("train", cfg.data.synth.clone()), ("val", cfg.val_spec())] {
        let streams = synth_events(&spec)?;
        let mut labels = String::from("file,label,events\n");
        for (i, s) in streams.iter().enumerate() {
            let name = format!("{:04}.events", i);
            ctx.write(&format!("data/{}/{}", split, name), s.stream.to_text())?;
            let _ = writeln!(labels, "{},{},{}", name, s.label, s.stream.events.len());
        }
        ctx.write(&format!("data/{}/labels.csv", split), labels)?;
        ctx.say(format!("{}: {} streams", split, streams.len()));
    }
    ctx.write("config.ini", &cfg.source)?;
    Ok(())
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (train_set, val_set) = datasets(cfg)?;
    let mut model = build_model(cfg, &cfg.attention)?;
    let report = bptt_train(&mut *model, &train_set, &cfg.train, |e| {
        ctx.say(format!(
            "epoch {:>3}  loss {:.4}  acc {:.3}  nasar {:.4}",
            e.epoch, e.loss, e.accuracy, e.nasar
        ))
    })?;
    let ev = evaluate(&*model, &val_set, cfg.train.batch_size, cfg.train.eval_options(&*model))?;
    ctx.write("train_report.csv", report.to_csv())?;
    ctx.write(
        "metrics.csv",
        format!(
            "metric,value\nval_accuracy,{}\nval_loss,{}\nval_nasar,{}\n",
            ev.accuracy, ev.loss, ev.nasar
        ),
    )?;
    ctx.write("config.ini", &cfg.source)?;
    let ck = Checkpoint::capture(&*model, &cfg.source, Some(ev.accuracy));
    let path = ctx.artifact("checkpoint.bin")?;
    ck.save(&path)?;
    ctx.say(format!(
        "validation accuracy {:.4}  nasar {:.4}  ({} / {})",
        ev.accuracy, ev.nasar, ev.correct, ev.total
    ));
    ctx.say(format!("checkpoint {}", path.display()));
    Ok(())
}

pub fn eval(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = checkpoint_path(ctx, checkpoint);
    let (cfg, model, ck) = load_checkpoint(&path)?;
    let (_, val_set) = datasets(&cfg)?;
    let ev = evaluate(&*model, &val_set, cfg.train.batch_size, cfg.train.eval_options(&*model))?;
    let matches = ck.accuracy.map(|a| a == ev.accuracy);
    ctx.write(
        "eval.csv",
        format!(
            "metric,value\naccuracy,{}\nloss,{}\nnasar,{}\nrecorded_accuracy,{}\n",
            ev.accuracy,
            ev.loss,
            ev.nasar,
            ck.accuracy.map(|a| a.to_string()).unwrap_or_else(|| "-".into())
        ),
    )?;
    ctx.say(format!(
        "accuracy {:.4}  nasar {:.4}  ({} / {})",
        ev.accuracy, ev.nasar, ev.correct, ev.total
    ));
    if matches == Some(false) {
        bail!(
            "accuracy {} differs from the {} recorded in the checkpoint",
            ev.accuracy,
            ck.accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Dims,
    Locations,
    All,
}

/// The attention-dimension combinations compared by `ablate`.
pub const COMBOS: [&str; 8] = ["none", "TA", "CA", "SA", "TCA", "TSA", "CSA", "TCSA"];

struct Cell {
    label: String,
    attention: AttentionConfig,
}

fn dims_grid() -> Result<Vec<Cell>> {
    COMBOS
        .iter()
        .map(|c| {
            Ok(Cell {
                label: c.to_string(),
                attention: AttentionConfig::from_combo(c)?,
            })
        })
        .collect()
}

fn locations_grid() -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for dim in Dimension::ALL {
        for loc in [Location::ConvPre, Location::ConvPost, Location::ActivatePre] {
            let mut a = AttentionConfig::none();
            if a.set(dim, Some(loc)).is_err() {
                continue;
            }
            cells.push(Cell {
                label: format!("{}@{}", dim.short(), loc),
                attention: a,
            });
        }
    }
    Ok(cells)
}

struct Outcome {
    accuracy: f64,
    nasar: f64,
    r_ee: f64,
}

struct Trained {
    accuracy: f64,
    nasar: f64,
    profile: FlopProfile,
}

fn train_and_profile(cfg: &RunConfig, attention: &AttentionConfig, data: &(Vec<Example>, Vec<Example>)) -> Result<Trained> {
    let mut model = build_model(cfg, attention)?;
    bptt_train(&mut *model, &data.0, &cfg.train, |_| {})?;
    let opts = cfg.train.eval_options(&*model);
    let ev = evaluate(&*model, &data.1, cfg.train.batch_size, opts)?;
    let (profile, _) = training::energy_profile(&*model, &data.1, cfg.train.batch_size, opts)?;
    Ok(Trained {
        accuracy: ev.accuracy,
        nasar: ev.nasar,
        profile,
    })
}

fn supported(cfg: &RunConfig, a: &AttentionConfig) -> bool {
    !(matches!(cfg.model, ModelConfig::Res(_)) && a.temporal.is_some())
}

pub fn ablate(ctx: &Ctx, grid: Grid) -> Result<()> {
    let mut grids: Vec<(&str, Vec<Cell>)> = Vec::new();
    if grid != Grid::Locations {
        grids.push(("dims", dims_grid()?));
    }
    if grid != Grid::Dims {
        grids.push(("locations", locations_grid()?));
    }
    let seeds = ctx.cfg.ablate.seeds.clone();
    let mut per_seed = String::from("grid,cell,seed,accuracy,nasar,r_ee\n");
    let mut results: Vec<Vec<Vec<Option<Outcome>>>> = grids.iter().map(|(_, cells)| cells.iter().map(|_| Vec::new()).collect()).collect();
    for &seed in &seeds {
        let cfg = ctx.cfg.reseeded(seed);
        let data = datasets(&cfg)?;
        let vanilla = train_and_profile(&cfg, &AttentionConfig::none(), &data)?;
        for (g, (gname, cells)) in grids.iter().enumerate() {
            for (c, cell) in cells.iter().enumerate() {
                let a = &cell.attention;
                if !supported(&cfg, a) {
                    results[g][c].push(None);
                    let _ = writeln!(per_seed, "{},{},{},unsupported,,", gname, cell.label, seed);
                    continue;
                }
                let run = if a.is_enabled() {
                    train_and_profile(&cfg, a, &data)?
                } else {
                    Trained {
                        accuracy: vanilla.accuracy,
                        nasar: vanilla.nasar,
                        profile: vanilla.profile.clone(),
                    }
                };
                let anchored = anchor_on_vanilla(&vanilla.profile, &run.profile);
                let (_, r_ee) = masnn::energy::delta_e_and_r_ee(&anchored, &cfg.energy)?;
                let _ = writeln!(
                    per_seed,
                    "{},{},{},{},{},{}",
                    gname, cell.label, seed, run.accuracy, run.nasar, r_ee
                );
                ctx.say(format!(
                    "seed {:<3} {:<10} {:<14} acc {:.3}  nasar {:.4}  r_ee {:.3}",
                    seed, gname, cell.label, run.accuracy, run.nasar, r_ee
                ));
                results[g][c].push(Some(Outcome {
                    accuracy: run.accuracy,
                    nasar: run.nasar,
                    r_ee,
                }));
            }
        }
    }
    ctx.write("ablate_runs.csv", per_seed)?;
    for (g, (gname, cells)) in grids.iter().enumerate() {
        let mut csv = String::from("cell,accuracy,nasar,r_ee,seeds\n");
        let mut table = format!("{:<14} {:>9} {:>9} {:>8}\n", gname, "accuracy", "nasar", "r_ee");
        for (c, cell) in cells.iter().enumerate() {
            let ok: Vec<&Outcome> = results[g][c].iter().flatten().collect();
            if ok.is_empty() {
                let _ = writeln!(csv, "{},unsupported,,,0", cell.label);
                let _ = writeln!(table, "{:<14} {:>9}", cell.label, "n/a");
                continue;
            }
            let n = ok.len() as f64;
            let mean = |f: fn(&Outcome) -> f64| ok.iter().map(|o| f(o)).sum::<f64>() / n;
            let (acc, nas, ree) = (mean(|o| o.accuracy), mean(|o| o.nasar), mean(|o| o.r_ee));
            let _ = writeln!(csv, "{},{},{},{},{}", cell.label, acc, nas, ree, ok.len());
            let _ = writeln!(table, "{:<14} {:>9.4} {:>9.4} {:>8.3}", cell.label, acc, nas, ree);
        }
        ctx.write(&format!("ablate_{}.csv", gname), csv)?;
        ctx.say(table);
    }
    Ok(())
}

pub fn profile_energy(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let (cfg, model) = match checkpoint {
        Some(p) => {
            let (cfg, model, _) = load_checkpoint(&p)?;
            (cfg, model)
        }
        None => (ctx.cfg.clone(), build_model(&ctx.cfg, &ctx.cfg.attention)?),
    };
    let (_, val_set) = datasets(&cfg)?;
    let opts = cfg.train.eval_options(&*model);
    let dense = count_flops(&model.describe()?)?;
    let (measured, spikes) = training::energy_profile(&*model, &val_set, cfg.train.batch_size, opts)?;
    let profile = if cfg.attention.is_enabled() {
        // Anchor: the same weights with the gates removed.
        let mut vanilla = build_model(&cfg, &AttentionConfig::none())?;
        copy_shared(&*model, &mut *vanilla);
        let (v, _) = training::energy_profile(&*vanilla, &val_set, cfg.train.batch_size, opts)?;
        anchor_on_vanilla(&v, &measured)
    } else {
        measured
    };
    let report = EnergyReport::build(profile, &spikes, &cfg.energy)?;
    let dense_report = EnergyReport::build(dense, &spikes, &cfg.energy)?;
    ctx.write("energy.csv", report.to_csv())?;
    ctx.write("energy.txt", report.to_table())?;
    ctx.write("energy_dense.csv", dense_report.to_csv())?;
    ctx.say(report.to_table());
    Ok(())
}

pub fn check_isometry(ctx: &Ctx) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.cfg.seed, "isometry"));
    let rows = isometry::run_suite(&ctx.cfg.isometry, &mut rng)?;
    ctx.write("isometry.csv", isometry::rows_to_csv(&rows))?;
    ctx.say(isometry::rows_to_table(&rows));
    let failed = rows.iter().filter(|r| !r.pass).count();
    ctx.say(format!("{} of {} checks within tolerance", rows.len() - failed, rows.len()));
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

pub fn visualize(ctx: &Ctx, checkpoint: Option<PathBuf>, layer: Option<String>, step: Option<usize>) -> Result<()> {
    let (cfg, model) = match checkpoint {
        Some(p) => {
            let (cfg, model, _) = load_checkpoint(&p)?;
            (cfg, model)
        }
        None => (ctx.cfg.clone(), build_model(&ctx.cfg, &ctx.cfg.attention)?),
    };
    let layer = layer.or_else(|| ctx.cfg.visualize.layer.clone());
    let step = step.or(ctx.cfg.visualize.step);
    let (_, val_set) = datasets(&cfg)?;
    let opts = cfg.train.eval_options(&*model);
    let maps = asrv_viz::average_spiking_response(&*model, &val_set, cfg.train.batch_size, opts)?;
    let selected: Vec<&AsrMap> = maps
        .iter()
        .filter(|m| layer.as_deref().is_none_or(|l| l == m.layer))
        .collect();
    if selected.is_empty() {
        let names: Vec<&str> = maps.iter().map(|m| m.layer.as_str()).collect();
        bail!("no layer {:?}; layers are {}", layer.unwrap_or_default(), names.join(", "));
    }
    let steps: Vec<usize> = match step {
        Some(t) if t >= cfg.data.steps => bail!("step {} outside 0..{}", t, cfg.data.steps),
        Some(t) => vec![t],
        None => (0..cfg.data.steps).collect(),
    };
    let mut csv = String::from("layer,step,mean_rate\n");
    for m in &selected {
        for &t in &steps {
            let tiles = asrv_viz::channel_tiles(&m.rate(t)?)?;
            let rel = format!("asrv/{}_t{:02}.ppm", file_stem(&m.layer), t);
            asrv_viz::emit_tiled(&tiles, asrv_viz::default_columns(tiles.len()), &ctx.artifact(&rel)?)?;
            let _ = writeln!(csv, "{},{},{}", m.layer, t, m.neuron_mean(t)?);
        }
    }
    ctx.write("asrv/rates.csv", csv)?;

    // Per-sample collapse of the first validation sample.
    let first = [&val_set[0].frames];
    let (pass, _) = run(&*model, &first, Binder::frozen(), opts, true)?;
    for l in &pass.spikes {
        if layer.as_deref().is_some_and(|name| name != l.name) || l.spikes.shape().len() != 4 {
            continue;
        }
        let map = asrv_viz::collapse_sample(&l.spikes)?;
        let rel = format!("asrv/sample0_{}.ppm", file_stem(&l.name));
        asrv_viz::emit_heatmap(&map, &ctx.artifact(&rel)?)?;
    }
    ctx.say(format!(
        "wrote {} rate maps under {}",
        selected.len() * steps.len(),
        ctx.cfg.out_dir.join("asrv").display()
    ));
    Ok(())
}
