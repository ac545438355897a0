use std::path::{Path, PathBuf};

use meshmoe::dynamic::{dynamic_simulate, DynamicOptions, DynamicPolicy};
use meshmoe::netsim::{build_tasks, simulate};
use meshmoe::pipeline::{calibrate, compare, evaluate, fan_out_seed, plan, PlanConfig};
use meshmoe::planner::SolveReport;
use meshmoe::stats::DEFAULT_GROUP_CAP;
use meshmoe::trace::{generate_trace, load_trace, save_trace, TraceGenConfig};
use meshmoe::{
    derive_stats, validate_placement, ActivationTrace, HardwareProfile, MeshSpec, NodeMapping,
    Placement, Strategy,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{
    CalibrateArgs, Cli, Command, CompareArgs, DynamicArgs, GammaArgs, GenTraceArgs, PlanArgs,
    ReportArgs, SimulateArgs, Switch,
};
use crate::run::{
    link_rows, parse_gamma, resolve_mesh, resolve_model, sibling, write_csv, write_json, CliError,
    CliResult, CompareCell, GammaConfig, Heatmap, ModelConfig, RunConfig, RunOutput,
};

struct Context {
    seed: u64,
    threads: Option<usize>,
    out_dir: PathBuf,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn config(&self, command: &str) -> RunConfig {
        RunConfig::new(command, self.seed, self.threads)
    }
}

/// Runs one subcommand and returns a summary for stdout.
pub fn run(cli: Cli) -> CliResult<Value> {
    let ctx = Context {
        seed: cli.seed,
        threads: cli.threads,
        out_dir: cli.out_dir,
    };
    let config = match cli.command {
        Command::GenTrace(a) => gen_trace(&ctx, a)?,
        Command::Calibrate(a) => calibrate_cmd(&ctx, a)?,
        Command::Plan(a) => plan_cmd(&ctx, a)?,
        Command::Simulate(a) => simulate_cmd(&ctx, a)?,
        Command::DynamicSim(a) => dynamic_cmd(&ctx, a)?,
        Command::Compare(a) => compare_cmd(&ctx, a)?,
        Command::Report(a) => report_cmd(&ctx, a)?,
    };
    Ok(json!({ "command": config.command, "outputs": config.outputs }))
}

/// Loads a trace and a model whose expert counts agree with it. The
/// model's layer count is taken from the trace.
fn load_inputs(
    trace_path: &Path,
    model_arg: &str,
    config: &mut RunConfig,
) -> CliResult<(ActivationTrace, ModelConfig)> {
    let trace = load_trace(trace_path).map_err(|e| CliError::input(trace_path, e))?;
    let mut model = resolve_model(model_arg)?;
    if trace.num_experts != model.spec.num_experts
        || trace.experts_per_token != model.spec.experts_per_token
    {
        return Err(CliError::Usage(format!(
            "trace has E={}, e={} but model `{}` has E={}, e={}",
            trace.num_experts,
            trace.experts_per_token,
            model.source,
            model.spec.num_experts,
            model.spec.experts_per_token
        )));
    }
    model.spec.num_layers = trace.num_layers();
    config.input("trace", trace_path);
    config.model = Some(model.clone());
    config.batch = Some(trace.batch_size());
    Ok((trace, model))
}

fn resolve_gamma(
    args: &GammaArgs,
    trace: &ActivationTrace,
    model: &ModelConfig,
    mesh: &MeshSpec,
    seed: u64,
) -> CliResult<GammaConfig> {
    Ok(match parse_gamma(&args.gamma)? {
        Some(value) => GammaConfig {
            mode: "fixed".into(),
            value,
            fit: None,
        },
        None => {
            let cal = calibrate(
                trace,
                &model.spec,
                mesh,
                args.calibration_samples,
                fan_out_seed(seed, "calibration"),
            )?;
            GammaConfig {
                mode: "auto".into(),
                value: cal.fit.gamma,
                fit: Some(cal.fit),
            }
        }
    })
}

fn load_placement(
    path: &Path,
    mapping: Option<&Path>,
    model: &ModelConfig,
    mesh: &MeshSpec,
    config: &mut RunConfig,
) -> CliResult<(Placement, NodeMapping)> {
    let placement = Placement::load(path).map_err(|e| CliError::input(path, e))?;
    let violations = validate_placement(&placement, &model.spec, mesh)?;
    if let Some(v) = violations.first() {
        return Err(CliError::Usage(format!(
            "{}: {} placement violations, first: {:?}",
            path.display(),
            violations.len(),
            v
        )));
    }
    config.input("placement", path);
    config.strategy = Some(placement.strategy);
    let mapping = match mapping {
        Some(m) => {
            config.input("mapping", m);
            NodeMapping::load(m).map_err(|e| CliError::input(m, e))?
        }
        None => NodeMapping::identity(mesh.num_nodes()),
    };
    if mapping.len() != mesh.num_nodes() {
        return Err(CliError::Usage(format!(
            "mapping covers {} nodes but the mesh has {}",
            mapping.len(),
            mesh.num_nodes()
        )));
    }
    Ok((placement, mapping))
}

fn gen_trace(ctx: &Context, a: GenTraceArgs) -> CliResult<RunConfig> {
    let mut config = ctx.config("gen-trace");
    let mut model = resolve_model(&a.model.model)?;
    if let Some(layers) = a.layers {
        model.spec.num_layers = layers;
        model.spec.validate()?;
    }
    let mut gen = TraceGenConfig::new(
        model.spec,
        a.batch,
        a.iters,
        fan_out_seed(ctx.seed, "trace"),
    );
    gen.skew = a.skew;
    gen.affinity_strength = a.affinity;
    gen.layer_locality = a.locality;
    gen.drift = a.drift;
    let trace = generate_trace(&gen)?;
    let path = ctx.path(&a.output);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_trace(&trace, &path)?;
    let record = sibling(&path, ".run", "json");
    config.model = Some(model);
    config.batch = Some(a.batch);
    config.param("generator", gen);
    config.output("trace", &path);
    config.output("run", &record);
    write_json(&record, &json!({ "kind": "trace", "config": config }))?;
    Ok(config)
}

#[derive(Serialize)]
struct ScatterRow<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<&'a str>,
    layer: usize,
    iteration: usize,
    tokens: usize,
    estimate_s: f64,
    simulated_s: f64,
    fitted_s: f64,
}

fn scatter_rows<'a>(
    cal: &'a meshmoe::pipeline::Calibration,
    source: Option<&'a str>,
) -> impl Iterator<Item = ScatterRow<'a>> + 'a {
    cal.samples.iter().map(move |s| ScatterRow {
        source,
        layer: s.layer,
        iteration: s.iteration,
        tokens: s.tokens,
        estimate_s: s.estimate_s,
        simulated_s: s.simulated_s,
        fitted_s: cal.fit.gamma * s.estimate_s,
    })
}

fn calibrate_cmd(ctx: &Context, a: CalibrateArgs) -> CliResult<RunConfig> {
    let mut config = ctx.config("calibrate");
    let (trace, model) = load_inputs(&a.trace, &a.model.model, &mut config)?;
    let mesh = resolve_mesh(&a.mesh.mesh, &a.mesh.hw)?;
    let calibration = calibrate(
        &trace,
        &model.spec,
        &mesh,
        a.samples,
        fan_out_seed(ctx.seed, "calibration"),
    )?;
    let (path, csv) = (
        ctx.path(&a.output),
        ctx.path(&sibling(&a.output, "", "csv")),
    );
    config.mesh = Some(mesh);
    config.gamma = Some(GammaConfig {
        mode: "auto".into(),
        value: calibration.fit.gamma,
        fit: Some(calibration.fit),
    });
    config.param("samples", a.samples);
    config.output("report", &path);
    config.output("samples_csv", &csv);
    write_csv(&csv, scatter_rows(&calibration, None))?;
    write_json(
        &path,
        &RunOutput::Calibration {
            config: config.clone(),
            calibration,
        },
    )?;
    Ok(config)
}

#[derive(Serialize)]
struct MappingSummary {
    mapping: Vec<usize>,
    mean_makespan_s: f64,
    identity_makespan_s: f64,
    evaluations: usize,
    exhaustive: bool,
}

#[derive(Serialize)]
struct PlanRecord<'a> {
    kind: &'static str,
    config: &'a RunConfig,
    solve_reports: &'a [SolveReport],
    mapping_search: Option<MappingSummary>,
}

fn plan_cmd(ctx: &Context, a: PlanArgs) -> CliResult<RunConfig> {
    let mut config = ctx.config("plan");
    let (trace, model) = load_inputs(&a.trace, &a.model.model, &mut config)?;
    let mesh = resolve_mesh(&a.mesh.mesh, &a.mesh.hw)?;
    let strategy = Strategy::from(a.strategy);
    let needs_gamma = matches!(strategy, Strategy::NodeBalance | Strategy::NodeLinkBalance);
    let gamma = if needs_gamma {
        Some(resolve_gamma(&a.gamma, &trace, &model, &mesh, ctx.seed)?)
    } else {
        None
    };
    let stats = derive_stats(&trace, DEFAULT_GROUP_CAP)?;
    let mut pc = PlanConfig::new(
        strategy,
        gamma.as_ref().map_or(1.0, |g| g.value),
        fan_out_seed(ctx.seed, "plan"),
    );
    pc.num_regions = a.regions;
    pc.mapping_budget = a.mapping_budget;
    let out = plan(&stats, trace.batch_size(), &model.spec, &mesh, &pc)?;

    let (path, mapping_path) = (ctx.path(&a.output), ctx.path(&a.mapping_output));
    let record_path = sibling(&path, "_plan", "json");
    config.mesh = Some(mesh);
    config.strategy = Some(strategy);
    config.gamma = gamma;
    config.param("regions", a.regions);
    config.param("mapping_budget", a.mapping_budget);
    config.output("placement", &path);
    config.output("mapping", &mapping_path);
    config.output("plan", &record_path);
    for p in [&path, &mapping_path] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
    }
    out.placement.save(&path)?;
    out.mapping.save(&mesh, &mapping_path)?;
    let mapping_search = out.mapping_result.as_ref().map(|r| MappingSummary {
        mapping: r.mapping.perm.clone(),
        mean_makespan_s: r.mean_makespan_s,
        identity_makespan_s: r.identity_makespan_s,
        evaluations: r.evaluations,
        exhaustive: r.exhaustive,
    });
    let record = PlanRecord {
        kind: "plan",
        config: &config,
        solve_reports: &out.solve_reports,
        mapping_search,
    };
    write_json(&record_path, &record)?;
    Ok(config)
}

fn simulate_cmd(ctx: &Context, a: SimulateArgs) -> CliResult<RunConfig> {
    let mut config = ctx.config("simulate");
    let (trace, model) = load_inputs(&a.trace, &a.model.model, &mut config)?;
    let mesh = resolve_mesh(&a.mesh.mesh, &a.mesh.hw)?;
    let (placement, mapping) = load_placement(
        &a.placement,
        a.mapping.as_deref(),
        &model,
        &mesh,
        &mut config,
    )?;
    if a.layer >= trace.num_layers() || a.iteration >= trace.iterations.len() {
        return Err(CliError::Usage(format!(
            "heatmap layer {} / iteration {} outside the trace ({} layers, {} iterations)",
            a.layer,
            a.iteration,
            trace.num_layers(),
            trace.iterations.len()
        )));
    }
    if a.chunk_bytes == 0 {
        return Err(CliError::Usage("chunk size must be positive".into()));
    }
    let gamma = resolve_gamma(&a.gamma, &trace, &model, &mesh, ctx.seed)?;
    let stats = derive_stats(&trace, DEFAULT_GROUP_CAP)?;
    let evaluation = evaluate(
        &placement,
        &mapping,
        &trace,
        &stats,
        &model.spec,
        &mesh,
        gamma.value,
        fan_out_seed(ctx.seed, "evaluate"),
    )?;
    let tasks = build_tasks(
        &trace.iterations[a.iteration].layers[a.layer],
        &placement.layers[a.layer],
        &mapping,
        &model.spec,
        fan_out_seed(ctx.seed, "heatmap"),
    )?;
    let sim = simulate(&tasks, &mesh, a.chunk_bytes);
    let heatmap = Heatmap {
        layer: a.layer,
        iteration: a.iteration,
        makespan_s: sim.makespan_s,
        per_node_sent_bytes: sim.per_node_sent_bytes.clone(),
        per_node_received_bytes: sim.per_node_received_bytes.clone(),
        links: link_rows(&mesh, &sim.per_link_busy_s, sim.makespan_s),
    };

    let (path, csv) = (
        ctx.path(&a.output),
        ctx.path(&sibling(&a.output, "_heatmap", "csv")),
    );
    config.mesh = Some(mesh);
    config.gamma = Some(gamma);
    config.param("heatmap_layer", a.layer);
    config.param("heatmap_iteration", a.iteration);
    config.param("chunk_bytes", a.chunk_bytes);
    config.output("report", &path);
    config.output("heatmap_csv", &csv);
    write_csv(&csv, &heatmap.links)?;
    write_json(
        &path,
        &RunOutput::Simulation {
            config: config.clone(),
            evaluation: Box::new(evaluation),
            heatmap,
        },
    )?;
    Ok(config)
}

#[derive(Serialize)]
struct PairRow<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<&'a str>,
    iteration: usize,
    layer: usize,
    budget_k: usize,
    broadcasts: usize,
    t_pre_b_s: f64,
    static_latency_s: f64,
    dynamic_latency_s: f64,
    static_simulated_comm_s: Option<f64>,
    dynamic_simulated_comm_s: Option<f64>,
}

fn pair_rows<'a>(
    report: &'a meshmoe::dynamic::DynamicReport,
    source: Option<&'a str>,
) -> impl Iterator<Item = PairRow<'a>> + 'a {
    report.steps.iter().map(move |s| PairRow {
        source,
        iteration: s.iteration,
        layer: s.layer,
        budget_k: s.budget_k,
        broadcasts: s.broadcasts.len(),
        t_pre_b_s: s.t_pre_b_s,
        static_latency_s: s.static_latency.latency_s,
        dynamic_latency_s: s.dynamic_latency.latency_s,
        static_simulated_comm_s: s.static_simulated_comm_s,
        dynamic_simulated_comm_s: s.dynamic_simulated_comm_s,
    })
}

fn dynamic_cmd(ctx: &Context, a: DynamicArgs) -> CliResult<RunConfig> {
    let mut config = ctx.config("dynamic-sim");
    let (trace, model) = load_inputs(&a.trace, &a.model.model, &mut config)?;
    let mesh = resolve_mesh(&a.mesh.mesh, &a.mesh.hw)?;
    let (placement, mapping) = load_placement(
        &a.placement,
        a.mapping.as_deref(),
        &model,
        &mesh,
        &mut config,
    )?;
    let gamma = resolve_gamma(&a.gamma, &trace, &model, &mesh, ctx.seed)?;
    let mut policy = DynamicPolicy::from_hardware(&mesh, &model.spec, a.accuracy);
    policy.enabled = a.enable_dynamic == Switch::On;
    policy.max_broadcasts = a.max_broadcasts;
    policy.dispatch = a.dispatch.into();
    let options = DynamicOptions {
        simulate_traffic: a.simulate_traffic,
        seed: fan_out_seed(ctx.seed, "dynamic"),
    };
    let report = dynamic_simulate(
        &trace,
        &placement,
        &mapping,
        &policy,
        &model.spec,
        &mesh,
        gamma.value,
        &options,
    )?;

    let (path, csv) = (
        ctx.path(&a.output),
        ctx.path(&sibling(&a.output, "_pairs", "csv")),
    );
    config.mesh = Some(mesh);
    config.gamma = Some(gamma);
    config.param("policy", &policy);
    config.param("simulate_traffic", a.simulate_traffic);
    config.output("report", &path);
    config.output("pairs_csv", &csv);
    write_csv(&csv, pair_rows(&report, None))?;
    write_json(
        &path,
        &RunOutput::Dynamic {
            config: config.clone(),
            report,
        },
    )?;
    Ok(config)
}

#[derive(Serialize)]
struct TbtRow<'a> {
    hardware: &'a str,
    strategy: String,
    normalized_tbt: f64,
    normalized_tbt_simulated: f64,
    modeled_latency_s: f64,
    simulated_latency_s: f64,
}

#[derive(Serialize)]
struct DecomposedRow<'a> {
    hardware: &'a str,
    strategy: String,
    t_comp_s: f64,
    t_comm_model_s: f64,
    t_comm_sim_s: f64,
}

fn compare_cmd(ctx: &Context, a: CompareArgs) -> CliResult<RunConfig> {
    let mut config = ctx.config("compare");
    if a.strategies.len() < 2 {
        return Err(CliError::Usage(
            "compare needs at least two strategies".into(),
        ));
    }
    let (trace, model) = load_inputs(&a.trace, &a.model.model, &mut config)?;
    let strategies: Vec<Strategy> = a.strategies.iter().map(|&s| s.into()).collect();
    let meshes =
        a.hw.iter()
            .map(|hw| resolve_mesh(&a.mesh, hw))
            .collect::<CliResult<Vec<_>>>()?;
    let cells =
        a.hw.par_iter()
            .zip(&meshes)
            .map(|(hw, mesh)| -> CliResult<CompareCell> {
                let gamma = resolve_gamma(&a.gamma, &trace, &model, mesh, ctx.seed)?;
                let cmp = compare(
                    &trace,
                    &model.spec,
                    mesh,
                    &strategies,
                    gamma.value,
                    fan_out_seed(ctx.seed, "compare"),
                )?;
                let profile = HardwareProfile::new(
                    mesh.node_compute_flops,
                    mesh.link_bandwidth_bps,
                    mesh.per_hop_latency_s,
                );
                Ok(CompareCell {
                    hardware: hw.clone(),
                    profile,
                    gamma,
                    rows: cmp.rows,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;

    let path = ctx.path(&a.output);
    let tbt = ctx.path(&sibling(&a.output, "_tbt", "csv"));
    let decomposed = ctx.path(&sibling(&a.output, "_decomposed", "csv"));
    config.mesh = meshes.first().copied();
    config.param("hardware", &a.hw);
    config.param("strategies", &strategies);
    config.param("gamma", &a.gamma.gamma);
    config.param("calibration_samples", a.gamma.calibration_samples);
    config.output("report", &path);
    config.output("tbt_csv", &tbt);
    config.output("decomposed_csv", &decomposed);
    write_csv(
        &tbt,
        cells.iter().flat_map(|c| {
            c.rows.iter().map(|r| TbtRow {
                hardware: &c.hardware,
                strategy: r.strategy.to_string(),
                normalized_tbt: r.normalized_tbt,
                normalized_tbt_simulated: r.normalized_tbt_simulated,
                modeled_latency_s: r.modeled_latency_s,
                simulated_latency_s: r.simulated_latency_s,
            })
        }),
    )?;
    write_csv(
        &decomposed,
        cells.iter().flat_map(|c| {
            c.rows.iter().map(|r| DecomposedRow {
                hardware: &c.hardware,
                strategy: r.strategy.to_string(),
                t_comp_s: r.t_comp_s,
                t_comm_model_s: r.t_comm_model_s,
                t_comm_sim_s: r.t_comm_sim_s,
            })
        }),
    )?;
    write_json(
        &path,
        &RunOutput::Compare {
            config: config.clone(),
            cells,
        },
    )?;
    Ok(config)
}

#[derive(Serialize)]
struct SpeedupRow<'a> {
    source: &'a str,
    hardware: &'a str,
    strategy: String,
    normalized_tbt: f64,
    speedup_over_tp: f64,
    simulated_speedup_over_tp: f64,
}

#[derive(Serialize)]
struct NodeLoadRow<'a> {
    source: &'a str,
    layer: usize,
    node: usize,
    x: usize,
    y: usize,
    compute_s: f64,
}

#[derive(Serialize)]
struct HeatmapRow<'a> {
    source: &'a str,
    node: usize,
    x: usize,
    y: usize,
    direction: &'a str,
    present: u8,
    busy_s: f64,
    utilization: f64,
}

fn report_cmd(ctx: &Context, a: ReportArgs) -> CliResult<RunConfig> {
    let mut config = ctx.config("report");
    if a.inputs.is_empty() {
        return Err(CliError::Usage("report needs at least one input".into()));
    }
    let missing: Vec<String> = a
        .inputs
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingInputs(missing));
    }
    let mut outputs = Vec::new();
    for (k, p) in a.inputs.iter().enumerate() {
        let bytes = std::fs::read(p).map_err(|e| CliError::input(p, e))?;
        let parsed: RunOutput =
            serde_json::from_slice(&bytes).map_err(|e| CliError::input(p, e))?;
        config.input(&format!("input{k}"), p);
        outputs.push((p.display().to_string(), parsed));
    }

    let (mut scatter, mut speedup, mut loads, mut heat, mut pairs) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (source, out) in &outputs {
        let source = source.as_str();
        match out {
            RunOutput::Calibration { calibration, .. } => {
                scatter.extend(scatter_rows(calibration, Some(source)));
            }
            RunOutput::Compare { cells, .. } => {
                for c in cells {
                    speedup.extend(c.rows.iter().map(|r| SpeedupRow {
                        source,
                        hardware: &c.hardware,
                        strategy: r.strategy.to_string(),
                        normalized_tbt: r.normalized_tbt,
                        speedup_over_tp: 1.0 / r.normalized_tbt,
                        simulated_speedup_over_tp: 1.0 / r.normalized_tbt_simulated,
                    }));
                }
            }
            RunOutput::Simulation {
                config: run,
                evaluation,
                heatmap,
            } => {
                let mesh = run.mesh.ok_or_else(|| {
                    CliError::Usage(format!("{source}: simulation without a mesh"))
                })?;
                for l in &evaluation.layers {
                    loads.extend(l.per_node_compute_s.iter().enumerate().map(
                        |(node, &compute_s)| {
                            let (x, y) = mesh.coord(node);
                            NodeLoadRow {
                                source,
                                layer: l.layer,
                                node,
                                x,
                                y,
                                compute_s,
                            }
                        },
                    ));
                }
                heat.extend(heatmap.links.iter().map(|r| HeatmapRow {
                    source,
                    node: r.node,
                    x: r.x,
                    y: r.y,
                    direction: &r.direction,
                    present: r.present,
                    busy_s: r.busy_s,
                    utilization: r.utilization,
                }));
            }
            RunOutput::Dynamic { report, .. } => {
                pairs.extend(pair_rows(report, Some(source)));
            }
        }
    }

    let mut emit =
        |name: &str, write: &dyn Fn(&Path) -> CliResult<()>, present: bool| -> CliResult<()> {
            if present {
                let path = ctx.path(Path::new(name));
                write(&path)?;
                config.output(name.trim_end_matches(".csv"), &path);
            }
            Ok(())
        };
    emit(
        "gamma_scatter.csv",
        &|p| write_csv(p, &scatter),
        !scatter.is_empty(),
    )?;
    emit(
        "speedup.csv",
        &|p| write_csv(p, &speedup),
        !speedup.is_empty(),
    )?;
    emit(
        "node_loads.csv",
        &|p| write_csv(p, &loads),
        !loads.is_empty(),
    )?;
    emit(
        "link_heatmap.csv",
        &|p| write_csv(p, &heat),
        !heat.is_empty(),
    )?;
    emit(
        "static_dynamic.csv",
        &|p| write_csv(p, &pairs),
        !pairs.is_empty(),
    )?;
    let path = ctx.path(Path::new("report.json"));
    config.output("report", &path);
    write_json(&path, &json!({ "kind": "report", "config": config }))?;
    Ok(config)
}
