// semtomo: simulate / project / invert / summarize / diagnose for layered
// SEM density tomography.  Exit codes: 0 ok, 1 usage, 2 bad config or data,
// 3 runtime failure.

#include <CLI11.hpp>

#include <semtomo/io.hpp>
#include <semtomo/sampler.hpp>
#include <semtomo/simulator.hpp>

#include <cstdlib>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace semtomo;

namespace {

std::string preset_names() {
  std::string out;
  for (const SimSpec& s : preset_scenarios()) {
    if (!out.empty()) out += ", ";
    out += s.name;
  }
  return out;
}

int cmd_list_presets() {
  for (const SimSpec& s : preset_scenarios()) {
    const Grid g = s.make_grid();
    const ResolutionRegime r = classify_regime(g);
    std::cout << s.name << ": " << g.n_side() << "x" << g.n_side() << " pointings, "
              << g.n_eng() << " energies, omega " << g.omega() << " um, regime "
              << regime_name(r.cls);
    if (r.cls == ResolutionClass::mixed) std::cout << " (k_in " << r.k_in << ")";
    std::cout << (s.sparse ? ", sparse" : ", dense") << ", noise fraction "
              << s.noise_fraction << ", seed " << s.seed << "\n";
  }
  return 0;
}

int cmd_simulate(const std::string& preset, std::optional<std::uint64_t> seed,
                 const fs::path& out) {
  SimSpec spec;
  bool found = false;
  for (const SimSpec& s : preset_scenarios())
    if (s.name == preset) {
      spec = s;
      found = true;
    }
  if (!found)
    throw config_error("unknown preset '" + preset + "' (available: " + preset_names() + ")");
  if (seed) spec.seed = *seed;
  spec.validate();

  const Grid g = spec.make_grid();
  const Projector proj(g);
  Rng rng(spec.seed);  // one stream: truth first, then noise
  const DensityField truth = gen_true_density(spec, g, rng);
  const KernelVector kern = gen_true_kernel(spec, g);
  const ImageStack stack = gen_images(proj, truth, kern, spec.noise(), rng);

  fs::create_directories(out);
  write_stack(out, g, stack, spec.material);
  write_truth(out / "truth.json", spec.name, spec.seed, truth, kern);

  const ResolutionRegime r = classify_regime(g);
  std::cout << "wrote " << (out / "manifest.json").string() << " (preset " << spec.name
            << ", seed " << spec.seed << ", regime " << regime_name(r.cls) << ", clamped "
            << stack.clamped << " of " << g.n_data() * g.n_eng() << " pixels)\n";
  return 0;
}

int cmd_project(const fs::path& data, const fs::path& field_path, const fs::path& kernel_path,
                const fs::path& out) {
  const LoadedStack loaded = load_stack(data, {}, /*decompose=*/false);
  const Grid g = loaded.make_grid();
  const Projector proj(g);
  const DensityField f = read_field_csv(field_path);
  const KernelVector kern = read_kernel_csv(kernel_path);
  proj.check(f, kern);
  const ProjectionMatrix c = proj.project_all(f, kern);

  fs::create_directories(out);
  for (int k = 1; k <= g.n_eng(); ++k)
    write_plane(out / ("projection_" + std::to_string(k) + ".csv"), c, k, g.n_side(),
                g.energy(k));
  atomic_write(out / "projection.csv", cell_table_csv(c, "c"));
  std::cout << "wrote " << g.n_eng() << " projection planes to " << out.string() << " (regime "
            << regime_name(proj.regime().cls) << ")\n";
  return 0;
}

std::string run_one_chain(const LoadedStack& loaded,
                          const std::optional<ResolutionRegime>& regime, const RunConfig& cfg,
                          const fs::path& dir, const std::optional<fs::path>& resume) {
  const Grid g = loaded.make_grid();
  Projector proj(g, regime);
  PosteriorEngine eng(proj, loaded.stack);
  const KernelContext ctx = make_kernel_context(g, cfg.sampler);
  ChainState st;

  fs::create_directories(dir);
  const fs::path trace_path = dir / "trace.csv";
  const fs::path ckpt_path = dir / "checkpoint.bin";
  const bool parametric = cfg.sampler.kernel_model == SamplerConfig::KernelModel::parametric;
  const TraceSchema schema{g.n_data(), g.n_eng(),
                           parametric || cfg.sampler.update_kernel_hypers};

  bool append = false;
  if (resume) {
    CheckpointData d = load_checkpoint(*resume);
    if (d.field.n_data != g.n_data() || d.field.n_eng != g.n_eng())
      throw data_error("checkpoint shape does not match the data grid");
    if (d.iteration >= cfg.sampler.n_max)
      throw config_error("checkpoint is already past n_max; nothing to resume");
    eng.set_state(d.field, d.kernel, ctx.log_prior(d.kernel, d.kpar), d.p);
    st.iteration = d.iteration;
    st.rng.deserialize(d.rng);
    st.seed_field = d.seed_field;
    st.accum = std::move(d.accum);
    st.kpar = d.kpar;
    st.field_props = d.field_props;
    st.field_accs = d.field_accs;
    st.kernel_props = d.kernel_props;
    st.kernel_accs = d.kernel_accs;
    st.hyper_props = d.hyper_props;
    st.hyper_accs = d.hyper_accs;
    st.p_props = d.p_props;
    st.p_accs = d.p_accs;
    st.max_audit_cell = d.max_audit_cell;
    st.max_audit_drift = d.max_audit_drift;
    truncate_trace(trace_path, st.iteration);
    append = true;
  } else {
    seed_state(eng, st, ctx, cfg.sampler);
  }

  TraceWriter writer(trace_path, schema, append);
  const long ckpt_iv = cfg.effective_checkpoint_interval();
  run_chain(eng, st, ctx, cfg.sampler,
            [&](const PosteriorEngine& e, const ChainState& s) {
              writer.write_row(e, s);
              if (s.iteration % ckpt_iv == 0) save_checkpoint(ckpt_path, e, s);
            });
  save_checkpoint(ckpt_path, eng, st);

  const Trace tr = read_trace(trace_path);
  const double scale =
      cfg.physical_surface > 0.0 ? cfg.physical_surface / cfg.sampler.kernel_surface : 1.0;
  atomic_write(dir / "summary.csv",
               summary_csv_from_trace(tr, cfg.sampler.burn_in, cfg.hpd_mass, scale));

  const auto rate = [](long accs, long props) {
    return props > 0 ? static_cast<double>(accs) / static_cast<double>(props) : 0.0;
  };
  const PosteriorParts parts = eng.parts();
  ordered_json rep{
      {"regime", regime_name(proj.regime().cls)},
      {"k_in", proj.regime().k_in},
      {"n_data", g.n_data()},
      {"n_eng", g.n_eng()},
      {"iterations", st.iteration},
      {"burn_in", cfg.sampler.burn_in},
      {"thin", cfg.sampler.thin},
      {"seed", cfg.sampler.seed},
      {"kernel_model", parametric ? "parametric" : "free"},
      {"proposals",
       {{"field", st.field_props},
        {"kernel", st.kernel_props},
        {"kernel_hypers", st.hyper_props},
        {"p", st.p_props}}},
      {"acceptance",
       {{"field", rate(st.field_accs, st.field_props)},
        {"kernel", rate(st.kernel_accs, st.kernel_props)},
        {"kernel_hypers", rate(st.hyper_accs, st.hyper_props)},
        {"p", rate(st.p_accs, st.p_props)}}},
      {"clamped_pixels", loaded.stack.clamped},
      {"baseline_removed", eng.stack().baseline_removed},
      {"baseline", eng.stack().baseline},
      {"max_audit_cell", st.max_audit_cell},
      {"max_audit_drift", st.max_audit_drift},
      {"log_posterior", parts.total()},
      {"log_likelihood", parts.log_likelihood},
      {"log_field_prior", parts.log_field_prior},
      {"log_kernel_prior", parts.log_kernel_prior},
      {"p", eng.p()},
  };
  atomic_write(dir / "report.json", rep.dump(2) + "\n");

  std::ostringstream line;
  line << dir.string() << ": " << st.iteration << " sweeps, acceptance field "
       << rate(st.field_accs, st.field_props) << " kernel "
       << rate(st.kernel_accs, st.kernel_props) << " p " << rate(st.p_accs, st.p_props)
       << ", log posterior " << parts.total();
  return line.str();
}

unsigned thread_cap() {
  unsigned cap = std::thread::hardware_concurrency();
  if (cap == 0) cap = 1;
  if (const char* env = std::getenv("SEMTOMO_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw config_error("SEMTOMO_THREADS must be a positive integer");
    cap = static_cast<unsigned>(v);
  }
  return cap;
}

int cmd_invert(const fs::path& data, const fs::path& config, const fs::path& out,
               std::optional<fs::path> resume, int chains) {
  // config validation runs before any data is touched
  const RunConfig cfg = load_run_config(config);
  if (chains < 1) throw config_error("--chains must be at least 1");
  if (resume && chains != 1) throw config_error("--resume works with a single chain");

  const LoadedStack loaded = load_stack(data, cfg.noise, cfg.decompose);
  const Grid g = loaded.make_grid();
  const std::optional<ResolutionRegime> regime = resolve_regime(cfg.regime, g);

  if (chains == 1) {
    std::cout << run_one_chain(loaded, regime, cfg, out, resume) << "\n";
    return 0;
  }

  const unsigned cap = thread_cap();
  std::vector<std::string> lines(static_cast<std::size_t>(chains));
  std::vector<std::exception_ptr> errs(static_cast<std::size_t>(chains));
  for (int base = 0; base < chains; base += static_cast<int>(cap)) {
    std::vector<std::thread> pool;
    const int stop = std::min(chains, base + static_cast<int>(cap));
    for (int c = base; c < stop; ++c)
      pool.emplace_back([&, c] {
        try {
          RunConfig cc = cfg;
          cc.sampler.seed = cfg.sampler.seed + static_cast<std::uint64_t>(c);
          lines[static_cast<std::size_t>(c)] = run_one_chain(
              loaded, regime, cc, out / ("chain_" + std::to_string(c)), std::nullopt);
        } catch (...) {
          errs[static_cast<std::size_t>(c)] = std::current_exception();
        }
      });
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errs)
    if (e) std::rethrow_exception(e);
  for (const std::string& l : lines) std::cout << l << "\n";
  return 0;
}

int cmd_summarize(const fs::path& trace, const fs::path& config, const fs::path& out) {
  const RunConfig cfg = load_run_config(config);
  const Trace tr = read_trace(trace);
  const double scale =
      cfg.physical_surface > 0.0 ? cfg.physical_surface / cfg.sampler.kernel_surface : 1.0;
  fs::create_directories(out);
  atomic_write(out / "summary.csv",
               summary_csv_from_trace(tr, cfg.sampler.burn_in, cfg.hpd_mass, scale));
  std::cout << "wrote " << (out / "summary.csv").string() << "\n";
  return 0;
}

int cmd_diagnose(const fs::path& trace, const fs::path& out, long burn_in, double threshold) {
  if (!(threshold > 0.0)) throw config_error("--threshold must be positive");
  const Trace tr = read_trace(trace);
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < tr.rows.size(); ++r)
    if (tr.step(r) > burn_in) keep.push_back(r);
  const std::size_t n = keep.size();
  if (n < 6) throw data_error("diagnose: need at least 6 post-burn-in trace rows");

  // middle third against final third; a settled chain gives a small distance
  const std::size_t third = n / 3;
  std::ostringstream diag;
  diag << "parameter,ks,below_threshold\n";
  double worst = 0.0;
  std::string worst_name = "-";
  for (std::size_t c = 1; c < tr.columns.size(); ++c) {
    std::vector<double> mid, tail;
    for (std::size_t r = third; r < 2 * third; ++r) mid.push_back(tr.rows[keep[r]][c]);
    for (std::size_t r = n - third; r < n; ++r) tail.push_back(tr.rows[keep[r]][c]);
    const double ks = ks_statistic(mid, tail);
    diag << tr.columns[c] << ',' << format_g17(ks) << ',' << (ks < threshold ? 1 : 0) << '\n';
    if (ks > worst) {
      worst = ks;
      worst_name = tr.columns[c];
    }
  }

  std::ostringstream run;
  run << "step";
  for (std::size_t c = 1; c < tr.columns.size(); ++c) run << ',' << tr.columns[c];
  run << '\n';
  std::vector<double> sums(tr.columns.size(), 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    run << tr.step(keep[r]);
    for (std::size_t c = 1; c < tr.columns.size(); ++c) {
      sums[c] += tr.rows[keep[r]][c];
      run << ',' << format_g17(sums[c] / static_cast<double>(r + 1));
    }
    run << '\n';
  }

  fs::create_directories(out);
  atomic_write(out / "diagnose.csv", diag.str());
  atomic_write(out / "running_means.csv", run.str());
  std::cout << "worst segment distance " << worst << " (" << worst_name << "), threshold "
            << threshold << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"layered-material density tomography from multi-energy SEM stacks"};
  app.require_subcommand(1);

  std::string preset;
  std::uint64_t seed = 0;
  std::string sim_out = ".";
  bool list_presets = false;
  CLI::App* sim = app.add_subcommand("simulate", "generate a synthetic image stack");
  sim->add_option("--preset", preset, "scenario name");
  CLI::Option* seed_opt = sim->add_option("--seed", seed, "override the preset seed");
  sim->add_option("--out", sim_out, "output directory");
  sim->add_flag("--list-presets", list_presets, "list scenarios and exit");

  std::string prj_data, prj_field, prj_kernel, prj_out = ".";
  CLI::App* prj = app.add_subcommand("project", "forward-project a field through a kernel");
  prj->add_option("--data", prj_data, "stack manifest (grid definition)")->required();
  prj->add_option("--field", prj_field, "density field CSV")->required();
  prj->add_option("--kernel", prj_kernel, "kernel CSV")->required();
  prj->add_option("--out", prj_out, "output directory");

  std::string inv_data, inv_config, inv_out = ".", inv_resume;
  int inv_chains = 1;
  CLI::App* inv = app.add_subcommand("invert", "sample the posterior for a measured stack");
  inv->add_option("--data", inv_data, "stack manifest")->required();
  inv->add_option("--config", inv_config, "run configuration JSON")->required();
  inv->add_option("--out", inv_out, "output directory");
  inv->add_option("--resume", inv_resume, "continue from a checkpoint");
  inv->add_option("--chains", inv_chains, "independent chains (seeds base+0..n-1)");

  std::string sum_trace, sum_config, sum_out = ".";
  CLI::App* sum = app.add_subcommand("summarize", "recompute summaries from a stored trace");
  sum->add_option("--trace", sum_trace, "trace CSV")->required();
  sum->add_option("--config", sum_config, "run configuration JSON")->required();
  sum->add_option("--out", sum_out, "output directory");

  std::string dia_trace, dia_out = ".";
  long dia_burn = 0;
  double dia_threshold = 0.2;
  CLI::App* dia = app.add_subcommand("diagnose", "stationarity checks on a stored trace");
  dia->add_option("--trace", dia_trace, "trace CSV")->required();
  dia->add_option("--out", dia_out, "output directory");
  dia->add_option("--burn-in", dia_burn, "drop rows at or below this step");
  dia->add_option("--threshold", dia_threshold, "segment distance flag level");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*sim) {
      if (list_presets) return cmd_list_presets();
      if (preset.empty())
        throw config_error("simulate: --preset is required (available: " + preset_names() +
                           ")");
      return cmd_simulate(preset,
                          seed_opt->count() ? std::optional<std::uint64_t>(seed) : std::nullopt,
                          sim_out);
    }
    if (*prj) return cmd_project(prj_data, prj_field, prj_kernel, prj_out);
    if (*inv)
      return cmd_invert(inv_data, inv_config, inv_out,
                        inv_resume.empty() ? std::nullopt
                                           : std::optional<fs::path>(inv_resume),
                        inv_chains);
    if (*sum) return cmd_summarize(sum_trace, sum_config, sum_out);
    if (*dia) return cmd_diagnose(dia_trace, dia_out, dia_burn, dia_threshold);
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const data_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
