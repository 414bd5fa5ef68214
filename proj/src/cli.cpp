#include "amoesim/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <thread>

#include "amoesim/metrics.hpp"
#include "amoesim/sim.hpp"

namespace amoesim {

namespace fs = std::filesystem;

namespace {

SimConfig prepare(const std::string& path, const std::vector<std::string>& overrides) {
  SimConfig cfg = load_config(path);
  for (const auto& o : overrides) apply_override(cfg, o);
  apply_env_overrides(cfg);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

std::vector<double> parse_rates(const std::string& text) {
  std::vector<double> rates;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t pos = 0;
    double r = 0;
    try {
      r = std::stod(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || !(r > 0)) throw ConfigError("--rates: bad rate '" + item + "'");
    rates.push_back(r);
  }
  if (rates.empty()) throw ConfigError("--rates: no rates given");
  return rates;
}

int cmd_simulate(const SimConfig& cfg, const fs::path& dir, std::ostream& out) {
  SimTrace trace = run(cfg);
  emit_csv(trace, dir);
  write_text(dir / "config.ini", dump_config(cfg));
  const auto stats = summarize(trace);
  out << summary_header() << '\n' << summary_row(stats) << '\n';
  return 0;
}

int cmd_sweep(const SimConfig& cfg, const std::vector<double>& rates, const fs::path& dir, unsigned threads,
              std::ostream& out) {
  const auto points = run_sweep(cfg, rates, dir, threads);
  std::ostringstream table;
  table << summary_header() << '\n';
  for (const auto& p : points) table << summary_row(p.stats) << '\n';
  write_text(dir / "sweep.csv", table.str());
  out << table.str();
  return 0;
}

int cmd_compare(const SimConfig& base, const fs::path& dir, std::ostream& out) {
  struct Variant {
    const char* name;
    SimMode mode;
    PolicyKind policy;
  };
  const Variant variants[] = {{"aep_defrag", SimMode::AEP, PolicyKind::Defrag},
                              {"aep_mtfs", SimMode::AEP, PolicyKind::MTFS},
                              {"aep_flfs", SimMode::AEP, PolicyKind::FLFS},
                              {"sync_ep", SimMode::SyncEP, base.policy.kind}};
  std::ostringstream table;
  table << "variant," << summary_header() << '\n';
  for (const auto& v : variants) {
    SimConfig cfg = base;
    cfg.mode = v.mode;
    cfg.policy.kind = v.policy;
    SimTrace trace = run(cfg);
    emit_csv(trace, dir / v.name);
    write_text(dir / v.name / "config.ini", dump_config(cfg));
    table << v.name << ',' << summary_row(summarize(trace)) << '\n';
  }
  write_text(dir / "compare.csv", table.str());
  out << table.str();
  return 0;
}

int cmd_audit(const fs::path& dir, std::ostream& out, std::ostream& err) {
  const SimTrace trace = load_trace(dir);
  const AuditReport report = drain_check(trace);
  const QueueDelayCheck delays = check_queue_delays(trace);
  for (const auto& v : report.violations) err << "violation: " << v << '\n';
  if (trace.drained) {
    for (const auto& m : delays.mismatches) err << "violation: queue delay " << m << '\n';
  }
  const bool ok = report.ok() && (!trace.drained || delays.consistent());
  out << (ok ? "audit ok" : "audit FAILED") << ": " << report.requests_checked << " requests, "
      << report.merges_checked << " merges, " << trace.executions.size() << " executions, "
      << report.violations.size() << " violation(s)\n";
  return ok ? 0 : 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"amoesim: discrete-event simulator for asynchronous expert-parallel MoE serving"};
  app.require_subcommand(1);

  std::string config;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::string rates_text;
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  std::string audit_dir;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config, "configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out_dir, "output directory")->required();
    sub->add_option("--set", overrides, "override, e.g. --set scheduler.policy=mtfs");
  };
  auto* simulate = app.add_subcommand("simulate", "run one simulation");
  add_common(simulate);
  auto* sweep = app.add_subcommand("sweep", "run one simulation per arrival rate");
  add_common(sweep);
  sweep->add_option("--rates", rates_text, "comma-separated request rates (req/s)")->required();
  sweep->add_option("--threads", threads, "concurrent simulations");
  auto* compare = app.add_subcommand("compare", "AEP with each scheduler against the synchronous baseline");
  add_common(compare);
  auto* audit = app.add_subcommand("audit", "check a stored trace for conservation and accounting violations");
  audit->add_option("dir", audit_dir, "directory written by simulate")->required()->check(CLI::ExistingDirectory);

  std::vector<std::string> rev(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*audit) return cmd_audit(audit_dir, out, err);
    const SimConfig cfg = prepare(config, overrides);
    if (*simulate) return cmd_simulate(cfg, out_dir, out);
    if (*sweep) return cmd_sweep(cfg, parse_rates(rates_text), out_dir, threads, out);
    if (*compare) return cmd_compare(cfg, out_dir, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DeadlockError& e) {
    err << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace amoesim
