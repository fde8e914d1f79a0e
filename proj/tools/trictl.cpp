// trictl: command-line front end for the triangulation pipeline.

#include "tri/error.hpp"
#include "tri/harness.hpp"
#include "tri/serialize.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace tri;

namespace {

enum Exit { kOk = 0, kConfig = 2, kStage = 3, kReplay = 4 };

struct Common {
  std::string scenario;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int workers = 1;
  std::string out = "out";
  std::string format = "json";
  std::string manifest;
};

Scenario resolve_scenario(const Common& c) {
  Scenario s = c.scenario.empty() ? micro_scenario(c.seed_set ? c.seed : 1) : load_scenario(c.scenario);
  if (c.seed_set) s.master_seed = c.seed;
  s.validate();
  return s;
}

fs::path out_dir(const Common& c) {
  fs::path p(c.out);
  fs::create_directories(p);
  return p;
}

void write_json(const fs::path& p, const Json& j) {
  std::ofstream os(p);
  if (!os) throw StageError("write", 0, "cannot write " + p.string());
  os << j.dump(2) << '\n';
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p);
  if (!os) throw StageError("write", 0, "cannot write " + p.string());
  os << s;
}

void write_reports(const fs::path& dir, const PipelineResult& r, const std::string& format) {
  if (format == "csv") {
    std::ofstream os(dir / "reports.csv");
    write_report_csv_header(os);
    for (const auto& run : r.runs)
      if (run.kind != "placebo") write_report_csv_row(os, run.report);
  } else {
    Json arr = Json::array();
    for (const auto& run : r.runs)
      if (run.kind != "placebo") arr.push_back(to_json(run.report));
    write_json(dir / "reports.json", arr);
  }
}

Json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

int cmd_generate_world(const Common& c) {
  const auto s = resolve_scenario(c);
  const World w = build_world(s.world);
  const auto dir = out_dir(c);
  write_json(dir / "world.json", world_snapshot(w));
  Json fams = Json::array();
  for (const auto& f : build_families(w, s)) fams.push_back(to_json(f));
  write_json(dir / "families.json", fams);
  std::cout << "world written to " << (dir / "world.json").string() << '\n';
  return kOk;
}

int cmd_discover(const Common& c) {
  const auto s = resolve_scenario(c);
  const World w = build_world(s.world);
  const Dataset data = dataset_from_families(w, build_families(w, s));
  const auto scored = scored_inputs(data);
  const auto disc = discover_predicate_circuits(w, scored, s.discovery);
  const auto cue = discover_cue_circuit(w, scored, s.discovery);
  const auto dir = out_dir(c);
  Json j = Json::object();
  Json per_env = Json::array();
  for (const auto& d : disc) {
    per_env.push_back({{"env", d.env},
                       {"circuit", to_json(d.pruned.circuit)},
                       {"mean_deviation", d.pruned.mean_deviation},
                       {"worst_deviation", d.pruned.worst_deviation}});
    std::ofstream os(dir / ("attribution_e" + std::to_string(d.env) + ".csv"));
    write_attribution_csv(os, d.table);
  }
  j["predicate"] = per_env;
  j["cue"] = {{"circuit", to_json(cue.circuit)}, {"mean_deviation", cue.mean_deviation}};
  write_json(dir / "discovery.json", j);
  for (const auto& d : disc)
    std::cout << "env " << d.env << ": " << d.pruned.circuit.size() << " sites, mean deviation "
              << d.pruned.mean_deviation << '\n';
  std::cout << "cue circuit: " << cue.circuit.size() << " sites\n";
  return kOk;
}

int cmd_fit_maps(const Common& c) {
  const auto s = resolve_scenario(c);
  const World w = build_world(s.world);
  const Dataset data = dataset_from_families(w, build_families(w, s));
  const auto scored = scored_inputs(data);
  const auto disc = discover_predicate_circuits(w, scored, s.discovery);
  std::map<int, Circuit> circuits;
  for (const auto& d : disc) circuits[d.env] = d.pruned.circuit;
  const auto gt = ground_truth(w);
  Json out = Json::object();
  auto dump = [&](const std::string& label, const std::map<int, Circuit>& cs) {
    Json arr = Json::array();
    for (const auto& [_, m] : fit_mechanism_maps(w, data, cs, s.ridge)) arr.push_back(to_json(m));
    out[label] = arr;
  };
  dump("discovered", circuits);
  if (!gt.predicate.empty()) dump("planted-predicate", same_circuit_everywhere(gt.predicate, w.num_environments()));
  const auto dir = out_dir(c);
  write_json(dir / "maps.json", out);
  std::cout << "maps written to " << (dir / "maps.json").string() << '\n';
  return kOk;
}

void print_summary(const PipelineResult& r) {
  for (const auto& run : r.runs) {
    if (run.kind == "placebo") continue;
    std::cout << run.mechanism.label << ": T=" << run.report.t_hat << " min_e=" << run.report.min_env_score
              << " eta=" << run.report.eta_used << " -> " << to_string(run.report.decision) << " ("
              << run.report.class_label << ")\n";
  }
}

int cmd_triangulate(const Common& c) {
  const auto s = resolve_scenario(c);
  const auto r = run_pipeline(s, {c.workers, true});
  const auto dir = out_dir(c);
  write_json(dir / "manifest.json", r.manifest);
  write_reports(dir, r, c.format);
  print_summary(r);
  std::cout << "manifest hash " << r.manifest.at("manifest_hash").get<std::string>() << '\n';
  return kOk;
}

int cmd_calibrate(const Common& c) {
  auto s = resolve_scenario(c);
  s.thresholds.eta.reset();
  const auto r = run_pipeline(s, {c.workers, false});
  const auto dir = out_dir(c);
  if (c.format == "csv") {
    std::ofstream os(dir / "calibration.csv");
    os << "placebo,gate_statistic,decision\n";
    for (const auto& run : r.runs)
      if (run.kind == "placebo")
        os << run.mechanism.label << ',' << run.report.gate_statistic << ',' << to_string(run.report.decision) << '\n';
  } else {
    write_json(dir / "calibration.json", r.manifest.at("calibration"));
  }
  std::cout << "eta = " << r.calibration.eta << " (" << r.calibration.accepted << " of "
            << r.calibration.statistics.size() << " placebos accepted)\n";
  return kOk;
}

int cmd_stress(const Common& c) {
  const auto s = resolve_scenario(c);
  const auto r = run_pipeline(s, {c.workers, false});
  const auto st = stress_test(r, s, {c.workers, false});
  const auto dir = out_dir(c);
  Json j = {{"kind", to_string(s.stress_kind)},
            {"mean_family_quality", st.mean_quality},
            {"clean", {{"t_hat", st.clean_t_hat}, {"accept", st.clean_accept}}},
            {"stressed", to_json(st.stressed)},
            {"flipped", st.flipped()}};
  write_json(dir / "stress.json", j);
  std::cout << "clean " << (st.clean_accept ? "accept" : "reject") << " -> stressed "
            << (st.stressed_accept ? "accept" : "reject") << " (T " << st.clean_t_hat << " -> " << st.stressed_t_hat
            << ")\n";
  return kOk;
}

int cmd_compare(const Common& c) {
  Json table;
  if (!c.manifest.empty()) {
    table = compare_acceptance(load_json(c.manifest));
  } else {
    const auto s = resolve_scenario(c);
    table = run_pipeline(s, {c.workers, false}).manifest.at("comparison");
  }
  const auto dir = out_dir(c);
  if (c.format == "csv") write_text(dir / "comparison.csv", comparison_csv(table));
  else write_json(dir / "comparison.json", table);
  std::cout << comparison_csv(table);
  return kOk;
}

int cmd_replay(const Common& c) {
  if (c.manifest.empty()) throw ConfigError("replay needs --manifest <path>");
  const Json m = load_json(c.manifest);
  if (!m.contains("scenario") || !m.contains("manifest_hash")) throw ConfigError("not a run manifest");
  const Scenario s = scenario_from_json(m.at("scenario"));
  const auto r = run_pipeline(s, {c.workers, true});
  const std::string want = m.at("manifest_hash").get<std::string>();
  const std::string recorded = hex64(manifest_hash(m));
  const std::string got = r.manifest.at("manifest_hash").get<std::string>();
  if (recorded != want) {
    std::cerr << "manifest content does not match its recorded hash (" << recorded << " vs " << want << ")\n";
    return kReplay;
  }
  if (got != want) {
    std::cerr << "replay mismatch: recorded " << want << ", replayed " << got << '\n';
    return kReplay;
  }
  std::cout << "replay ok " << got << '\n';
  return kOk;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Triangulation acceptance harness"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--scenario", c.scenario, "Scenario JSON file")->envname("TRI_SCENARIO");
    sub->add_option_function<std::uint64_t>(
           "--seed", [&](const std::uint64_t& v) { c.seed = v; c.seed_set = true; }, "Master seed override")
        ->envname("TRI_SEED");
    sub->add_option("--workers", c.workers, "Evaluation threads")->envname("TRI_WORKERS")->check(CLI::Range(1, 1024));
    sub->add_option("--out", c.out, "Output directory")->envname("TRI_OUT");
    sub->add_option("--report-format", c.format, "Report format")
        ->envname("TRI_REPORT_FORMAT")
        ->check(CLI::IsMember({"json", "csv"}));
  };
  struct Cmd {
    const char* name;
    const char* help;
    int (*run)(const Common&);
  };
  const Cmd cmds[] = {{"generate-world", "Build a world and write its snapshot", cmd_generate_world},
                      {"discover", "Run circuit discovery", cmd_discover},
                      {"fit-maps", "Fit cross-environment translation maps", cmd_fit_maps},
                      {"triangulate", "Run the full pipeline and write the manifest", cmd_triangulate},
                      {"calibrate", "Calibrate eta on placebo circuits", cmd_calibrate},
                      {"stress-test", "Inject reference-family violations and re-test", cmd_stress},
                      {"compare", "Acceptance-rate comparison table", cmd_compare},
                      {"replay", "Re-run a manifest and check bit-exact agreement", cmd_replay}};
  std::vector<std::pair<CLI::App*, const Cmd*>> subs;
  for (const auto& cmd : cmds) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    add_common(sub);
    if (std::string(cmd.name) == "compare" || std::string(cmd.name) == "replay")
      sub->add_option("--manifest", c.manifest, "Run manifest (manifest.json)");
    subs.emplace_back(sub, &cmd);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    for (const auto& [sub, cmd] : subs)
      if (sub->parsed()) return cmd->run(c);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const SpecError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const StageError& e) {
    std::cerr << "stage failure: " << e.what() << '\n';
    return kStage;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << '\n';
    return kStage;
  }
  return kOk;
}
