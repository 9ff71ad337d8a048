#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gridflow/harness.hpp"

namespace gf = gridflow;
namespace fs = std::filesystem;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNoConvergence = 3;

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw gf::ParseError("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw gf::Error("cannot write " + path);
  out << j.dump(1) << '\n';
}

struct SplitSets {
  std::vector<gf::NetworkCase> train_cases;
  std::vector<gf::ControlMode> train_mode;
  std::vector<gf::NetworkCase> test_cases;
  std::vector<gf::AcdcSolution> test_oracle;
  std::vector<gf::ControlMode> test_mode;
};

SplitSets make_split(const gf::ScenarioSet& set, double train_fraction, uint64_t seed) {
  gf::SplitIndices idx = gf::split_indices(set.cases.size(), train_fraction, seed);
  SplitSets s;
  for (size_t i : idx.train) {
    s.train_cases.push_back(set.cases[i]);
    s.train_mode.push_back(set.oracle_mode[i]);
  }
  for (size_t i : idx.test) {
    s.test_cases.push_back(set.cases[i]);
    s.test_oracle.push_back(set.oracle[i]);
    s.test_mode.push_back(set.oracle_mode[i]);
  }
  return s;
}

gf::InferenceEngine make_engine(const gf::NetworkCase& c, const gf::ModelBank& bank) {
  gf::GraphTopology topo = gf::build_graph(c);
  auto basis = gf::chebyshev_basis(gf::scale_laplacian(gf::laplacian(topo)),
                                   bank.mode1.cfg.order);
  return gf::InferenceEngine(c, topo, basis, bank);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ac/dc hybrid power flow: model-based oracle and graph-network solver"};
  app.require_subcommand(1);

  std::string case_path, scen_path, bank_path, out_path, outdir = ".";
  std::string log_path;
  int count = 2000, mode_arg = 0, from = 0, to = 0;
  uint64_t seed = 42, train_seed = 1;
  double split = 0.75;
  gf::TrainOptions topt;

  auto* solve = app.add_subcommand("solve", "run the sequential oracle on a case");
  solve->add_option("--case", case_path, "case file")->required();
  solve->add_option("--mode", mode_arg, "force control mode 1 or 2 (default: auto)");
  solve->add_option("--out", out_path, "write solution json here");

  auto* gen = app.add_subcommand("gen", "sample operating scenarios with oracle labels");
  gen->add_option("--case", case_path)->required();
  gen->add_option("--count", count, "scenarios to keep");
  gen->add_option("--seed", seed);
  gen->add_option("--out", out_path, "scenario set json")->required();

  auto* train = app.add_subcommand("train", "train one network per control mode");
  train->add_option("--case", case_path)->required();
  train->add_option("--scenarios", scen_path)->required();
  train->add_option("--out", bank_path, "model bank json")->required();
  train->add_option("--log", log_path, "training log csv (mode1 run)");
  train->add_option("--split", split, "train fraction");
  train->add_option("--split-seed", seed);
  train->add_option("--seed", train_seed, "parameter init / batch seed");
  bool tuned = false;
  train->add_flag("--tuned", tuned, "longer schedule with momentum and step decay");
  train->add_option("--inner", topt.inner_steps);
  train->add_option("--outer", topt.outer_steps);
  train->add_option("--step", topt.step_size);
  train->add_option("--batch", topt.batch);

  auto* eval = app.add_subcommand("eval", "score the trained bank against the oracle");
  eval->add_option("--case", case_path)->required();
  eval->add_option("--scenarios", scen_path)->required();
  eval->add_option("--bank", bank_path)->required();
  eval->add_option("--split", split);
  eval->add_option("--split-seed", seed);
  eval->add_option("--outdir", outdir, "directory for metrics.csv etc");

  auto* bench = app.add_subcommand("bench", "time oracle solves vs network inference");
  bench->add_option("--case", case_path)->required();
  bench->add_option("--scenarios", scen_path)->required();
  bench->add_option("--bank", bank_path)->required();
  bench->add_option("--split", split);
  bench->add_option("--split-seed", seed);
  bench->add_option("--out", out_path, "timing json");

  auto* trip = app.add_subcommand("trip", "re-evaluate after removing one ac branch");
  trip->add_option("--case", case_path)->required();
  trip->add_option("--bank", bank_path)->required();
  trip->add_option("--from", from)->required();
  trip->add_option("--to", to)->required();
  trip->add_option("--count", count, "scenarios per topology");
  trip->add_option("--seed", seed);
  trip->add_option("--outdir", outdir);

  auto* graph = app.add_subcommand("graph", "dump graph and spectral facts for a case");
  graph->add_option("--case", case_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*solve) {
      gf::NetworkCase c = gf::load_case(case_path);
      gf::SolverOptions opt;
      if (mode_arg == 1) opt.forced_mode = gf::ControlMode::Mode1;
      if (mode_arg == 2) opt.forced_mode = gf::ControlMode::Mode2;
      gf::AcdcSolution sol = gf::solve_acdc_sequential(c, opt);
      nlohmann::json j = gf::solution_to_json(c, sol);
      if (!out_path.empty()) write_json(out_path, j);
      std::cout << j.dump(1) << '\n';
    } else if (*gen) {
      gf::NetworkCase c = gf::load_case(case_path);
      gf::ScenarioOptions sopt;
      sopt.count = count;
      sopt.seed = seed;
      gf::ScenarioSet set = gf::generate_scenarios(c, sopt);
      nlohmann::json j = gf::scenario_set_to_json(c, set);
      j["base_case"] = case_path;
      j["seed"] = seed;
      write_json(out_path, j);
      int m2 = 0;
      for (auto m : set.oracle_mode)
        if (m == gf::ControlMode::Mode2) ++m2;
      std::printf("kept %zu scenarios (%d mode 2, %d resampled) -> %s\n",
                  set.cases.size(), m2, set.rejected, out_path.c_str());
    } else if (*train) {
      gf::NetworkCase c = gf::load_case(case_path);
      gf::ScenarioSet set = gf::scenario_set_from_json(c, read_json(scen_path));
      SplitSets s = make_split(set, split, seed);
      gf::TrainOptions base_opt = tuned ? gf::tuned_train_options() : gf::TrainOptions{};
      if (!train->get_option("--inner")->empty()) base_opt.inner_steps = topt.inner_steps;
      if (!train->get_option("--outer")->empty()) base_opt.outer_steps = topt.outer_steps;
      if (!train->get_option("--step")->empty()) base_opt.step_size = topt.step_size;
      if (!train->get_option("--batch")->empty()) base_opt.batch = topt.batch;
      base_opt.seed = train_seed;
      gf::TrainAllResult result = gf::train_all_modes(c, s.train_cases, s.train_mode, base_opt);
      gf::save_bank(result.bank, bank_path);
      if (!log_path.empty())
        gf::write_text_file(log_path, gf::training_log_csv(result.mode1.log));
      std::printf("mode1: |f_pqv| %.4g -> %.4g (best outer %d)\n",
                  result.mode1.init_f_pqv_l1, result.mode1.final_f_pqv_l1,
                  result.mode1.best_outer);
      std::printf("mode2: |f_pqv| %.4g -> %.4g (best outer %d)\n",
                  result.mode2.init_f_pqv_l1, result.mode2.final_f_pqv_l1,
                  result.mode2.best_outer);
      std::printf("bank -> %s\n", bank_path.c_str());
    } else if (*eval) {
      gf::NetworkCase c = gf::load_case(case_path);
      gf::ScenarioSet set = gf::scenario_set_from_json(c, read_json(scen_path));
      SplitSets s = make_split(set, split, seed);
      gf::ModelBank bank = gf::load_bank(bank_path);
      gf::InferenceEngine eng = make_engine(c, bank);
      gf::EvalReport rep = gf::evaluate(eng, c, s.test_cases, s.test_oracle, s.test_mode);
      fs::create_directories(outdir);
      gf::write_text_file(outdir + "/metrics.csv", gf::metrics_csv(rep));
      gf::write_text_file(outdir + "/mre_per_bus.csv", gf::per_bus_csv(c, rep));
      write_json(outdir + "/summary.json", gf::summary_json(rep, nullptr));
      std::printf("test scenarios: %zu  mre_v %.4f%%  mre_delta %.4f%%  mode acc %.2f%%\n",
                  rep.rows.size(), 100 * rep.mre_v_mean, 100 * rep.mre_delta_mean,
                  100 * rep.mode_accuracy);
      std::printf("reports -> %s/{metrics.csv,mre_per_bus.csv,summary.json}\n",
                  outdir.c_str());
    } else if (*bench) {
      gf::NetworkCase c = gf::load_case(case_path);
      gf::ScenarioSet set = gf::scenario_set_from_json(c, read_json(scen_path));
      SplitSets s = make_split(set, split, seed);
      gf::ModelBank bank = gf::load_bank(bank_path);
      gf::InferenceEngine eng = make_engine(c, bank);
      gf::BenchReport br = gf::bench_time(eng, s.test_cases);
      std::printf("oracle  %8.1f ± %.1f us\ninfer   %8.1f ± %.1f us\nspeedup %8.2fx\n",
                  br.oracle_mean_us, br.oracle_std_us, br.infer_mean_us, br.infer_std_us,
                  br.speedup);
      if (!out_path.empty()) {
        nlohmann::json j{{"oracle_mean_us", br.oracle_mean_us},
                         {"oracle_std_us", br.oracle_std_us},
                         {"infer_mean_us", br.infer_mean_us},
                         {"infer_std_us", br.infer_std_us},
                         {"speedup", br.speedup},
                         {"scenarios", br.scenarios}};
        write_json(out_path, j);
      }
    } else if (*trip) {
      gf::NetworkCase c = gf::load_case(case_path);
      gf::ModelBank bank = gf::load_bank(bank_path);
      gf::ScenarioOptions sopt;
      sopt.count = count;
      sopt.seed = seed;
      gf::TripStudy study = gf::topology_study(c, bank, from, to, sopt);
      fs::create_directories(outdir);
      gf::write_text_file(outdir + "/trip_mre.csv", gf::trip_csv(c, study));
      nlohmann::json j{{"mre_v_intact", study.intact.mre_v_mean},
                       {"mre_v_tripped", study.tripped.mre_v_mean},
                       {"mre_delta_intact", study.intact.mre_delta_mean},
                       {"mre_delta_tripped", study.tripped.mre_delta_mean},
                       {"mre_v_ratio", study.mre_v_ratio},
                       {"mre_delta_ratio", study.mre_delta_ratio}};
      write_json(outdir + "/trip_summary.json", j);
      std::printf("intact mre_v %.4f%% -> tripped %.4f%% (x%.2f)\n",
                  100 * study.intact.mre_v_mean, 100 * study.tripped.mre_v_mean,
                  study.mre_v_ratio);
      std::printf("reports -> %s/{trip_mre.csv,trip_summary.json}\n", outdir.c_str());
    } else if (*graph) {
      gf::NetworkCase c = gf::load_case(case_path);
      gf::GraphTopology topo = gf::build_graph(c);
      Eigen::MatrixXd lap = gf::laplacian(topo);
      double zeta = gf::spectral_radius(lap);
      nlohmann::json j{{"nodes", topo.n_nodes},
                       {"edges", topo.n_edges()},
                       {"edge_columns", topo.n_edge_cols},
                       {"spectral_radius", zeta},
                       {"topology_hash", gf::topology_hash(topo)}};
      std::cout << j.dump(1) << '\n';
    }
  } catch (const gf::NoConvergenceError& e) {
    std::cerr << "no convergence: " << e.what() << '\n';
    return kExitNoConvergence;
  } catch (const gf::InfeasibleDcError& e) {
    std::cerr << "infeasible: " << e.what() << '\n';
    return kExitNoConvergence;
  } catch (const gf::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return 0;
}
