#include <filesystem>

#include "catch_amalgamated.hpp"
#include "gridflow/trainer.hpp"
#include "gridflow/harness.hpp"

using namespace gridflow;
using Catch::Matchers::WithinAbs;

static const std::string kSmall = std::string(GF_DATA_DIR) + "/fig1_5bus.json";

namespace {
struct Tiny {
  NetworkCase base;
  std::vector<NetworkCase> scenarios;
  std::vector<ControlMode> modes;
};
Tiny tiny_pool(int count = 24, uint64_t seed = 13) {
  Tiny t{load_case(kSmall), {}, {}};
  ScenarioOptions so;
  so.count = count;
  so.seed = seed;
  ScenarioSet set = generate_scenarios(t.base, so);
  t.scenarios = set.cases;
  t.modes = set.oracle_mode;
  return t;
}
TrainOptions tiny_options() {
  TrainOptions o;
  o.inner_steps = 8;
  o.outer_steps = 4;
  o.batch = 8;
  o.seed = 2;
  return o;
}
}  // namespace

TEST_CASE("a short run already bends the physics residual downward") {
  Tiny t = tiny_pool(40);
  TrainOptions o = tiny_options();
  o.inner_steps = 40;
  o.outer_steps = 5;
  TrainResult r = train_mode(t.base, t.scenarios, ControlMode::Mode1, o);

  CHECK(r.init_f_pqv_l1 > 0.0);
  CHECK(r.final_f_pqv_l1 < r.init_f_pqv_l1);
  CHECK(r.best_outer >= 0);
  REQUIRE(r.log.size() == size_t(o.inner_steps * o.outer_steps));
  for (const auto& row : r.log) CHECK(std::isfinite(row.loss));
}

TEST_CASE("multipliers never decrease and the penalty weight is capped") {
  Tiny t = tiny_pool();
  TrainOptions o = tiny_options();
  o.rho0 = 2.0;
  o.rho_growth = 4.0;
  o.rho_cap = 10.0;
  TrainResult r = train_mode(t.base, t.scenarios, ControlMode::Mode1, o);

  REQUIRE(r.lambda_outer.size() == size_t(o.outer_steps));
  for (size_t k = 1; k < r.lambda_outer.size(); ++k) {
    REQUIRE(r.lambda_outer[k].size() == r.lambda_outer[k - 1].size());
    CHECK((r.lambda_outer[k] - r.lambda_outer[k - 1]).minCoeff() >= 0.0);
  }
  // dual ascent moves at least some component on every outer round
  CHECK(r.lambda_outer.front().maxCoeff() > 0.0);

  // rho follows min(rho0 * growth^k, cap): 2, 8, 10, 10
  std::vector<double> seen;
  for (const auto& row : r.log)
    if (row.inner == 0) seen.push_back(row.rho);
  REQUIRE(seen == std::vector<double>{2.0, 8.0, 10.0, 10.0});
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
  Tiny t = tiny_pool();
  TrainOptions o = tiny_options();
  TrainResult a = train_mode(t.base, t.scenarios, ControlMode::Mode1, o);
  TrainResult b = train_mode(t.base, t.scenarios, ControlMode::Mode1, o);
  CHECK(training_log_csv(a.log) == training_log_csv(b.log));
  CHECK((a.final_params.z - b.final_params.z).cwiseAbs().maxCoeff() == 0.0);

  o.seed = 3;
  TrainResult c = train_mode(t.base, t.scenarios, ControlMode::Mode1, o);
  CHECK(training_log_csv(a.log) != training_log_csv(c.log));
}

TEST_CASE("training rejects pools too small to split") {
  Tiny t = tiny_pool(10);
  CHECK_THROWS_AS(train_mode(t.base, t.scenarios, ControlMode::Mode1, tiny_options()),
                  ValidationError);
}

TEST_CASE("per-mode training wants one label per scenario") {
  Tiny t = tiny_pool();
  t.modes.pop_back();
  CHECK_THROWS_AS(train_all_modes(t.base, t.scenarios, t.modes, tiny_options()),
                  ShapeMismatchError);
}

TEST_CASE("momentum accelerates the same descent direction") {
  Tiny t = tiny_pool(40);
  TrainOptions o = tiny_options();
  o.inner_steps = 30;
  o.outer_steps = 2;
  TrainResult plain = train_mode(t.base, t.scenarios, ControlMode::Mode1, o);
  o.momentum = 0.9;
  o.grad_clip = 10.0;
  TrainResult heavy = train_mode(t.base, t.scenarios, ControlMode::Mode1, o);
  CHECK(heavy.final_f_pqv_l1 < plain.init_f_pqv_l1);
  CHECK(std::isfinite(heavy.final_f_pqv_l1));
}

TEST_CASE("the csv log carries every column the training loop fills") {
  Tiny t = tiny_pool();
  TrainResult r = train_mode(t.base, t.scenarios, ControlMode::Mode1, tiny_options());
  std::string csv = training_log_csv(r.log);
  CHECK(csv.rfind("outer_iter,inner_step,loss,", 0) == 0);
  size_t lines = size_t(std::count(csv.begin(), csv.end(), '\n'));
  CHECK(lines == r.log.size() + 1);
}

TEST_CASE("the model bank round trips through disk exactly") {
  Tiny t = tiny_pool();
  TrainOptions o = tiny_options();
  TrainAllResult all = train_all_modes(t.base, t.scenarios, t.modes, o);

  ModelBank& bank = all.bank;
  bank.meta["note"] = "round trip probe";
  auto path =
      (std::filesystem::temp_directory_path() / "gridflow_bank_test.json").string();
  save_bank(bank, path);
  ModelBank r = load_bank(path);
  std::filesystem::remove(path);

  CHECK((r.mode1.z - bank.mode1.z).cwiseAbs().maxCoeff() == 0.0);
  CHECK((r.mode2.z - bank.mode2.z).cwiseAbs().maxCoeff() == 0.0);
  for (size_t l = 0; l < bank.mode1.theta.size(); ++l)
    for (size_t j = 0; j < bank.mode1.theta[l].size(); ++j) {
      CHECK((r.mode1.theta[l][j] - bank.mode1.theta[l][j]).cwiseAbs().maxCoeff() ==
            0.0);
      CHECK((r.mode2.theta[l][j] - bank.mode2.theta[l][j]).cwiseAbs().maxCoeff() ==
            0.0);
    }
  CHECK((r.std1.node_mean - bank.std1.node_mean).cwiseAbs().maxCoeff() == 0.0);
  CHECK((r.std2.edge_std - bank.std2.edge_std).cwiseAbs().maxCoeff() == 0.0);
  CHECK(r.angle_decode == bank.angle_decode);
  CHECK(r.meta["note"] == "round trip probe");
}

TEST_CASE("deterministic splits cover the pool without overlap") {
  SplitIndices s = split_indices(100, 0.75, 42);
  CHECK(s.train.size() == 75);
  CHECK(s.test.size() == 25);
  std::vector<char> seen(100, 0);
  for (size_t i : s.train) seen[i] = 1;
  for (size_t i : s.test) {
    CHECK(seen[i] == 0);
    seen[i] = 1;
  }
  CHECK(std::count(seen.begin(), seen.end(), 1) == 100);

  SplitIndices again = split_indices(100, 0.75, 42);
  CHECK(again.train == s.train);
  SplitIndices other = split_indices(100, 0.75, 43);
  CHECK(other.train != s.train);
}

TEST_CASE("scenario sets round trip with their oracle labels") {
  NetworkCase base = load_case(kSmall);
  ScenarioOptions so;
  so.count = 12;
  so.seed = 21;
  ScenarioSet set = generate_scenarios(base, so);

  nlohmann::json j = scenario_set_to_json(base, set);
  ScenarioSet back = scenario_set_from_json(base, j);
  REQUIRE(back.cases.size() == set.cases.size());
  for (size_t i = 0; i < set.cases.size(); ++i) {
    CHECK(back.oracle_mode[i] == set.oracle_mode[i]);
    CHECK((back.oracle[i].v - set.oracle[i].v).cwiseAbs().maxCoeff() < 1e-9);
    for (size_t b = 0; b < base.n_buses(); ++b) {
      CHECK_THAT(back.cases[i].buses[b].p_load,
                 WithinAbs(set.cases[i].buses[b].p_load, 0.0));
    }
  }
}
