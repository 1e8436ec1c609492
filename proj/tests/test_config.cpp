#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mlfn/config.hpp"

using namespace mlfn;
using namespace mlfn::config;

namespace {

RunConfig parse_text(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

}  // namespace

TEST_CASE("empty file gives the toy defaults") {
  const auto cfg = parse_text("");
  CHECK(cfg.seed == 1);
  CHECK(model::config_digest(cfg.experiment.model) == model::config_digest(model::MlfnConfig::toy()));
  CHECK(cfg.experiment.train.batch_size == 16);
  CHECK(cfg.experiment.train.iterations == 800);
  CHECK(cfg.experiment.ranks == std::vector<std::size_t>{1, 5, 10});
  CHECK(cfg.inspect_m == 20);
}

TEST_CASE("keys override defaults") {
  const auto cfg = parse_text(
      "seed = 9\n"
      "[model]\nmode = nofusion\nchannels = 8,16,24,32\nfactors = 2\nfusion_dim = 32\n"
      "[data]\nn_ids = 20\nn_train = 12\nseed = 4\n"
      "[train]\nlr = 0.01\noptimizer = sgd_nesterov\nschedule = step\ndecay_period = 100\nflip = false\n"
      "[eval]\nranks = 1,2\nfeatures = R,FS\npair_l2 = 0.5\n"
      "[inspect]\nm = 7\n");
  CHECK(cfg.seed == 9);
  const auto& m = cfg.experiment.model;
  CHECK(m.mode == model::Mode::nofusion);
  CHECK(m.blocks[2].out_channels == 24);
  for (const auto& b : m.blocks) {
    CHECK(b.factors == 2);
    CHECK(b.fsm_widths[2] == 2);
  }
  CHECK(m.fusion_dim == 32);
  CHECK(cfg.data.n_ids == 20);
  CHECK(cfg.data.seed == 4);
  CHECK(cfg.experiment.train.optimizer.lr == 0.01);
  CHECK(cfg.experiment.train.optimizer.kind == train::OptimizerKind::sgd_nesterov);
  CHECK(cfg.experiment.train.optimizer.schedule.kind == train::Schedule::Kind::step_decay);
  CHECK(cfg.experiment.train.optimizer.schedule.period == 100);
  CHECK(!cfg.experiment.train.flip);
  CHECK(cfg.experiment.ranks == std::vector<std::size_t>{1, 2});
  CHECK(cfg.features == std::vector<eval::FeatureKind>{eval::FeatureKind::R, eval::FeatureKind::FS});
  CHECK(cfg.experiment.pair_matcher.l2 == 0.5);
  CHECK(cfg.inspect_m == 7);
}

TEST_CASE("resolved text parses back to the same configuration") {
  auto cfg = parse_text("seed = 3\n[model]\nfsm_widths = 12/6/4\n[train]\nlr = 0.000123\nweight_decay = 5e-4\n");
  cfg.experiment.model.num_classes = 17;
  const auto text = to_ini(cfg);
  const auto back = parse_text(text);
  CHECK(to_ini(back) == text);
  CHECK(model::config_digest(back.experiment.model) == model::config_digest(cfg.experiment.model));
  CHECK(back.experiment.train.optimizer.lr == 0.000123);
  CHECK(text.find("digest=") != std::string::npos);
}

TEST_CASE("reference presets") {
  CHECK(parse_text("[model]\npreset = reid\n").experiment.model.signature_dim() == 512);
  CHECK(parse_text("[model]\npreset = cifar\n").experiment.model.signature_dim() == 288);
  CHECK_THROWS_AS(preset_model("imagenet"), ContractError);
}

TEST_CASE("bad input is rejected") {
  CHECK_THROWS_AS(parse_text("colour = 3\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[model]\nwidth = 3\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[solver]\nx = 1\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[model]\nchannels = 8,16\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[model]\nfsm_widths = 16/8\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[model]\nmode = dense\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[train]\nbatch_size = -2\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[train]\nbatch_size = 1\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[train]\nlr = fast\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[train]\nflip = maybe\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[eval]\nfeatures = R,XYZ\n"), ContractError);
  CHECK_THROWS_AS(parse_text("[broken\n"), ContractError);
  CHECK_THROWS_AS(load("/nonexistent/run.ini"), IoError);
}

TEST_CASE("write_resolved creates the file") {
  const auto dir = std::filesystem::temp_directory_path() / "mlfn_config_resolved";
  std::filesystem::remove_all(dir);
  write_resolved(parse_text(""), dir);
  std::ifstream in(dir / "config_resolved");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == to_ini(parse_text("")));
  std::filesystem::remove_all(dir);
}

TEST_CASE("list parsing") {
  CHECK(parse_size_list("1, 5,10") == std::vector<std::size_t>{1, 5, 10});
  CHECK_THROWS_AS(parse_size_list("1,,2"), ContractError);
  CHECK_THROWS_AS(parse_size_list("x"), ContractError);
}
