#include "mlfn/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mlfn/errors.hpp"

namespace mlfn::config {

namespace pt = boost::property_tree;

namespace {

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t lo = 0;
  while (true) {
    const std::size_t hi = text.find(sep, lo);
    std::string item(text.substr(lo, hi == std::string_view::npos ? std::string_view::npos : hi - lo));
    const auto a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
    out.push_back(a == std::string::npos ? std::string() : item.substr(a, b - a + 1));
    if (hi == std::string_view::npos) break;
    lo = hi + 1;
  }
  return out;
}

std::size_t to_size(std::string_view s, std::string_view key) {
  std::size_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw ContractError(std::string(key) + ": not a non-negative integer: '" + std::string(s) + "'");
  return v;
}

double to_double(const std::string& s, std::string_view key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ContractError(std::string(key) + ": not a number: '" + s + "'");
}

bool to_bool(const std::string& s, std::string_view key) {
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw ContractError(std::string(key) + ": not a boolean: '" + s + "'");
}

template <class F>
void per_block(model::MlfnConfig& m, const std::string& text, std::string_view key, F set) {
  const auto items = split(text, ',');
  if (items.size() != 1 && items.size() != m.blocks.size())
    throw ContractError(std::string(key) + ": expected 1 or " + std::to_string(m.blocks.size()) +
                        " values, got " + std::to_string(items.size()));
  for (std::size_t b = 0; b < m.blocks.size(); ++b) set(m.blocks[b], items[items.size() == 1 ? 0 : b]);
}

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"", {"seed"}},
      {"model", {"preset", "mode", "stem_channels", "channels", "strides", "factors", "fm_widths", "fsm_widths",
                 "fusion_dim", "num_classes", "digest"}},
      {"data", {"seed", "n_ids", "n_train", "imgs_per_id_per_view", "views", "dir"}},
      {"train", {"batch_size", "iterations", "lr", "optimizer", "momentum", "schedule", "decay_factor",
                 "decay_period", "weight_decay", "flip", "checkpoint_every", "log_every"}},
      {"eval", {"ranks", "features", "pair_l2", "probe_l2"}},
      {"inspect", {"m"}},
  };
  return keys;
}

void check_keys(const pt::ptree& tree) {
  const auto& known = known_keys();
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      if (!known.at("").contains(name)) throw ContractError("config: unknown key '" + name + "'");
      continue;
    }
    const auto sec = known.find(name);
    if (sec == known.end() || name.empty()) throw ContractError("config: unknown section [" + name + "]");
    for (const auto& [key, child] : node)
      if (!sec->second.contains(key)) throw ContractError("config: unknown key '" + name + "." + key + "'");
  }
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace

model::MlfnConfig preset_model(std::string_view name) {
  if (name == "toy") return model::MlfnConfig::toy();
  if (name == "reid") return model::MlfnConfig::reid_reference();
  if (name == "cifar") return model::MlfnConfig::cifar_reference();
  throw ContractError("unknown model preset '" + std::string(name) + "' (expected toy|reid|cifar)");
}

std::vector<std::size_t> parse_size_list(std::string_view text) {
  std::vector<std::size_t> out;
  for (const auto& item : split(text, ',')) out.push_back(to_size(item, "list"));
  return out;
}

std::vector<eval::FeatureKind> parse_feature_list(std::string_view text) {
  std::vector<eval::FeatureKind> out;
  for (const auto& item : split(text, ',')) out.push_back(eval::parse_feature(item));
  return out;
}

RunConfig parse(std::istream& in) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
  check_keys(tree);
  RunConfig cfg;
  auto get = [&](const std::string& path) { return tree.get_optional<std::string>(path); };

  if (auto v = get("seed")) cfg.seed = to_size(*v, "seed");

  auto& m = cfg.experiment.model;
  if (auto v = get("model.preset")) {
    cfg.preset = *v;
    m = preset_model(*v);
  }
  if (auto v = get("model.mode")) m.mode = model::parse_mode(*v);
  if (auto v = get("model.stem_channels")) m.stem_channels = to_size(*v, "model.stem_channels");
  if (auto v = get("model.channels"))
    per_block(m, *v, "model.channels", [](auto& b, const std::string& s) { b.out_channels = to_size(s, "model.channels"); });
  if (auto v = get("model.strides"))
    per_block(m, *v, "model.strides", [](auto& b, const std::string& s) { b.stride = to_size(s, "model.strides"); });
  if (auto v = get("model.factors"))
    per_block(m, *v, "model.factors", [](auto& b, const std::string& s) { b.factors = to_size(s, "model.factors"); });
  if (auto v = get("model.fm_widths"))
    per_block(m, *v, "model.fm_widths", [](auto& b, const std::string& s) { b.fm_width = to_size(s, "model.fm_widths"); });
  if (auto v = get("model.fsm_widths"))
    per_block(m, *v, "model.fsm_widths", [](auto& b, const std::string& s) {
      const auto w = split(s, '/');
      if (w.size() != 3) throw ContractError("model.fsm_widths: expected a/b/c, got '" + s + "'");
      for (std::size_t i = 0; i < 3; ++i) b.fsm_widths[i] = to_size(w[i], "model.fsm_widths");
    });
  else if (get("model.factors"))
    for (auto& b : m.blocks) b.fsm_widths[2] = b.factors;
  if (auto v = get("model.fusion_dim")) m.fusion_dim = to_size(*v, "model.fusion_dim");
  if (auto v = get("model.num_classes")) m.num_classes = to_size(*v, "model.num_classes");
  m.validate();

  if (auto v = get("data.seed")) cfg.data.seed = to_size(*v, "data.seed");
  if (auto v = get("data.n_ids")) cfg.data.n_ids = to_size(*v, "data.n_ids");
  if (auto v = get("data.n_train")) cfg.data.n_train = to_size(*v, "data.n_train");
  if (auto v = get("data.imgs_per_id_per_view")) cfg.data.imgs_per_id_per_view = to_size(*v, "data.imgs_per_id_per_view");
  if (auto v = get("data.views")) cfg.data.views = to_size(*v, "data.views");
  if (auto v = get("data.dir")) cfg.data_dir = *v;

  auto& t = cfg.experiment.train;
  if (auto v = get("train.batch_size")) t.batch_size = to_size(*v, "train.batch_size");
  if (auto v = get("train.iterations")) t.iterations = to_size(*v, "train.iterations");
  if (auto v = get("train.lr")) t.optimizer.lr = to_double(*v, "train.lr");
  if (auto v = get("train.optimizer")) t.optimizer.kind = train::parse_optimizer(*v);
  if (auto v = get("train.momentum")) t.optimizer.momentum = to_double(*v, "train.momentum");
  if (auto v = get("train.schedule")) {
    if (*v == "constant") t.optimizer.schedule.kind = train::Schedule::Kind::constant;
    else if (*v == "step") t.optimizer.schedule.kind = train::Schedule::Kind::step_decay;
    else throw ContractError("train.schedule: expected constant|step, got '" + *v + "'");
  }
  if (auto v = get("train.decay_factor")) t.optimizer.schedule.factor = to_double(*v, "train.decay_factor");
  if (auto v = get("train.decay_period")) t.optimizer.schedule.period = to_size(*v, "train.decay_period");
  if (auto v = get("train.weight_decay")) t.optimizer.weight_decay = to_double(*v, "train.weight_decay");
  if (auto v = get("train.flip")) t.flip = to_bool(*v, "train.flip");
  if (auto v = get("train.checkpoint_every")) t.checkpoint_every = to_size(*v, "train.checkpoint_every");
  if (auto v = get("train.log_every")) t.log_every = to_size(*v, "train.log_every");
  t.validate();

  if (auto v = get("eval.ranks")) cfg.experiment.ranks = parse_size_list(*v);
  if (auto v = get("eval.features")) cfg.features = parse_feature_list(*v);
  if (auto v = get("eval.pair_l2")) cfg.experiment.pair_matcher.l2 = to_double(*v, "eval.pair_l2");
  if (auto v = get("eval.probe_l2")) cfg.experiment.attribute_probe.l2 = to_double(*v, "eval.probe_l2");
  if (auto v = get("inspect.m")) cfg.inspect_m = to_size(*v, "inspect.m");
  return cfg;
}

RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  return parse(in);
}

std::string to_ini(const RunConfig& cfg) {
  pt::ptree tree;
  tree.put("seed", cfg.seed);
  const auto& m = cfg.experiment.model;
  tree.put("model.preset", cfg.preset);
  tree.put("model.mode", std::string(model::mode_name(m.mode)));
  tree.put("model.stem_channels", m.stem_channels);
  std::vector<std::size_t> ch, st, k, fm;
  std::string fsm;
  for (const auto& b : m.blocks) {
    ch.push_back(b.out_channels);
    st.push_back(b.stride);
    k.push_back(b.factors);
    fm.push_back(b.fm_width);
    fsm += (fsm.empty() ? "" : ",") + std::to_string(b.fsm_widths[0]) + "/" + std::to_string(b.fsm_widths[1]) +
           "/" + std::to_string(b.fsm_widths[2]);
  }
  tree.put("model.channels", join(ch));
  tree.put("model.strides", join(st));
  tree.put("model.factors", join(k));
  tree.put("model.fm_widths", join(fm));
  tree.put("model.fsm_widths", fsm);
  tree.put("model.fusion_dim", m.fusion_dim);
  tree.put("model.num_classes", m.num_classes);
  char digest[24];
  std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(model::config_digest(m)));
  tree.put("model.digest", std::string(digest));

  tree.put("data.seed", cfg.data.seed);
  tree.put("data.n_ids", cfg.data.n_ids);
  tree.put("data.n_train", cfg.data.n_train);
  tree.put("data.imgs_per_id_per_view", cfg.data.imgs_per_id_per_view);
  tree.put("data.views", cfg.data.views);
  tree.put("data.dir", cfg.data_dir);

  const auto& t = cfg.experiment.train;
  tree.put("train.batch_size", t.batch_size);
  tree.put("train.iterations", t.iterations);
  tree.put("train.lr", fmt(t.optimizer.lr));
  tree.put("train.optimizer", std::string(train::optimizer_name(t.optimizer.kind)));
  tree.put("train.momentum", fmt(t.optimizer.momentum));
  tree.put("train.schedule", t.optimizer.schedule.kind == train::Schedule::Kind::constant ? "constant" : "step");
  tree.put("train.decay_factor", fmt(t.optimizer.schedule.factor));
  tree.put("train.decay_period", t.optimizer.schedule.period);
  tree.put("train.weight_decay", fmt(t.optimizer.weight_decay));
  tree.put("train.flip", t.flip ? "true" : "false");
  tree.put("train.checkpoint_every", t.checkpoint_every);
  tree.put("train.log_every", t.log_every);

  tree.put("eval.ranks", join(cfg.experiment.ranks));
  std::string feats;
  for (auto f : cfg.features) feats += (feats.empty() ? "" : ",") + std::string(eval::feature_name(f));
  tree.put("eval.features", feats);
  tree.put("eval.pair_l2", fmt(cfg.experiment.pair_matcher.l2));
  tree.put("eval.probe_l2", fmt(cfg.experiment.attribute_probe.l2));
  tree.put("inspect.m", cfg.inspect_m);

  std::ostringstream out;
  pt::write_ini(out, tree);
  return out.str();
}

void write_resolved(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config_resolved", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "config_resolved").string());
  out << to_ini(cfg);
  if (!out) throw IoError("write failed: " + (dir / "config_resolved").string());
}

}  // namespace mlfn::config
