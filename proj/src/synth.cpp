#include "mlfn/synth.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mlfn/hash.hpp"
#include "mlfn/ppm.hpp"
#include "mlfn/rng.hpp"

namespace mlfn::synth {

FactorSpec FactorSpec::standard() {
  return {{{"color", {"red", "green", "blue", "yellow"}},
           {"texture", {"solid", "stripes", "checks"}},
           {"layout", {"upper", "lower"}},
           {"carry", {"none", "bag"}}}};
}

std::size_t FactorSpec::identity_space() const {
  std::size_t n = 1;
  for (const Factor& f : factors) n *= f.values.size();
  return factors.empty() ? 0 : n;
}

std::size_t ToyReIDDataset::view_count() const {
  int v = -1;
  for (int x : views) v = std::max(v, x);
  return static_cast<std::size_t>(v + 1);
}

bool ToyReIDDataset::is_train(int id) const {
  return std::find(train_ids.begin(), train_ids.end(), id) != train_ids.end();
}

Tensor<float> ToyReIDDataset::image(std::size_t i) const { return gather({i}).reshaped({3, height, width}); }

Tensor<float> ToyReIDDataset::gather(const std::vector<std::size_t>& which) const {
  const std::size_t per = 3 * height * width;
  Tensor<float> out({which.size(), 3, height, width});
  for (std::size_t k = 0; k < which.size(); ++k) {
    if (which[k] >= size()) throw ContractError("image index " + std::to_string(which[k]) + " out of range");
    std::copy(images.data() + which[k] * per, images.data() + (which[k] + 1) * per, out.data() + k * per);
  }
  return out;
}

std::vector<std::size_t> ToyReIDDataset::images_of(bool train) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i)
    if (is_train(ids[i]) == train) out.push_back(i);
  return out;
}

// ---- rendering --------------------------------------------------------------

namespace {

constexpr std::size_t kH = 32;
constexpr std::size_t kW = 16;

using Rgb = std::array<float, 3>;

// Palette used for the colour factor; values beyond the fourth reuse hues.
constexpr Rgb kPalette[] = {{0.85f, 0.15f, 0.15f},
                            {0.15f, 0.75f, 0.20f},
                            {0.15f, 0.25f, 0.85f},
                            {0.90f, 0.85f, 0.15f}};
constexpr Rgb kSkin = {0.74f, 0.68f, 0.62f};
constexpr Rgb kDark = {0.22f, 0.22f, 0.24f};
constexpr Rgb kBag = {0.95f, 0.95f, 0.92f};

struct Canvas {
  std::array<float, 3 * kH * kW> px{};

  void set(long y, long x, const Rgb& c) {
    if (y < 0 || x < 0 || y >= static_cast<long>(kH) || x >= static_cast<long>(kW)) return;
    for (std::size_t ch = 0; ch < 3; ++ch) px[(ch * kH + static_cast<std::size_t>(y)) * kW + static_cast<std::size_t>(x)] = c[ch];
  }
};

Rgb scaled(const Rgb& c, float k) { return {c[0] * k, c[1] * k, c[2] * k}; }

// Texture value at a garment pixel; (py, px) are garment-local coordinates.
Rgb texel(const Rgb& base, int texture, long py, long px, long phase) {
  switch (texture) {
    case 1: return ((py + phase) / 2) % 2 == 0 ? base : scaled(base, 0.45f);
    case 2: return (((py + phase) / 2) + ((px + phase) / 2)) % 2 == 0 ? base : scaled(base, 0.45f);
    default: return base;
  }
}

void render(const std::vector<int>& attrs, int view, Rng& rng, float* out) {
  const int color = attrs[0], texture = attrs[1], layout = attrs[2], carry = attrs[3];
  Canvas cv;

  // Background: view 0 is a bright vertical gradient, view 1 a darker floor
  // with horizontal bands.
  const float bg = view == 0 ? static_cast<float>(rng.uniform(0.55, 0.70)) : static_cast<float>(rng.uniform(0.25, 0.40));
  for (long y = 0; y < static_cast<long>(kH); ++y)
    for (long x = 0; x < static_cast<long>(kW); ++x) {
      float v = bg;
      if (view == 0) v += 0.006f * static_cast<float>(y);
      else if ((y / 4) % 2 == 0) v += 0.06f;
      cv.set(y, x, {v, v, v * (view == 0 ? 1.0f : 1.1f)});
    }

  const long dy = static_cast<long>(rng.below(5)) - 2;
  const long dx = static_cast<long>(rng.below(5)) - 2;
  const long phase = static_cast<long>(rng.below(4));
  const Rgb base = kPalette[color % 4];

  // Head.
  for (long y = 1; y <= 5; ++y)
    for (long x = 6; x <= 9; ++x) cv.set(y + dy, x + dx, kSkin);
  // Torso rows 6..17, cols 4..11; legs rows 18..30, cols 5..10 with a gap.
  for (long y = 6; y <= 17; ++y)
    for (long x = 4; x <= 11; ++x)
      cv.set(y + dy, x + dx, layout == 0 ? texel(base, texture, y - 6, x - 4, phase) : kDark);
  for (long y = 18; y <= 30; ++y)
    for (long x = 5; x <= 10; ++x) {
      if (x == 7 || x == 8) {
        if (y >= 22) continue;
      }
      cv.set(y + dy, x + dx, layout == 1 ? texel(base, texture, y - 18, x - 5, phase) : kDark);
    }
  if (carry == 1) {
    const long by = 11 + static_cast<long>(rng.below(3));
    for (long y = by; y < by + 6; ++y)
      for (long x = 12; x <= 14; ++x) cv.set(y + dy, x + dx, kBag);
  }

  // Lighting: view 1 is dimmer, lower contrast and blue-tinted.
  float gain, bias;
  Rgb cast{0, 0, 0};
  if (view == 0) {
    gain = static_cast<float>(rng.uniform(0.85, 1.15));
    bias = static_cast<float>(rng.uniform(-0.05, 0.05));
  } else {
    gain = static_cast<float>(rng.uniform(0.55, 0.80));
    bias = static_cast<float>(rng.uniform(0.00, 0.10));
    cast = {0.0f, 0.04f, 0.12f};
  }
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t p = 0; p < kH * kW; ++p) {
      const float v = cv.px[ch * kH * kW + p] * gain + bias + cast[ch] +
                      0.04f * static_cast<float>(rng.normal());
      out[ch * kH * kW + p] = static_cast<float>(ppm::quantize(v)) / 255.0f;
    }
}

std::vector<std::vector<int>> enumerate_combinations(const FactorSpec& spec) {
  std::vector<std::vector<int>> combos{{}};
  for (const Factor& f : spec.factors) {
    std::vector<std::vector<int>> next;
    for (const auto& c : combos)
      for (std::size_t v = 0; v < f.values.size(); ++v) {
        auto e = c;
        e.push_back(static_cast<int>(v));
        next.push_back(std::move(e));
      }
    combos = std::move(next);
  }
  return combos;
}

bool covers_all_values(const FactorSpec& spec, const std::vector<std::vector<int>>& rows) {
  for (std::size_t a = 0; a < spec.factors.size(); ++a) {
    std::set<int> seen;
    for (const auto& r : rows) seen.insert(r[a]);
    if (seen.size() != spec.factors[a].values.size()) return false;
  }
  return true;
}

}  // namespace

ToyReIDDataset generate_dataset(const FactorSpec& spec, const GenerateOptions& opts) {
  if (spec.factors.size() != 4)
    throw ContractError("the renderer draws exactly four factors (colour, texture, layout, carry)");
  for (const Factor& f : spec.factors)
    if (f.values.size() < 2) throw ContractError("factor '" + f.name + "' needs at least 2 values");
  if (spec.factors[2].values.size() > 2 || spec.factors[3].values.size() > 2 || spec.factors[1].values.size() > 3)
    throw ContractError("renderer supports at most 3 textures, 2 layouts and 2 carry states");
  const std::size_t space = spec.identity_space();
  if (opts.n_ids > space)
    throw CapacityError("requested " + std::to_string(opts.n_ids) + " identities but the factor space holds " +
                        std::to_string(space));
  if (opts.n_ids < 2 || opts.n_train == 0 || opts.n_train > opts.n_ids)
    throw ContractError("need n_ids >= 2 and 0 < n_train <= n_ids");
  if (opts.imgs_per_id_per_view == 0 || opts.views == 0 || opts.views > 2)
    throw ContractError("need at least one image per view and 1 or 2 views");

  // Identity -> factor combination via a seeded permutation; redraw (in a
  // deterministic sequence) until the training identities show every value.
  const auto combos = enumerate_combinations(spec);
  std::vector<std::vector<int>> chosen;
  for (std::uint64_t attempt = 0;; ++attempt) {
    std::vector<std::size_t> order(combos.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(opts.seed, {0x6964, attempt}));
    rng.shuffle(order);
    chosen.clear();
    for (std::size_t k = 0; k < opts.n_ids; ++k) chosen.push_back(combos[order[k]]);
    const std::vector<std::vector<int>> train(chosen.begin(), chosen.begin() + static_cast<long>(opts.n_train));
    if (covers_all_values(spec, train) || attempt == 1000) break;
  }

  ToyReIDDataset d;
  for (const Factor& f : spec.factors) {
    d.attribute_names.push_back(f.name);
    d.attribute_values.push_back(f.values);
  }
  d.attributes = chosen;
  for (std::size_t k = 0; k < opts.n_ids; ++k)
    (k < opts.n_train ? d.train_ids : d.test_ids).push_back(static_cast<int>(k));

  const std::size_t total = opts.n_ids * opts.views * opts.imgs_per_id_per_view;
  const std::size_t per = 3 * kH * kW;
  d.images = Tensor<float>({total, 3, kH, kW});
  std::size_t i = 0;
  for (std::size_t id = 0; id < opts.n_ids; ++id)
    for (std::size_t view = 0; view < opts.views; ++view)
      for (std::size_t idx = 0; idx < opts.imgs_per_id_per_view; ++idx, ++i) {
        Rng rng(derive_seed(opts.seed, {id, view, idx}));
        render(chosen[id], static_cast<int>(view), rng, d.images.data() + i * per);
        d.ids.push_back(static_cast<int>(id));
        d.views.push_back(static_cast<int>(view));
        d.index.push_back(static_cast<int>(idx));
      }
  return d;
}

GalleryProbeSplit split_gallery_probe(const ToyReIDDataset& data, const std::vector<int>& identities) {
  if (data.view_count() < 2) throw ContractError("gallery/probe split needs two views");
  GalleryProbeSplit s;
  std::set<int> wanted(identities.begin(), identities.end());
  std::map<int, std::array<bool, 2>> seen;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!wanted.count(data.ids[i])) continue;
    if (data.views[i] == 0) {
      s.probes.push_back(i);
      seen[data.ids[i]][0] = true;
    } else if (data.views[i] == 1) {
      s.gallery.push_back(i);
      seen[data.ids[i]][1] = true;
    }
  }
  for (int id : wanted) {
    const auto it = seen.find(id);
    if (it == seen.end() || !it->second[0] || !it->second[1])
      throw ContractError("identity " + std::to_string(id) + " lacks images in both views");
  }
  return s;
}

// ---- export / ingestion ---------------------------------------------------------

namespace {

std::string image_name(int id, int view, int idx) {
  return std::to_string(id) + "_" + std::to_string(view) + "_" + std::to_string(idx) + ".ppm";
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void export_dataset(const ToyReIDDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.csv").string());
  manifest << "file,id,view";
  for (const auto& name : data.attribute_names) manifest << ",attr_" << name;
  manifest << '\n';
  const std::size_t per = 3 * data.height * data.width;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string file = image_name(data.ids[i], data.views[i], data.index[i]);
    ppm::write(dir / file, data.images.data() + i * per, data.height, data.width);
    manifest << file << ',' << data.ids[i] << ',' << data.views[i];
    const auto& attrs = data.attributes[static_cast<std::size_t>(data.ids[i])];
    for (std::size_t a = 0; a < attrs.size(); ++a)
      manifest << ',' << data.attribute_values[a][static_cast<std::size_t>(attrs[a])];
    manifest << '\n';
  }
  std::ofstream splits(dir / "splits.csv", std::ios::trunc);
  splits << "id,split\n";
  for (std::size_t id = 0; id < data.id_count(); ++id)
    splits << id << ',' << (data.is_train(static_cast<int>(id)) ? "train" : "test") << '\n';
  if (!manifest || !splits) throw IoError("write failed under " + dir.string());
}

ToyReIDDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw IoError("cannot open " + (dir / "manifest.csv").string());
  std::string line;
  if (!std::getline(manifest, line)) throw IoError("empty manifest in " + dir.string());
  const auto header = split_csv(line);
  if (header.size() < 3 || header[0] != "file" || header[1] != "id" || header[2] != "view")
    throw IoError("manifest header must start with file,id,view");

  ToyReIDDataset d;
  for (std::size_t c = 3; c < header.size(); ++c) {
    if (!header[c].starts_with("attr_")) throw IoError("unexpected manifest column '" + header[c] + "'");
    d.attribute_names.push_back(header[c].substr(5));
  }
  d.attribute_values.resize(d.attribute_names.size());

  struct Row {
    std::string file;
    int id, view;
    std::vector<std::string> attrs;
  };
  std::vector<Row> rows;
  int max_id = -1;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) throw IoError("manifest row has wrong arity: " + line);
    Row r;
    r.file = cells[0];
    try {
      r.id = std::stoi(cells[1]);
      r.view = std::stoi(cells[2]);
    } catch (const std::logic_error&) {
      throw IoError("manifest row has non-integer id/view: " + line);
    }
    if (r.id < 0 || r.view < 0) throw IoError("negative id or view in manifest: " + line);
    r.attrs.assign(cells.begin() + 3, cells.end());
    max_id = std::max(max_id, r.id);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw IoError("manifest in " + dir.string() + " lists no images");

  // Attribute value vocabularies in order of first appearance.
  d.attributes.assign(static_cast<std::size_t>(max_id + 1), std::vector<int>(d.attribute_names.size(), -1));
  std::map<std::pair<int, int>, int> counters;
  std::vector<ppm::Image> pixels;
  for (const Row& r : rows) {
    auto& attrs = d.attributes[static_cast<std::size_t>(r.id)];
    for (std::size_t a = 0; a < r.attrs.size(); ++a) {
      auto& vocab = d.attribute_values[a];
      auto it = std::find(vocab.begin(), vocab.end(), r.attrs[a]);
      if (it == vocab.end()) {
        vocab.push_back(r.attrs[a]);
        it = vocab.end() - 1;
      }
      const int v = static_cast<int>(it - vocab.begin());
      if (attrs[a] != -1 && attrs[a] != v)
        throw IoError("identity " + std::to_string(r.id) + " has inconsistent attribute '" + d.attribute_names[a] + "'");
      attrs[a] = v;
    }
    pixels.push_back(ppm::read(dir / r.file));
    d.ids.push_back(r.id);
    d.views.push_back(r.view);
    d.index.push_back(counters[{r.id, r.view}]++);
  }
  d.height = pixels.front().height;
  d.width = pixels.front().width;
  const std::size_t per = 3 * d.height * d.width;
  d.images = Tensor<float>({rows.size(), 3, d.height, d.width});
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (pixels[i].height != d.height || pixels[i].width != d.width)
      throw IoError(rows[i].file + " has a different size from the first image");
    std::copy(pixels[i].chw.begin(), pixels[i].chw.end(), d.images.data() + i * per);
  }

  std::set<int> present(d.ids.begin(), d.ids.end());
  std::ifstream splits(dir / "splits.csv");
  if (splits) {
    std::getline(splits, line);
    while (std::getline(splits, line)) {
      if (line.empty()) continue;
      const auto cells = split_csv(line);
      if (cells.size() != 2) throw IoError("bad splits.csv row: " + line);
      const int id = std::stoi(cells[0]);
      if (!present.count(id)) continue;
      if (cells[1] == "train") d.train_ids.push_back(id);
      else if (cells[1] == "test") d.test_ids.push_back(id);
      else throw IoError("unknown split '" + cells[1] + "'");
    }
  } else {
    const std::vector<int> all(present.begin(), present.end());
    const std::size_t n_train = (all.size() * 2 + 2) / 3;
    for (std::size_t k = 0; k < all.size(); ++k) (k < n_train ? d.train_ids : d.test_ids).push_back(all[k]);
  }
  return d;
}

std::uint64_t directory_checksum(const std::filesystem::path& dir) {
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot read " + p.string());
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  const std::string manifest = slurp(dir / "manifest.csv");
  std::uint64_t h = fnv1a(manifest);
  std::stringstream ss(manifest);
  std::string line;
  std::getline(ss, line);
  while (std::getline(ss, line))
    if (!line.empty()) h = fnv1a(slurp(dir / split_csv(line)[0]), h);
  return h;
}

}  // namespace mlfn::synth
