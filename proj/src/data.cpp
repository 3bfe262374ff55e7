#include "mtlk/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "mtlk/error.hpp"

namespace mtlk {

namespace fs = std::filesystem;
using nlohmann::json;

BinaryMatrix Dataset::lesion_matrix() const {
  BinaryMatrix m{samples.size(), lesion_count(), {}};
  m.values.reserve(m.rows * m.cols);
  for (const auto& s : samples) m.values.insert(m.values.end(), s.lesions.begin(), s.lesions.end());
  return m;
}

std::vector<int> Dataset::locations() const {
  std::vector<int> v;
  v.reserve(samples.size());
  for (const auto& s : samples) v.push_back(s.location);
  return v;
}

std::vector<std::string> Dataset::ids() const {
  std::vector<std::string> v;
  v.reserve(samples.size());
  for (const auto& s : samples) v.push_back(s.id);
  return v;
}

void validate(const Dataset& ds) {
  std::set<std::string> seen;
  for (const auto& s : ds.samples) {
    if (!seen.insert(s.id).second) fail(ErrorKind::BadLabel, "duplicate sample id " + s.id);
    if (s.lesions.size() != ds.lesion_count()) {
      fail(ErrorKind::BadLabel, s.id + ": lesion vector has wrong length");
    }
    if (std::none_of(s.lesions.begin(), s.lesions.end(), [](auto u) { return u == 1; })) {
      fail(ErrorKind::BadLabel, s.id + ": no lesion label");
    }
    if (std::any_of(s.lesions.begin(), s.lesions.end(), [](auto u) { return u > 1; })) {
      fail(ErrorKind::BadLabel, s.id + ": lesion indicator outside {0,1}");
    }
    if (s.location < 1 || s.location > static_cast<int>(ds.location_count())) {
      fail(ErrorKind::BadLabel, s.id + ": location out of range");
    }
  }
  if (!ds.folds.empty() && ds.folds.size() != ds.size()) {
    fail(ErrorKind::BadConfig, "fold assignment does not cover the dataset");
  }
}

void assign_folds(Dataset& ds, std::size_t fold_count, std::uint64_t seed) {
  if (fold_count < 2) fail(ErrorKind::BadConfig, "need at least two folds");
  if (fold_count > ds.size()) fail(ErrorKind::BadConfig, "more folds than samples");
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span(order));
  ds.folds.assign(ds.size(), 0);
  for (std::size_t pos = 0; pos < order.size(); ++pos) ds.folds[order[pos]] = pos % fold_count;
  ds.fold_count = fold_count;
}

std::vector<std::size_t> fold_members(const Dataset& ds, std::size_t fold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.folds.size(); ++i) {
    if (ds.folds[i] == fold) out.push_back(i);
  }
  return out;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.lesion_names = ds.lesion_names;
  out.location_names = ds.location_names;
  out.samples.reserve(indices.size());
  for (auto i : indices) out.samples.push_back(ds.samples.at(i));
  return out;
}

// ---------------------------------------------------------------------------
// PPM / PGM

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

std::size_t parse_size(const std::string& tok, const fs::path& path) {
  try {
    std::size_t used = 0;
    const auto v = std::stoul(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::ParseError, path.string() + ": bad header field '" + tok + "'");
  }
}

}  // namespace

Tensor read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::MissingImage, path.string());
  const std::string magic = next_token(in);
  std::size_t channels = 0;
  if (magic == "P6") {
    channels = 3;
  } else if (magic == "P5") {
    channels = 1;
  } else {
    fail(ErrorKind::ParseError, path.string() + ": not a binary PPM/PGM");
  }
  const std::size_t width = parse_size(next_token(in), path);
  const std::size_t height = parse_size(next_token(in), path);
  const std::size_t maxval = parse_size(next_token(in), path);
  if (width == 0 || height == 0 || maxval == 0 || maxval > 255) {
    fail(ErrorKind::ParseError, path.string() + ": unsupported dimensions or depth");
  }
  std::vector<unsigned char> raw(width * height * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    fail(ErrorKind::ParseError, path.string() + ": truncated pixel data");
  }
  Tensor img({channels, height, width});
  const double scale = static_cast<double>(maxval);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        img[(c * height + y) * width + x] = raw[(y * width + x) * channels + c] / scale;
      }
    }
  }
  return img;
}

void write_pnm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    fail(ErrorKind::ShapeMismatch, "write_pnm: expected [1|3,H,W], got " + shape_string(image.shape));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << (c == 3 ? "P6" : "P5") << '\n' << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> raw(c * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(image[(ch * h + y) * w + x], 0.0, 1.0);
        raw[(y * w + x) * c + ch] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

// ---------------------------------------------------------------------------
// manifest

namespace {

[[noreturn]] void parse_error(std::size_t line, const std::string& reason) {
  fail(ErrorKind::ParseError, "line " + std::to_string(line) + ": " + reason);
}

std::vector<std::string> name_list(const json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || !j[key].is_array()) parse_error(line, std::string("missing array '") + key + "'");
  std::vector<std::string> names;
  for (const auto& v : j[key]) {
    if (!v.is_string()) parse_error(line, std::string("non-string entry in '") + key + "'");
    names.push_back(v.get<std::string>());
  }
  return names;
}

std::vector<std::string> dedupe(const std::vector<std::string>& names) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (seen.insert(n).second) out.push_back(n);
  }
  return out;
}

std::string string_field(const json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || !j[key].is_string()) parse_error(line, std::string("missing string '") + key + "'");
  return j[key].get<std::string>();
}

}  // namespace

Dataset load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot read manifest " + path.string());
  const fs::path base = path.parent_path();

  Dataset ds;
  std::map<std::string, std::size_t> lesion_index, location_index;
  std::set<std::string> ids;
  bool have_header = false;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      parse_error(line, e.what());
    }
    if (!j.is_object()) parse_error(line, "expected a JSON object");

    if (!have_header) {
      ds.lesion_names = dedupe(name_list(j, "lesions", line));
      ds.location_names = dedupe(name_list(j, "locations", line));
      for (std::size_t i = 0; i < ds.lesion_names.size(); ++i) lesion_index[ds.lesion_names[i]] = i;
      for (std::size_t i = 0; i < ds.location_names.size(); ++i) location_index[ds.location_names[i]] = i;
      have_header = true;
      continue;
    }

    Sample s;
    s.id = string_field(j, "id", line);
    if (!ids.insert(s.id).second) parse_error(line, "duplicate id " + s.id);
    const auto lesions = name_list(j, "lesions", line);
    if (lesions.empty()) parse_error(line, "record has no lesion labels");
    s.lesions.assign(ds.lesion_count(), 0);
    for (const auto& name : lesions) {
      auto it = lesion_index.find(name);
      if (it == lesion_index.end()) fail(ErrorKind::UnknownLabel, name);
      s.lesions[it->second] = 1;
    }
    const auto location = string_field(j, "location", line);
    auto it = location_index.find(location);
    if (it == location_index.end()) fail(ErrorKind::UnknownLabel, location);
    s.location = static_cast<int>(it->second) + 1;

    const fs::path image = base / string_field(j, "image", line);
    if (!fs::exists(image)) fail(ErrorKind::MissingImage, image.string());
    s.image = read_ppm(image);
    ds.samples.push_back(std::move(s));
  }
  if (!have_header) parse_error(line + 1, "missing header line");
  return ds;
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "images");
  std::ofstream out(dir / "manifest.jsonl");
  if (!out) fail(ErrorKind::IoError, "cannot write " + (dir / "manifest.jsonl").string());
  out << json{{"lesions", ds.lesion_names}, {"locations", ds.location_names}}.dump() << '\n';
  for (const auto& s : ds.samples) {
    const std::string rel = "images/" + s.id + ".ppm";
    write_pnm(dir / rel, s.image);
    std::vector<std::string> lesions;
    for (std::size_t i = 0; i < s.lesions.size(); ++i) {
      if (s.lesions[i]) lesions.push_back(ds.lesion_names[i]);
    }
    json rec{{"id", s.id},
             {"image", rel},
             {"lesions", lesions},
             {"location", ds.location_names.at(static_cast<std::size_t>(s.location - 1))}};
    out << rec.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// synthesis

std::vector<std::vector<double>> diagonal_correlation(std::size_t lesions, std::size_t locations,
                                                      double strength) {
  std::vector<std::vector<double>> r(lesions, std::vector<double>(locations, 0.0));
  const double rest = locations > 1 ? (1.0 - strength) / static_cast<double>(locations - 1) : 0.0;
  for (std::size_t i = 0; i < lesions; ++i) {
    for (std::size_t j = 0; j < locations; ++j) r[i][j] = (j == i % locations) ? strength : rest;
  }
  return r;
}

void validate(const SynthSpec& s) {
  auto bad = [](const std::string& why) { fail(ErrorKind::BadSpec, why); };
  if (s.lesions < 1) bad("need at least one lesion class");
  if (s.locations < 2) bad("need at least two locations");
  if (s.channels != 1 && s.channels != 3) bad("channels must be 1 or 3");
  if (s.image_size < s.glyph_size || s.glyph_size == 0) bad("glyph does not fit the image");
  if (s.noise < 0) bad("negative noise");
  if (s.secondary_prob < 0 || s.secondary_prob > 1) bad("secondary_prob outside [0,1]");
  if (s.correlation.empty()) return;
  if (s.correlation.size() != s.lesions) bad("correlation must have one row per lesion");
  for (const auto& row : s.correlation) {
    if (row.size() != s.locations) bad("correlation row has wrong length");
    double total = 0.0;
    for (double v : row) {
      if (!(v >= 0.0)) bad("correlation entries must be nonnegative");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) bad("correlation rows must sum to 1");
  }
}

namespace {

struct Vocabulary {
  // location backgrounds
  std::vector<std::vector<double>> base;    // [Q][C]
  std::vector<std::vector<double>> stripe;  // [Q][C] per-channel stripe weight
  std::vector<std::size_t> orientation;     // 0 horizontal, 1 vertical, 2 diagonal
  std::vector<double> period;
  // lesion glyphs
  std::vector<std::vector<std::uint8_t>> glyph;  // [P][g*g]
  std::vector<std::vector<double>> ink;          // [P][C]
};

Vocabulary make_vocabulary(const SynthSpec& s, Rng& rng) {
  Vocabulary v;
  for (std::size_t j = 0; j < s.locations; ++j) {
    std::vector<double> base(s.channels), stripe(s.channels);
    for (auto& b : base) b = rng.uniform(0.35, 0.65);
    for (auto& w : stripe) w = rng.uniform(0.5, 1.0);
    v.base.push_back(base);
    v.stripe.push_back(stripe);
    v.orientation.push_back(j % 3);
    v.period.push_back(4.0 + 2.0 * static_cast<double>((j / 3) % 4));
  }
  const std::size_t cells = s.glyph_size * s.glyph_size;
  for (std::size_t i = 0; i < s.lesions; ++i) {
    std::vector<std::uint8_t> g(cells, 0);
    while (std::count(g.begin(), g.end(), 1) < static_cast<std::ptrdiff_t>(cells / 3)) {
      g[rng.below(cells)] = 1;
    }
    std::vector<double> ink(s.channels);
    for (auto& c : ink) c = rng.bernoulli(0.5) ? rng.uniform(0.6, 1.0) : -rng.uniform(0.6, 1.0);
    v.glyph.push_back(std::move(g));
    v.ink.push_back(std::move(ink));
  }
  return v;
}

std::size_t draw_categorical(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    acc += probs[j];
    if (u < acc) return j;
  }
  // u landed in the rounding slack; return the last nonzero category
  for (std::size_t j = probs.size(); j-- > 0;) {
    if (probs[j] > 0) return j;
  }
  return 0;
}

Tensor render(const SynthSpec& s, const Vocabulary& vocab, const std::vector<std::uint8_t>& lesions,
              std::size_t location, Rng& rng) {
  const std::size_t n = s.image_size, g = s.glyph_size;
  Tensor img({s.channels, n, n});
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double period = vocab.period[location];
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      double coord = 0.0;
      switch (vocab.orientation[location]) {
        case 0: coord = static_cast<double>(y); break;
        case 1: coord = static_cast<double>(x); break;
        default: coord = static_cast<double>(x + y) / std::numbers::sqrt2; break;
      }
      const double wave = std::sin(2.0 * std::numbers::pi * coord / period + phase);
      for (std::size_t c = 0; c < s.channels; ++c) {
        img[(c * n + y) * n + x] =
            vocab.base[location][c] + s.background_contrast * vocab.stripe[location][c] * wave;
      }
    }
  }
  for (std::size_t i = 0; i < lesions.size(); ++i) {
    if (!lesions[i]) continue;
    for (std::size_t copy = 0; copy < s.glyphs_per_lesion; ++copy) {
      const std::size_t top = rng.below(n - g + 1), left = rng.below(n - g + 1);
      for (std::size_t dy = 0; dy < g; ++dy) {
        for (std::size_t dx = 0; dx < g; ++dx) {
          if (!vocab.glyph[i][dy * g + dx]) continue;
          for (std::size_t c = 0; c < s.channels; ++c) {
            img[(c * n + top + dy) * n + left + dx] += s.glyph_contrast * vocab.ink[i][c];
          }
        }
      }
    }
  }
  for (auto& v : img.values) {
    if (s.noise > 0) v += s.noise * rng.normal();
    v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  }
  return img;
}

}  // namespace

Dataset synthesize(const SynthSpec& requested) {
  validate(requested);
  SynthSpec spec = requested;
  if (spec.correlation.empty()) spec.correlation = diagonal_correlation(spec.lesions, spec.locations, 0.8);
  Rng vocab_rng(derive_seed(spec.seed, 0));
  const Vocabulary vocab = make_vocabulary(spec, vocab_rng);

  Dataset ds;
  for (std::size_t i = 0; i < spec.lesions; ++i) ds.lesion_names.push_back("lesion" + std::to_string(i));
  for (std::size_t j = 0; j < spec.locations; ++j) ds.location_names.push_back("location" + std::to_string(j));

  Rng label_rng(derive_seed(spec.seed, 1));
  Rng pixel_rng(derive_seed(spec.seed, 2));
  const std::size_t width = std::to_string(spec.count > 0 ? spec.count - 1 : 0).size();
  for (std::size_t n = 0; n < spec.count; ++n) {
    Sample s;
    std::string num = std::to_string(n);
    s.id = "s" + std::string(width > num.size() ? width - num.size() : 0, '0') + num;
    s.lesions.assign(spec.lesions, 0);
    const std::size_t primary = label_rng.below(spec.lesions);
    s.lesions[primary] = 1;
    const std::size_t location = draw_categorical(spec.correlation[primary], label_rng);
    s.location = static_cast<int>(location) + 1;
    if (spec.lesions > 1 && label_rng.bernoulli(spec.secondary_prob)) {
      std::size_t extra = label_rng.below(spec.lesions - 1);
      if (extra >= primary) ++extra;
      s.lesions[extra] = 1;
    }
    s.image = render(spec, vocab, s.lesions, location, pixel_rng);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s;
  try {
    s.lesions = j.value("lesions", s.lesions);
    s.locations = j.value("locations", s.locations);
    s.count = j.value("count", s.count);
    s.noise = j.value("noise", s.noise);
    s.image_size = j.value("image_size", s.image_size);
    s.channels = j.value("channels", s.channels);
    s.secondary_prob = j.value("secondary_prob", s.secondary_prob);
    s.background_contrast = j.value("background_contrast", s.background_contrast);
    s.glyph_contrast = j.value("glyph_contrast", s.glyph_contrast);
    s.glyphs_per_lesion = j.value("glyphs_per_lesion", s.glyphs_per_lesion);
    s.glyph_size = j.value("glyph_size", s.glyph_size);
    s.seed = j.value("seed", s.seed);
    if (j.contains("correlation")) {
      const auto& c = j["correlation"];
      if (c.is_array()) {
        s.correlation = c.get<std::vector<std::vector<double>>>();
      } else if (c.is_object() && c.value("kind", std::string()) == "diagonal") {
        s.correlation = diagonal_correlation(s.lesions, s.locations, c.value("strength", 0.8));
      } else if (c.is_object() && c.value("kind", std::string()) == "uniform") {
        s.correlation = diagonal_correlation(s.lesions, s.locations, 1.0 / static_cast<double>(s.locations));
      } else {
        fail(ErrorKind::BadSpec, "correlation must be a matrix or {kind: diagonal|uniform}");
      }
    } else {
      s.correlation = diagonal_correlation(s.lesions, s.locations, 0.8);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::BadSpec, e.what());
  }
  validate(s);
  return s;
}

json to_json(const SynthSpec& s) {
  return json{{"lesions", s.lesions},
              {"locations", s.locations},
              {"count", s.count},
              {"correlation", s.correlation},
              {"noise", s.noise},
              {"image_size", s.image_size},
              {"channels", s.channels},
              {"secondary_prob", s.secondary_prob},
              {"background_contrast", s.background_contrast},
              {"glyph_contrast", s.glyph_contrast},
              {"glyphs_per_lesion", s.glyphs_per_lesion},
              {"glyph_size", s.glyph_size},
              {"seed", s.seed}};
}

// ---------------------------------------------------------------------------
// augmentation

void validate(const AugmentConfig& c) {
  if (c.crop == 0) fail(ErrorKind::BadConfig, "crop must be positive");
  if (c.jitter_min > c.jitter_max) fail(ErrorKind::BadConfig, "jitter_min > jitter_max");
  if (c.crop > c.jitter_min) fail(ErrorKind::CropTooLarge, "crop exceeds the smallest jitter scale");
  if (c.crop > c.eval_scale) fail(ErrorKind::CropTooLarge, "crop exceeds the evaluation scale");
  if (c.flip_prob < 0 || c.flip_prob > 1) fail(ErrorKind::BadConfig, "flip_prob outside [0,1]");
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  if (image.rank() != 3) fail(ErrorKind::ShapeMismatch, "resize: expected [C,H,W]");
  if (height == 0 || width == 0) fail(ErrorKind::ShapeMismatch, "resize: zero target size");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == height && w == width) return Tensor(image.shape, image.values);

  auto axis = [](std::size_t out, std::size_t in) {
    std::vector<std::pair<std::size_t, double>> map(out);
    for (std::size_t i = 0; i < out; ++i) {
      const double src = out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) /
                                       static_cast<double>(out - 1)
                                 : 0.0;
      auto lo = static_cast<std::size_t>(std::floor(src));
      if (lo >= in - 1) lo = in > 1 ? in - 2 : 0;
      map[i] = {lo, in > 1 ? src - static_cast<double>(lo) : 0.0};
    }
    return map;
  };
  const auto ys = axis(height, h), xs = axis(width, w);
  Tensor out({c, height, width});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = image.values.data() + ch * h * w;
    for (std::size_t y = 0; y < height; ++y) {
      const auto [y0, fy] = ys[y];
      const std::size_t y1 = std::min(y0 + 1, h - 1);
      for (std::size_t x = 0; x < width; ++x) {
        const auto [x0, fx] = xs[x];
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
        const double bottom = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
        out[(ch * height + y) * width + x] = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

Tensor resize_shorter(const Tensor& image, std::size_t side) {
  if (image.rank() != 3) fail(ErrorKind::ShapeMismatch, "resize: expected [C,H,W]");
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (h <= w) {
    const auto nw = static_cast<std::size_t>(std::lround(static_cast<double>(w) * side / static_cast<double>(h)));
    return resize_bilinear(image, side, nw);
  }
  const auto nh = static_cast<std::size_t>(std::lround(static_cast<double>(h) * side / static_cast<double>(w)));
  return resize_bilinear(image, nh, side);
}

Tensor subtract_mean(Tensor image, std::span<const double> channel_mean) {
  if (channel_mean.empty()) return image;
  if (channel_mean.size() != image.dim(0)) {
    fail(ErrorKind::DimensionMismatch, "channel mean has " + std::to_string(channel_mean.size()) +
                                           " entries for " + std::to_string(image.dim(0)) + " channels");
  }
  const std::size_t area = image.dim(1) * image.dim(2);
  for (std::size_t i = 0; i < image.size(); ++i) image[i] -= channel_mean[i / area];
  return image;
}

Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t size) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (top + size > h || left + size > w) {
    fail(ErrorKind::CropTooLarge, std::to_string(size) + "px crop at (" + std::to_string(top) + "," +
                                      std::to_string(left) + ") exceeds " + shape_string(image.shape));
  }
  Tensor out({c, size, size});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < size; ++y) {
      const double* src = image.values.data() + (ch * h + top + y) * w + left;
      std::copy(src, src + size, out.values.begin() + static_cast<std::ptrdiff_t>((ch * size + y) * size));
    }
  }
  return out;
}

Tensor flip_horizontal(const Tensor& image) {
  Tensor out(image.shape, image.values);
  const std::size_t w = image.dim(2);
  for (std::size_t row = 0; row < image.size() / w; ++row) {
    std::reverse(out.values.begin() + static_cast<std::ptrdiff_t>(row * w),
                 out.values.begin() + static_cast<std::ptrdiff_t>((row + 1) * w));
  }
  return out;
}

std::vector<double> channel_mean(const Dataset& ds) {
  if (ds.samples.empty()) return {};
  const std::size_t c = ds.samples.front().image.dim(0);
  std::vector<double> sum(c, 0.0);
  std::vector<double> count(c, 0.0);
  for (const auto& s : ds.samples) {
    if (s.image.dim(0) != c) fail(ErrorKind::DimensionMismatch, s.id + ": channel count differs");
    const std::size_t area = s.image.dim(1) * s.image.dim(2);
    for (std::size_t i = 0; i < s.image.size(); ++i) sum[i / area] += s.image[i];
    for (auto& n : count) n += static_cast<double>(area);
  }
  for (std::size_t i = 0; i < c; ++i) sum[i] /= count[i];
  return sum;
}

Tensor augment(const Sample& sample, Rng& rng, const AugmentConfig& cfg,
               std::span<const double> channel_mean) {
  validate(cfg);
  const std::size_t side = rng.between(cfg.jitter_min, cfg.jitter_max);
  Tensor img = subtract_mean(resize_shorter(sample.image, side), channel_mean);
  const std::size_t h = img.dim(1), w = img.dim(2);
  if (cfg.crop > h || cfg.crop > w) fail(ErrorKind::CropTooLarge, "crop exceeds resized image");
  const std::size_t top = rng.below(h - cfg.crop + 1);
  const std::size_t left = rng.below(w - cfg.crop + 1);
  Tensor out = crop(img, top, left, cfg.crop);
  if (rng.bernoulli(cfg.flip_prob)) out = flip_horizontal(out);
  return out;
}

std::array<CropOffset, 5> five_crop_offsets(std::size_t height, std::size_t width, std::size_t size) {
  if (size > height || size > width) {
    fail(ErrorKind::CropTooLarge, std::to_string(size) + "px crop from " + std::to_string(height) +
                                      "x" + std::to_string(width));
  }
  const std::size_t bottom = height - size, right = width - size;
  return {CropOffset{0, 0}, CropOffset{0, right}, CropOffset{bottom, 0}, CropOffset{bottom, right},
          CropOffset{bottom / 2, right / 2}};
}

std::vector<Tensor> ten_crop(const Tensor& image, std::size_t size) {
  const auto offsets = five_crop_offsets(image.dim(1), image.dim(2), size);
  std::vector<Tensor> out;
  out.reserve(10);
  for (const auto& o : offsets) out.push_back(crop(image, o.top, o.left, size));
  for (std::size_t i = 0; i < 5; ++i) out.push_back(flip_horizontal(out[i]));
  return out;
}

std::vector<Tensor> ten_crop(const Sample& sample, const AugmentConfig& cfg,
                             std::span<const double> channel_mean) {
  return ten_crop(subtract_mean(resize_shorter(sample.image, cfg.eval_scale), channel_mean), cfg.crop);
}

Tensor center_view(const Sample& sample, const AugmentConfig& cfg,
                   std::span<const double> channel_mean) {
  Tensor img = subtract_mean(resize_shorter(sample.image, cfg.eval_scale), channel_mean);
  const auto offsets = five_crop_offsets(img.dim(1), img.dim(2), cfg.crop);
  return crop(img, offsets[4].top, offsets[4].left, cfg.crop);
}

}  // namespace mtlk
