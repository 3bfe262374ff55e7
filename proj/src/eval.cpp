#include "mtlk/eval.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "mtlk/error.hpp"

namespace mtlk {

using nlohmann::json;

const char* to_string(ScoreKind kind) { return kind == ScoreKind::Lesion ? "lesion" : "location"; }

void validate(const ScoreMatrix& s) {
  if (s.values.size() != s.rows * s.cols || s.ids.size() != s.rows) {
    fail(ErrorKind::MatrixMismatch, "score matrix dimensions are inconsistent");
  }
  if (!s.class_names.empty() && s.class_names.size() != s.cols) {
    fail(ErrorKind::MatrixMismatch, "score matrix has the wrong number of class names");
  }
  if (std::any_of(s.values.begin(), s.values.end(), [](double v) { return std::isnan(v); })) {
    fail(ErrorKind::MatrixMismatch, "score matrix contains NaN");
  }
  if (std::set<std::string>(s.ids.begin(), s.ids.end()).size() != s.ids.size()) {
    fail(ErrorKind::MatrixMismatch, "score matrix ids are not unique");
  }
}

std::vector<std::size_t> ranking(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    fail(ErrorKind::MatrixMismatch, "average_precision: scores and labels differ in length");
  }
  const auto positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0) fail(ErrorKind::NoPositives, "ranking has no positive label");
  // Recall only moves at hits, by 1/positives each time.
  double ap = 0.0;
  std::size_t hits = 0;
  const auto order = ranking(scores);
  for (std::size_t cut = 0; cut < order.size(); ++cut) {
    if (labels[order[cut]] != 1) continue;
    ++hits;
    ap += static_cast<double>(hits) / static_cast<double>(cut + 1);
  }
  return ap / positives;
}

namespace {

void check_shapes(const ScoreMatrix& s, const BinaryMatrix& u) {
  if (s.rows != u.rows || s.cols != u.cols || s.values.size() != s.rows * s.cols) {
    fail(ErrorKind::MatrixMismatch, "scores [" + std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                                        "] vs labels [" + std::to_string(u.rows) + "x" +
                                        std::to_string(u.cols) + "]");
  }
}

MapResult finish(MapResult r) {
  double total = 0.0;
  std::size_t used = 0;
  for (const auto& ap : r.per_item) {
    if (ap) {
      total += *ap;
      ++used;
    }
  }
  r.mean = used ? total / static_cast<double>(used) : 0.0;
  return r;
}

}  // namespace

MapResult map_class(const ScoreMatrix& s, const BinaryMatrix& u) {
  check_shapes(s, u);
  MapResult r;
  std::vector<double> col(s.rows);
  std::vector<std::uint8_t> lab(s.rows);
  for (std::size_t c = 0; c < s.cols; ++c) {
    for (std::size_t i = 0; i < s.rows; ++i) {
      col[i] = s.at(i, c);
      lab[i] = u.at(i, c);
    }
    if (std::count(lab.begin(), lab.end(), 1) == 0) {
      r.per_item.emplace_back();
      r.excluded.push_back(c);
    } else {
      r.per_item.emplace_back(average_precision(col, lab));
    }
  }
  return finish(std::move(r));
}

MapResult map_image(const ScoreMatrix& s, const BinaryMatrix& u) {
  check_shapes(s, u);
  MapResult r;
  for (std::size_t i = 0; i < s.rows; ++i) {
    const auto lab = u.row(i);
    if (std::count(lab.begin(), lab.end(), 1) == 0) {
      r.per_item.emplace_back();
      r.excluded.push_back(i);
    } else {
      r.per_item.emplace_back(average_precision(s.row(i), lab));
    }
  }
  return finish(std::move(r));
}

double top_k_accuracy(const ScoreMatrix& s, std::span<const int> labels, std::size_t k) {
  if (k < 1 || k > s.cols) {
    fail(ErrorKind::BadK, "k=" + std::to_string(k) + " outside 1.." + std::to_string(s.cols));
  }
  if (labels.size() != s.rows) fail(ErrorKind::MatrixMismatch, "top_k: one label per row required");
  if (s.rows == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < s.rows; ++i) {
    const int v = labels[i];
    if (v < 1 || v > static_cast<int>(s.cols)) fail(ErrorKind::BadLabel, "location label out of range");
    const auto order = ranking(s.row(i));
    if (std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                  static_cast<std::size_t>(v - 1)) != order.begin() + static_cast<std::ptrdiff_t>(k)) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(s.rows);
}

CorrelationMatrix correlation_matrix(const Dataset& ds) {
  CorrelationMatrix r;
  r.lesions = ds.lesion_count();
  r.locations = ds.location_count();
  r.values.assign(r.lesions * r.locations, 0.0);
  r.lesion_counts.assign(r.lesions, 0);
  r.location_counts.assign(r.locations, 0);
  std::vector<std::size_t> joint(r.lesions * r.locations, 0);
  for (const auto& s : ds.samples) {
    const auto j = static_cast<std::size_t>(s.location - 1);
    ++r.location_counts.at(j);
    for (std::size_t i = 0; i < r.lesions; ++i) {
      if (!s.lesions[i]) continue;
      ++r.lesion_counts[i];
      ++joint[i * r.locations + j];
    }
  }
  for (std::size_t i = 0; i < r.lesions; ++i) {
    if (r.lesion_counts[i] == 0) {
      r.empty_rows.push_back(i);
      continue;
    }
    for (std::size_t j = 0; j < r.locations; ++j) {
      r.values[i * r.locations + j] = static_cast<double>(joint[i * r.locations + j]) /
                                      static_cast<double>(r.lesion_counts[i]);
    }
  }
  return r;
}

namespace {

template <typename Combine>
ScoreMatrix combine(const ScoreMatrix& a, const ScoreMatrix& b, Combine f) {
  if (a.kind != b.kind || a.rows != b.rows || a.cols != b.cols || a.ids != b.ids ||
      a.values.size() != b.values.size()) {
    fail(ErrorKind::MatrixMismatch, "ensemble inputs differ in kind, shape or ids");
  }
  ScoreMatrix out = a;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = f(a.values[i], b.values[i]);
  return out;
}

}  // namespace

ScoreMatrix ensemble_max(const ScoreMatrix& a, const ScoreMatrix& b) {
  return combine(a, b, [](double x, double y) { return std::max(x, y); });
}

ScoreMatrix ensemble_mean(const ScoreMatrix& a, const ScoreMatrix& b) {
  return combine(a, b, [](double x, double y) { return 0.5 * (x + y); });
}

LesionMetrics lesion_metrics(const ScoreMatrix& scores, const BinaryMatrix& labels) {
  LesionMetrics m;
  const MapResult cls = map_class(scores, labels);
  m.map_class = cls.mean;
  m.map_image = map_image(scores, labels).mean;
  m.class_ap = cls.per_item;
  for (auto c : cls.excluded) {
    m.excluded_classes.push_back(c < scores.class_names.size() ? scores.class_names[c] : std::to_string(c));
  }
  return m;
}

LocationMetrics location_metrics(const ScoreMatrix& scores, std::span<const int> labels) {
  return {top_k_accuracy(scores, labels, 1), top_k_accuracy(scores, labels, std::min<std::size_t>(3, scores.cols))};
}

json to_json(const MetricReport& r) {
  json j = json::object();
  if (r.lesion) {
    json per_class = json::object();
    for (std::size_t c = 0; c < r.lesion->class_ap.size(); ++c) {
      const std::string name = c < r.lesion_names.size() ? r.lesion_names[c] : std::to_string(c);
      per_class[name] = r.lesion->class_ap[c] ? json(*r.lesion->class_ap[c]) : json(nullptr);
    }
    j["lesion"] = {{"per_class_ap", per_class},
                   {"map_class", r.lesion->map_class},
                   {"map_image", r.lesion->map_image},
                   {"excluded_classes", r.lesion->excluded_classes}};
  }
  if (r.location) j["location"] = {{"top1", r.location->top1}, {"top3", r.location->top3}};
  return j;
}

json to_json(const CorrelationMatrix& r, const Dataset& ds) {
  json rows = json::array();
  for (std::size_t i = 0; i < r.lesions; ++i) {
    rows.push_back(std::vector<double>(r.values.begin() + static_cast<std::ptrdiff_t>(i * r.locations),
                                       r.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * r.locations)));
  }
  std::vector<std::string> empty;
  for (auto i : r.empty_rows) empty.push_back(ds.lesion_names[i]);
  return json{{"lesions", ds.lesion_names},
              {"locations", ds.location_names},
              {"R", rows},
              {"lesion_counts", r.lesion_counts},
              {"location_counts", r.location_counts},
              {"empty_rows", empty}};
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void write_scores_csv(const std::filesystem::path& path, const ScoreMatrix& s) {
  validate(s);
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << "id";
  for (std::size_t c = 0; c < s.cols; ++c) out << ',' << (c < s.class_names.size() ? s.class_names[c] : std::to_string(c));
  out << '\n';
  for (std::size_t i = 0; i < s.rows; ++i) {
    out << s.ids[i];
    for (std::size_t c = 0; c < s.cols; ++c) out << ',' << format_double(s.at(i, c));
    out << '\n';
  }
}

ScoreMatrix read_scores_csv(const std::filesystem::path& path, ScoreKind kind) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::ParseError, path.string() + ": empty score file");
  auto header = split_csv(line);
  if (header.empty() || header[0] != "id") fail(ErrorKind::ParseError, path.string() + ": header must start with 'id'");
  ScoreMatrix s;
  s.kind = kind;
  s.class_names.assign(header.begin() + 1, header.end());
  s.cols = s.class_names.size();
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto fields = split_csv(line);
    if (fields.size() != s.cols + 1) {
      fail(ErrorKind::ParseError, path.string() + ": line " + std::to_string(lineno) + " has " +
                                      std::to_string(fields.size()) + " fields");
    }
    s.ids.push_back(fields[0]);
    for (std::size_t c = 1; c < fields.size(); ++c) {
      double v = 0.0;
      const auto& f = fields[c];
      auto res = std::from_chars(f.data(), f.data() + f.size(), v);
      if (res.ec != std::errc() || res.ptr != f.data() + f.size()) {
        fail(ErrorKind::ParseError, path.string() + ": line " + std::to_string(lineno) + ": bad number '" + f + "'");
      }
      s.values.push_back(v);
    }
    ++s.rows;
  }
  validate(s);
  return s;
}

std::string correlation_csv(const CorrelationMatrix& r, const Dataset& ds) {
  std::ostringstream os;
  os << "lesion";
  for (const auto& name : ds.location_names) os << ',' << name;
  os << '\n';
  for (std::size_t i = 0; i < r.lesions; ++i) {
    os << ds.lesion_names[i];
    for (std::size_t j = 0; j < r.locations; ++j) os << ',' << format_double(r.at(i, j));
    os << '\n';
  }
  return os.str();
}

ScoreMatrix align_rows(const ScoreMatrix& s, std::span<const std::string> ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < s.rows; ++i) index[s.ids[i]] = i;
  ScoreMatrix out;
  out.kind = s.kind;
  out.class_names = s.class_names;
  out.cols = s.cols;
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) fail(ErrorKind::MatrixMismatch, "no scores for id " + id);
    out.ids.push_back(id);
    auto row = s.row(it->second);
    out.values.insert(out.values.end(), row.begin(), row.end());
    ++out.rows;
  }
  return out;
}

}  // namespace mtlk
