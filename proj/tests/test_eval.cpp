#include <algorithm>
#include <cmath>
#include <functional>

#include "doctest.h"
#include "mtlk/error.hpp"
#include "mtlk/eval.hpp"
#include "mtlk/rng.hpp"
#include "support/map_oracle.hpp"
#include "support/temp_dir.hpp"

using namespace mtlk;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an mtlk::Error");
  return ErrorKind::IoError;
}

ScoreMatrix matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                   ScoreKind kind = ScoreKind::Lesion) {
  ScoreMatrix s;
  s.kind = kind;
  s.rows = rows;
  s.cols = cols;
  s.values = std::move(values);
  for (std::size_t i = 0; i < rows; ++i) s.ids.push_back("r" + std::to_string(i));
  for (std::size_t j = 0; j < cols; ++j) s.class_names.push_back("c" + std::to_string(j));
  return s;
}

Dataset labelled(const std::vector<std::vector<std::uint8_t>>& lesions, const std::vector<int>& locations,
                 std::size_t q) {
  Dataset ds;
  for (std::size_t j = 0; j < lesions.at(0).size(); ++j) ds.lesion_names.push_back("l" + std::to_string(j));
  for (std::size_t j = 0; j < q; ++j) ds.location_names.push_back("b" + std::to_string(j));
  for (std::size_t i = 0; i < lesions.size(); ++i) {
    ds.samples.push_back(Sample{"s" + std::to_string(i), Tensor({1, 1, 1}), lesions[i], locations[i]});
  }
  return ds;
}

}  // namespace

TEST_CASE("average precision fixtures") {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  const std::vector<std::uint8_t> l{1, 0, 1, 0};
  CHECK(std::abs(average_precision(s, l) - (1.0 + 2.0 / 3.0) / 2.0) < 1e-15);
  CHECK(average_precision(s, std::vector<std::uint8_t>{1, 1, 0, 0}) == 1.0);
  CHECK(average_precision(s, std::vector<std::uint8_t>{0, 0, 0, 1}) == 0.25);
  CHECK(kind_of([&] { average_precision(s, std::vector<std::uint8_t>{0, 0, 0, 0}); }) == ErrorKind::NoPositives);
}

TEST_CASE("ranking breaks ties by ascending index") {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.1};
  CHECK(ranking(s) == std::vector<std::size_t>{1, 0, 2, 3});
}

TEST_CASE("mAP-class") {
  SUBCASE("single class equals its AP") {
    const auto s = matrix(4, 1, {0.9, 0.8, 0.7, 0.6});
    const BinaryMatrix u{4, 1, {1, 0, 1, 0}};
    CHECK(map_class(s, u).mean == average_precision(s.values, u.values));
  }
  SUBCASE("perfect scores") {
    const BinaryMatrix u{3, 2, {1, 0, 0, 1, 1, 1}};
    const auto s = matrix(3, 2, {1, 0, 0, 1, 1, 1});
    CHECK(map_class(s, u).mean == 1.0);
  }
  SUBCASE("classes without positives are excluded") {
    const BinaryMatrix u{2, 2, {1, 0, 0, 0}};
    const auto r = map_class(matrix(2, 2, {0.3, 0.4, 0.2, 0.1}), u);
    CHECK(r.mean == 1.0);
    CHECK(r.excluded == std::vector<std::size_t>{1});
    CHECK_FALSE(r.per_item[1].has_value());
  }
}

TEST_CASE("mAP-image") {
  const auto s = matrix(1, 3, {0.2, 0.9, 0.5});
  CHECK(std::abs(map_image(s, BinaryMatrix{1, 3, {1, 0, 1}}).mean - (0.5 + 2.0 / 3.0) / 2.0) < 1e-15);
  CHECK(map_image(s, BinaryMatrix{1, 3, {1, 1, 1}}).mean == 1.0);
}

TEST_CASE("mAP equals the brute-force oracle on random instances") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(32), p = 1 + rng.below(8);
    std::vector<double> scores(n * p);
    std::vector<std::uint8_t> labels(n * p);
    for (auto& x : scores) x = rng.bernoulli(0.2) ? std::round(rng.uniform() * 4) / 4 : rng.uniform();
    for (auto& x : labels) x = rng.bernoulli(0.3) ? 1 : 0;
    const auto s = matrix(n, p, scores);
    const BinaryMatrix u{n, p, labels};
    CAPTURE(trial);
    CHECK(std::abs(map_class(s, u).mean - testing::brute_force_map(scores, labels, n, p, true)) < 1e-12);
    CHECK(std::abs(map_image(s, u).mean - testing::brute_force_map(scores, labels, n, p, false)) < 1e-12);
  }
}

TEST_CASE("AP is invariant under strictly increasing score transforms") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(15), t(15);
    std::vector<std::uint8_t> l(15);
    for (std::size_t i = 0; i < 15; ++i) {
      s[i] = rng.uniform(-2.0, 2.0);
      t[i] = std::exp(3.0 * s[i]) + 7.0;
      l[i] = rng.bernoulli(0.4) ? 1 : 0;
    }
    l[0] = 1;
    CHECK(average_precision(s, l) == average_precision(t, l));
  }
}

TEST_CASE("top-k accuracy") {
  const auto s = matrix(4, 3, {0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4, 0.5, 0.4, 0.1}, ScoreKind::Location);
  const std::vector<int> v{1, 2, 3, 2};
  CHECK(top_k_accuracy(s, v, 1) == 0.75);
  CHECK(top_k_accuracy(s, v, 2) == 1.0);
  CHECK(top_k_accuracy(s, v, 3) == 1.0);
  const auto one_hot = matrix(2, 3, {0, 1, 0, 0, 0, 1}, ScoreKind::Location);
  CHECK(top_k_accuracy(one_hot, std::vector<int>{2, 3}, 1) == 1.0);
  CHECK(kind_of([&] { top_k_accuracy(s, v, 0); }) == ErrorKind::BadK);
  CHECK(kind_of([&] { top_k_accuracy(s, v, 4); }) == ErrorKind::BadK);
}

TEST_CASE("correlation matrix counts") {
  const auto ds = labelled({{1, 0}, {1, 0}, {1, 1}, {0, 1}}, {2, 2, 1, 1}, 3);
  const auto r = correlation_matrix(ds);
  CHECK(r.at(0, 1) == 2.0 / 3.0);
  CHECK(r.at(0, 0) == 1.0 / 3.0);
  CHECK(r.at(1, 0) == 1.0);
  CHECK(r.at(0, 2) == 0.0);
  CHECK(r.lesion_counts == std::vector<std::size_t>{3, 2});
  CHECK(r.location_counts == std::vector<std::size_t>{2, 2, 0});
  for (std::size_t i = 0; i < 2; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 3; ++j) total += r.at(i, j);
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  const auto empty_row = correlation_matrix(labelled({{1, 0}, {1, 0}}, {1, 2}, 2));
  CHECK(empty_row.empty_rows == std::vector<std::size_t>{1});
}

TEST_CASE("ensembles") {
  const auto a = matrix(1, 2, {0.2, 0.8});
  const auto b = matrix(1, 2, {0.5, 0.1});
  CHECK(ensemble_max(a, b).values == std::vector<double>{0.5, 0.8});
  CHECK(ensemble_max(a, a).values == a.values);
  CHECK(ensemble_max(a, b).values == ensemble_max(b, a).values);
  CHECK(ensemble_mean(a, b).values == std::vector<double>{0.35, 0.45});
  CHECK(kind_of([&] { ensemble_max(a, matrix(2, 2, {0, 0, 0, 0})); }) == ErrorKind::MatrixMismatch);
  auto renamed = b;
  renamed.ids[0] = "other";
  CHECK(kind_of([&] { ensemble_max(a, renamed); }) == ErrorKind::MatrixMismatch);
}

TEST_CASE("score CSV round trip is exact") {
  testing::TempDir dir("csv");
  Rng rng(8);
  auto s = matrix(5, 3, std::vector<double>(15));
  for (auto& v : s.values) v = rng.uniform();
  s.values[4] = 0.1 + 0.2;
  write_scores_csv(dir / "s.csv", s);
  const auto back = read_scores_csv(dir / "s.csv", ScoreKind::Lesion);
  CHECK(back.values == s.values);
  CHECK(back.ids == s.ids);
  CHECK(back.class_names == s.class_names);

  const std::vector<std::string> order{"r3", "r0", "r4", "r1", "r2"};
  const auto aligned = align_rows(back, order);
  CHECK(aligned.ids == order);
  CHECK(aligned.at(0, 1) == s.at(3, 1));
  CHECK(kind_of([&] { align_rows(back, std::vector<std::string>{"r0", "zz"}); }) == ErrorKind::MatrixMismatch);
}

TEST_CASE("metric report json") {
  const auto s = matrix(2, 2, {0.9, 0.1, 0.2, 0.8});
  const BinaryMatrix u{2, 2, {1, 0, 0, 1}};
  MetricReport r;
  r.lesion = lesion_metrics(s, u);
  r.lesion_names = {"c0", "c1"};
  r.location = location_metrics(matrix(2, 3, {0.5, 0.3, 0.2, 0.1, 0.1, 0.8}, ScoreKind::Location),
                                std::vector<int>{1, 2});
  const auto j = to_json(r);
  CHECK(j["lesion"]["map_class"].get<double>() == 1.0);
  CHECK(j["lesion"]["map_image"].get<double>() == 1.0);
  CHECK(j["location"]["top1"].get<double>() == 0.5);
  CHECK(j["location"]["top3"].get<double>() == 1.0);
}
