#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "histomorph/calibrate.hpp"
#include "histomorph/synth.hpp"

using namespace histomorph;

namespace {

// grid-scan oracle for the temperature fit: dense NLL scan over [0.05, 50]
double grid_fit_T(const std::vector<LogitRecord>& records) {
  double best_T = 1.0, best = std::numeric_limits<double>::infinity();
  for (double logT = std::log(0.05); logT <= std::log(50.0); logT += 1e-3) {
    double T = std::exp(logT);
    double nll = nll_at_temperature(records, T);
    if (nll < best) {
      best = nll;
      best_T = T;
    }
  }
  return best_T;
}

}  // namespace

TEST_CASE("softmax scaling never changes the argmax") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0, 3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> z(2 + trial % 5);
    for (auto& v : z) v = g(rng);
    auto base = calibrated_confidence(z, 1.0);
    size_t ref = size_t(std::max_element(base.begin(), base.end()) - base.begin());
    for (double T : {0.05, 0.3, 1.0, 5.0, 50.0}) {
      auto q = calibrated_confidence(z, T);
      CHECK(size_t(std::max_element(q.begin(), q.end()) - q.begin()) == ref);
      double sum = 0;
      for (double v : q) sum += v;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK_THROWS(calibrated_confidence({1.0, 2.0}, 0.0));
  CHECK_THROWS(calibrated_confidence({1.0, 2.0}, -1.0));
}

TEST_CASE("temperature fit recovers planted temperatures against the grid oracle") {
  for (double planted : {0.5, 1.0, 3.0}) {
    auto records = make_calibrated_logits(4000, planted, 7);
    auto model = fit_temperature(records);
    double oracle_T = grid_fit_T(records);
    CHECK(std::abs(model.T - oracle_T) / oracle_T < 0.01);  // both find the same optimum
    CHECK(std::abs(model.T - planted) / planted < 0.05);
    CHECK(nll_at_temperature(records, model.T) <= nll_at_temperature(records, 1.0) + 1e-12);
  }
}

TEST_CASE("fitting improves expected calibration error on miscalibrated cohorts") {
  for (uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
    auto records = make_calibrated_logits(3000, 3.0, seed);
    auto model = fit_temperature(records);
    CHECK(expected_calibration_error(records, model.T) <=
          expected_calibration_error(records, 1.0) + 1e-12);
  }
}

TEST_CASE("temperature fit input validation") {
  std::vector<LogitRecord> bad;
  CHECK_THROWS(fit_temperature(bad));
  LogitRecord r;
  r.z = {0.5, -0.5};
  bad.push_back(r);  // unlabeled
  CHECK_THROWS(fit_temperature(bad));
  bad[0].label = 0;
  CHECK_THROWS(fit_temperature(bad));  // single class
}

TEST_CASE("discriminative filter keeps exactly the correct-and-confident records") {
  CalibrationModel model{2.0, 0.9};
  std::vector<LogitRecord> records;
  // qualifying: correct argmax with calibrated confidence above threshold
  for (int i = 0; i < 45; ++i) {
    LogitRecord r;
    r.patch_id = "q" + std::to_string(i);
    r.label = 1;
    r.z = {-10.0, 10.0};  // conf at T=2 ~ 1
    records.push_back(r);
  }
  // correct but under-confident
  for (int i = 0; i < 30; ++i) {
    LogitRecord r;
    r.patch_id = "u" + std::to_string(i);
    r.label = 1;
    r.z = {0.0, 0.5};
    records.push_back(r);
  }
  // confident but wrong
  for (int i = 0; i < 25; ++i) {
    LogitRecord r;
    r.patch_id = "w" + std::to_string(i);
    r.label = 0;
    r.z = {-10.0, 10.0};
    records.push_back(r);
  }
  auto result = filter_discriminative(records, model);
  CHECK(result.kept.size() == 45);
  CHECK(result.dropped.size() == 55);
  CHECK(result.kept.size() + result.dropped.size() == records.size());
  CHECK(double(result.kept.size()) / records.size() == doctest::Approx(0.45).epsilon(1e-12));
  for (const auto& r : result.kept) CHECK(r.patch_id[0] == 'q');
}

TEST_CASE("filter threshold boundary is strict") {
  CalibrationModel model{1.0, 0.9};
  LogitRecord r;
  r.label = 1;
  // pick logits so calibrated confidence is exactly ~0.9: log(9) margin
  r.z = {0.0, std::log(9.0)};
  auto conf = calibrated_confidence(r.z, 1.0);
  CHECK(conf[1] == doctest::Approx(0.9).epsilon(1e-12));
  auto result = filter_discriminative({r}, model);
  CHECK(result.kept.empty());  // confidence must exceed the threshold
}

TEST_CASE("balanced manifest equalizes class counts and is seed-deterministic") {
  std::vector<std::vector<std::string>> classes(3);
  for (int i = 0; i < 100; ++i) classes[0].push_back("a" + std::to_string(i));
  for (int i = 0; i < 40; ++i) classes[1].push_back("b" + std::to_string(i));
  for (int i = 0; i < 70; ++i) classes[2].push_back("c" + std::to_string(i));
  auto m = balanced_manifest(classes, 3, 42);
  REQUIRE(m.size() == 3);
  for (const auto& epoch : m) {
    std::map<int, int> per_class;
    for (const auto& e : epoch) {
      ++per_class[e.class_index];
      CHECK(e.item_index < classes[e.class_index].size());
    }
    for (const auto& [c, n] : per_class) CHECK(n == 40);  // N_min per class
    CHECK(epoch.size() == 120);
  }
  auto m2 = balanced_manifest(classes, 3, 42);
  for (size_t e = 0; e < m.size(); ++e)
    for (size_t i = 0; i < m[e].size(); ++i) {
      CHECK(m[e][i].item_index == m2[e][i].item_index);
      CHECK(m[e][i].augmentation.kind == m2[e][i].augmentation.kind);
      CHECK(m[e][i].augmentation.params == m2[e][i].augmentation.params);
    }
  // oversampling with replacement: epochs differ
  bool any_diff = false;
  for (size_t i = 0; i < m[0].size() && !any_diff; ++i)
    any_diff = m[0][i].item_index != m[1][i].item_index;
  CHECK(any_diff);
}

TEST_CASE("slide aggregation averages repeated patch rows before the slide mean") {
  std::vector<LogitRecord> records;
  auto add = [&](const char* patch, const char* slide, double z0, double z1) {
    LogitRecord r;
    r.patch_id = patch;
    r.slide_id = slide;
    r.z = {z0, z1};
    records.push_back(r);
  };
  // patch pA appears twice (e.g. two ensemble passes); its rows average first
  add("pA", "s1", 0.0, 2.0);
  add("pA", "s1", 0.0, 4.0);
  add("pB", "s1", 0.0, 0.0);
  auto slides = aggregate_slides(records, 1.0);
  REQUIRE(slides.count("s1"));
  auto qA1 = calibrated_confidence({0.0, 2.0}, 1.0)[1];
  auto qA2 = calibrated_confidence({0.0, 4.0}, 1.0)[1];
  double expected = ((qA1 + qA2) / 2.0 + 0.5) / 2.0;
  CHECK(slides["s1"][1] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(slides["s1"][0] + slides["s1"][1] == doctest::Approx(1.0).epsilon(1e-12));
}
