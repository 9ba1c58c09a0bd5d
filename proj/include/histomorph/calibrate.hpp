#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "histomorph/stain.hpp"

namespace histomorph {

struct LogitRecord {
  std::string patch_id;
  std::string slide_id;
  std::vector<double> z;
  std::optional<int> label;
};

struct CalibrationModel {
  double T = 1.0;
  double threshold = 0.9;
};

// softmax(z / T); max-shifted for stability. Temperature never moves the argmax.
inline std::vector<double> calibrated_confidence(const std::vector<double>& z, double T) {
  if (!(T > 0)) throw std::invalid_argument("calibrated_confidence: T must be positive");
  if (z.empty()) throw std::invalid_argument("calibrated_confidence: empty logits");
  double mx = *std::max_element(z.begin(), z.end());
  for (double v : z)
    if (!std::isfinite(v)) throw std::invalid_argument("calibrated_confidence: non-finite logit");
  std::vector<double> q(z.size());
  double sum = 0;
  for (size_t i = 0; i < z.size(); ++i) {
    q[i] = std::exp((z[i] - mx) / T);
    sum += q[i];
  }
  for (auto& v : q) v /= sum;
  return q;
}

inline double nll_at_temperature(const std::vector<LogitRecord>& records, double T) {
  double total = 0;
  for (const auto& r : records) {
    auto q = calibrated_confidence(r.z, T);
    total += -std::log(std::max(q[size_t(*r.label)], 1e-300));
  }
  return total / double(records.size());
}

// Expected calibration error over equal-width confidence bins.
inline double expected_calibration_error(const std::vector<LogitRecord>& records, double T,
                                         int n_bins = 15) {
  std::vector<double> conf_sum(n_bins, 0), acc_sum(n_bins, 0);
  std::vector<int> count(n_bins, 0);
  for (const auto& r : records) {
    auto q = calibrated_confidence(r.z, T);
    int pred = int(std::max_element(q.begin(), q.end()) - q.begin());
    double conf = q[pred];
    int bin = std::min(n_bins - 1, int(conf * n_bins));
    conf_sum[bin] += conf;
    acc_sum[bin] += (pred == *r.label) ? 1.0 : 0.0;
    ++count[bin];
  }
  double ece = 0;
  size_t n = records.size();
  for (int b = 0; b < n_bins; ++b)
    if (count[b] > 0) ece += (double(count[b]) / double(n)) * std::abs(conf_sum[b] - acc_sum[b]) / count[b];
  return ece;
}

// Scalar temperature by NLL minimization: golden-section search on [0.05, 50]
// to |dT| < 1e-4, then compared against T=1 so calibration can never be worse
// than the identity.
inline CalibrationModel fit_temperature(const std::vector<LogitRecord>& records,
                                        double threshold = 0.9) {
  if (records.empty()) throw std::invalid_argument("fit_temperature: no records");
  std::map<int, int> class_counts;
  for (const auto& r : records) {
    if (!r.label) throw std::invalid_argument("fit_temperature: unlabeled record " + r.patch_id);
    if (*r.label < 0 || size_t(*r.label) >= r.z.size())
      throw std::invalid_argument("fit_temperature: label out of range for " + r.patch_id);
    ++class_counts[*r.label];
  }
  if (class_counts.size() < 2)
    throw std::invalid_argument("fit_temperature: need at least two classes");

  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = 0.05, b = 50.0;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = nll_at_temperature(records, c), fd = nll_at_temperature(records, d);
  while (b - a > 1e-4) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = nll_at_temperature(records, c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = nll_at_temperature(records, d);
    }
  }
  double T = (a + b) / 2.0;
  if (nll_at_temperature(records, 1.0) <= nll_at_temperature(records, T)) T = 1.0;
  return CalibrationModel{T, threshold};
}

struct FilterResult {
  std::vector<LogitRecord> kept;
  std::vector<LogitRecord> dropped;
};

// Discriminative = correctly predicted AND calibrated confidence above threshold.
inline FilterResult filter_discriminative(const std::vector<LogitRecord>& records,
                                          const CalibrationModel& m) {
  if (!(m.T > 0) || !(m.threshold > 0 && m.threshold < 1))
    throw std::invalid_argument("filter_discriminative: invalid model");
  FilterResult out;
  for (const auto& r : records) {
    if (!r.label) throw std::invalid_argument("filter_discriminative: unlabeled record " + r.patch_id);
    auto q = calibrated_confidence(r.z, m.T);
    int pred = int(std::max_element(q.begin(), q.end()) - q.begin());
    if (pred == *r.label && q[pred] > m.threshold)
      out.kept.push_back(r);
    else
      out.dropped.push_back(r);
  }
  return out;
}

struct ManifestEntry {
  int class_index = 0;
  size_t item_index = 0;  // into that class's record list
  AugmentationDescriptor augmentation;
};

// Class-balanced sampling: per epoch, N_min draws per class with replacement,
// each paired with a fresh augmentation descriptor. Fully seed-deterministic.
inline std::vector<std::vector<ManifestEntry>> balanced_manifest(
    const std::vector<std::vector<std::string>>& records_by_class, int epochs, uint64_t seed) {
  if (records_by_class.size() < 2)
    throw std::invalid_argument("balanced_manifest: need at least two classes");
  size_t n_min = SIZE_MAX;
  for (const auto& cls : records_by_class) {
    if (cls.empty()) throw std::invalid_argument("balanced_manifest: empty class");
    n_min = std::min(n_min, cls.size());
  }
  std::mt19937_64 rng(seed);
  std::vector<std::vector<ManifestEntry>> manifest(epochs);
  for (int e = 0; e < epochs; ++e) {
    for (size_t c = 0; c < records_by_class.size(); ++c) {
      std::uniform_int_distribution<size_t> pick(0, records_by_class[c].size() - 1);
      for (size_t i = 0; i < n_min; ++i) {
        ManifestEntry entry;
        entry.class_index = int(c);
        entry.item_index = pick(rng);
        entry.augmentation = sample_descriptor(rng());
        manifest[e].push_back(entry);
      }
    }
  }
  return manifest;
}

// Mean calibrated probability per slide. Rows sharing a patch_id (TTA variants)
// are averaged within the patch first.
inline std::map<std::string, std::vector<double>> aggregate_slides(
    const std::vector<LogitRecord>& records, double T) {
  if (records.empty()) throw std::invalid_argument("aggregate_slides: no records");
  std::map<std::string, std::map<std::string, std::pair<std::vector<double>, int>>> per_patch;
  for (const auto& r : records) {
    auto q = calibrated_confidence(r.z, T);
    auto& acc = per_patch[r.slide_id][r.patch_id];
    if (acc.first.empty()) acc.first.assign(q.size(), 0.0);
    for (size_t i = 0; i < q.size(); ++i) acc.first[i] += q[i];
    ++acc.second;
  }
  std::map<std::string, std::vector<double>> out;
  for (auto& [slide, patches] : per_patch) {
    std::vector<double> mean;
    int n = 0;
    for (auto& [pid, acc] : patches) {
      if (mean.empty()) mean.assign(acc.first.size(), 0.0);
      for (size_t i = 0; i < acc.first.size(); ++i) mean[i] += acc.first[i] / acc.second;
      ++n;
    }
    for (auto& v : mean) v /= n;
    out[slide] = std::move(mean);
  }
  return out;
}

}  // namespace histomorph
