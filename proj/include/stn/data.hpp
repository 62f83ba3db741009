// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stn/models.hpp"
#include "stn/rng.hpp"

namespace stn::data {

using Dataset = models::Batch;

/// Numeric CSV, last column the target. A first line with any non-numeric
/// field is taken as a header.
Dataset read_csv(const std::string& path);
Dataset parse_csv(const std::string& text, const std::string& source = "<memory>");
void write_csv(const std::string& path, const Dataset& d);

/// Synthetic problems.
///   ridge:      t = x w + noise, x ~ N(0, I)
///   nonlinear:  t = sin(x w1) + 0.5 tanh(x w2) + noise
///   blobs:      Gaussian clusters, integer class ids
struct GeneratorSpec {
  std::string kind = "ridge";
  std::size_t n = 100;
  std::size_t dim = 5;
  std::size_t classes = 3;
  double noise = 0.5;
  friend bool operator==(const GeneratorSpec&, const GeneratorSpec&) = default;
};

Dataset generate(const GeneratorSpec& spec, RngStream& rng);

struct Normalization {
  std::vector<double> x_mean;
  std::vector<double> x_scale;
  double t_mean = 0.0;
  double t_scale = 1.0;
};

struct Split {
  Dataset train;
  Dataset valid;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> valid_rows;
  std::optional<Normalization> normalization;
};

/// Shuffled split with round(ratio * n) training rows. Normalization
/// statistics come from the training rows only; targets are left alone when
/// `normalize_targets` is false (class ids).
Split split_dataset(const Dataset& d, double ratio, bool normalize, bool normalize_targets, RngStream& rng);

}  // namespace stn::data
