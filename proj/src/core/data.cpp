// SPDX-License-Identifier: Apache-2.0
#include "stn/data.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "stn/error.hpp"

namespace stn::data {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(trim(f));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0;
  const char* first = s.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

Tensor gaussian(RngStream& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace

Dataset parse_csv(const std::string& text, const std::string& source) {
  std::stringstream in(text);
  std::string line;
  std::vector<std::vector<double>> rows;
  std::size_t width = 0, lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    std::vector<double> row;
    std::optional<std::size_t> bad;
    for (std::size_t c = 0; c < fields.size(); ++c) {
      auto v = parse_number(fields[c]);
      if (!v) {
        if (!bad) bad = c;
        continue;
      }
      row.push_back(*v);
    }
    if (bad && first) {
      first = false;
      width = fields.size();
      continue;
    }
    first = false;
    if (bad)
      fail(ErrorCode::kConfig, source + ": non-numeric value '" + fields[*bad] + "' at line " + std::to_string(lineno) +
                                   ", column " + std::to_string(*bad + 1));
    if (width == 0) width = row.size();
    if (row.size() != width)
      fail(ErrorCode::kConfig, source + ": line " + std::to_string(lineno) + " has " + std::to_string(row.size()) +
                                   " fields, expected " + std::to_string(width));
    rows.push_back(std::move(row));
  }
  require(!rows.empty(), ErrorCode::kConfig, source + ": no data rows");
  require(width >= 2, ErrorCode::kConfig, source + ": need at least one feature column and a target column");
  Dataset d{Tensor(Shape{rows.size(), width - 1}), Tensor(Shape{rows.size()})};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c + 1 < width; ++c) d.x.at(r, c) = rows[r][c];
    d.t[r] = rows[r][width - 1];
  }
  require(d.x.all_finite() && d.t.all_finite(), ErrorCode::kConfig, source + ": non-finite values");
  return d;
}

Dataset read_csv(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), ErrorCode::kIo, "cannot open dataset '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_csv(ss.str(), path);
}

void write_csv(const std::string& path, const Dataset& d) {
  std::ofstream f(path);
  require(f.good(), ErrorCode::kIo, "cannot write '" + path + "'");
  f.precision(17);
  for (std::size_t r = 0; r < d.size(); ++r) {
    for (std::size_t c = 0; c < d.x.cols(); ++c) f << d.x.at(r, c) << ',';
    f << d.t[r] << '\n';
  }
}

Dataset generate(const GeneratorSpec& spec, RngStream& rng) {
  require(spec.n >= 2 && spec.dim >= 1, ErrorCode::kConfig, "generator needs n >= 2 and dim >= 1");
  require(spec.noise >= 0 && std::isfinite(spec.noise), ErrorCode::kConfig, "generator noise must be >= 0");
  Dataset d{gaussian(rng, {spec.n, spec.dim}), Tensor(Shape{spec.n})};
  if (spec.kind == "ridge") {
    Tensor w = gaussian(rng, {spec.dim});
    d.t = matvec(d.x, w);
    for (auto& v : d.t.data()) v += spec.noise * rng.normal();
  } else if (spec.kind == "nonlinear") {
    Tensor w1 = gaussian(rng, {spec.dim}), w2 = gaussian(rng, {spec.dim});
    Tensor a = matvec(d.x, w1), b = matvec(d.x, w2);
    for (std::size_t i = 0; i < spec.n; ++i) d.t[i] = std::sin(a[i]) + 0.5 * std::tanh(b[i]) + spec.noise * rng.normal();
  } else if (spec.kind == "blobs") {
    require(spec.classes >= 2, ErrorCode::kConfig, "blobs need at least 2 classes");
    Tensor centers = gaussian(rng, {spec.classes, spec.dim});
    for (std::size_t i = 0; i < spec.n; ++i) {
      const std::size_t k = rng.index(spec.classes);
      d.t[i] = static_cast<double>(k);
      for (std::size_t c = 0; c < spec.dim; ++c) d.x.at(i, c) = 2.0 * centers.at(k, c) + spec.noise * d.x.at(i, c);
    }
  } else {
    fail(ErrorCode::kConfig, "unknown generator '" + spec.kind + "' (expected ridge, nonlinear or blobs)");
  }
  return d;
}

Split split_dataset(const Dataset& d, double ratio, bool normalize, bool normalize_targets, RngStream& rng) {
  require(ratio > 0.0 && ratio < 1.0, ErrorCode::kConfig, "split ratio must be in (0, 1)");
  const std::size_t n = d.size();
  const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  require(n_train >= 1 && n_train < n, ErrorCode::kConfig,
          "split of " + std::to_string(n) + " rows at ratio " + std::to_string(ratio) + " leaves an empty side");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);

  Split s;
  s.train_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.valid_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  const std::size_t dim = d.x.cols();
  auto take = [&](const std::vector<std::size_t>& rows) {
    Dataset out{Tensor(Shape{rows.size(), dim}), Tensor(Shape{rows.size()})};
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < dim; ++c) out.x.at(r, c) = d.x.at(rows[r], c);
      out.t[r] = d.t[rows[r]];
    }
    return out;
  };
  s.train = take(s.train_rows);
  s.valid = take(s.valid_rows);
  if (!normalize) return s;

  Normalization norm;
  auto stats = [](const std::vector<double>& v) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(v.size()));
    return std::pair{mean, sd > 0 ? sd : 1.0};  // constant columns keep their scale
  };
  for (std::size_t c = 0; c < dim; ++c) {
    std::vector<double> col(n_train);
    for (std::size_t r = 0; r < n_train; ++r) col[r] = s.train.x.at(r, c);
    auto [m, sd] = stats(col);
    norm.x_mean.push_back(m);
    norm.x_scale.push_back(sd);
  }
  if (normalize_targets) std::tie(norm.t_mean, norm.t_scale) = stats(s.train.t.values());
  for (Dataset* part : {&s.train, &s.valid}) {
    for (std::size_t r = 0; r < part->size(); ++r) {
      for (std::size_t c = 0; c < dim; ++c) part->x.at(r, c) = (part->x.at(r, c) - norm.x_mean[c]) / norm.x_scale[c];
      part->t[r] = (part->t[r] - norm.t_mean) / norm.t_scale;
    }
  }
  s.normalization = norm;
  return s;
}

}  // namespace stn::data
