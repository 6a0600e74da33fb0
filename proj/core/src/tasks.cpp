#include "sib/tasks.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "sib/error.hpp"

namespace sib {

void ToyConfig::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("toy.sigma must be > 0");
  if (!(sigma_w > 0.0)) throw ConfigError("toy.sigma_w must be > 0");
  if (n < 1) throw ConfigError("toy.n must be >= 1");
}

void FewShotConfig::validate() const {
  if (ways < 1 || shots < 1 || queries_per_class < 1 || dim < 1) {
    throw ConfigError("fewshot: ways, shots, queries_per_class and dim must be >= 1");
  }
  for (auto s : {Split::Train, Split::Val, Split::Test}) {
    if (ways > pool_size(s)) {
      throw ConfigError(fmt::format("fewshot: ways={} exceeds the {} pool size {}", ways,
                                    to_string(s), pool_size(s)));
    }
  }
  if (cluster_spread < 0.0 || domain_shift < 0.0) {
    throw ConfigError("fewshot: cluster_spread and domain_shift must be >= 0");
  }
}

std::size_t FewShotConfig::pool_size(Split split) const {
  switch (split) {
    case Split::Train: return pool_train;
    case Split::Val: return pool_val;
    case Split::Test: return pool_test;
  }
  return 0;
}

Episode gen_spinning_lines(const ToyConfig& cfg, std::uint64_t task_seed) {
  CounterRng rng(task_seed);
  std::vector<double> x(cfg.n);
  double total = 0.0;
  for (auto& v : x) {
    v = rng.normal(cfg.mu, cfg.sigma);
    total += v;
  }
  const double w = total / static_cast<double>(cfg.n) + rng.normal(cfg.mu_w, cfg.sigma_w);
  Episode ep = resample_spinning_lines(cfg, w, task_seed);
  std::vector<double> y(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) y[i] = w * x[i];
  ep.query_inputs = ad::Tensor::matrix(cfg.n, 1, std::move(x));
  ep.query_targets = std::move(y);
  return ep;
}

Episode resample_spinning_lines(const ToyConfig& cfg, double slope, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<double> x(cfg.n), y(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    x[i] = rng.normal(cfg.mu, cfg.sigma);
    y[i] = slope * x[i];
  }
  Episode ep;
  ep.kind = TaskKind::Regression;
  ep.support_inputs = ad::Tensor::matrix(0, 1, {});
  ep.query_inputs = ad::Tensor::matrix(cfg.n, 1, std::move(x));
  ep.query_targets = std::move(y);
  ep.ways = 1;
  ep.true_w = slope;
  ep.task_seed = seed;
  return ep;
}

DiagGaussian true_prior(const ToyConfig& cfg) {
  const double var = cfg.sigma * cfg.sigma / static_cast<double>(cfg.n) + cfg.sigma_w * cfg.sigma_w;
  return DiagGaussian::from_variance({cfg.mu + cfg.mu_w}, {var});
}

DiagGaussian true_posterior(const Episode& ep, const ToyConfig& cfg) {
  double total = 0.0;
  for (double v : ep.query_inputs.values()) total += v;
  const double mean = total / static_cast<double>(ep.query_size());
  return DiagGaussian::from_variance({mean + cfg.mu_w}, {cfg.sigma_w * cfg.sigma_w});
}

namespace {

std::uint64_t first_class_id(const FewShotConfig& cfg, Split split) {
  switch (split) {
    case Split::Train: return 0;
    case Split::Val: return cfg.pool_train;
    case Split::Test: return cfg.pool_train + cfg.pool_val;
  }
  return 0;
}

std::uint64_t pool_seed(const FewShotConfig& cfg, Split split) {
  switch (split) {
    case Split::Train: return cfg.pool_seed_train;
    case Split::Val: return cfg.pool_seed_val;
    case Split::Test: return cfg.pool_seed_test;
  }
  return 0;
}

std::vector<double> unit_normal_vector(CounterRng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  while (norm == 0.0) {
    norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace

ClassPool make_gaussian_pool(const FewShotConfig& cfg, Split split) {
  ClassPool pool;
  pool.dim = cfg.dim;
  CounterRng rng(mix64(pool_seed(cfg, split)));
  const auto first = first_class_id(cfg, split);
  for (std::size_t c = 0; c < cfg.pool_size(split); ++c) {
    pool.class_ids.push_back(first + c);
    pool.prototypes.push_back(unit_normal_vector(rng, cfg.dim));
  }
  return pool;
}

ClassPool load_pool_csv(std::istream& in, std::uint64_t first_class_id) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("pool csv: empty input");
  std::size_t dim = 0;
  {
    std::stringstream header(line);
    std::string cell;
    std::getline(header, cell, ',');
    if (cell != "label") throw IoError("pool csv: header must start with 'label'");
    while (std::getline(header, cell, ',')) ++dim;
  }
  if (dim == 0) throw IoError("pool csv: header declares no feature columns");

  std::map<long long, std::vector<std::vector<double>>> by_label;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    long long label = 0;
    std::vector<double> feats;
    try {
      std::size_t used = 0;
      label = std::stoll(cell, &used);
      if (used != cell.size()) throw std::invalid_argument(cell);
      while (std::getline(row, cell, ',')) {
        feats.push_back(std::stod(cell, &used));
        if (used != cell.size() && cell.find_first_not_of(" \r", used) != std::string::npos) {
          throw std::invalid_argument(cell);
        }
      }
    } catch (const std::exception&) {
      throw IoError(fmt::format("pool csv: malformed value on line {}", line_no));
    }
    if (feats.size() != dim) {
      throw IoError(fmt::format("pool csv: line {} has {} features, expected {}", line_no,
                                feats.size(), dim));
    }
    by_label[label].push_back(std::move(feats));
  }
  if (by_label.empty()) throw IoError("pool csv: no data rows");

  ClassPool pool;
  pool.dim = dim;
  std::uint64_t next = first_class_id;
  for (auto& [label, rows] : by_label) {
    std::vector<double> proto(dim, 0.0);
    for (const auto& r : rows)
      for (std::size_t j = 0; j < dim; ++j) proto[j] += r[j] / static_cast<double>(rows.size());
    pool.class_ids.push_back(next++);
    pool.prototypes.push_back(std::move(proto));
    pool.examples.push_back(std::move(rows));
  }
  return pool;
}

ClassPool load_pool_csv(const std::filesystem::path& path, std::uint64_t first_class_id) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pool csv " + path.string());
  return load_pool_csv(in, first_class_id);
}

FewShotSampler::FewShotSampler(FewShotConfig cfg)
    : FewShotSampler(cfg, make_gaussian_pool(cfg, Split::Train), make_gaussian_pool(cfg, Split::Val),
                     make_gaussian_pool(cfg, Split::Test)) {}

FewShotSampler::FewShotSampler(FewShotConfig cfg, ClassPool train, ClassPool val, ClassPool test)
    : cfg_(cfg), pools_{std::move(train), std::move(val), std::move(test)} {
  for (const auto& p : pools_) {
    if (p.dim != cfg_.dim) {
      throw ConfigError(fmt::format("fewshot: pool dimension {} differs from dim {}", p.dim, cfg_.dim));
    }
    if (p.size() < cfg_.ways) {
      throw ConfigError(fmt::format("fewshot: ways={} exceeds a pool of {} classes", cfg_.ways, p.size()));
    }
  }
}

const ClassPool& FewShotSampler::pool(Split split) const { return pools_[static_cast<int>(split)]; }

namespace {

struct PointSink {
  std::vector<double> values;
  std::vector<int> labels;
};

// Appends `count` points of pool class `cls` with label `label`.
void draw_points(const ClassPool& pool, std::size_t cls, int label, std::size_t count,
                 double spread, std::span<const double> offset, CounterRng& rng,
                 std::vector<std::size_t>& example_order, std::size_t& example_cursor,
                 PointSink& sink) {
  for (std::size_t i = 0; i < count; ++i) {
    const std::vector<double>* base = &pool.prototypes[cls];
    if (pool.has_examples()) base = &pool.examples[cls][example_order[example_cursor++]];
    for (std::size_t j = 0; j < pool.dim; ++j) {
      double v = (*base)[j];
      if (!pool.has_examples()) v += spread * rng.normal();
      if (!offset.empty()) v += offset[j];
      sink.values.push_back(v);
    }
    sink.labels.push_back(label);
  }
}

Episode assemble(const FewShotConfig& cfg, const ClassPool& pool, const std::vector<std::size_t>& classes,
                 std::span<const double> offset, bool with_support, CounterRng& rng,
                 std::uint64_t task_seed) {
  const std::size_t shots = with_support ? cfg.shots : 0;
  PointSink support, query;
  std::vector<double> protos;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto cls = classes[c];
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    if (pool.has_examples()) {
      const auto need = shots + cfg.queries_per_class;
      if (pool.examples[cls].size() < need) {
        throw ConfigError(fmt::format("fewshot: class {} has {} examples, episode needs {}",
                                      pool.class_ids[cls], pool.examples[cls].size(), need));
      }
      order = rng.sample_without_replacement(pool.examples[cls].size(), need);
    }
    const int label = static_cast<int>(c);
    draw_points(pool, cls, label, shots, cfg.cluster_spread, offset, rng, order, cursor, support);
    draw_points(pool, cls, label, cfg.queries_per_class, cfg.cluster_spread, offset, rng, order,
                cursor, query);
    protos.insert(protos.end(), pool.prototypes[cls].begin(), pool.prototypes[cls].end());
  }
  Episode ep;
  ep.kind = TaskKind::Classification;
  ep.ways = classes.size();
  ep.support_inputs = ad::Tensor::matrix(support.labels.size(), cfg.dim, std::move(support.values));
  ep.support_labels = std::move(support.labels);
  ep.query_inputs = ad::Tensor::matrix(query.labels.size(), cfg.dim, std::move(query.values));
  ep.query_labels = std::move(query.labels);
  ep.prototypes = ad::Tensor::matrix(classes.size(), cfg.dim, std::move(protos));
  ep.task_seed = task_seed;
  return ep;
}

}  // namespace

Episode FewShotSampler::sample(Split split, std::uint64_t task_seed) const {
  const auto& p = pool(split);
  CounterRng rng(task_seed);
  const auto classes = rng.sample_without_replacement(p.size(), cfg_.ways);
  return assemble(cfg_, p, classes, {}, true, rng, task_seed);
}

Episode FewShotSampler::sample_zeroshot(Split, std::uint64_t task_seed) const {
  const auto& p = pool(Split::Train);
  CounterRng rng(task_seed);
  std::vector<std::size_t> classes(cfg_.ways);
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
  std::vector<double> offset(cfg_.dim);
  for (auto& v : offset) v = cfg_.domain_shift * rng.normal();
  return assemble(cfg_, p, classes, offset, false, rng, task_seed);
}

Episode gen_fewshot_episode(const FewShotConfig& cfg, Split split, std::uint64_t task_seed) {
  cfg.validate();
  return FewShotSampler(cfg).sample(split, task_seed);
}

}  // namespace sib
