#include "miam/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "miam/random.hpp"
#include "miam/training.hpp"

namespace miam {

ModelConfig gradcheck_model() {
  ModelConfig m;
  m.num_variables = 3;
  m.d_model = 8;
  m.n_heads = 2;
  m.d_k = 4;
  m.d_v = 4;
  m.d_ffn = 16;
  m.n_layers = 2;
  m.d_hidden = 8;
  m.dropout = 0;
  m.use_decoder = true;
  return m;
}

std::string GradcheckReport::to_text() const {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-24s %6s %12s %12s\n", "parameter", "size", "max_rel_err",
                "max_|grad|");
  os << buf;
  for (const auto& g : groups) {
    std::snprintf(buf, sizeof buf, "%-24s %6zu %12.3e %12.3e\n", g.name.c_str(), g.size,
                  g.max_rel_error, g.max_abs_grad);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "max relative error %.3e: %s\n", max_rel_error,
                passed ? "PASS" : "FAIL");
  os << buf;
  return os.str();
}

namespace {

Dataset gradcheck_data(std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u01;
  Dataset ds;
  ds.num_variables = 3;
  ds.vocabulary = {"a", "b", "c"};
  const std::size_t lengths[2] = {4, 3};
  for (std::size_t s = 0; s < 2; ++s) {
    const std::size_t T = lengths[s];
    std::vector<double> t(T);
    double clock = 0;
    for (auto& x : t) x = (clock += 0.5 + 2 * u01(rng));
    RealMatrix x(T, 3);
    MaskMatrix m(T, 3);
    for (std::size_t j = 0; j < T; ++j) {
      for (std::size_t d = 0; d < 3; ++d) {
        // Diagonal always observed so every sample has hideable entries.
        m(j, d) = (j == d || u01(rng) < 0.6) ? 1 : 0;
        x(j, d) = n01(rng);
      }
    }
    ds.samples.push_back(make_sample("g" + std::to_string(s), t, x, m, static_cast<int>(1 - s)));
  }
  return ds;
}

}  // namespace

GradcheckReport gradcheck(const GradcheckOptions& options) {
  GradcheckReport report;
  report.model = gradcheck_model();
  const auto& model = report.model;
  std::mt19937_64 rng(derive_seed(options.seed, {7}));
  const Dataset data = gradcheck_data(rng);
  const std::size_t idx[2] = {0, 1};
  const Batch batch = make_batch(data, idx);
  const auto corrupted = sample_mask_plan(batch, 0.25, rng);

  // Random biases and norm parameters so no gradient path sits at a
  // symmetric point.
  auto params = init_params<double>(model, derive_seed(options.seed, {8}));
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (auto& v : params.tensor(i).data()) v += jitter(rng);

  TrainConfig cfg;  // default loss weights and focal parameters
  ad::TapeOptions<double> tape_options;
  tape_options.check_finite = true;
  if (options.inject_bug) tape_options.flip_backward_sign = ad::OpKind::kLeakyRelu;

  const auto analytic =
      batch_loss(params, model, cfg, corrupted, batch, nullptr, true, tape_options).grads;
  auto loss_at = [&](const ParameterSet<double>& p) {
    return batch_loss(p, model, cfg, corrupted, batch, nullptr, false).total;
  };

  auto probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    GroupError g;
    g.name = params.name(i);
    g.size = params.tensor(i).size();
    auto pv = probe.tensor(i).data();
    const auto av = analytic.tensor(i).data();
    for (std::size_t k = 0; k < pv.size(); ++k) {
      const double orig = pv[k];
      pv[k] = orig + options.step;
      const double up = loss_at(probe);
      pv[k] = orig - options.step;
      const double down = loss_at(probe);
      pv[k] = orig;
      const double numeric = (up - down) / (2 * options.step);
      const double a = av[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      g.max_rel_error = std::max(g.max_rel_error, std::abs(a - numeric) / denom);
      g.max_abs_grad = std::max(g.max_abs_grad, std::abs(a));
    }
    report.max_rel_error = std::max(report.max_rel_error, g.max_rel_error);
    report.groups.push_back(g);
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace miam
