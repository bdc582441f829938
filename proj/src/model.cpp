#include "miam/model.hpp"

#include <cmath>
#include <stdexcept>

namespace miam {

using ad::Shape;
using ad::Tensor;
using ad::Var;

const char* to_string(ViewSet v) {
  switch (v) {
    case ViewSet::kX: return "x";
    case ViewSet::kXM: return "x+m";
    case ViewSet::kXDelta: return "x+delta";
    case ViewSet::kTriple: return "x+m+delta";
  }
  return "unknown";
}

ViewSet parse_view_set(const std::string& text) {
  if (text == "x" || text == "single") return ViewSet::kX;
  if (text == "x+m") return ViewSet::kXM;
  if (text == "x+delta") return ViewSet::kXDelta;
  if (text == "x+m+delta" || text == "triple") return ViewSet::kTriple;
  throw ConfigError("unknown view set '" + text + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (num_variables == 0) fail("num_variables must be positive");
  if (d_model == 0) fail("d_model must be positive");
  if (n_heads == 0) fail("n_heads must be positive");
  if (d_k == 0 || d_v == 0) fail("d_k and d_v must be positive");
  if (d_ffn == 0 || d_hidden == 0) fail("d_ffn and d_hidden must be positive");
  if (n_layers == 0) fail("n_layers must be at least 1");
  if (!(l_max > 1.0)) fail("l_max must exceed 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
}

// ParameterSet ----------------------------------------------------------------

template <class Real>
void ParameterSet<Real>::add(std::string name, Tensor<Real> tensor) {
  if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(tensor));
}

template <class Real>
Tensor<Real>& ParameterSet<Real>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return tensors_[it->second];
}

template <class Real>
const Tensor<Real>& ParameterSet<Real>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return tensors_[it->second];
}

template <class Real>
std::size_t ParameterSet<Real>::element_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

template <class Real>
ParameterSet<Real> ParameterSet<Real>::zeros_like() const {
  ParameterSet out;
  for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], Tensor<Real>(tensors_[i].shape()));
  return out;
}

// Layout ------------------------------------------------------------------

namespace {

enum class Init { kGlorot, kZero, kOne };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

void add_norm(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t width) {
  out.push_back({prefix + ".g", {width}, Init::kOne});
  out.push_back({prefix + ".b", {width}, Init::kZero});
}

void add_attention(std::vector<ParamSpec>& out, const ModelConfig& c,
                   const std::string& prefix, bool cross) {
  const std::size_t hk = c.n_heads * c.d_k, hv = c.n_heads * c.d_v;
  out.push_back({prefix + ".wq", {c.d_model, hk}, Init::kGlorot});
  out.push_back({prefix + ".wk", {c.d_model, hk}, Init::kGlorot});
  out.push_back({prefix + ".wv", {c.d_model, hv}, Init::kGlorot});
  out.push_back({prefix + ".wo", {hv, c.d_model}, Init::kGlorot});
  if (!c.residual_norm) return;
  if (cross) {
    add_norm(out, prefix + ".lnq", c.d_model);
    add_norm(out, prefix + ".lnkv", c.d_model);
  } else {
    add_norm(out, prefix + ".ln", c.d_model);
  }
}

void add_ffn(std::vector<ParamSpec>& out, const ModelConfig& c, const std::string& prefix) {
  out.push_back({prefix + ".w1", {c.d_model, c.d_ffn}, Init::kGlorot});
  out.push_back({prefix + ".b1", {c.d_ffn}, Init::kZero});
  out.push_back({prefix + ".w2", {c.d_ffn, c.d_model}, Init::kGlorot});
  out.push_back({prefix + ".b2", {c.d_model}, Init::kZero});
  if (c.residual_norm) add_norm(out, prefix + ".ln", c.d_model);
}

std::vector<ParamSpec> layout(const ModelConfig& c) {
  std::vector<ParamSpec> out;
  std::vector<std::string> views{"x"};
  if (c.uses_mask_view()) views.push_back("m");
  if (c.uses_interval_view()) views.push_back("d");
  for (const auto& v : views) out.push_back({"embed." + v + ".w", {c.num_variables, c.d_model}, Init::kGlorot});
  for (const auto& v : views) add_attention(out, c, "view." + v, false);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    if (c.views == ViewSet::kTriple) add_attention(out, c, p + ".miss", true);
    add_attention(out, c, p + ".obs", c.views != ViewSet::kX);
    add_ffn(out, c, p + ".ffn");
  }
  out.push_back({"cls.w1", {c.d_model, c.d_hidden}, Init::kGlorot});
  out.push_back({"cls.b1", {c.d_hidden}, Init::kZero});
  out.push_back({"cls.w2", {c.d_hidden, 1}, Init::kGlorot});
  out.push_back({"cls.b2", {1}, Init::kZero});
  if (c.use_decoder) {
    add_attention(out, c, "dec.attn", true);
    add_ffn(out, c, "dec.ffn");
    out.push_back({"dec.out.w", {c.d_model, c.num_variables}, Init::kGlorot});
    out.push_back({"dec.out.b", {c.num_variables}, Init::kZero});
  }
  return out;
}

}  // namespace

template <class Real>
ParameterSet<Real> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParameterSet<Real> params;
  for (auto& spec : layout(config)) {
    Tensor<Real> t(spec.shape);
    if (spec.init == Init::kOne) {
      t.fill(Real(1));
    } else if (spec.init == Init::kGlorot) {
      const double limit = std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (auto& v : t.data()) v = static_cast<Real>(u(rng));
    }
    params.add(spec.name, std::move(t));
  }
  return params;
}

// Batching ------------------------------------------------------------------

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  Batch b;
  b.size = indices.size();
  b.num_variables = data.num_variables;
  for (auto i : indices) b.max_len = std::max(b.max_len, data.samples.at(i).length());
  const std::size_t D = b.num_variables, T = b.max_len;
  b.values.assign(b.size * T * D, 0.0);
  b.mask.assign(b.size * T * D, 0.0);
  b.intervals.assign(b.size * T * D, 0.0);
  b.timestamps.assign(b.size * T, 0.0);
  b.valid.assign(b.size * T, 0);
  for (std::size_t k = 0; k < b.size; ++k) {
    const auto& s = data.samples[indices[k]];
    if (s.num_variables() != D) throw ShapeError("make_batch: sample width differs from dataset");
    b.lengths.push_back(s.length());
    b.labels.push_back(s.label ? *s.label : -1);
    b.ids.push_back(s.subject_id);
    for (std::size_t j = 0; j < s.length(); ++j) {
      b.timestamps[k * T + j] = s.timestamps[j];
      b.valid[k * T + j] = 1;
      for (std::size_t d = 0; d < D; ++d) {
        b.values[b.offset(k, j, d)] = s.values(j, d);
        b.mask[b.offset(k, j, d)] = s.mask(j, d);
        b.intervals[b.offset(k, j, d)] = s.intervals(j, d);
      }
    }
  }
  return b;
}

RealMatrix time_embedding(std::span<const double> timestamps, std::size_t d_model,
                          double l_max) {
  RealMatrix te(timestamps.size(), d_model, 0.0);
  for (std::size_t i = 0; 2 * i < d_model; ++i) {
    const double denom =
        std::pow(l_max, static_cast<double>(2 * i) / static_cast<double>(d_model));
    for (std::size_t r = 0; r < timestamps.size(); ++r) {
      const double arg = timestamps[r] / denom;
      te(r, 2 * i) = std::sin(arg);
      if (2 * i + 1 < d_model) te(r, 2 * i + 1) = std::cos(arg);
    }
  }
  return te;
}

// Bound parameters ------------------------------------------------------------

template <class Real>
BoundParams<Real>::BoundParams(ad::Tape<Real>& tape, const ParameterSet<Real>& params,
                               bool trainable)
    : tape_(&tape) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    vars_.emplace(params.name(i), trainable ? tape.variable(params.tensor(i))
                                            : tape.constant(params.tensor(i)));
  }
}

template <class Real>
Var<Real> BoundParams<Real>::operator()(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("model parameter '" + name + "' is not bound");
  return it->second;
}

template <class Real>
ParameterSet<Real> BoundParams<Real>::gradients(const ParameterSet<Real>& like) const {
  ParameterSet<Real> out;
  for (std::size_t i = 0; i < like.size(); ++i) {
    out.add(like.name(i), tape_->grad((*this)(like.name(i))));
  }
  return out;
}

// Building blocks -------------------------------------------------------------

namespace {

template <class Real>
Var<Real> constant_from(ad::Tape<Real>& tape, Shape shape, std::span<const double> data) {
  return tape.constant(Tensor<Real>(std::move(shape), std::vector<Real>(data.begin(), data.end())));
}

template <class Real>
Var<Real> dropout(const ForwardContext<Real>& ctx, Var<Real> x) {
  if (!ctx.dropout_active()) return x;
  const double keep = 1.0 - ctx.config.dropout;
  std::bernoulli_distribution coin(keep);
  Tensor<Real> m(x.shape());
  for (auto& v : m.data()) v = coin(*ctx.dropout_rng) ? static_cast<Real>(1.0 / keep) : Real(0);
  return ad::elementwise_mul(x, ctx.tape.constant(std::move(m)));
}

template <class Real>
Var<Real> norm(const ForwardContext<Real>& ctx, Var<Real> x, const std::string& prefix) {
  if (!ctx.config.residual_norm) return x;
  auto y = ad::layer_norm(x, ctx.config.ln_eps);
  return ad::add(ad::elementwise_mul(y, ctx.params(prefix + ".g")), ctx.params(prefix + ".b"));
}

template <class Real>
Var<Real> residual(const ForwardContext<Real>& ctx, Var<Real> stream, Var<Real> update) {
  return ctx.config.residual_norm ? ad::add(stream, update) : update;
}

template <class Real>
Var<Real> ffn(const ForwardContext<Real>& ctx, Var<Real> x, const std::string& prefix) {
  const auto& p = ctx.params;
  auto h = ad::leaky_relu(ad::add(ad::matmul(x, p(prefix + ".w1")), p(prefix + ".b1")),
                          ctx.config.leaky_slope);
  auto out = ad::add(ad::matmul(h, p(prefix + ".w2")), p(prefix + ".b2"));
  return dropout(ctx, out);
}

// Pre-norm self-attention sublayer: h + MHA(LN(h), LN(h), LN(h)).
template <class Real>
Var<Real> self_attention_block(const ForwardContext<Real>& ctx, Var<Real> h,
                               const std::string& prefix,
                               std::span<const std::uint8_t> key_valid) {
  auto n = norm(ctx, h, prefix + ".ln");
  return residual(ctx, h, mha(ctx, n, n, n, prefix, key_valid));
}

// Pre-norm cross-attention sublayer:
// stream + MHA(LN_q(query), LN_kv(kv), LN_kv(kv)).
template <class Real>
Var<Real> cross_attention_block(const ForwardContext<Real>& ctx, Var<Real> query,
                                Var<Real> kv, Var<Real> stream, const std::string& prefix,
                                std::span<const std::uint8_t> key_valid) {
  auto nq = norm(ctx, query, prefix + ".lnq");
  auto nkv = norm(ctx, kv, prefix + ".lnkv");
  return residual(ctx, stream, mha(ctx, nq, nkv, nkv, prefix, key_valid));
}

template <class Real>
Var<Real> ffn_block(const ForwardContext<Real>& ctx, Var<Real> h, const std::string& prefix) {
  return residual(ctx, h, ffn(ctx, norm(ctx, h, prefix + ".ln"), prefix));
}

}  // namespace

template <class Real>
Var<Real> mha(const ForwardContext<Real>& ctx, Var<Real> q, Var<Real> k, Var<Real> v,
              const std::string& prefix, std::span<const std::uint8_t> key_valid) {
  const auto& c = ctx.config;
  const auto& p = ctx.params;
  if (q.shape().size() != 3 || k.shape().size() != 3 || v.shape().size() != 3) {
    throw ShapeError("mha: expects [B, T, d_model] inputs");
  }
  if (q.shape()[2] != c.d_model || k.shape()[2] != c.d_model || v.shape() != k.shape()) {
    throw ConfigError("mha: input widths " + ad::shape_string(q.shape()) + ", " +
                      ad::shape_string(k.shape()) + ", " + ad::shape_string(v.shape()) +
                      " do not match d_model " + std::to_string(c.d_model));
  }
  auto qp = ad::matmul(q, p(prefix + ".wq"));
  auto kp = ad::matmul(k, p(prefix + ".wk"));
  auto vp = ad::matmul(v, p(prefix + ".wv"));
  if (qp.shape()[2] != c.n_heads * c.d_k || vp.shape()[2] != c.n_heads * c.d_v) {
    throw ConfigError("mha: projection widths of '" + prefix + "' do not match heads x d_k/d_v");
  }
  const std::vector<std::size_t> kw(c.n_heads, c.d_k), vw(c.n_heads, c.d_v);
  auto qs = ad::split_last_axis(qp, std::span<const std::size_t>(kw));
  auto ks = ad::split_last_axis(kp, std::span<const std::size_t>(kw));
  auto vs = ad::split_last_axis(vp, std::span<const std::size_t>(vw));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c.d_k));
  std::vector<Var<Real>> heads;
  heads.reserve(c.n_heads);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    auto logits = ad::scale(ad::matmul(qs[h], ad::transpose(ks[h])), inv_sqrt);
    auto attn = ad::masked_row_softmax(logits, key_valid);
    if (ctx.trace) ctx.trace->weights.emplace_back(prefix + ".head" + std::to_string(h), attn);
    heads.push_back(ad::matmul(dropout(ctx, attn), vs[h]));
  }
  auto joined = c.n_heads == 1 ? heads[0]
                               : ad::concat_last_axis(std::span<const Var<Real>>(heads));
  return ad::matmul(joined, p(prefix + ".wo"));
}

template <class Real>
ViewStates<Real> embed_views(const ForwardContext<Real>& ctx, const Batch& batch) {
  const auto& c = ctx.config;
  if (batch.num_variables != c.num_variables) {
    throw ShapeError("embed_views: batch has " + std::to_string(batch.num_variables) +
                     " variables, model expects " + std::to_string(c.num_variables));
  }
  const std::size_t B = batch.size, T = batch.max_len, D = batch.num_variables;
  auto te_rows = time_embedding(batch.timestamps, c.d_model, c.l_max);
  auto te = constant_from(ctx.tape, {B, T, c.d_model}, te_rows.data);
  auto embed = [&](const std::vector<double>& input, const std::string& view) {
    auto x = constant_from(ctx.tape, {B, T, D}, input);
    auto h = ad::add(ad::matmul(x, ctx.params("embed." + view + ".w")), te);
    return self_attention_block(ctx, h, "view." + view, batch.valid);
  };
  ViewStates<Real> s;
  s.hx = embed(batch.values, "x");
  if (c.uses_mask_view()) s.hm = embed(batch.mask, "m");
  if (c.uses_interval_view()) s.hd = embed(batch.intervals, "d");
  return s;
}

template <class Real>
ViewStates<Real> miam_layer(const ForwardContext<Real>& ctx, const ViewStates<Real>& states,
                            std::size_t layer, std::span<const std::uint8_t> key_valid) {
  const auto& c = ctx.config;
  const std::string p = "layer" + std::to_string(layer);
  ViewStates<Real> out = states;
  Var<Real> hx_star;
  switch (c.views) {
    case ViewSet::kTriple: {
      auto hm_star = cross_attention_block(ctx, *states.hd, *states.hm, *states.hm,
                                           p + ".miss", key_valid);
      hx_star = cross_attention_block(ctx, hm_star, states.hx, states.hx, p + ".obs", key_valid);
      if (c.evolve_views) out.hm = hm_star;
      break;
    }
    case ViewSet::kXM:
      hx_star = cross_attention_block(ctx, *states.hm, states.hx, states.hx, p + ".obs", key_valid);
      break;
    case ViewSet::kXDelta:
      hx_star = cross_attention_block(ctx, *states.hd, states.hx, states.hx, p + ".obs", key_valid);
      break;
    case ViewSet::kX:
      hx_star = self_attention_block(ctx, states.hx, p + ".obs", key_valid);
      break;
  }
  out.hx = ffn_block(ctx, hx_star, p + ".ffn");
  return out;
}

template <class Real>
Var<Real> classifier_logits(const ForwardContext<Real>& ctx, Var<Real> hx_star, const Batch& batch) {
  const auto& c = ctx.config;
  const auto& p = ctx.params;
  const std::size_t B = batch.size, T = batch.max_len;
  Tensor<Real> pool({B, 1, T});
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = batch.lengths[b];
    for (std::size_t j = 0; j < T; ++j)
      if (batch.valid[b * T + j]) pool[b * T + j] = Real(1) / static_cast<Real>(len);
  }
  auto pooled = ad::reshape(ad::matmul(ctx.tape.constant(std::move(pool)), hx_star),
                            Shape{B, c.d_model});
  auto hidden = ad::leaky_relu(ad::add(ad::matmul(pooled, p("cls.w1")), p("cls.b1")),
                               c.leaky_slope);
  return ad::add(ad::matmul(hidden, p("cls.w2")), p("cls.b2"));
}

template <class Real>
Var<Real> classify(const ForwardContext<Real>& ctx, Var<Real> hx_star, const Batch& batch) {
  return ad::sigmoid(classifier_logits(ctx, hx_star, batch));
}

template <class Real>
Var<Real> impute(const ForwardContext<Real>& ctx, Var<Real> hx_star, Var<Real> hx,
                 std::span<const std::uint8_t> key_valid) {
  const auto& p = ctx.params;
  if (!p.contains("dec.out.w")) throw ConfigError("impute: model has no decoder weights");
  auto attended = cross_attention_block(ctx, hx_star, hx, hx_star, "dec.attn", key_valid);
  auto f = ffn_block(ctx, attended, "dec.ffn");
  return ad::add(ad::matmul(f, p("dec.out.w")), p("dec.out.b"));
}

template <class Real>
ForwardOutput<Real> forward(const ForwardContext<Real>& ctx, const Batch& batch,
                            std::optional<bool> run_decoder) {
  ForwardOutput<Real> out;
  out.embedded = embed_views(ctx, batch);
  ViewStates<Real> states = out.embedded;
  for (std::size_t l = 0; l < ctx.config.n_layers; ++l) {
    states = miam_layer(ctx, states, l, batch.valid);
  }
  out.final_state = states.hx;
  out.logits = classifier_logits(ctx, states.hx, batch);
  out.probabilities = ad::sigmoid(out.logits);
  const bool decode = run_decoder.value_or(ctx.mode == Mode::kTrain && ctx.config.use_decoder);
  if (decode) out.imputed = impute(ctx, states.hx, out.embedded.hx, batch.valid);
  return out;
}

template <class Real>
std::vector<double> predict(const ParameterSet<Real>& params, const ModelConfig& config,
                            const Dataset& data, std::size_t batch_size) {
  std::vector<double> probs;
  probs.reserve(data.size());
  if (batch_size == 0) batch_size = 64;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    auto batch = make_batch(data, idx);
    ad::Tape<Real> tape;
    BoundParams<Real> bound(tape, params, false);
    ForwardContext<Real> ctx{tape, config, bound, Mode::kEval};
    auto out = forward(ctx, batch);
    for (auto p : out.probabilities.value().data()) probs.push_back(static_cast<double>(p));
  }
  return probs;
}

#define MIAM_INSTANTIATE(Real)                                                              \
  template class ParameterSet<Real>;                                                        \
  template class BoundParams<Real>;                                                         \
  template ParameterSet<Real> init_params<Real>(const ModelConfig&, std::uint64_t);         \
  template Var<Real> mha(const ForwardContext<Real>&, Var<Real>, Var<Real>, Var<Real>,      \
                         const std::string&, std::span<const std::uint8_t>);                \
  template ViewStates<Real> embed_views(const ForwardContext<Real>&, const Batch&);         \
  template ViewStates<Real> miam_layer(const ForwardContext<Real>&, const ViewStates<Real>&, \
                                       std::size_t, std::span<const std::uint8_t>);        \
  template Var<Real> classify(const ForwardContext<Real>&, Var<Real>, const Batch&);        \
  template Var<Real> classifier_logits(const ForwardContext<Real>&, Var<Real>, const Batch&); \
  template Var<Real> impute(const ForwardContext<Real>&, Var<Real>, Var<Real>,              \
                            std::span<const std::uint8_t>);                                 \
  template ForwardOutput<Real> forward(const ForwardContext<Real>&, const Batch&,           \
                                       std::optional<bool>);                                \
  template std::vector<double> predict(const ParameterSet<Real>&, const ModelConfig&,       \
                                       const Dataset&, std::size_t);

MIAM_INSTANTIATE(float)
MIAM_INSTANTIATE(double)

#undef MIAM_INSTANTIATE

}  // namespace miam
