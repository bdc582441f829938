#include "miam/run_config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "miam/errors.hpp"

namespace miam {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MIAM_SIZE(name, expr)                                                              \
  {name,                                                                                   \
   {[](RunConfig& c, const std::string& k, const std::string& v) {                         \
      expr = static_cast<std::size_t>(to_uint(k, v));                                      \
    },                                                                                     \
    [](const RunConfig& c) { return std::to_string(expr); }}}
#define MIAM_U64(name, expr)                                                               \
  {name,                                                                                   \
   {[](RunConfig& c, const std::string& k, const std::string& v) { expr = to_uint(k, v); }, \
    [](const RunConfig& c) { return std::to_string(expr); }}}
#define MIAM_REAL(name, expr)                                                              \
  {name,                                                                                   \
   {[](RunConfig& c, const std::string& k, const std::string& v) { expr = to_real(k, v); }, \
    [](const RunConfig& c) { return format_real(expr); }}}
#define MIAM_BOOL(name, expr)                                                              \
  {name,                                                                                   \
   {[](RunConfig& c, const std::string& k, const std::string& v) { expr = to_bool(k, v); }, \
    [](const RunConfig& c) { return fmt_bool(expr); }}}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      MIAM_SIZE("model.num_variables", c.model.num_variables),
      MIAM_SIZE("model.d_model", c.model.d_model),
      MIAM_SIZE("model.n_heads", c.model.n_heads),
      MIAM_SIZE("model.d_k", c.model.d_k),
      MIAM_SIZE("model.d_v", c.model.d_v),
      MIAM_SIZE("model.d_ffn", c.model.d_ffn),
      MIAM_SIZE("model.n_layers", c.model.n_layers),
      MIAM_SIZE("model.d_hidden", c.model.d_hidden),
      MIAM_REAL("model.l_max", c.model.l_max),
      MIAM_REAL("model.leaky_slope", c.model.leaky_slope),
      MIAM_REAL("model.ln_eps", c.model.ln_eps),
      MIAM_REAL("model.dropout", c.model.dropout),
      MIAM_BOOL("model.residual_norm", c.model.residual_norm),
      MIAM_BOOL("model.use_decoder", c.model.use_decoder),
      MIAM_BOOL("model.evolve_views", c.model.evolve_views),
      {"model.views",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.model.views = parse_view_set(v);
        },
        [](const RunConfig& c) { return std::string(to_string(c.model.views)); }}},
      MIAM_REAL("train.lr", c.train.learning_rate),
      MIAM_REAL("train.lr_decay", c.train.lr_decay),
      MIAM_SIZE("train.decay_every", c.train.decay_every),
      MIAM_SIZE("train.epochs", c.train.epochs),
      MIAM_SIZE("train.batch_size", c.train.batch_size),
      MIAM_REAL("train.focal_beta", c.train.focal_beta),
      MIAM_REAL("train.focal_gamma", c.train.focal_gamma),
      MIAM_REAL("train.lambda_imp", c.train.lambda_imp),
      MIAM_REAL("train.lambda_cls", c.train.lambda_cls),
      MIAM_REAL("train.mask_ratio", c.train.mask_ratio),
      MIAM_REAL("train.adam_beta1", c.train.adam_beta1),
      MIAM_REAL("train.adam_beta2", c.train.adam_beta2),
      MIAM_REAL("train.adam_eps", c.train.adam_eps),
      MIAM_BOOL("train.radam_sgd_warmup", c.train.radam_sgd_warmup),
      MIAM_U64("train.seed", c.train.seed),
      {"train.precision",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.train.precision = parse_precision(v);
        },
        [](const RunConfig& c) { return std::string(to_string(c.train.precision)); }}},
      MIAM_SIZE("train.max_steps", c.train.max_steps),
      MIAM_BOOL("train.track_train_metrics", c.train.track_train_metrics),
      MIAM_BOOL("train.recompute_intervals", c.train.recompute_intervals),
      MIAM_SIZE("train.bucket_batches", c.train.bucket_batches),
      MIAM_REAL("train.val_fraction", c.train.val_fraction),
      MIAM_SIZE("cv.folds", c.folds),
      MIAM_U64("cv.seed", c.fold_seed),
      MIAM_REAL("data.winsor_low", c.winsor_low),
      MIAM_REAL("data.winsor_high", c.winsor_high),
      MIAM_BOOL("data.normalize", c.normalize),
      MIAM_SIZE("run.workers", c.workers),
  };
  return table;
}

#undef MIAM_SIZE
#undef MIAM_U64
#undef MIAM_REAL
#undef MIAM_BOOL

}  // namespace

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, value);
}

void RunConfig::apply(const KeyValues& kv) {
  for (const auto& [k, v] : kv) set(k, v);
}

KeyValues RunConfig::to_key_values() const {
  KeyValues kv;
  for (const auto& [k, f] : fields()) kv[k] = f.get(*this);
  return kv;
}

std::string RunConfig::fingerprint() const {
  std::string text;
  // Worker count does not change results.
  for (const auto& [k, v] : to_key_values())
    if (k != "run.workers") text += k + "=" + v + "\n";
  return fnv1a_hex(text);
}

void RunConfig::validate() const {
  train.validate();
  if (folds < 2) throw ConfigError("cv.folds must be >= 2");
  if (!(winsor_low >= 0 && winsor_low <= winsor_high && winsor_high <= 100))
    throw ConfigError("winsor percentiles must satisfy 0 <= low <= high <= 100");
}

KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
    auto key = trim(std::string_view(body).substr(0, eq));
    auto value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ParseError("empty key", line_no);
    kv[key] = value;
  }
  return kv;
}

KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return parse_key_values(os.str());
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace miam
