#include "miam/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "miam/errors.hpp"

namespace miam {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace {

using json = nlohmann::ordered_json;

constexpr char kDatasetMagic[8] = {'M', 'I', 'A', 'M', 'D', 'S', '0', '1'};
constexpr char kLatentMagic[8] = {'M', 'I', 'A', 'M', 'L', 'T', '0', '1'};
constexpr char kCheckpointMagic[8] = {'M', 'I', 'A', 'M', 'C', 'K', '0', '1'};
constexpr std::uint64_t kMaxBlock = std::uint64_t{1} << 36;

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  void raw(const void* p, std::size_t n) {
    os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os_) throw IoError("write failed");
  }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void i32(std::int32_t v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  template <class T>
  void block(const std::vector<T>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(T));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}
  void raw(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw IoError("truncated file");
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::int32_t i32() {
    std::int32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = u64();
    if (n > kMaxBlock) throw IoError("corrupt string length");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  template <class T>
  std::vector<T> block(std::size_t expect) {
    const auto n = u64();
    if (n != expect) {
      throw IoError("block holds " + std::to_string(n) + " items, expected " + std::to_string(expect));
    }
    std::vector<T> v(n);
    raw(v.data(), n * sizeof(T));
    return v;
  }
  void magic(const char (&m)[8], const char* what) {
    char buf[8];
    raw(buf, 8);
    if (std::memcmp(buf, m, 8) != 0) throw IoError(std::string("not a ") + what + " file");
  }

 private:
  std::istream& is_;
};

json real_json(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double json_real(const json& j) {
  if (j.is_number()) return j.get<double>();
  const auto s = j.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  throw SchemaError("expected a number, got '" + s + "'");
}

json stats_json(const NormalizationStats& st) {
  json j;
  auto arr = [](const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) a.push_back(real_json(x));
    return a;
  };
  j["mean"] = arr(st.mean);
  j["std"] = arr(st.std);
  j["winsor_low"] = arr(st.winsor_low);
  j["winsor_high"] = arr(st.winsor_high);
  json flags = json::array();
  for (auto f : st.flags) flags.push_back(static_cast<int>(f));
  j["flags"] = flags;
  j["fit_sample_count"] = st.fit_sample_count;
  j["low_percentile"] = st.low_percentile;
  j["high_percentile"] = st.high_percentile;
  return j;
}

NormalizationStats stats_parse(const json& j) {
  NormalizationStats st;
  auto arr = [&](const char* k) {
    std::vector<double> v;
    for (const auto& x : j.at(k)) v.push_back(json_real(x));
    return v;
  };
  st.mean = arr("mean");
  st.std = arr("std");
  st.winsor_low = arr("winsor_low");
  st.winsor_high = arr("winsor_high");
  for (const auto& f : j.at("flags")) {
    const int v = f.get<int>();
    if (v < 0 || v > 2) throw SchemaError("bad normalization flag");
    st.flags.push_back(static_cast<NormalizationFlag>(v));
  }
  st.fit_sample_count = j.at("fit_sample_count").get<std::size_t>();
  st.low_percentile = j.at("low_percentile").get<double>();
  st.high_percentile = j.at("high_percentile").get<double>();
  const auto d = st.mean.size();
  if (st.std.size() != d || st.winsor_low.size() != d || st.winsor_high.size() != d ||
      st.flags.size() != d) {
    throw SchemaError("normalization arrays differ in length");
  }
  return st;
}

void write_header(Writer& w, const json& header) { w.str(header.dump()); }

json read_header(Reader& r) {
  try {
    return json::parse(r.str());
  } catch (const json::exception& e) {
    throw SchemaError(std::string("bad header: ") + e.what());
  }
}

std::ofstream open_out(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + p.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open " + p.string());
  return is;
}

template <class Real>
void write_params(Writer& w, const ParameterSet<Real>& p) {
  w.u64(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& t = p.tensor(i);
    w.str(p.name(i));
    w.u64(t.rank());
    for (auto d : t.shape()) w.u64(d);
    std::vector<double> data(t.data().begin(), t.data().end());
    w.block(data);
  }
}

ParameterSet<double> read_params(Reader& r) {
  ParameterSet<double> p;
  const auto n = r.u64();
  if (n > kMaxBlock) throw IoError("corrupt parameter count");
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name = r.str();
    const auto rank = r.u64();
    if (rank > 3) throw IoError("corrupt tensor rank for " + name);
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    auto data = r.block<double>(ad::shape_size(shape));
    p.add(std::move(name), ad::Tensor<double>(std::move(shape), std::move(data)));
  }
  return p;
}

json history_json(const std::vector<EpochRecord>& h) {
  json a = json::array();
  for (const auto& r : h) {
    a.push_back({{"epoch", r.epoch},
                 {"lr", real_json(r.learning_rate)},
                 {"steps", r.steps},
                 {"loss", real_json(r.loss)},
                 {"cls_loss", real_json(r.cls_loss)},
                 {"imp_loss", real_json(r.imp_loss)},
                 {"val_auc", real_json(r.val_auc)},
                 {"val_auprc", real_json(r.val_auprc)},
                 {"train_auc", real_json(r.train_auc)},
                 {"train_auprc", real_json(r.train_auprc)}});
  }
  return a;
}

std::vector<EpochRecord> history_parse(const json& a) {
  std::vector<EpochRecord> h;
  for (const auto& j : a) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<std::size_t>();
    r.learning_rate = json_real(j.at("lr"));
    r.steps = j.at("steps").get<std::size_t>();
    r.loss = json_real(j.at("loss"));
    r.cls_loss = json_real(j.at("cls_loss"));
    r.imp_loss = json_real(j.at("imp_loss"));
    r.val_auc = json_real(j.at("val_auc"));
    r.val_auprc = json_real(j.at("val_auprc"));
    r.train_auc = json_real(j.at("train_auc"));
    r.train_auprc = json_real(j.at("train_auprc"));
    h.push_back(r);
  }
  return h;
}

}  // namespace

void write_dataset(std::ostream& os, const Dataset& data, const std::string& fingerprint) {
  data.check_consistent();
  Writer w(os);
  w.raw(kDatasetMagic, 8);
  json header;
  header["num_variables"] = data.num_variables;
  header["vocabulary"] = data.vocabulary;
  header["n_samples"] = data.size();
  header["normalization"] = data.normalization ? stats_json(*data.normalization) : json(nullptr);
  header["fingerprint"] = fingerprint;
  write_header(w, header);
  for (const auto& s : data.samples) {
    w.str(s.subject_id);
    w.i32(s.label ? *s.label : -1);
    w.block(s.timestamps);
    w.block(s.values.data);
    w.block(s.mask.data);
    w.block(s.intervals.data);
  }
}

Dataset read_dataset(std::istream& is, std::string* fingerprint) {
  Reader r(is);
  r.magic(kDatasetMagic, "dataset container");
  const auto header = read_header(r);
  Dataset ds;
  std::size_t n = 0;
  try {
    ds.num_variables = header.at("num_variables").get<std::size_t>();
    ds.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
    n = header.at("n_samples").get<std::size_t>();
    if (!header.at("normalization").is_null()) ds.normalization = stats_parse(header.at("normalization"));
    if (fingerprint) *fingerprint = header.value("fingerprint", std::string());
  } catch (const json::exception& e) {
    throw SchemaError(std::string("dataset header: ") + e.what());
  }
  const std::size_t D = ds.num_variables;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    TimeSeriesSample s;
    s.subject_id = r.str();
    const auto label = r.i32();
    if (label >= 0) s.label = label;
    const auto T = r.u64();
    if (T > kMaxBlock) throw IoError("corrupt sample length");
    s.timestamps.resize(T);
    r.raw(s.timestamps.data(), T * sizeof(double));
    s.values.rows = s.mask.rows = s.intervals.rows = T;
    s.values.cols = s.mask.cols = s.intervals.cols = D;
    s.values.data = r.block<double>(T * D);
    s.mask.data = r.block<std::uint8_t>(T * D);
    s.intervals.data = r.block<double>(T * D);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data,
                  const std::string& fingerprint) {
  auto os = open_out(path);
  write_dataset(os, data, fingerprint);
}

Dataset load_dataset(const std::filesystem::path& path, std::string* fingerprint) {
  auto is = open_in(path);
  return read_dataset(is, fingerprint);
}

void save_latents(const std::filesystem::path& path, const std::vector<RealMatrix>& latents) {
  auto os = open_out(path);
  Writer w(os);
  w.raw(kLatentMagic, 8);
  w.u64(latents.size());
  for (const auto& m : latents) {
    w.u64(m.rows);
    w.u64(m.cols);
    w.block(m.data);
  }
}

std::vector<RealMatrix> load_latents(const std::filesystem::path& path) {
  auto is = open_in(path);
  Reader r(is);
  r.magic(kLatentMagic, "latent");
  const auto n = r.u64();
  if (n > kMaxBlock) throw IoError("corrupt latent count");
  std::vector<RealMatrix> out;
  for (std::uint64_t i = 0; i < n; ++i) {
    RealMatrix m;
    m.rows = r.u64();
    m.cols = r.u64();
    if (m.rows > kMaxBlock || m.cols > kMaxBlock) throw IoError("corrupt latent shape");
    m.data = r.block<double>(m.rows * m.cols);
    out.push_back(std::move(m));
  }
  return out;
}

std::string stats_to_json(const NormalizationStats& stats) { return stats_json(stats).dump(1) + "\n"; }

NormalizationStats stats_from_json(const std::string& text) {
  try {
    return stats_parse(json::parse(text));
  } catch (const json::exception& e) {
    throw SchemaError(std::string("normalization stats: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json header;
  header["config"] = ckpt.config.to_key_values();
  header["fingerprint"] = ckpt.config.fingerprint();
  header["vocabulary"] = ckpt.vocabulary;
  header["normalization"] = ckpt.normalization ? stats_json(*ckpt.normalization) : json(nullptr);
  const auto& st = ckpt.state;
  header["next_epoch"] = st.next_epoch;
  header["best_epoch"] = st.best_epoch;
  header["best_val_auc"] = real_json(st.best_val_auc);
  header["optimizer_step"] = st.optimizer.step;
  header["optimizer_skipped"] = st.optimizer.skipped;
  header["history"] = history_json(st.history);

  // Write next to the target and rename so a crash never leaves half a file.
  auto tmp = path;
  tmp += ".tmp";
  {
    auto os = open_out(tmp);
    Writer w(os);
    w.raw(kCheckpointMagic, 8);
    write_header(w, header);
    write_params(w, st.params);
    write_params(w, st.best_params);
    write_params(w, st.optimizer.m);
    write_params(w, st.optimizer.v);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto is = open_in(path);
  Reader r(is);
  r.magic(kCheckpointMagic, "checkpoint");
  const auto header = read_header(r);
  Checkpoint ck;
  try {
    ck.config.apply(header.at("config").get<KeyValues>());
    ck.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
    if (!header.at("normalization").is_null()) ck.normalization = stats_parse(header.at("normalization"));
    ck.state.next_epoch = header.at("next_epoch").get<std::size_t>();
    ck.state.best_epoch = header.at("best_epoch").get<std::size_t>();
    ck.state.best_val_auc = json_real(header.at("best_val_auc"));
    ck.state.optimizer.step = header.at("optimizer_step").get<std::size_t>();
    ck.state.optimizer.skipped = header.at("optimizer_skipped").get<std::size_t>();
    ck.state.history = history_parse(header.at("history"));
  } catch (const json::exception& e) {
    throw SchemaError(std::string("checkpoint header: ") + e.what());
  }
  ck.state.params = read_params(r);
  ck.state.best_params = read_params(r);
  ck.state.optimizer.m = read_params(r);
  ck.state.optimizer.v = read_params(r);
  return ck;
}

std::string read_text_file(const std::filesystem::path& path) {
  auto is = open_in(path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto os = open_out(path);
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace miam
