#include "miam/ingestion.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <json.hpp>

#include "miam/errors.hpp"

namespace miam {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// Splits one CSV line; double quotes protect commas, "" is a literal quote.
std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.emplace_back(trim(cur));
  return out;
}

std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  if (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  return lines;
}

std::optional<double> to_double(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

double parse_number(std::string_view s, const char* what, std::size_t line) {
  auto v = to_double(s);
  if (!v) throw ParseError(std::string("bad ") + what + " '" + std::string(s) + "'", line);
  return *v;
}

std::string format_id(double v) {
  if (std::floor(v) == v && std::abs(v) < 1e15) return std::to_string(static_cast<long long>(v));
  std::ostringstream os;
  os << v;
  return os.str();
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

const std::vector<std::string>& physionet_vocabulary() {
  static const std::vector<std::string> vocab = {
      "DiasABP", "HR",        "Na",       "Lactate",   "NIDiasABP", "PaO2",     "WBC",
      "pH",      "Albumin",   "ALT",      "Glucose",   "SaO2",      "Temp",     "AST",
      "Bilirubin", "HCO3",    "BUN",      "RespRate",  "Mg",        "HCT",      "SysABP",
      "FiO2",    "K",         "GCS",      "Cholesterol", "NISysABP", "TroponinT", "MAP",
      "TroponinI", "PaCO2",   "Platelets", "Urine",    "NIMAP",     "Creatinine", "ALP"};
  return vocab;
}

void SkipReport::merge(const SkipReport& other) {
  for (const auto& [k, v] : other.unknown_parameters) unknown_parameters[k] += v;
  missing_values += other.missing_values;
  descriptor_rows += other.descriptor_rows;
}

std::string SkipReport::to_text() const {
  std::ostringstream os;
  os << "descriptor_rows " << descriptor_rows << "\n";
  os << "missing_value_rows " << missing_values << "\n";
  for (const auto& [k, v] : unknown_parameters) os << "unknown " << k << " " << v << "\n";
  return os.str();
}

double parse_hhmm(std::string_view field, std::size_t line) {
  field = trim(field);
  const auto colon = field.find(':');
  auto fail = [&]() -> double {
    throw ParseError("malformed time '" + std::string(field) + "', expected HH:MM", line);
  };
  if (colon == std::string_view::npos || colon == 0 || colon + 1 >= field.size()) return fail();
  auto digits = [](std::string_view s, int& out) {
    if (s.empty()) return false;
    for (char c : s)
      if (c < '0' || c > '9') return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
  };
  int hh = 0, mm = 0;
  if (!digits(field.substr(0, colon), hh) || !digits(field.substr(colon + 1), mm) || mm > 59)
    return fail();
  return hh + mm / 60.0;
}

PhysionetRecord parse_physionet_record(std::string_view text,
                                       const std::vector<std::string>& vocabulary,
                                       const std::string& fallback_id) {
  static const std::set<std::string, std::less<>> kDescriptors = {"RecordID", "Age", "Gender",
                                                                  "Height", "ICUType"};
  const std::set<std::string, std::less<>> vocab(vocabulary.begin(), vocabulary.end());
  PhysionetRecord rec;
  const auto lines = lines_of(text);
  std::size_t first = 0;
  while (first < lines.size() && trim(lines[first]).empty()) ++first;
  if (first == lines.size()) throw ParseError("empty record", 1);
  {
    auto header = split_csv(lines[first]);
    if (header.size() != 3 || header[0] != "Time" || header[1] != "Parameter" ||
        header[2] != "Value") {
      throw ParseError("expected header 'Time,Parameter,Value'", first + 1);
    }
  }
  bool seen_series = false;
  std::vector<std::pair<std::string, double>> pending;  // events before the id is known
  std::vector<double> times;
  for (std::size_t i = first + 1; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (trim(lines[i]).empty()) continue;
    auto f = split_csv(lines[i]);
    if (f.size() != 3) throw ParseError("expected 3 fields, got " + std::to_string(f.size()), line_no);
    const double t = parse_hhmm(f[0], line_no);
    const std::string& name = f[1];
    const double value = parse_number(f[2], "value", line_no);
    const bool is_descriptor =
        kDescriptors.count(name) > 0 || (name == "Weight" && t == 0 && !seen_series);
    if (is_descriptor) {
      ++rec.skipped.descriptor_rows;
      std::optional<double> v;
      if (value != -1) v = value;
      auto& d = rec.descriptor;
      if (name == "RecordID") d.record_id = format_id(value);
      else if (name == "Age") d.age = v;
      else if (name == "Gender") d.gender = v;
      else if (name == "Height") d.height = v;
      else if (name == "ICUType") d.icu_type = v;
      else d.weight = v;
      continue;
    }
    seen_series = true;
    if (value == -1) {
      ++rec.skipped.missing_values;
      continue;
    }
    if (vocab.count(name) == 0) {
      ++rec.skipped.unknown_parameters[name];
      continue;
    }
    pending.emplace_back(name, value);
    times.push_back(t);
  }
  if (rec.descriptor.record_id.empty()) rec.descriptor.record_id = fallback_id;
  rec.events.reserve(pending.size());
  for (std::size_t i = 0; i < pending.size(); ++i) {
    rec.events.push_back({rec.descriptor.record_id, times[i], pending[i].first, pending[i].second});
  }
  return rec;
}

std::vector<RawEvent> parse_long_csv(std::string_view text, const LongCsvSchema& schema) {
  const auto lines = lines_of(text);
  std::vector<RawEvent> events;
  if (lines.empty()) throw SchemaError("long CSV has no header");
  const auto header = split_csv(lines[0]);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("long CSV is missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cs = column(schema.subject), ct = column(schema.time),
                    cv = column(schema.variable), cx = column(schema.value);
  const std::size_t need = std::max({cs, ct, cv, cx}) + 1;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (trim(lines[i]).empty()) continue;
    const auto f = split_csv(lines[i]);
    if (f.size() < need) throw ParseError("row has " + std::to_string(f.size()) + " fields", line_no);
    RawEvent e;
    e.subject_id = f[cs];
    e.time = parse_number(f[ct], "time", line_no);
    if (e.time < 0) throw ParseError("negative time", line_no);
    e.variable = f[cv];
    e.value = parse_number(f[cx], "value", line_no);
    events.push_back(std::move(e));
  }
  return events;
}

std::map<std::string, int> parse_outcomes(std::string_view text) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw SchemaError("outcomes file is empty");
  const auto header = split_csv(lines[0]);
  auto find = [&](const char* name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError(std::string("outcomes file lacks column ") + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto cid = find("RecordID");
  const auto cy = find("In-hospital_death");
  std::map<std::string, int> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto f = split_csv(lines[i]);
    if (f.size() <= std::max(cid, cy)) throw ParseError("short outcomes row", i + 1);
    const double id = parse_number(f[cid], "RecordID", i + 1);
    const double y = parse_number(f[cy], "In-hospital_death", i + 1);
    if (y != 0 && y != 1) throw ParseError("In-hospital_death must be 0 or 1", i + 1);
    out[format_id(id)] = static_cast<int>(y);
  }
  return out;
}

std::string DropReport::to_text() const {
  std::ostringstream os;
  os << "empty_subjects " << empty_subjects.size() << "\n";
  for (const auto& s : empty_subjects) os << "  " << s << "\n";
  os << "unlabelled_subjects " << unlabelled_subjects.size() << "\n";
  for (const auto& s : unlabelled_subjects) os << "  " << s << "\n";
  os << skipped.to_text();
  return os.str();
}

Dataset assemble_samples(const std::vector<RawEvent>& events,
                         const std::map<std::string, int>& labels,
                         const std::vector<std::string>& vocabulary, DropReport* report) {
  if (vocabulary.empty()) throw InvalidInputError("vocabulary is empty");
  std::unordered_map<std::string, std::size_t> column;
  for (std::size_t d = 0; d < vocabulary.size(); ++d) {
    if (!column.emplace(vocabulary[d], d).second)
      throw InvalidInputError("duplicate vocabulary entry '" + vocabulary[d] + "'");
  }
  DropReport local;
  DropReport& rep = report ? *report : local;

  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (!std::isfinite(e.time) || e.time < 0)
      throw InvalidInputError("event time must be finite and >= 0 for subject " + e.subject_id);
    auto [it, fresh] = by_subject.try_emplace(e.subject_id);
    if (fresh) order.push_back(e.subject_id);
    if (column.count(e.variable) == 0) {
      ++rep.skipped.unknown_parameters[e.variable];
      continue;
    }
    it->second.push_back(i);
  }

  Dataset ds;
  ds.vocabulary = vocabulary;
  ds.num_variables = vocabulary.size();
  const std::size_t D = vocabulary.size();
  for (const auto& id : order) {
    const auto& idx = by_subject[id];
    if (idx.empty()) {
      rep.empty_subjects.push_back(id);
      continue;
    }
    std::vector<double> times;
    for (auto i : idx) times.push_back(events[i].time);
    std::sort(times.begin(), times.end());
    times.erase(std::unique(times.begin(), times.end()), times.end());
    RealMatrix x(times.size(), D, 0.0);
    MaskMatrix m(times.size(), D, 0);
    for (auto i : idx) {
      const auto& e = events[i];
      const auto j = static_cast<std::size_t>(
          std::lower_bound(times.begin(), times.end(), e.time) - times.begin());
      const auto d = column.at(e.variable);
      x(j, d) = e.value;  // later rows overwrite earlier ones
      m(j, d) = 1;
    }
    std::optional<int> label;
    if (!labels.empty()) {
      auto it = labels.find(id);
      if (it == labels.end()) {
        rep.unlabelled_subjects.push_back(id);
      } else {
        if (it->second != 0 && it->second != 1)
          throw InvalidInputError("label for " + id + " is not 0/1");
        label = it->second;
      }
    }
    ds.samples.push_back(make_sample(id, std::move(times), std::move(x), std::move(m), label));
  }
  return ds;
}

PhysionetLoad load_physionet(const std::filesystem::path& records_dir,
                             const std::optional<std::filesystem::path>& outcomes,
                             std::size_t workers) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(records_dir)) throw IoError("not a directory: " + records_dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(records_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    if (entry.path().filename().string().rfind("Outcomes", 0) == 0) continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<PhysionetRecord> records(files.size());
  std::vector<std::string> errors(files.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < files.size();) {
      try {
        records[i] = parse_physionet_record(read_file(files[i]), physionet_vocabulary(),
                                            files[i].stem().string());
      } catch (const Error& e) {
        errors[i] = files[i].filename().string() + ": " + e.what();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, files.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (!e.empty()) throw ParseError(e, 0);

  PhysionetLoad out;
  std::vector<RawEvent> events;
  for (auto& r : records) {
    out.report.skipped.merge(r.skipped);
    if (r.events.empty()) {
      out.report.empty_subjects.push_back(r.descriptor.record_id);
      continue;
    }
    events.insert(events.end(), std::make_move_iterator(r.events.begin()),
                  std::make_move_iterator(r.events.end()));
  }
  std::map<std::string, int> labels;
  if (outcomes) labels = parse_outcomes(read_file(*outcomes));
  out.dataset = assemble_samples(events, labels, physionet_vocabulary(), &out.report);
  return out;
}

double percentile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw InvalidInputError("percentile of an empty list");
  if (!(q >= 0 && q <= 100)) throw InvalidInputError("percentile must be in [0, 100]");
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

NormalizationStats fit_normalization(const Dataset& train, double low_percentile,
                                     double high_percentile) {
  if (!(low_percentile >= 0 && low_percentile <= high_percentile && high_percentile <= 100))
    throw ConfigError("winsor percentiles must satisfy 0 <= low <= high <= 100");
  train.check_consistent();
  const std::size_t D = train.num_variables;
  NormalizationStats st;
  st.low_percentile = low_percentile;
  st.high_percentile = high_percentile;
  st.fit_sample_count = train.size();
  st.mean.assign(D, 0.0);
  st.std.assign(D, 1.0);
  st.winsor_low.assign(D, -std::numeric_limits<double>::infinity());
  st.winsor_high.assign(D, std::numeric_limits<double>::infinity());
  st.flags.assign(D, NormalizationFlag::kUnobserved);
  std::vector<double> vals;
  for (std::size_t d = 0; d < D; ++d) {
    vals.clear();
    for (const auto& s : train.samples)
      for (std::size_t j = 0; j < s.length(); ++j)
        if (s.mask(j, d)) vals.push_back(s.values(j, d));
    if (vals.empty()) continue;
    std::sort(vals.begin(), vals.end());
    const double lo = percentile_sorted(vals, low_percentile);
    const double hi = percentile_sorted(vals, high_percentile);
    double sum = 0;
    for (auto& v : vals) sum += std::clamp(v, lo, hi);
    const double mean = sum / static_cast<double>(vals.size());
    double ss = 0;
    for (auto v : vals) {
      const double c = std::clamp(v, lo, hi) - mean;
      ss += c * c;
    }
    const double sd = std::sqrt(ss / static_cast<double>(vals.size()));
    st.winsor_low[d] = lo;
    st.winsor_high[d] = hi;
    st.mean[d] = mean;
    st.flags[d] = sd < kStdFloor ? NormalizationFlag::kDegenerate : NormalizationFlag::kOk;
    st.std[d] = std::max(sd, kStdFloor);
  }
  return st;
}

namespace {
void check_stats(const Dataset& data, const NormalizationStats& stats) {
  const std::size_t D = data.num_variables;
  if (stats.mean.size() != D || stats.std.size() != D || stats.winsor_low.size() != D ||
      stats.winsor_high.size() != D) {
    throw ShapeError("normalization stats have " + std::to_string(stats.mean.size()) +
                     " variables, data has " + std::to_string(D));
  }
  data.check_consistent();
}
}  // namespace

Dataset apply_normalization(const Dataset& data, const NormalizationStats& stats) {
  check_stats(data, stats);
  Dataset out = data;
  for (auto& s : out.samples) {
    for (std::size_t j = 0; j < s.length(); ++j) {
      for (std::size_t d = 0; d < out.num_variables; ++d) {
        if (!s.mask(j, d)) continue;
        const double c = std::clamp(s.values(j, d), stats.winsor_low[d], stats.winsor_high[d]);
        s.values(j, d) = (c - stats.mean[d]) / stats.std[d];
      }
    }
  }
  out.normalization = stats;
  return out;
}

Dataset invert_normalization(const Dataset& data, const NormalizationStats& stats) {
  check_stats(data, stats);
  Dataset out = data;
  for (auto& s : out.samples)
    for (std::size_t j = 0; j < s.length(); ++j)
      for (std::size_t d = 0; d < out.num_variables; ++d)
        if (s.mask(j, d)) s.values(j, d) = s.values(j, d) * stats.std[d] + stats.mean[d];
  out.normalization.reset();
  return out;
}

std::size_t FoldManifest::fold_of(const std::string& subject_id) const {
  for (const auto& [id, f] : assignments)
    if (id == subject_id) return f;
  throw InvalidInputError("subject '" + subject_id + "' is not in the fold manifest");
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> FoldManifest::split(
    const Dataset& data, std::size_t fold) const {
  if (fold >= k) throw InvalidInputError("fold index out of range");
  std::unordered_map<std::string, std::size_t> lookup(assignments.begin(), assignments.end());
  std::vector<std::size_t> test, train;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto it = lookup.find(data.samples[i].subject_id);
    if (it == lookup.end())
      throw InvalidInputError("subject '" + data.samples[i].subject_id + "' has no fold");
    (it->second == fold ? test : train).push_back(i);
  }
  return {test, train};
}

std::string FoldManifest::to_json() const {
  nlohmann::ordered_json j;
  j["k"] = k;
  j["seed"] = seed;
  auto& a = j["assignments"] = nlohmann::ordered_json::array();
  for (const auto& [id, f] : assignments) a.push_back({{"subject_id", id}, {"fold", f}});
  return j.dump(1) + "\n";
}

FoldManifest FoldManifest::from_json(std::string_view text) {
  FoldManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.k = j.at("k").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& a : j.at("assignments")) {
      const auto f = a.at("fold").get<std::size_t>();
      if (f >= m.k) throw SchemaError("fold index out of range in manifest");
      m.assignments.emplace_back(a.at("subject_id").get<std::string>(), f);
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("fold manifest: ") + e.what());
  }
  return m;
}

FoldManifest make_folds(const Dataset& data, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("fold count must be >= 2");
  std::vector<std::size_t> pos, neg;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data.samples[i];
    if (!s.label) throw InvalidInputError("make_folds needs labels; '" + s.subject_id + "' has none");
    if (!ids.insert(s.subject_id).second)
      throw InvalidInputError("duplicate subject id '" + s.subject_id + "'");
    (*s.label == 1 ? pos : neg).push_back(i);
  }
  if (pos.size() < k)
    throw StratificationError(std::to_string(pos.size()) + " positive samples for " +
                              std::to_string(k) + " folds");
  if (neg.size() < k)
    throw StratificationError(std::to_string(neg.size()) + " negative samples for " +
                              std::to_string(k) + " folds");
  std::mt19937_64 rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  std::vector<std::size_t> fold(data.size());
  // One running counter over positives then negatives keeps both the class
  // counts and the fold sizes within one of each other.
  std::size_t c = 0;
  for (auto i : pos) fold[i] = c++ % k;
  for (auto i : neg) fold[i] = c++ % k;
  FoldManifest m;
  m.k = k;
  m.seed = seed;
  for (std::size_t i = 0; i < data.size(); ++i) m.assignments.emplace_back(data.samples[i].subject_id, fold[i]);
  return m;
}

}  // namespace miam
