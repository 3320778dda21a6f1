#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "nmid/common.hpp"

namespace nmid {

struct PredictionRecord {
  std::string image_id;
  std::string true_label;
  std::vector<std::string> predicted;  // best first; empty when the response was unparseable
  std::string raw;

  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

inline nlohmann::ordered_json to_json(const PredictionRecord& r) {
  nlohmann::ordered_json j;
  j["image_id"] = r.image_id;
  j["label"] = r.true_label;
  j["predicted"] = r.predicted;
  j["raw"] = r.raw;
  return j;
}

inline PredictionRecord prediction_from_json(const nlohmann::json& j) {
  return {j.at("image_id").get<std::string>(), j.at("label").get<std::string>(),
          j.at("predicted").get<std::vector<std::string>>(), j.value("raw", std::string{})};
}

inline std::string predictions_to_jsonl(const std::vector<PredictionRecord>& recs) {
  std::string out;
  for (const auto& r : recs) out += to_json(r).dump() + "\n";
  return out;
}

inline std::vector<PredictionRecord> load_predictions(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw IoError(cat("missing predictions file: ", path.string()));
  std::vector<PredictionRecord> out;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    try {
      out.push_back(prediction_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(cat(path.string(), ": bad prediction line: ", e.what()));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline double top_n_accuracy(const std::vector<PredictionRecord>& recs, int n) {
  if (n < 1) throw ValidationError(cat("top-n: n must be >= 1, got ", n));
  if (recs.empty()) throw ValidationError("top-n: empty record set");
  std::size_t hits = 0;
  for (const auto& r : recs) {
    const std::size_t m = std::min<std::size_t>(r.predicted.size(), static_cast<std::size_t>(n));
    if (std::find(r.predicted.begin(), r.predicted.begin() + static_cast<std::ptrdiff_t>(m), r.true_label) !=
        r.predicted.begin() + static_cast<std::ptrdiff_t>(m))
      ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(recs.size());
}

/// Rows are true labels, columns are top-1 predictions; the last column
/// counts records without a parseable prediction.
struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<long>> counts;  // K x (K+1)

  std::size_t k() const { return labels.size(); }
  long unparseable(std::size_t row) const { return counts[row][k()]; }
  long total() const {
    long t = 0;
    for (const auto& row : counts)
      for (long c : row) t += c;
    return t;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(const std::vector<PredictionRecord>& recs, const std::vector<std::string>& label_set) {
  ConfusionMatrix cm;
  cm.labels = label_set;
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < label_set.size(); ++i) idx[label_set[i]] = i;
  if (idx.size() != label_set.size()) throw ValidationError("confusion: duplicate labels in label set");
  cm.counts.assign(label_set.size(), std::vector<long>(label_set.size() + 1, 0));
  for (const auto& r : recs) {
    auto t = idx.find(r.true_label);
    if (t == idx.end()) throw ValidationError(cat("confusion: true label '", r.true_label, "' not in label set"));
    std::size_t col = label_set.size();
    if (!r.predicted.empty()) {
      auto p = idx.find(r.predicted.front());
      if (p == idx.end()) throw ValidationError(cat("confusion: predicted label '", r.predicted.front(), "' not in label set"));
      col = p->second;
    }
    ++cm.counts[t->second][col];
  }
  return cm;
}

struct ClassMetrics {
  std::string label;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  long support = 0;    // records with this true label
  long predicted = 0;  // records with this top-1 prediction
  bool precision_undefined = false;
  bool recall_undefined = false;
  bool f1_undefined = false;

  friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

/// Zero denominators give 0 and set the matching *_undefined flag.
inline std::vector<ClassMetrics> precision_recall_f1(const ConfusionMatrix& cm) {
  const std::size_t K = cm.k();
  std::vector<ClassMetrics> out(K);
  for (std::size_t c = 0; c < K; ++c) {
    auto& m = out[c];
    m.label = cm.labels[c];
    const long tp = cm.counts[c][c];
    for (std::size_t j = 0; j <= K; ++j) m.support += cm.counts[c][j];
    for (std::size_t i = 0; i < K; ++i) m.predicted += cm.counts[i][c];
    if (m.predicted > 0) {
      m.precision = static_cast<double>(tp) / static_cast<double>(m.predicted);
    } else {
      m.precision_undefined = true;
    }
    if (m.support > 0) {
      m.recall = static_cast<double>(tp) / static_cast<double>(m.support);
    } else {
      m.recall_undefined = true;
    }
    if (m.precision + m.recall > 0.0) {
      m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    } else {
      m.f1_undefined = true;
    }
  }
  return out;
}

// Pooled TP / pooled support over all classes.
inline double micro_recall(const ConfusionMatrix& cm) {
  long tp = 0;
  const long total = cm.total();
  for (std::size_t c = 0; c < cm.k(); ++c) tp += cm.counts[c][c];
  return total > 0 ? static_cast<double>(tp) / static_cast<double>(total) : 0.0;
}

inline const std::vector<int>& report_top_n() {
  static const std::vector<int> ns = {1, 2, 3, 5};
  return ns;
}

struct MetricsReport {
  long n_records = 0;
  std::map<int, double> top_n;
  ConfusionMatrix confusion;
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double micro_recall = 0.0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline MetricsReport evaluate(const std::vector<PredictionRecord>& recs, const std::vector<std::string>& label_set) {
  MetricsReport r;
  r.n_records = static_cast<long>(recs.size());
  for (int n : report_top_n()) r.top_n[n] = top_n_accuracy(recs, n);
  r.confusion = confusion(recs, label_set);
  r.per_class = precision_recall_f1(r.confusion);
  for (const auto& m : r.per_class) {
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
  }
  if (!r.per_class.empty()) {
    const double k = static_cast<double>(r.per_class.size());
    r.macro_precision /= k;
    r.macro_recall /= k;
    r.macro_f1 /= k;
  }
  r.micro_recall = micro_recall(r.confusion);
  return r;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

inline constexpr const char* kUnparseableColumn = "unparseable";

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["n_records"] = r.n_records;
  nlohmann::ordered_json top = nlohmann::ordered_json::object();
  for (const auto& [n, v] : r.top_n) top[std::to_string(n)] = v;
  j["top_n"] = top;
  j["labels"] = r.confusion.labels;
  j["confusion"] = r.confusion.counts;
  nlohmann::ordered_json pcs = nlohmann::ordered_json::array();
  for (const auto& m : r.per_class) {
    nlohmann::ordered_json c;
    c["label"] = m.label;
    c["precision"] = m.precision;
    c["recall"] = m.recall;
    c["f1"] = m.f1;
    c["support"] = m.support;
    c["predicted"] = m.predicted;
    c["precision_undefined"] = m.precision_undefined;
    c["recall_undefined"] = m.recall_undefined;
    c["f1_undefined"] = m.f1_undefined;
    pcs.push_back(std::move(c));
  }
  j["per_class"] = pcs;
  j["macro"] = {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f1", r.macro_f1}};
  j["micro_recall"] = r.micro_recall;
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.n_records = j.at("n_records").get<long>();
  for (const auto& [k, v] : j.at("top_n").items()) r.top_n[std::stoi(k)] = v.get<double>();
  r.confusion.labels = j.at("labels").get<std::vector<std::string>>();
  r.confusion.counts = j.at("confusion").get<std::vector<std::vector<long>>>();
  for (const auto& c : j.at("per_class")) {
    ClassMetrics m;
    m.label = c.at("label").get<std::string>();
    m.precision = c.at("precision").get<double>();
    m.recall = c.at("recall").get<double>();
    m.f1 = c.at("f1").get<double>();
    m.support = c.at("support").get<long>();
    m.predicted = c.at("predicted").get<long>();
    m.precision_undefined = c.at("precision_undefined").get<bool>();
    m.recall_undefined = c.at("recall_undefined").get<bool>();
    m.f1_undefined = c.at("f1_undefined").get<bool>();
    r.per_class.push_back(std::move(m));
  }
  r.macro_precision = j.at("macro").at("precision").get<double>();
  r.macro_recall = j.at("macro").at("recall").get<double>();
  r.macro_f1 = j.at("macro").at("f1").get<double>();
  r.micro_recall = j.at("micro_recall").get<double>();
  return r;
}

namespace detail {
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}
inline std::string fmt_rate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace detail

/// One row per class plus a summary row.
inline std::string report_csv(const MetricsReport& r) {
  std::string out = "label,precision,recall,f1,support,predicted,flags\n";
  for (const auto& m : r.per_class) {
    std::string flags;
    if (m.precision_undefined) flags += "precision_undefined;";
    if (m.recall_undefined) flags += "recall_undefined;";
    if (m.f1_undefined) flags += "f1_undefined;";
    if (!flags.empty()) flags.pop_back();
    out += cat(detail::csv_field(m.label), ",", detail::fmt_rate(m.precision), ",", detail::fmt_rate(m.recall), ",",
               detail::fmt_rate(m.f1), ",", m.support, ",", m.predicted, ",", flags, "\n");
  }
  std::string summary;
  for (const auto& [n, v] : r.top_n) summary += cat(summary.empty() ? "" : ";", "top", n, "=", detail::fmt_rate(v));
  out += cat("macro,", detail::fmt_rate(r.macro_precision), ",", detail::fmt_rate(r.macro_recall), ",",
             detail::fmt_rate(r.macro_f1), ",", r.n_records, ",", r.n_records, ",", summary, "\n");
  return out;
}

inline std::string confusion_csv(const ConfusionMatrix& cm) {
  std::string out = "true\\predicted";
  for (const auto& l : cm.labels) out += "," + detail::csv_field(l);
  out += cat(",", kUnparseableColumn, "\n");
  for (std::size_t i = 0; i < cm.k(); ++i) {
    out += detail::csv_field(cm.labels[i]);
    for (long c : cm.counts[i]) out += cat(",", c);
    out += "\n";
  }
  return out;
}

enum class ReportFormat { json, csv, both };

/// Writes report.json and/or report.csv + confusion.csv into `dir`.
inline std::vector<fs::path> emit_report(const MetricsReport& r, const fs::path& dir,
                                         ReportFormat format = ReportFormat::both) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError(cat("cannot create report directory ", dir.string()));
  std::vector<fs::path> written;
  if (format != ReportFormat::csv) {
    write_file_atomic(dir / "report.json", to_json(r).dump(2) + "\n");
    written.push_back(dir / "report.json");
  }
  if (format != ReportFormat::json) {
    write_file_atomic(dir / "report.csv", report_csv(r));
    write_file_atomic(dir / "confusion.csv", confusion_csv(r.confusion));
    written.push_back(dir / "report.csv");
    written.push_back(dir / "confusion.csv");
  }
  return written;
}

}  // namespace nmid
