#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nmid {

namespace fs = std::filesystem;

// Row-major so that rows map onto tokens / samples and raw buffers are contiguous.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Error hierarchy. Every failure the library reports is an nmid::Error so
// callers (the CLI in particular) can attach stage context in one place.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

// Minimal leveled logger on stderr. Quiet by default in tests.
enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

inline LogLevel& log_level() {
  static LogLevel level = LogLevel::info;
  return level;
}

template <typename... Args>
void log(LogLevel level, Args&&... args) {
  if (level < log_level()) return;
  static std::mutex mu;
  static constexpr const char* names[] = {"debug", "info", "warn", "error"};
  std::lock_guard lock(mu);
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << cat(std::forward<Args>(args)...) << '\n';
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(cat("cannot open ", path.string()));
  std::ostringstream oss;
  oss << in.rdbuf();
  return oss.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(cat("cannot write ", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(cat("short write to ", path.string()));
}

// Write to a sibling temp file, then rename over the target.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  write_file(tmp, bytes);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError(cat("cannot rename ", tmp.string(), " -> ", path.string(), ": ", ec.message()));
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(cat("cannot open ", path.string()));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace nmid
