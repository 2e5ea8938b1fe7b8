#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace awmlab {

/// Runs fn(begin, end) over [0, n) split into contiguous chunks across up to
/// `workers` threads. Chunk boundaries depend only on (n, workers), so any
/// reduction done in chunk order is deterministic. workers <= 1 runs inline.
void parallel_for(int64_t n, int workers, const std::function<void(int64_t, int64_t)>& fn);

/// SHA-256 of a byte string, lowercase hex. Used for content-addressing run
/// inputs; not a security boundary.
std::string sha256_hex(const std::string& bytes);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

/// Round-trippable decimal formatting (max_digits10, C locale). All CSV and
/// JSON numbers go through this so logs are locale-independent.
std::string fmt_double(double v);

/// Minimal CSV accumulator: a mandatory header row, then data rows. No quoting
/// is implemented because no field ever contains a comma.
struct CsvWriter {
  explicit CsvWriter(std::vector<std::string> header);
  void row(const std::vector<std::string>& cells);
  void row_doubles(const std::vector<double>& cells);
  const std::string& text() const { return buf_; }
  void save(const std::string& path) const;

 private:
  size_t width_;
  std::string buf_;
};

}  // namespace awmlab
