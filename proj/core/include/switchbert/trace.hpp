#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "switchbert/router.hpp"

namespace switchbert {

/// One line of a route trace file.
struct TraceRecord {
  std::int64_t step = 0;
  std::int64_t sample = 0;
  RouteDecision decision;
};

std::string to_json_line(const TraceRecord& record);
/// Throws FormatError on malformed input.
TraceRecord parse_trace_line(const std::string& line);

/// Append-only JSONL writer. An empty path disables writing.
class TraceWriter {
 public:
  TraceWriter() = default;
  explicit TraceWriter(const std::string& path, bool append = false);

  bool enabled() const noexcept { return out_.is_open(); }
  void write(std::int64_t step, std::int64_t sample, const std::vector<RouteDecision>& decisions);
  std::size_t records() const noexcept { return records_; }
  void flush();

 private:
  std::ofstream out_;
  std::size_t records_ = 0;
};

std::vector<TraceRecord> read_trace(const std::string& path);

struct ArchitectureEntry {
  std::string path;          // e.g. "SAB1=M3 SIB2=0 SAB2=M1"
  std::size_t count = 0;
  double percent = 0.0;
};

struct ArchitectureReport {
  std::vector<ArchitectureEntry> entries;  // descending count, ties by path
  std::size_t samples = 0;
  std::size_t skipped = 0;  // (step, sample) groups with an incomplete path
  std::size_t blocks = 0;   // decisions per complete path
};

/// Groups records by (step, sample) and counts hard-choice tuples over all
/// SAB/SIB blocks. The block count is taken from the records themselves
/// (max SAB layer L gives 2L−1) unless `expected_blocks` is nonzero.
ArchitectureReport extract_architecture(const std::vector<TraceRecord>& records,
                                        std::size_t expected_blocks = 0);

}  // namespace switchbert
