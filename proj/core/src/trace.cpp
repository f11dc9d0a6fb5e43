#include "switchbert/trace.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "switchbert/attention.hpp"
#include "switchbert/error.hpp"

namespace switchbert {

std::string to_json_line(const TraceRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["sample"] = r.sample;
  j["layer"] = r.decision.layer;
  j["block"] = to_string(r.decision.block);
  j["pi"] = r.decision.pi;
  j["p"] = r.decision.p;
  j["choice"] = r.decision.choice;
  j["tau"] = r.decision.tau;
  return j.dump();
}

TraceRecord parse_trace_line(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    TraceRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.sample = j.at("sample").get<std::int64_t>();
    r.decision.layer = j.at("layer").get<int>();
    const auto block = j.at("block").get<std::string>();
    if (block == "SAB") r.decision.block = BlockKind::SAB;
    else if (block == "SIB") r.decision.block = BlockKind::SIB;
    else throw FormatError("trace: unknown block '" + block + "'");
    r.decision.pi = j.at("pi").get<std::vector<double>>();
    r.decision.p = j.at("p").get<std::vector<double>>();
    r.decision.choice = j.at("choice").get<std::size_t>();
    r.decision.tau = j.at("tau").get<double>();
    if (r.decision.choice >= 4) throw FormatError("trace: choice out of range");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("trace: ") + e.what());
  }
}

TraceWriter::TraceWriter(const std::string& path, bool append) {
  if (path.empty()) return;
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw IoError("cannot open trace file '" + path + "'");
}

void TraceWriter::write(std::int64_t step, std::int64_t sample,
                        const std::vector<RouteDecision>& decisions) {
  if (!enabled()) return;
  for (const auto& d : decisions) {
    out_ << to_json_line(TraceRecord{step, sample, d}) << '\n';
    ++records_;
  }
}

void TraceWriter::flush() {
  if (enabled()) out_.flush();
}

std::vector<TraceRecord> read_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read trace file '" + path + "'");
  std::vector<TraceRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(parse_trace_line(line));
  return out;
}

ArchitectureReport extract_architecture(const std::vector<TraceRecord>& records,
                                        std::size_t expected_blocks) {
  int max_layer = 0;
  for (const auto& r : records)
    if (r.decision.block == BlockKind::SAB) max_layer = std::max(max_layer, r.decision.layer);
  const std::size_t blocks =
      expected_blocks ? expected_blocks : (max_layer > 0 ? 2 * static_cast<std::size_t>(max_layer) - 1 : 0);
  if (blocks == 0) throw ContractError("extract_architecture: trace holds no SAB decisions");
  const int L = static_cast<int>((blocks + 1) / 2);

  // (layer, block) -> choice per (step, sample); SIB l sorts before SAB l.
  using Key = std::pair<int, int>;
  std::map<std::pair<std::int64_t, std::int64_t>, std::map<Key, std::size_t>> paths;
  std::set<std::pair<std::int64_t, std::int64_t>> broken;
  for (const auto& r : records) {
    const auto id = std::make_pair(r.step, r.sample);
    const Key key{r.decision.layer, r.decision.block == BlockKind::SIB ? 0 : 1};
    auto& path = paths[id];
    if (!path.emplace(key, r.decision.choice).second) broken.insert(id);
  }

  ArchitectureReport report;
  report.blocks = blocks;
  std::map<std::string, std::size_t> counts;
  for (const auto& [id, path] : paths) {
    bool complete = !broken.count(id) && path.size() == blocks;
    for (int l = 1; complete && l <= L; ++l) {
      complete = path.count({l, 1}) && (l == 1 || path.count({l, 0}));
    }
    if (!complete) {
      ++report.skipped;
      continue;
    }
    std::string text;
    for (const auto& [key, choice] : path) {
      if (!text.empty()) text += ' ';
      if (key.second == 1)
        text += "SAB" + std::to_string(key.first) + "=" + to_string(mode_from_index(choice));
      else
        text += "SIB" + std::to_string(key.first) + "=" + std::to_string(choice);
    }
    ++counts[text];
    ++report.samples;
  }
  for (const auto& [path, count] : counts)
    report.entries.push_back({path, count, 100.0 * static_cast<double>(count) /
                                               static_cast<double>(report.samples)});
  std::stable_sort(report.entries.begin(), report.entries.end(),
                   [](const auto& a, const auto& b) { return a.count > b.count; });
  return report;
}

}  // namespace switchbert
