#pragma once

#include <json.hpp>

#include <fstream>
#include <string>

namespace maskdiff {

// Append-only JSONL metrics log; every record carries a "kind" field.
class MetricsLogger {
 public:
  explicit MetricsLogger(const std::string& path);

  void log(nlohmann::json record);

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

}  // namespace maskdiff
