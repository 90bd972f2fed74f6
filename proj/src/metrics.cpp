#include "maskdiff/metrics.hpp"

#include "maskdiff/common.hpp"

namespace maskdiff {

MetricsLogger::MetricsLogger(const std::string& path) : path_(path), out_(path, std::ios::app) {
  if (!out_) throw IoError("cannot open metrics log: " + path);
}

void MetricsLogger::log(nlohmann::json record) {
  if (!record.contains("kind")) throw IoError("metrics record missing kind field");
  out_ << record.dump() << "\n";
  out_.flush();
  if (!out_) throw IoError("metrics write failed: " + path_);
}

}  // namespace maskdiff
