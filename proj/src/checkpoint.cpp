#include "maskdiff/checkpoint.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <vector>

namespace maskdiff {

namespace {

constexpr char kMagic[8] = {'M', 'D', 'C', 'K', '0', '0', '0', '1'};

nlohmann::json tensor_table(const ParamStore& store) {
  nlohmann::json arr = nlohmann::json::array();
  for (size_t i = 0; i < store.count(); ++i) {
    const NamedTensor& t = store.tensor(i);
    arr.push_back({{"name", t.name},
                   {"rows", t.value.rows()},
                   {"cols", t.value.cols()},
                   {"decay", t.decay}});
  }
  return arr;
}

void write_store(std::ofstream& out, const ParamStore& store) {
  for (size_t i = 0; i < store.count(); ++i) {
    const Matrix& m = store.tensor(i).value;
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
}

void read_store(std::ifstream& in, const nlohmann::json& table, ParamStore& store,
                const std::string& group, const std::string& path) {
  if (table.size() != store.count()) {
    throw IoError("checkpoint " + path + ": group '" + group + "' lists " +
                  std::to_string(table.size()) + " tensors, model has " +
                  std::to_string(store.count()));
  }
  for (size_t i = 0; i < store.count(); ++i) {
    NamedTensor& t = store.tensor(i);
    const nlohmann::json& row = table[i];
    const std::string name = row.at("name").get<std::string>();
    const int64_t rows = row.at("rows").get<int64_t>();
    const int64_t cols = row.at("cols").get<int64_t>();
    if (name != t.name || rows != t.value.rows() || cols != t.value.cols()) {
      throw IoError("checkpoint " + path + ": tensor '" + name + "' in group '" + group +
                    "' does not match the model (expected '" + t.name + "' " +
                    std::to_string(t.value.rows()) + "x" + std::to_string(t.value.cols()) + ")");
    }
    in.read(reinterpret_cast<char*>(t.value.data()),
            static_cast<std::streamsize>(sizeof(double) * t.value.size()));
    if (!in) throw IoError("checkpoint " + path + ": truncated tensor data at '" + name + "'");
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, const TrainState& state) {
  nlohmann::json header{{"format", 1},
                        {"phase", state.phase},
                        {"step", state.step},
                        {"config", config_to_map(cfg)},
                        {"groups", nlohmann::json::array()}};
  header["groups"].push_back({{"name", "params"}, {"tensors", tensor_table(state.net.params())}});
  if (state.has_ema()) {
    header["groups"].push_back({{"name", "ema"}, {"tensors", tensor_table(state.ema)}});
  }
  header["groups"].push_back({{"name", "adam_m"}, {"tensors", tensor_table(state.adam_m)}});
  header["groups"].push_back({{"name", "adam_v"}, {"tensors", tensor_table(state.adam_v)}});

  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  const uint64_t hlen = h.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  write_store(out, state.net.params());
  if (state.has_ema()) write_store(out, state.ema);
  write_store(out, state.adam_m);
  write_store(out, state.adam_v);
  out.flush();
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);

  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::string(magic, sizeof(magic)) != std::string(kMagic, sizeof(kMagic))) {
    throw IoError("not a checkpoint file: " + path);
  }
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen == 0 || hlen > (1ULL << 30)) {
    throw IoError("corrupt checkpoint header: " + path);
  }
  std::string h(hlen, '\0');
  in.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("truncated checkpoint header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header: " + path + " (" + e.what() + ")");
  }

  RunConfig cfg;
  std::string phase;
  int64_t step = 0;
  try {
    if (header.at("format").get<int>() != 1) {
      throw IoError("unsupported checkpoint format in " + path);
    }
    phase = header.at("phase").get<std::string>();
    step = header.at("step").get<int64_t>();
    cfg = config_from_map(header.at("config").get<std::map<std::string, std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header: " + path + " (" + e.what() + ")");
  }

  const ModelConfig mc = cfg.build_model_config(phase);
  LoadedCheckpoint loaded{cfg, TrainState(mc)};
  TrainState& st = loaded.state;
  st.phase = phase;
  st.step = step;

  bool saw_params = false, saw_m = false, saw_v = false;
  for (const nlohmann::json& group : header.at("groups")) {
    const std::string name = group.at("name").get<std::string>();
    const nlohmann::json& table = group.at("tensors");
    if (name == "params") {
      read_store(in, table, st.net.params(), name, path);
      saw_params = true;
    } else if (name == "ema") {
      st.ema = st.net.params().zeros_like();
      read_store(in, table, st.ema, name, path);
    } else if (name == "adam_m") {
      st.adam_m = st.net.params().zeros_like();
      read_store(in, table, st.adam_m, name, path);
      saw_m = true;
    } else if (name == "adam_v") {
      st.adam_v = st.net.params().zeros_like();
      read_store(in, table, st.adam_v, name, path);
      saw_v = true;
    } else {
      throw IoError("checkpoint " + path + ": unknown tensor group '" + name + "'");
    }
  }
  if (!saw_params || !saw_m || !saw_v) {
    throw IoError("checkpoint " + path + ": missing tensor groups");
  }
  return loaded;
}

}  // namespace maskdiff
