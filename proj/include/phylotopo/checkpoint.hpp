#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "phylotopo/error.hpp"
#include "phylotopo/tensor.hpp"

namespace phylotopo {

// Writes text to path via a temporary file and rename, so readers never see partial content.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

namespace nn {

// Flat binary of native doubles (row-major per tensor) plus a JSON manifest of name, shape and byte offset.
inline void save_parameters(const ParameterStore& store, const std::filesystem::path& bin,
                            const std::filesystem::path& manifest) {
  std::string blob;
  nlohmann::json j;
  j["format"] = "float64-native";
  j["adam_step"] = store.step();
  auto& list = j["tensors"] = nlohmann::json::array();
  for (int i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    list.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}, {"offset", blob.size()}});
    blob.append(reinterpret_cast<const char*>(p.value.data()), static_cast<std::size_t>(p.value.size()) * sizeof(double));
  }
  write_file_atomic(bin, blob);
  write_file_atomic(manifest, j.dump(2) + "\n");
}

// Loads values into an already-constructed store; names and shapes must match exactly.
inline void load_parameters(ParameterStore& store, const std::filesystem::path& bin, const std::filesystem::path& manifest) {
  const std::string blob = read_file(bin);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(manifest));
    const auto& list = j.at("tensors");
    if (static_cast<int>(list.size()) != store.size())
      throw ValidationError("checkpoint has " + std::to_string(list.size()) + " tensors, model expects " + std::to_string(store.size()));
    for (const auto& entry : list) {
      const auto name = entry.at("name").get<std::string>();
      const int i = store.index_of(name);
      if (i < 0) throw ValidationError("checkpoint tensor '" + name + "' is not a model parameter");
      auto& p = store[i];
      const auto rows = entry.at("shape").at(0).get<Eigen::Index>(), cols = entry.at("shape").at(1).get<Eigen::Index>();
      if (rows != p.value.rows() || cols != p.value.cols())
        throw ValidationError("shape mismatch for '" + name + "'");
      const auto offset = entry.at("offset").get<std::size_t>();
      const std::size_t bytes = static_cast<std::size_t>(p.value.size()) * sizeof(double);
      if (offset + bytes > blob.size()) throw ValidationError("checkpoint binary is truncated");
      std::memcpy(p.value.data(), blob.data() + offset, bytes);
    }
    store.step() = j.value("adam_step", 0L);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed parameter manifest: ") + e.what());
  }
}

}  // namespace nn
}  // namespace phylotopo
