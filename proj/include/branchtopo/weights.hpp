#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "branchtopo/tensor.hpp"

// Weight file layout: one JSON header line (names, shapes, byte offsets, plus
// a free-form "extra" object for the embedding application config), then raw
// little-endian float32 data in declared order. Loading the file and saving it
// again reproduces the bytes exactly.
namespace branchtopo::ad {

static_assert(std::endian::native == std::endian::little,
              "weight files assume a little-endian host");

template <typename T>
void save_weights(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor<T>>>& tensors,
                  const nlohmann::json& extra) {
  nlohmann::json header;
  header["format"] = "branchtopo-weights";
  header["version"] = 1;
  header["extra"] = extra;
  nlohmann::json list = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    list.push_back({{"name", name},
                    {"rows", t.rows()},
                    {"cols", t.cols()},
                    {"offset", offset}});
    offset += t.count() * sizeof(float);
  }
  header["tensors"] = std::move(list);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write weight file: " + path);
  out << header.dump() << "\n";
  std::vector<float> buf;
  for (const auto& [name, t] : tensors) {
    buf.resize(t.count());
    for (size_t i = 0; i < t.count(); ++i) buf[i] = static_cast<float>(t.value()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw DataError("failed while writing weight file: " + path);
}

template <typename T>
struct LoadedWeights {
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  nlohmann::json extra;
};

template <typename T>
LoadedWeights<T> load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open weight file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("weight file has no header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad weight file header in " + path + ": " + e.what());
  }
  if (header.value("format", "") != "branchtopo-weights") {
    throw DataError("not a weight file: " + path);
  }

  LoadedWeights<T> result;
  result.extra = header.value("extra", nlohmann::json::object());
  const std::streampos data_start = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name");
    const int rows = entry.at("rows");
    const int cols = entry.at("cols");
    const uint64_t offset = entry.at("offset");
    const size_t count = static_cast<size_t>(rows) * cols;
    std::vector<float> buf(count);
    in.seekg(data_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw DataError("truncated weight file: " + path + " at tensor " + name);
    std::vector<T> vals(count);
    for (size_t i = 0; i < count; ++i) vals[i] = static_cast<T>(buf[i]);
    result.tensors.emplace_back(name, Tensor<T>::from(rows, cols, std::move(vals)));
  }
  return result;
}

}  // namespace branchtopo::ad
