#pragma once

// Checkpoint container.
//
//   <name>.ckpt           concatenated tensors, little-endian IEEE-754 float32,
//                         row-major, in manifest order, no header or padding
//   <name>.manifest.json  {"format": "esimft-checkpoint", "version": 1,
//                          "dtype": "float32", "byte_order": "little",
//                          "architecture": {...},
//                          "tensors": [{"name", "shape": [rows, cols],
//                                       "offset": <bytes>, "count": <floats>}],
//                          "total_bytes": n, "provenance": {...}}

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>

#include "esimft/io.hpp"
#include "esimft/model_params.hpp"

namespace esimft {

inline json architecture_to_json(const Architecture& a) {
  return {{"d_model", a.d_model},     {"encoder_layers", a.encoder_layers}, {"decoder_layers", a.decoder_layers},
          {"heads", a.heads},         {"ff_width", a.ff_width},             {"bbox_bound_scale", a.bbox_bound_scale},
          {"cost_bound_scale", a.cost_bound_scale}};
}

inline Architecture architecture_from_json(const json& j) {
  Architecture a;
  a.d_model = j.at("d_model").get<int>();
  a.encoder_layers = j.at("encoder_layers").get<int>();
  a.decoder_layers = j.at("decoder_layers").get<int>();
  a.heads = j.at("heads").get<int>();
  a.ff_width = j.at("ff_width").get<int>();
  a.bbox_bound_scale = j.at("bbox_bound_scale").get<double>();
  a.cost_bound_scale = j.at("cost_bound_scale").get<double>();
  a.check();
  return a;
}

inline fs::path manifest_path(const fs::path& ckpt) {
  fs::path m = ckpt;
  m.replace_extension(".manifest.json");
  return m;
}

template <class T>
void save_checkpoint(const fs::path& ckpt, const ModelParameters<T>& params, const json& provenance = json::object()) {
  std::string blob;
  json tensors = json::array();
  for (const auto& t : params) {
    const std::size_t offset = blob.size();
    for (T v : t.value.data) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      char bytes[4];
      std::memcpy(bytes, &bits, 4);
      blob.append(bytes, 4);
    }
    tensors.push_back({{"name", t.name},
                       {"shape", {t.value.rows, t.value.cols}},
                       {"offset", offset},
                       {"count", t.value.size()}});
  }
  json manifest = {{"format", "esimft-checkpoint"},
                   {"version", 1},
                   {"dtype", "float32"},
                   {"byte_order", "little"},
                   {"architecture", architecture_to_json(params.architecture())},
                   {"tensors", tensors},
                   {"total_bytes", blob.size()},
                   {"provenance", provenance}};
  write_file_atomic(ckpt, blob);
  write_json(manifest_path(ckpt), manifest);
}

template <class T>
ModelParameters<T> load_checkpoint(const fs::path& ckpt) {
  const json manifest = read_json(manifest_path(ckpt));
  if (manifest.at("format") != "esimft-checkpoint" || manifest.at("version") != 1)
    throw std::runtime_error("unsupported checkpoint format in " + manifest_path(ckpt).string());
  const std::string blob = read_file(ckpt);
  if (blob.size() != manifest.at("total_bytes").get<std::size_t>())
    throw std::runtime_error("checkpoint size mismatch for " + ckpt.string());

  ModelParameters<T> params(architecture_from_json(manifest.at("architecture")));
  for (const auto& t : manifest.at("tensors")) {
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (shape.size() != 2 || shape[0] * shape[1] != count || offset + 4 * count > blob.size())
      throw std::runtime_error("corrupt tensor entry in " + ckpt.string());
    Matrix<T> m(shape[0], shape[1]);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, blob.data() + offset + 4 * i, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      m.data[i] = static_cast<T>(std::bit_cast<float>(bits));
    }
    params.add(t.at("name").get<std::string>(), std::move(m));
  }
  return params;
}

inline json read_checkpoint_provenance(const fs::path& ckpt) { return read_json(manifest_path(ckpt)).at("provenance"); }

}  // namespace esimft
