// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cllmfs/error.hpp"

namespace cllmfs {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

const Tensor& TensorBundle::at(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw Error(ErrorKind::data, "checkpoint has no tensor '" + name + "'");
}

bool TensorBundle::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void save_bundle(const fs::path& dir, const TensorBundle& bundle) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());

  json manifest = bundle.metadata;
  manifest["format_version"] = kCheckpointFormatVersion;
  json entries = json::array();
  std::size_t offset = 0;
  const fs::path blob_path = dir / "tensors.bin";
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw Error(ErrorKind::io, "cannot write " + blob_path.string());
  for (const auto& [name, t] : bundle.tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    const auto data = t.data();
    blob.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    offset += data.size_bytes();
  }
  if (!blob) throw Error(ErrorKind::io, "short write to " + blob_path.string());
  manifest["tensors"] = entries;

  const fs::path manifest_path = dir / "manifest.json";
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + manifest_path.string());
  out << manifest.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::io, "short write to " + manifest_path.string());
}

TensorBundle load_bundle(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw Error(ErrorKind::io, "cannot read " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, manifest_path.string() + ": " + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw Error(ErrorKind::data, manifest_path.string() + ": unsupported format_version " + std::to_string(version));
  }

  const fs::path blob_path = dir / "tensors.bin";
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw Error(ErrorKind::io, "cannot read " + blob_path.string());
  blob.seekg(0, std::ios::end);
  const auto blob_size = static_cast<std::size_t>(blob.tellg());

  TensorBundle bundle;
  try {
    for (const auto& e : manifest.at("tensors")) {
      const auto shape = e.at("shape").get<ad::Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      std::vector<double> values(ad::shape_numel(shape));
      const std::size_t bytes = values.size() * sizeof(double);
      if (offset + bytes > blob_size) {
        throw Error(ErrorKind::data, blob_path.string() + ": tensor '" + e.at("name").get<std::string>() +
                                         "' extends past end of blob");
      }
      blob.seekg(static_cast<std::streamoff>(offset));
      blob.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
      bundle.tensors.emplace_back(e.at("name").get<std::string>(), Tensor::from(shape, std::move(values)));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, manifest_path.string() + ": " + e.what());
  }
  manifest.erase("tensors");
  bundle.metadata = std::move(manifest);
  return bundle;
}

json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},   {"d_model", c.d_model},     {"n_heads", c.n_heads},
          {"n_kv_groups", c.n_kv_groups}, {"d_ff", c.ff_dim()},   {"vocab_size", c.vocab_size},
          {"max_seq", c.max_seq},     {"rope_base", c.rope_base}, {"norm_eps", c.norm_eps},
          {"init_std", c.init_std},   {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_kv_groups = j.value("n_kv_groups", c.n_kv_groups);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    c.init_std = j.value("init_std", c.init_std);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("model config: ") + e.what());
  }
  return c;
}

json to_json(const LoraSpec& s) {
  return {{"rank", s.rank}, {"scale", s.scale}, {"init_std", s.init_std}, {"targets", format_lora_targets(s.targets)}};
}

LoraSpec lora_spec_from_json(const json& j) {
  LoraSpec s;
  try {
    s.rank = j.value("rank", s.rank);
    s.scale = j.value("scale", s.scale);
    s.init_std = j.value("init_std", s.init_std);
    if (j.contains("targets")) s.targets = parse_lora_targets(j.at("targets").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("lora spec: ") + e.what());
  }
  return s;
}

void restore_tensors(const TensorBundle& bundle, const std::vector<std::pair<std::string, Tensor>>& into) {
  for (const auto& [name, target] : into) {
    const Tensor& src = bundle.at(name);
    Tensor dst = target;
    if (src.shape() != dst.shape()) {
      throw Error(ErrorKind::data, "tensor '" + name + "' has shape " + ad::shape_str(src.shape()) + ", expected " +
                                       ad::shape_str(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  }
}

}  // namespace cllmfs
