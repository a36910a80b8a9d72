#pragma once

// Versioned binary checkpoints:
//   "CAMMODEL" | u32 version | u64 header bytes | JSON header |
//   f64 weights in declared order | u64 FNV-1a checksum of everything before.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cam/cam_core.hpp"
#include "cam/error.hpp"

namespace cam {

inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'M', 'M', 'O', 'D', 'E', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct CheckpointInfo {
  ModelShape shape;
  std::string config_hash;
};

namespace detail {

template <class T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw LoadError("checkpoint is truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string serialize_model(const CamModel& model, const std::string& config_hash = "") {
  nlohmann::ordered_json header;
  header["backbone"] = to_string(model.shape().backbone);
  header["env"] = to_string(model.env());
  header["hidden"] = model.shape().hidden;
  header["layers"] = model.shape().layers;
  header["config_hash"] = config_hash;
  auto& tensors = header["tensors"] = nlohmann::ordered_json::array();
  for (const auto* p : model.parameters())
    tensors.push_back({{"name", p->name()}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(out, kCheckpointVersion);
  detail::put(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  for (const auto* p : model.parameters())
    out.append(reinterpret_cast<const char*>(p->value.data()), static_cast<std::size_t>(p->value.size()) * sizeof(double));
  detail::put(out, fnv1a64(out.data(), out.size()));
  return out;
}

/// Parses a checkpoint image. Any inconsistency raises LoadError and no model
/// is returned.
inline CamModel deserialize_model(const std::string& bytes, CheckpointInfo* info = nullptr) {
  if (bytes.size() < sizeof(kCheckpointMagic) + 4 + 8 + 8) throw LoadError("checkpoint is truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw LoadError("not a checkpoint file (bad magic)");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a64(bytes.data(), bytes.size() - 8) != stored) throw LoadError("checkpoint checksum mismatch");

  std::size_t pos = sizeof(kCheckpointMagic);
  const auto version = detail::take<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw LoadError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  const auto header_len = detail::take<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size() - 8) throw LoadError("checkpoint header is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  pos += header_len;

  ModelShape shape;
  try {
    shape.backbone = backbone_from_string(header.at("backbone").get<std::string>());
    shape.env = env_from_string(header.at("env").get<std::string>());
    shape.hidden = header.at("hidden").get<int>();
    shape.layers = header.at("layers").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint header is incomplete: ") + e.what());
  } catch (const ContractError& e) {
    throw LoadError(std::string("checkpoint header is invalid: ") + e.what());
  }
  CamModel model;
  try {
    model = CamModel::create(shape, 0);
  } catch (const Error& e) {
    throw LoadError(std::string("checkpoint describes an invalid model: ") + e.what());
  }
  const auto params = model.parameters();
  const auto& tensors = header.at("tensors");
  if (!tensors.is_array() || tensors.size() != params.size()) throw LoadError("checkpoint tensor list does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    diff::ParamTensor& p = *params[i];
    const auto& t = tensors[i];
    if (t.value("name", "") != p.name() || t.value("rows", -1L) != p.value.rows() || t.value("cols", -1L) != p.value.cols())
      throw LoadError("checkpoint tensor " + std::to_string(i) + " does not match " + p.name());
    const std::size_t n = static_cast<std::size_t>(p.value.size()) * sizeof(double);
    if (pos + n > bytes.size() - 8) throw LoadError("checkpoint weights are truncated");
    std::memcpy(p.value.data(), bytes.data() + pos, n);
    pos += n;
  }
  if (pos != bytes.size() - 8) throw LoadError("checkpoint has trailing bytes");
  if (info) {
    info->shape = shape;
    info->config_hash = header.value("config_hash", "");
  }
  return model;
}

inline void save_model(const std::filesystem::path& path, const CamModel& model, const std::string& config_hash = "") {
  const std::string bytes = serialize_model(model, config_hash);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CamModel load_model(const std::filesystem::path& path, CheckpointInfo* info = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_model(ss.str(), info);
}

}  // namespace cam
