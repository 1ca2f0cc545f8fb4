#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "psclab/config.hpp"
#include "psclab/model.hpp"
#include "psclab/train.hpp"

namespace psclab {

// Checkpoint container: magic "PSCLAB01", u32 little-endian header
// length, JSON header (tensor table + config echo), raw little-endian
// f64 payload. Optimizer moments ride along so training can resume
// bitwise.
namespace checkpoint {

constexpr char kMagic[8] = {'P', 'S', 'C', 'L', 'A', 'B', '0', '1'};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void append_f64_le(std::string& out, const std::vector<double>& data) {
  for (double v : data) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

inline void read_f64_le(const unsigned char* p, std::vector<double>& data) {
  for (auto& v : data) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    std::memcpy(&v, &bits, 8);
    p += 8;
  }
}

}  // namespace detail

// Atomic write: temp file in the target directory, then rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void save(const std::filesystem::path& path, ModelState& state,
                 const AdamWState* opt = nullptr, std::size_t step = 0) {
  Json header;
  header["config"] = model_to_json(state.config);
  header["step"] = step;

  std::string payload;
  Json tensors = Json::object();
  auto add = [&](const std::string& name, const Tensor& t) {
    Json entry;
    entry["dtype"] = "f64";
    entry["shape"] = t.shape();
    entry["offset"] = payload.size();
    entry["nbytes"] = t.size() * 8;
    tensors[name] = entry;
    detail::append_f64_le(payload, t.data());
  };
  for (const auto& p : all_params(state)) add(p.name, *p.tensor);
  if (opt) {
    for (const auto& [name, mom] : opt->moments) {
      add("opt." + name + ".m", mom.m);
      add("opt." + name + ".v", mom.v);
    }
  }
  header["tensors"] = tensors;

  const std::string header_str = header.dump();
  std::string bytes(kMagic, 8);
  detail::put_u32_le(bytes, static_cast<std::uint32_t>(header_str.size()));
  bytes += header_str;
  bytes += payload;
  write_file_atomic(path, bytes);
}

struct Loaded {
  ModelState state;
  AdamWState opt;
  std::size_t step = 0;
};

inline Loaded load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint not found: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw DataError("not a checkpoint container: " + path.string());
  const std::uint32_t header_len =
      detail::get_u32_le(reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
  if (bytes.size() < 12 + header_len) throw DataError("truncated checkpoint header");
  Json header;
  try {
    header = Json::parse(bytes.substr(12, header_len));
  } catch (const Json::exception& e) {
    throw DataError(std::string("checkpoint header does not parse: ") + e.what());
  }
  const std::size_t payload_off = 12 + header_len;
  const std::size_t payload_len = bytes.size() - payload_off;

  Loaded result;
  result.state = init_model(model_from_json(header.at("config")), /*seed=*/0);
  result.step = header.value("step", std::size_t{0});
  result.opt.step = result.step;

  const Json& tensors = header.at("tensors");
  auto read_tensor = [&](const std::string& name, Tensor& t) {
    const Json& entry = tensors.at(name);
    if (entry.at("dtype").get<std::string>() != "f64")
      throw DataError("checkpoint: unsupported dtype for " + name);
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t nbytes = entry.at("nbytes").get<std::size_t>();
    t = Tensor(shape);
    if (nbytes != t.size() * 8) throw DataError("checkpoint: nbytes mismatch for " + name);
    if (offset + nbytes > payload_len) throw DataError("checkpoint: offset out of bounds: " + name);
    detail::read_f64_le(
        reinterpret_cast<const unsigned char*>(bytes.data()) + payload_off + offset, t.data());
  };
  for (const auto& p : all_params(result.state)) read_tensor(p.name, *p.tensor);
  for (const auto& [name, entry] : tensors.items()) {
    if (name.rfind("opt.", 0) != 0) continue;
    const bool is_m = name.size() > 2 && name.compare(name.size() - 2, 2, ".m") == 0;
    const std::string param = name.substr(4, name.size() - 4 - 2);
    Tensor t;
    read_tensor(name, t);
    if (is_m)
      result.opt.moments[param].m = std::move(t);
    else
      result.opt.moments[param].v = std::move(t);
  }
  result.state.rebuild_rotary();
  return result;
}

}  // namespace checkpoint
}  // namespace psclab
