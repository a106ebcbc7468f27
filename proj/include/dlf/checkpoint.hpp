// Copyright 2026 The DLF Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "DLFC" u16 version
//   repeated section:
//     u32 name length, name
//     u64 header length, header text (key=value lines plus a tensor directory)
//     u64 payload length, payload (raw f64 tensors at the directory offsets)
//     u64 FNV-1a hash of header and payload
//
// Sections, in order: "model", "optimizer", "rng".

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dlf/errors.hpp"
#include "dlf/tensor.hpp"

namespace dlf {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::string config;                           // resolved key=value configuration
  std::vector<NamedTensor> params;              // model parameters, registry order
  std::vector<std::string> initialized_layers;  // actnorm layers past data-dependent init
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;  // next batch within the epoch
  double best_valid = std::numeric_limits<double>::infinity();
  std::uint64_t optimizer_step = 0;
  std::vector<Tensor> adam_m, adam_v;
  std::string rng_state;  // std::mt19937_64 stream form
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view a, std::string_view b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto s : {a, b}) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline void put_le(std::string& buf, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::string hex_double(double v) {
  std::ostringstream os;
  os << std::hexfloat << v;
  return os.str();
}

inline double parse_double(const std::string& s, const std::string& section) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') throw DataError("corrupt checkpoint section '" + section + "': bad number '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& section) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw DataError("corrupt checkpoint section '" + section + "': bad integer '" + s + "'");
}

// Directory lines "tensor <name> f64 <d0,d1,...> <byte offset>" and the payload.
inline void write_tensors(std::string& header, std::string& payload, const std::vector<NamedTensor>& ts) {
  for (const auto& t : ts) {
    header += "tensor " + t.name + " f64 ";
    for (std::size_t i = 0; i < t.value.rank(); ++i) header += (i ? "," : "") + std::to_string(t.value.dim(i));
    header += " " + std::to_string(payload.size()) + "\n";
    for (double v : t.value.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_le(payload, bits, 8);
    }
  }
}

struct Section {
  std::string name, header, payload;
};

inline std::vector<NamedTensor> read_tensors(const Section& s, std::vector<std::string>* other_lines) {
  std::vector<NamedTensor> out;
  std::istringstream in(s.header);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("tensor ", 0) != 0) {
      if (other_lines) other_lines->push_back(line);
      continue;
    }
    std::istringstream ls(line.substr(7));
    std::string name, dtype, dims, offset;
    if (!(ls >> name >> dtype >> dims >> offset) || dtype != "f64") {
      throw DataError("corrupt checkpoint section '" + s.name + "': bad tensor entry '" + line + "'");
    }
    Shape shape;
    std::istringstream ds(dims);
    for (std::string d; std::getline(ds, d, ',');) shape.push_back(parse_u64(d, s.name));
    const std::uint64_t off = parse_u64(offset, s.name);
    const std::size_t count = numel(shape);
    if (shape.empty() || off + 8 * count > s.payload.size()) {
      throw DataError("corrupt checkpoint section '" + s.name + "': tensor " + name + " exceeds the payload");
    }
    Tensor t(shape);
    std::memcpy(t.data().data(), s.payload.data() + off, 8 * count);
    out.push_back({name, std::move(t)});
  }
  return out;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::vector<detail::Section> sections;
  {
    detail::Section s{"model", "", ""};
    s.header = "[config]\n" + c.config + "[state]\n";
    s.header += "step=" + std::to_string(c.step) + "\n";
    s.header += "epoch=" + std::to_string(c.epoch) + "\n";
    s.header += "batch=" + std::to_string(c.batch) + "\n";
    s.header += "best_valid=" + detail::hex_double(c.best_valid) + "\n";
    for (const auto& l : c.initialized_layers) s.header += "initialized=" + l + "\n";
    s.header += "[tensors]\n";
    detail::write_tensors(s.header, s.payload, c.params);
    sections.push_back(std::move(s));
  }
  {
    if (c.adam_m.size() != c.params.size() || c.adam_v.size() != c.params.size()) {
      throw ContractError("checkpoint: optimizer moments do not match the parameter list");
    }
    detail::Section s{"optimizer", "step=" + std::to_string(c.optimizer_step) + "\n", ""};
    std::vector<NamedTensor> moments;
    for (std::size_t i = 0; i < c.params.size(); ++i) moments.push_back({"m/" + c.params[i].name, c.adam_m[i]});
    for (std::size_t i = 0; i < c.params.size(); ++i) moments.push_back({"v/" + c.params[i].name, c.adam_v[i]});
    detail::write_tensors(s.header, s.payload, moments);
    sections.push_back(std::move(s));
  }
  sections.push_back({"rng", "mt19937_64=" + c.rng_state + "\n", ""});

  std::string buf = "DLFC";
  detail::put_le(buf, kCheckpointVersion, 2);
  for (const auto& s : sections) {
    detail::put_le(buf, s.name.size(), 4);
    buf += s.name;
    detail::put_le(buf, s.header.size(), 8);
    buf += s.header;
    detail::put_le(buf, s.payload.size(), 8);
    buf += s.payload;
    detail::put_le(buf, detail::fnv1a(s.header, s.payload), 8);
  }
  return buf;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf, const std::string& origin = "checkpoint") {
  std::size_t off = 0;
  auto take = [&](std::size_t n, const std::string& what) {
    if (off + n > buf.size()) {
      throw DataError(origin + ": truncated " + what + " at byte offset " + std::to_string(off));
    }
    std::string_view v(buf.data() + off, n);
    off += n;
    return v;
  };
  auto le = [&](int bytes, const std::string& what) {
    auto v = take(static_cast<std::size_t>(bytes), what);
    std::uint64_t r = 0;
    for (int i = 0; i < bytes; ++i) r |= std::uint64_t{static_cast<unsigned char>(v[static_cast<std::size_t>(i)])} << (8 * i);
    return r;
  };
  if (take(4, "magic") != "DLFC") throw DataError(origin + ": not a checkpoint (bad magic)");
  const auto version = le(2, "version");
  if (version != kCheckpointVersion) {
    throw DataError(origin + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  std::vector<detail::Section> sections;
  for (const char* expected : {"model", "optimizer", "rng"}) {
    detail::Section s;
    const auto name_len = le(4, std::string("section name before '") + expected + "'");
    if (name_len > 64) throw DataError(origin + ": corrupt section name before '" + expected + "'");
    s.name = std::string(take(name_len, "section name"));
    if (s.name != expected) {
      throw DataError(origin + ": expected section '" + expected + "', found '" + s.name + "'");
    }
    s.header = std::string(take(le(8, "header length of '" + s.name + "'"), "header of '" + s.name + "'"));
    s.payload = std::string(take(le(8, "payload length of '" + s.name + "'"), "payload of '" + s.name + "'"));
    if (le(8, "checksum of '" + s.name + "'") != detail::fnv1a(s.header, s.payload)) {
      throw DataError(origin + ": corrupt checkpoint section '" + s.name + "' (checksum mismatch)");
    }
    sections.push_back(std::move(s));
  }
  if (off != buf.size()) throw DataError(origin + ": trailing bytes after section 'rng'");

  Checkpoint c;
  {
    const auto& s = sections[0];
    const auto cfg_at = s.header.find("[config]\n"), state_at = s.header.find("[state]\n"),
               tensors_at = s.header.find("[tensors]\n");
    if (cfg_at != 0 || state_at == std::string::npos || tensors_at == std::string::npos || tensors_at < state_at) {
      throw DataError(origin + ": corrupt checkpoint section 'model': missing [config]/[state]/[tensors]");
    }
    c.config = s.header.substr(9, state_at - 9);
    std::vector<std::string> state_lines;
    detail::Section tensors{s.name, s.header.substr(tensors_at + 10), s.payload};
    c.params = detail::read_tensors(tensors, nullptr);
    std::istringstream in(s.header.substr(state_at + 8, tensors_at - state_at - 8));
    for (std::string line; std::getline(in, line);) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError(origin + ": corrupt checkpoint section 'model': '" + line + "'");
      const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
      if (k == "step") {
        c.step = detail::parse_u64(v, s.name);
      } else if (k == "epoch") {
        c.epoch = detail::parse_u64(v, s.name);
      } else if (k == "batch") {
        c.batch = detail::parse_u64(v, s.name);
      } else if (k == "best_valid") {
        c.best_valid = detail::parse_double(v, s.name);
      } else if (k == "initialized") {
        c.initialized_layers.push_back(v);
      } else {
        throw DataError(origin + ": corrupt checkpoint section 'model': unknown state key '" + k + "'");
      }
    }
  }
  {
    const auto& s = sections[1];
    std::vector<std::string> lines;
    auto moments = detail::read_tensors(s, &lines);
    if (lines.size() != 1 || lines[0].rfind("step=", 0) != 0 || moments.size() != 2 * c.params.size()) {
      throw DataError(origin + ": corrupt checkpoint section 'optimizer'");
    }
    c.optimizer_step = detail::parse_u64(lines[0].substr(5), s.name);
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      c.adam_m.push_back(std::move(moments[i].value));
      c.adam_v.push_back(std::move(moments[c.params.size() + i].value));
    }
  }
  {
    const auto& h = sections[2].header;
    if (h.rfind("mt19937_64=", 0) != 0 || h.back() != '\n') {
      throw DataError(origin + ": corrupt checkpoint section 'rng'");
    }
    c.rng_state = h.substr(11, h.size() - 12);
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string buf = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  const std::string buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(buf, path);
}

}  // namespace dlf
