#include "mkfa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mkfa {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(std::string_view bytes, size_t at) {
  U v;
  std::memcpy(&v, bytes.data() + at, sizeof(U));
  return v;
}

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

struct Entry {
  std::string name;
  Shape shape;
  const void* data;
};

nlohmann::json shape_json(const Shape& s) { return nlohmann::json::array({s.n, s.c, s.h, s.w}); }

}  // namespace

template <typename T>
std::string encode_checkpoint(const MkfaNet<T>& model, const Optimizer<T>* optimizer, const nlohmann::json& training) {
  std::vector<Entry> entries;
  for (const auto& p : model.params()) entries.push_back({p->name, p->value().shape(), p->value().ptr()});
  nlohmann::json opt = nullptr;
  if (optimizer) {
    opt = {{"config", optimizer->config()}, {"steps", optimizer->steps()}};
    const auto& m = optimizer->first_moments();
    const auto& v = optimizer->second_moments();
    if (!m.empty()) {
      for (size_t i = 0; i < model.params().size(); ++i) {
        const auto& p = model.params()[i];
        entries.push_back({"opt.m." + p.name, p.value().shape(), m[i].data()});
      }
      for (size_t i = 0; i < model.params().size(); ++i) {
        const auto& p = model.params()[i];
        entries.push_back({"opt.v." + p.name, p.value().shape(), v[i].data()});
      }
    }
  }
  nlohmann::json dir = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& e : entries) {
    dir.push_back({{"name", e.name}, {"shape", shape_json(e.shape)}, {"offset", offset}});
    offset += static_cast<uint64_t>(e.shape.numel()) * sizeof(T);
  }
  nlohmann::json header = {{"arch", model.config()},
                           {"dtype", dtype_name<T>()},
                           {"tensors", dir},
                           {"payload_bytes", offset},
                           {"optimizer", opt},
                           {"training", training}};
  const std::string text = header.dump();
  std::string out = "MKFA";
  put<uint32_t>(out, kCheckpointVersion);
  put<uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& e : entries) {
    out.append(static_cast<const char*>(e.data), static_cast<size_t>(e.shape.numel()) * sizeof(T));
  }
  return out;
}

namespace {

nlohmann::json parse_header(std::string_view bytes, size_t& payload_at) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "MKFA") throw CheckpointError("not a checkpoint: bad magic");
  if (bytes.size() < 16) throw CheckpointError("truncated checkpoint header");
  const auto version = get<uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = get<uint64_t>(bytes, 8);
  if (len > bytes.size() - 16) throw CheckpointError("truncated checkpoint header");
  payload_at = 16 + static_cast<size_t>(len);
  try {
    return nlohmann::json::parse(bytes.substr(16, static_cast<size_t>(len)));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
}

template <typename T, typename S>
void copy_values(std::string_view payload, uint64_t offset, int64_t count, T* dst) {
  for (int64_t i = 0; i < count; ++i) {
    dst[i] = static_cast<T>(get<S>(payload, static_cast<size_t>(offset) + static_cast<size_t>(i) * sizeof(S)));
  }
}

}  // namespace

template <typename T>
LoadedCheckpoint<T> decode_checkpoint(std::string_view bytes) {
  size_t payload_at = 0;
  nlohmann::json header = parse_header(bytes, payload_at);
  LoadedCheckpoint<T> out;
  try {
    const std::string dtype = header.at("dtype").get<std::string>();
    if (dtype != "float32" && dtype != "float64") throw CheckpointError("unknown checkpoint dtype " + dtype);
    const size_t width = dtype == "float32" ? 4 : 8;
    const std::string_view payload = bytes.substr(payload_at);
    const auto expected = header.at("payload_bytes").get<uint64_t>();
    if (payload.size() < expected) {
      throw CheckpointError("truncated checkpoint payload: need " + std::to_string(expected) + " bytes, have " +
                            std::to_string(payload.size()));
    }
    if (payload.size() > expected) throw CheckpointError("trailing bytes after checkpoint payload");

    ArchConfig arch = header.at("arch").get<ArchConfig>();
    out.model = std::make_unique<MkfaNet<T>>(arch, 0);
    std::map<std::string, std::pair<Shape, uint64_t>> dir;
    uint64_t next = 0;
    for (const auto& t : header.at("tensors")) {
      const auto s = t.at("shape").get<std::array<int64_t, 4>>();
      const Shape shape{s[0], s[1], s[2], s[3]};
      const auto offset = t.at("offset").get<uint64_t>();
      if (offset != next) throw CheckpointError("tensor directory offsets are not contiguous at " + t.at("name").get<std::string>());
      next = offset + static_cast<uint64_t>(shape.numel()) * width;
      if (next > expected) throw CheckpointError("tensor " + t.at("name").get<std::string>() + " overruns the payload");
      dir[t.at("name").get<std::string>()] = {shape, offset};
    }
    auto read = [&](const std::string& name, const Shape& want, T* dst) {
      auto it = dir.find(name);
      if (it == dir.end()) throw CheckpointError("checkpoint is missing tensor " + name);
      if (!(it->second.first == want)) {
        throw CheckpointError("shape mismatch for " + name + ": header " + it->second.first.str() + ", model " +
                              want.str());
      }
      if (width == 4) {
        copy_values<T, float>(payload, it->second.second, want.numel(), dst);
      } else {
        copy_values<T, double>(payload, it->second.second, want.numel(), dst);
      }
    };
    for (auto& p : out.model->params()) read(p->name, p->value().shape(), p->value().ptr());
    if (!header.at("optimizer").is_null()) {
      const auto& o = header.at("optimizer");
      out.optimizer = std::make_unique<Optimizer<T>>(o.at("config").get<OptimizerConfig>());
      out.optimizer->set_steps(o.at("steps").get<int64_t>());
      if (dir.count("opt.m." + out.model->params()[0].name)) {
        for (auto& p : out.model->params()) {
          const auto n = static_cast<size_t>(p->value().numel());
          out.optimizer->first_moments().emplace_back(n);
          out.optimizer->second_moments().emplace_back(n);
          read("opt.m." + p->name, p->value().shape(), out.optimizer->first_moments().back().data());
          read("opt.v." + p->name, p->value().shape(), out.optimizer->second_moments().back().data());
        }
      }
    }
    out.training = header.value("training", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
  }
  out.header = std::move(header);
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const MkfaNet<T>& model, const Optimizer<T>* optimizer,
                     const nlohmann::json& training) {
  const std::string bytes = encode_checkpoint(model, optimizer, training);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace {

std::string read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_all(path));
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  size_t at = 0;
  return parse_header(bytes, at);
}

template std::string encode_checkpoint(const MkfaNet<float>&, const Optimizer<float>*, const nlohmann::json&);
template std::string encode_checkpoint(const MkfaNet<double>&, const Optimizer<double>*, const nlohmann::json&);
template LoadedCheckpoint<float> decode_checkpoint(std::string_view);
template LoadedCheckpoint<double> decode_checkpoint(std::string_view);
template void save_checkpoint(const std::filesystem::path&, const MkfaNet<float>&, const Optimizer<float>*,
                              const nlohmann::json&);
template void save_checkpoint(const std::filesystem::path&, const MkfaNet<double>&, const Optimizer<double>*,
                              const nlohmann::json&);
template LoadedCheckpoint<float> load_checkpoint(const std::filesystem::path&);
template LoadedCheckpoint<double> load_checkpoint(const std::filesystem::path&);

}  // namespace mkfa
