#pragma once

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"
#include "mkfa/model.hpp"
#include "mkfa/optim.hpp"

namespace mkfa {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr uint32_t kCheckpointVersion = 1;

// Layout: "MKFA", u32 version, u64 header length, JSON header, payload.
// The header holds the architecture, a tensor directory (name, shape, byte
// offset into the payload) and free-form training state. The payload is
// little-endian float32 ("float64" when saved from a double model), model
// parameters first, then optimizer moments as opt.m.<name> / opt.v.<name>.

template <typename T>
std::string encode_checkpoint(const MkfaNet<T>& model, const Optimizer<T>* optimizer,
                              const nlohmann::json& training = nlohmann::json::object());

template <typename T>
struct LoadedCheckpoint {
  std::unique_ptr<MkfaNet<T>> model;
  std::unique_ptr<Optimizer<T>> optimizer;  // null when the file has no optimizer state
  nlohmann::json training;
  nlohmann::json header;
};

/// Values are converted when the stored precision differs from T.
template <typename T>
LoadedCheckpoint<T> decode_checkpoint(std::string_view bytes);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const MkfaNet<T>& model, const Optimizer<T>* optimizer,
                     const nlohmann::json& training = nlohmann::json::object());

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Header only, without materialising tensors.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace mkfa
