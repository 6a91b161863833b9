#include "abx/trainer.hpp"

#include "binary_io.hpp"

#include <fstream>

namespace abx {

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write("ABXC", 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put_string(os, c.config_json);
  detail::put<std::uint32_t>(os, c.epoch);
  detail::put<std::int64_t>(os, c.optimizer_step);
  detail::put_string(os, c.rng_state);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& [name, m] : c.arrays) {
    detail::put_string(os, name);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    detail::put_matrix(os, m);
  }
  if (!os) throw IoError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  detail::expect_magic(is, "ABXC", path.string());
  Checkpoint c;
  c.version = detail::get<std::uint32_t>(is, "version");
  if (c.version != kCheckpointVersion) {
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(c.version));
  }
  c.config_json = detail::get_string(is, "config");
  c.epoch = detail::get<std::uint32_t>(is, "epoch");
  c.optimizer_step = detail::get<std::int64_t>(is, "optimizer step");
  c.rng_state = detail::get_string(is, "rng state");
  const auto n = detail::get<std::uint32_t>(is, "array count");
  for (std::uint32_t k = 0; k < n; ++k) {
    std::string name = detail::get_string(is, "array name");
    const auto rows = detail::get<std::uint32_t>(is, "array rows");
    const auto cols = detail::get<std::uint32_t>(is, "array cols");
    c.arrays.emplace_back(std::move(name), detail::get_matrix(is, rows, cols, "array data"));
  }
  return c;
}

}  // namespace abx
