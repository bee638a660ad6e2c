#pragma once

// Little-endian binary encoding shared by checkpoints, datasets and
// adversarial batches.
//
// Checkpoint layout (version 1):
//   "MTCF" | u32 version
//   u32 task_count, then per task: u32 name_len, name bytes, u32 C_i, f64 lambda_i
//   backbone config: u32 kind, u32 input_dim, u32 width_count, u32 widths[],
//                    u32 channels, u32 height, u32 width, f64 input_shift, f64 input_scale
//   per task head config: u32 kind, u32 hidden_width
//   u32 tensor_count, then every parameter tensor (backbone layers first, then
//   heads in task order; weight before bias) as u32 rank, u32 dims[], f64 values[]

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include "hiddentask/model.hpp"
#include "hiddentask/tensor.hpp"

namespace hiddentask {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(&os) {}

  void magic(std::string_view tag);
  void u32(std::uint32_t v);
  void f64(double v);
  void str(std::string_view s);
  void tensor(const Tensor& t);

 private:
  std::ostream* os_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& is) : is_(&is) {}

  /// Throws FormatError when the next bytes are not `tag`.
  void expect_magic(std::string_view tag);
  std::uint32_t u32();
  double f64();
  std::string str();
  Tensor tensor();

 private:
  void read(char* dst, std::size_t n);
  std::istream* is_;
};

void save_checkpoint(const MultiTaskModel& model, std::ostream& os);
MultiTaskModel load_checkpoint(std::istream& is);
void save_checkpoint(const MultiTaskModel& model, const std::filesystem::path& path);
MultiTaskModel load_checkpoint(const std::filesystem::path& path);

}  // namespace hiddentask
