#include "hiddentask/checkpoint.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "hiddentask/errors.hpp"

namespace hiddentask {

namespace {

constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint32_t kMaxString = 1u << 20;

std::uint32_t checked_u32(std::size_t v) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw FormatError("value does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void BinaryWriter::magic(std::string_view tag) { os_->write(tag.data(), static_cast<std::streamsize>(tag.size())); }

void BinaryWriter::u32(std::uint32_t v) {
  std::array<char, 4> b{};
  for (std::size_t i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os_->write(b.data(), 4);
}

void BinaryWriter::f64(double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> b{};
  for (std::size_t i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  os_->write(b.data(), 8);
}

void BinaryWriter::str(std::string_view s) {
  u32(checked_u32(s.size()));
  os_->write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinaryWriter::tensor(const Tensor& t) {
  u32(checked_u32(t.rank()));
  for (std::size_t d : t.shape()) u32(checked_u32(d));
  for (double v : t.values()) f64(v);
}

void BinaryReader::read(char* dst, std::size_t n) {
  is_->read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is_->gcount()) != n) throw FormatError("unexpected end of file");
}

void BinaryReader::expect_magic(std::string_view tag) {
  std::string got(tag.size(), '\0');
  read(got.data(), got.size());
  if (got != tag) throw FormatError("bad magic: expected '" + std::string(tag) + "'");
}

std::uint32_t BinaryReader::u32() {
  std::array<unsigned char, 4> b{};
  read(reinterpret_cast<char*>(b.data()), 4);
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double BinaryReader::f64() {
  std::array<unsigned char, 8> b{};
  read(reinterpret_cast<char*>(b.data()), 8);
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string BinaryReader::str() {
  const std::uint32_t n = u32();
  if (n > kMaxString) throw FormatError("string length " + std::to_string(n) + " too large");
  std::string s(n, '\0');
  read(s.data(), n);
  return s;
}

Tensor BinaryReader::tensor() {
  const std::uint32_t rank = u32();
  if (rank > kMaxRank) throw FormatError("tensor rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  for (auto& d : shape) d = u32();
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = f64();
  return Tensor(std::move(shape), std::move(values));
}

void save_checkpoint(const MultiTaskModel& model, std::ostream& os) {
  BinaryWriter w(os);
  w.magic("MTCF");
  w.u32(kCheckpointVersion);
  w.u32(checked_u32(model.tasks().size()));
  for (const TaskSpec& t : model.tasks()) {
    w.str(t.name);
    w.u32(checked_u32(t.num_classes));
    w.f64(t.weight);
  }
  const BackboneConfig& cfg = model.backbone().config;
  w.u32(static_cast<std::uint32_t>(cfg.kind));
  w.u32(checked_u32(cfg.input_dim));
  w.u32(checked_u32(cfg.widths.size()));
  for (std::size_t width : cfg.widths) w.u32(checked_u32(width));
  w.u32(checked_u32(cfg.image.channels));
  w.u32(checked_u32(cfg.image.height));
  w.u32(checked_u32(cfg.image.width));
  w.f64(cfg.input_shift);
  w.f64(cfg.input_scale);
  for (const Head& h : model.heads()) {
    w.u32(static_cast<std::uint32_t>(h.config.kind));
    w.u32(checked_u32(h.config.hidden_width));
  }
  std::size_t count = 2 * model.backbone().layers.size();
  for (const Head& h : model.heads()) count += 2 * h.layers.size();
  w.u32(checked_u32(count));
  for (const Layer& l : model.backbone().layers) {
    w.tensor(l.weight);
    w.tensor(l.bias);
  }
  for (const Head& h : model.heads()) {
    for (const Layer& l : h.layers) {
      w.tensor(l.weight);
      w.tensor(l.bias);
    }
  }
  if (!os) throw FormatError("failed writing checkpoint");
}

MultiTaskModel load_checkpoint(std::istream& is) {
  BinaryReader r(is);
  r.expect_magic("MTCF");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<TaskSpec> tasks(r.u32());
  for (TaskSpec& t : tasks) {
    t.name = r.str();
    t.num_classes = r.u32();
    t.weight = r.f64();
  }
  BackboneConfig cfg;
  const std::uint32_t kind = r.u32();
  if (kind > static_cast<std::uint32_t>(BackboneKind::small_conv)) {
    throw FormatError("unknown backbone kind " + std::to_string(kind));
  }
  cfg.kind = static_cast<BackboneKind>(kind);
  cfg.input_dim = r.u32();
  cfg.widths.resize(r.u32());
  for (auto& width : cfg.widths) width = r.u32();
  cfg.image.channels = r.u32();
  cfg.image.height = r.u32();
  cfg.image.width = r.u32();
  cfg.input_shift = r.f64();
  cfg.input_scale = r.f64();

  std::vector<Head> heads(tasks.size());
  for (Head& h : heads) {
    const std::uint32_t hk = r.u32();
    if (hk > static_cast<std::uint32_t>(HeadKind::mlp)) throw FormatError("unknown head kind " + std::to_string(hk));
    h.config.kind = static_cast<HeadKind>(hk);
    h.config.hidden_width = r.u32();
  }

  const std::uint32_t count = r.u32();
  std::size_t expected = 2 * cfg.layer_count();
  for (const Head& h : heads) expected += h.config.kind == HeadKind::linear ? 2 : 4;
  if (count != expected) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                      std::to_string(expected));
  }
  Backbone backbone{cfg, {}};
  for (std::size_t i = 0; i < cfg.layer_count(); ++i) {
    Tensor weight = r.tensor();
    Tensor bias = r.tensor();
    backbone.layers.push_back({std::move(weight), std::move(bias)});
  }
  for (Head& h : heads) {
    const std::size_t layers = h.config.kind == HeadKind::linear ? 1 : 2;
    for (std::size_t i = 0; i < layers; ++i) {
      Tensor weight = r.tensor();
      Tensor bias = r.tensor();
      h.layers.push_back({std::move(weight), std::move(bias)});
    }
  }
  try {
    return MultiTaskModel(std::move(backbone), std::move(tasks), std::move(heads));
  } catch (const std::exception& e) {
    throw FormatError(std::string("inconsistent checkpoint: ") + e.what());
  }
}

void save_checkpoint(const MultiTaskModel& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  save_checkpoint(model, os);
}

MultiTaskModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return load_checkpoint(is);
}

}  // namespace hiddentask
