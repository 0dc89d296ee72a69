#include "cbd/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "cbd/detail/binio.hpp"
#include "cbd/errors.hpp"

namespace cbd {

namespace {
constexpr char kMagic[4] = {'C', 'B', 'D', 'L'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const Network& net, const std::string& path) {
  using detail::put_f32;
  using detail::put_u32;
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  const std::string cfg = net.config.to_text();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.append(cfg);
  for (const auto& [name, t] : net.named_tensors()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(t->shape.size()));
    for (const int d : t->shape) put_u32(out, static_cast<std::uint32_t>(d));
    put_f32(out, t->ptr(), t->numel());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("checkpoint: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw InputError("checkpoint: write failed for '" + path + "'");
}

Network load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r{buf, "checkpoint"};

  const std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic in '" + path + "'");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t cfg_len = r.u32();
  const NetworkConfig cfg = NetworkConfig::from_text(r.bytes(cfg_len));

  Network net = Network::init(cfg, 0);
  for (auto& [name, t] : net.named_tensors()) {
    const std::uint32_t name_len = r.u32();
    const std::string got = r.bytes(name_len);
    if (got != name)
      throw FormatError("checkpoint: expected tensor '" + name + "', found '" + got + "'");
    const std::uint32_t rank = r.u32();
    if (rank != static_cast<std::uint32_t>(t->rank()))
      throw FormatError("checkpoint: rank mismatch for '" + name + "'");
    for (int d = 0; d < t->rank(); ++d)
      if (r.u32() != static_cast<std::uint32_t>(t->dim(d)))
        throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    r.f32(t->ptr(), t->numel());
  }
  if (r.pos != buf.size()) throw FormatError("checkpoint: trailing bytes in '" + path + "'");
  return net;
}

}  // namespace cbd
