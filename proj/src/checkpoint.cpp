#include "bevfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "bevfuse/common.hpp"

static_assert(std::endian::native == std::endian::little, "on-disk format is little-endian");

namespace bevfuse::checkpoint {

namespace {

constexpr char kMagic[8] = {'B', 'E', 'V', 'F', 'C', 'K', 'P', '1'};

void put_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
void put_i64(std::ofstream& out, std::int64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
void put_doubles(std::ofstream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::uint32_t get_u32(std::ifstream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw DataError("-", path, "truncated checkpoint");
  return v;
}
std::uint64_t get_u64(std::ifstream& in, const std::string& path) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 8)) throw DataError("-", path, "truncated checkpoint");
  return v;
}
std::int64_t get_i64(std::ifstream& in, const std::string& path) {
  std::int64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 8)) throw DataError("-", path, "truncated checkpoint");
  return v;
}
void get_doubles(std::ifstream& in, std::vector<double>& v, const std::string& path) {
  if (!in.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double))))
    throw DataError("-", path, "truncated checkpoint");
}

Meta read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("-", path, "not a checkpoint file");
  Meta meta;
  meta.config_hash = get_u64(in, path);
  meta.step = static_cast<long>(get_i64(in, path));
  return meta;
}

}  // namespace

void save(const std::string& path, const model::Model& m, const nn::Adam* opt, long step,
          std::uint64_t config_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("-", path, "cannot open checkpoint for writing");
  out.write(kMagic, 8);
  put_u64(out, config_hash);
  put_i64(out, step);

  put_u32(out, static_cast<std::uint32_t>(m.params.items.size()));
  for (const auto& [name, t] : m.params.items) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.numel()));
    put_doubles(out, t.values());
  }

  if (opt) {
    out.put(1);
    const auto state = opt->export_state();
    put_i64(out, opt->step_count());
    put_u32(out, static_cast<std::uint32_t>(state.size()));
    put_doubles(out, state);
  } else {
    out.put(0);
  }
  if (!out) throw DataError("-", path, "checkpoint write failed");
}

Meta load(const std::string& path, model::Model& m, nn::Adam* opt, std::uint64_t expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("-", path, "cannot open checkpoint");
  Meta meta = read_header(in, path);
  if (meta.config_hash != expected_hash)
    throw IncompatError("checkpoint was written under a different config (stored hash " +
                        std::to_string(meta.config_hash) + ", expected " +
                        std::to_string(expected_hash) + ")");

  const std::uint32_t count = get_u32(in, path);
  if (count != m.params.items.size())
    throw IncompatError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                        std::to_string(m.params.items.size()));
  for (auto& [name, t] : m.params.items) {
    const std::uint32_t len = get_u32(in, path);
    std::string stored(len, '\0');
    if (!in.read(stored.data(), len)) throw DataError("-", path, "truncated checkpoint");
    if (stored != name) throw IncompatError("parameter order mismatch: " + stored + " vs " + name);
    const std::uint32_t numel = get_u32(in, path);
    if (numel != t.numel())
      throw IncompatError("parameter size mismatch for " + name);
    get_doubles(in, t.values(), path);
  }

  const int has_opt = in.get();
  if (has_opt == 1) {
    const long t = static_cast<long>(get_i64(in, path));
    std::vector<double> state(get_u32(in, path));
    get_doubles(in, state, path);
    if (opt) opt->import_state(state, t);
  } else if (has_opt == 0) {
    if (opt) throw IncompatError("checkpoint holds no optimizer state, cannot resume training");
  } else {
    throw DataError("-", path, "truncated checkpoint");
  }
  return meta;
}

Meta read_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("-", path, "cannot open checkpoint");
  return read_header(in, path);
}

}  // namespace bevfuse::checkpoint
