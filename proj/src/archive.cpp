#include "mikecoco/archive.hpp"

#include <cstring>
#include <fstream>

#include "mikecoco/error.hpp"

namespace mikecoco {

namespace {

constexpr char kMagic[8] = {'M', 'K', 'C', 'O', 'A', 'R', 'C', 'H'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ValidationError("truncated archive: " + path.string());
  return v;
}

}  // namespace

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kArchiveVersion);
    const std::string meta = archive.meta.dump();
    put<std::uint64_t>(out, meta.size());
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint64_t>(out, archive.tensors.size());
    for (const auto& [name, m] : archive.tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
      put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    }
    if (!out) throw RuntimeFailure("short write on " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open archive: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError("not a mikecoco archive: " + path.string());
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version == 0 || version > kArchiveVersion) {
    throw ValidationError("unsupported archive version " + std::to_string(version) + " in " + path.string());
  }
  Archive a;
  const auto meta_len = get<std::uint64_t>(in, path);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw ValidationError("truncated archive: " + path.string());
  try {
    a.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt archive metadata in " + path.string() + ": " + e.what());
  }
  const auto count = get<std::uint64_t>(in, path);
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto name_len = get<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rows = get<std::uint64_t>(in, path);
    const auto cols = get<std::uint64_t>(in, path);
    ag::Matrix m(static_cast<ag::Index>(rows), static_cast<ag::Index>(cols));
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * rows * cols));
    if (!in) throw ValidationError("truncated archive: " + path.string());
    a.tensors.emplace(std::move(name), std::move(m));
  }
  return a;
}

}  // namespace mikecoco
