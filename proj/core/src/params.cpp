#include "affcl/params.hpp"

#include "affcl/error.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

namespace affcl {

Param::Param(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
  const std::size_t count =
      std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  value = Vec::Zero(static_cast<Eigen::Index>(count));
  grad = Vec::Zero(static_cast<Eigen::Index>(count));
}

ParameterVector flatten(std::span<Param* const> params) {
  ParameterVector pv;
  std::size_t offset = 0;
  for (const Param* p : params) {
    pv.manifest.push_back({p->name, p->shape, offset, p->size()});
    offset += p->size();
  }
  pv.values.reserve(offset);
  for (const Param* p : params) pv.values.insert(pv.values.end(), p->value.data(), p->value.data() + p->size());
  return pv;
}

void assign(std::span<Param* const> params, const ParameterVector& pv) {
  if (params.size() != pv.manifest.size())
    throw Error(ErrorKind::ManifestMismatch, "parameter count " + std::to_string(pv.manifest.size()) +
                                                 " does not match model (" + std::to_string(params.size()) + ")");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    const ManifestEntry& e = pv.manifest[i];
    if (e.name != p.name || e.shape != p.shape || e.offset + e.size > pv.values.size())
      throw Error(ErrorKind::ManifestMismatch, "entry '" + e.name + "' does not match '" + p.name + "'");
    std::memcpy(p.value.data(), pv.values.data() + e.offset, e.size * sizeof(double));
  }
}

void zero_grads(std::span<Param* const> params) {
  for (Param* p : params) p->zero_grad();
}

std::vector<double> flatten_grads(std::span<Param* const> params) {
  std::vector<double> out;
  for (const Param* p : params) out.insert(out.end(), p->grad.data(), p->grad.data() + p->size());
  return out;
}

void require_same_manifest(const ParameterVector& a, const ParameterVector& b) {
  if (a.manifest != b.manifest || a.values.size() != b.values.size())
    throw Error(ErrorKind::ManifestMismatch, "parameter manifests differ");
}

double squared_norm(const ParameterVector& pv) {
  double s = 0.0;
  for (double v : pv.values) s += v * v;
  return s;
}

namespace {

constexpr char kMagic[4] = {'A', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T)))
    throw Error(ErrorKind::Integrity, "truncated parameter stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

nlohmann::json manifest_json(const Manifest& m) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : m) j.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}, {"size", e.size}});
  return j;
}

Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  for (const auto& e : j)
    m.push_back({e.at("name").get<std::string>(), e.at("shape").get<std::vector<std::size_t>>(),
                 e.at("offset").get<std::size_t>(), e.at("size").get<std::size_t>()});
  return m;
}

void write_manifest(std::ostream& out, const Manifest& m) {
  const std::string text = manifest_json(m).dump();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

Manifest read_manifest(std::istream& in) {
  const auto len = get_le<std::uint32_t>(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw Error(ErrorKind::Integrity, "truncated manifest");
  try {
    return manifest_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("bad manifest: ") + e.what());
  }
}

void check_magic(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw Error(ErrorKind::Format, "bad checkpoint magic");
  if (get_le<std::uint32_t>(in) != kVersion) throw Error(ErrorKind::Format, "unsupported checkpoint version");
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const ParameterVector& pv) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  write_manifest(out, pv.manifest);
  put_le<std::uint64_t>(out, pv.values.size());
  for (double v : pv.values) put_le<float>(out, static_cast<float>(v));
}

ParameterVector read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  check_magic(in);
  ParameterVector pv;
  pv.manifest = read_manifest(in);
  const auto n = get_le<std::uint64_t>(in);
  pv.values.resize(n);
  for (auto& v : pv.values) v = get_le<float>(in);
  return pv;
}

void write_exact(std::ostream& out, const ParameterVector& pv) {
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  write_manifest(out, pv.manifest);
  put_le<std::uint64_t>(out, pv.values.size());
  for (double v : pv.values) put_le<double>(out, v);
}

ParameterVector read_exact(std::istream& in) {
  check_magic(in);
  ParameterVector pv;
  pv.manifest = read_manifest(in);
  const auto n = get_le<std::uint64_t>(in);
  pv.values.resize(n);
  for (auto& v : pv.values) v = get_le<double>(in);
  return pv;
}

}  // namespace affcl
