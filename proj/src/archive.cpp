#include "apforge/archive.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace apf {
namespace {

// The format is explicitly little-endian; this code assumes a
// little-endian host, which the build asserts.
static_assert(std::endian::native == std::endian::little, "little-endian host required");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("archive: unexpected end of file");
  return v;
}

std::uint32_t payload_crc(const Tensor& t) {
  return static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(t.ptr()), static_cast<uInt>(t.numel() * 4)));
}

}  // namespace

void archive_save(const NamedTensors& tensors, const std::string& path) {
  std::map<std::string, int> seen;
  for (const auto& [name, t] : tensors) {
    if (name.empty()) throw std::invalid_argument("archive: empty tensor name");
    if (++seen[name] > 1) throw std::invalid_argument("archive: duplicate name " + name);
  }
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("archive: cannot write " + tmp);
    os.write("APBT", 4);
    put<std::uint16_t>(os, 1);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
      for (int d : t.shape) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
      put<std::uint32_t>(os, payload_crc(t));
      os.write(reinterpret_cast<const char*>(t.ptr()),
               static_cast<std::streamsize>(t.numel() * 4));
    }
    if (!os) throw std::runtime_error("archive: write failed: " + tmp);
  }
  std::remove(path.c_str());
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("archive: rename failed: " + path);
}

NamedTensors archive_load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("archive: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "APBT", 4) != 0)
    throw std::runtime_error("archive: bad magic in " + path);
  std::uint16_t version = get<std::uint16_t>(is);
  if (version != 1) throw std::runtime_error("archive: unsupported version");
  std::uint32_t count = get<std::uint32_t>(is);

  NamedTensors out;
  std::map<std::string, int> seen;
  for (std::uint32_t e = 0; e < count; ++e) {
    std::uint16_t name_len = get<std::uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("archive: truncated name");
    if (++seen[name] > 1) throw std::runtime_error("archive: duplicate name " + name);
    std::uint8_t rank = get<std::uint8_t>(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(get<std::uint32_t>(is));
    std::uint32_t crc = get<std::uint32_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * 4));
    if (!is) throw std::runtime_error("archive: truncated payload for " + name);
    if (payload_crc(t) != crc)
      throw std::runtime_error("archive: checksum failure for " + name + " in " + path);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

void save_perturbations(const PerturbationSet& pert, const std::string& path) {
  archive_save({{"deltas", pert.deltas}}, path);
  std::ofstream meta(path + ".meta", std::ios::trunc);
  if (!meta) throw std::runtime_error("archive: cannot write " + path + ".meta");
  meta << "attack=" << pert.attack_name << "\n"
       << "norm=" << norm_name(pert.norm) << "\n"
       << "eps=" << pert.eps << "\n"
       << "seed=" << pert.seed << "\n"
       << "converged=" << (pert.converged ? 1 : 0) << "\n";
}

PerturbationSet load_perturbations(const std::string& path) {
  NamedTensors ts = archive_load(path);
  if (ts.size() != 1 || ts[0].first != "deltas")
    throw std::runtime_error("perturbations: expected single 'deltas' entry in " + path);
  PerturbationSet p;
  p.deltas = std::move(ts[0].second);

  std::ifstream meta(path + ".meta");
  if (!meta) throw std::runtime_error("perturbations: missing sidecar " + path + ".meta");
  std::string line;
  while (std::getline(meta, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "attack") p.attack_name = val;
    else if (key == "norm") p.norm = norm_from_name(val);
    else if (key == "eps") p.eps = std::stof(val);
    else if (key == "seed") p.seed = std::stoull(val);
    else if (key == "converged") p.converged = (val != "0");
  }
  return p;
}

}  // namespace apf
