#include "promptlab/checkpoint.hpp"

#include <fstream>
#include <json.hpp>
#include <set>

#include "binary_io.hpp"

namespace promptlab {

namespace {
constexpr char kMagic[5] = {'P', 'F', 'C', 'K', '1'};
}

void save_checkpoint(const std::filesystem::path& path, std::span<const Parameter* const> params) {
  nlohmann::json manifest = nlohmann::json::array();
  std::set<std::string> seen;
  std::size_t offset = 0;
  for (const Parameter* p : params) {
    if (!seen.insert(p->name).second) throw CheckpointError("duplicate parameter name " + p->name);
    manifest.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"offset", offset}});
    offset += p->numel();
  }
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  detail::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Parameter* p : params) {
    for (double v : p->value.data()) detail::write_le<double>(os, v);
  }
  if (!os) throw CheckpointError("write failed: " + path.string());
}

std::map<std::string, Tensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  if (!is.read(magic, sizeof(magic)) || !std::equal(magic, magic + sizeof(magic), kMagic)) {
    throw CheckpointError(path.string() + " is not a PFCK1 checkpoint");
  }
  try {
    const auto len = detail::read_le<std::uint64_t>(is);
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw CheckpointError("truncated manifest");
    const auto manifest = nlohmann::json::parse(text);

    std::vector<double> data;
    while (is.peek() != std::char_traits<char>::eof()) data.push_back(detail::read_le<double>(is));
    std::map<std::string, Tensor> out;
    for (const auto& entry : manifest) {
      auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      std::size_t n = 1;
      for (auto s : shape) n *= s;
      if (offset + n > data.size()) throw CheckpointError("entry " + entry.at("name").get<std::string>() + " runs past the data");
      std::vector<double> values(data.begin() + static_cast<long>(offset),
                                 data.begin() + static_cast<long>(offset + n));
      out.emplace(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values)));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed manifest: " + e.what());
  } catch (const std::runtime_error& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

void load_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params) {
  auto stored = read_checkpoint(path);
  if (stored.size() != params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(stored.size()) + " tensors, expected " +
                          std::to_string(params.size()));
  }
  for (Parameter* p : params) {
    auto it = stored.find(p->name);
    if (it == stored.end()) throw CheckpointError("checkpoint lacks parameter " + p->name);
    if (it->second.shape() != p->value.shape()) {
      throw CheckpointError("shape mismatch for " + p->name + ": checkpoint " + it->second.shape_string() +
                            ", model " + p->value.shape_string());
    }
  }
  for (Parameter* p : params) p->value = std::move(stored.at(p->name));
}

}  // namespace promptlab
