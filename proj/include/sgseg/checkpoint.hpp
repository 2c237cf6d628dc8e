#ifndef SGSEG_CHECKPOINT_HPP
#define SGSEG_CHECKPOINT_HPP

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "sgseg/micronet.hpp"
#include "sgseg/tensor_io.hpp"

namespace sgseg {

// A checkpoint is a directory holding one SGT1 file per parameter tensor and
// manifest.txt with "name<TAB>file<TAB>shape" lines in a fixed order.
inline void save_checkpoint(const std::filesystem::path& dir,
                            const MicroNetParams& params) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "num_classes\t" << params.num_classes << "\n";
  manifest << "agg_channels\t" << params.agg_channels << "\n";
  params.visit([&](const std::string& name, ParamGroup, const Tensor& t) {
    const std::string file = name + ".sgt";
    write_tensor(dir / file, t);
    manifest << name << '\t' << file << '\t' << shape_string(t.shape()) << "\n";
  });
  std::ofstream out(dir / "manifest.txt", std::ios::binary | std::ios::trunc);
  out << manifest.str();
  if (!out) throw std::runtime_error("cannot write checkpoint manifest");
}

inline MicroNetParams load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw std::runtime_error("missing " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> files;
  std::size_t classes = 0, k = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string name, value;
    std::getline(fields, name, '\t');
    std::getline(fields, value, '\t');
    if (name == "num_classes") {
      classes = std::stoul(value);
    } else if (name == "agg_channels") {
      k = std::stoul(value);
    } else {
      files[name] = value;
    }
  }
  MicroNetParams params(classes, k);
  params.visit([&](const std::string& name, ParamGroup, Tensor& t) {
    auto it = files.find(name);
    if (it == files.end()) {
      throw std::runtime_error("checkpoint missing parameter " + name);
    }
    Tensor loaded = read_tensor(dir / it->second);
    if (loaded.shape() != t.shape()) {
      throw std::runtime_error("checkpoint parameter " + name + " has shape " +
                               shape_string(loaded.shape()) + ", expected " +
                               shape_string(t.shape()));
    }
    t = std::move(loaded);
  });
  return params;
}

}  // namespace sgseg

#endif  // SGSEG_CHECKPOINT_HPP
