#ifndef SGSEG_DATASET_IO_HPP
#define SGSEG_DATASET_IO_HPP

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "sgseg/netpbm.hpp"
#include "sgseg/synth.hpp"

namespace sgseg {

inline std::string image_id(std::size_t index) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

// Layout: images/NNNN.ppm, gt/NNNN.pgm, labels.tsv ("NNNN<TAB>c1 c2 ...").
inline void write_dataset(const std::filesystem::path& dir,
                          const std::vector<SampleRecord>& samples) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "gt");
  std::ostringstream index;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto id = image_id(i);
    write_ppm(dir / "images" / (id + ".ppm"), samples[i].image);
    if (samples[i].gt) write_pgm_labels(dir / "gt" / (id + ".pgm"), *samples[i].gt);
    index << id << '\t';
    for (std::size_t k = 0; k < samples[i].labels.present.size(); ++k) {
      if (k) index << ' ';
      index << samples[i].labels.present[k];
    }
    index << '\n';
  }
  std::ofstream out(dir / "labels.tsv", std::ios::binary | std::ios::trunc);
  out << index.str();
  if (!out) throw std::runtime_error("cannot write " + (dir / "labels.tsv").string());
}

inline std::vector<SampleRecord> read_dataset(const std::filesystem::path& dir,
                                              std::size_t num_classes) {
  std::ifstream in(dir / "labels.tsv");
  if (!in) throw std::runtime_error("missing " + (dir / "labels.tsv").string());
  std::vector<SampleRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("labels.tsv: malformed line '" + line + "'");
    }
    const std::string id = line.substr(0, tab);
    SampleRecord s;
    s.labels.num_classes = num_classes;
    std::istringstream classes(line.substr(tab + 1));
    std::size_t c = 0;
    while (classes >> c) s.labels.present.push_back(c);
    s.labels.validate();
    s.image = read_ppm(dir / "images" / (id + ".ppm"));
    const auto gt = dir / "gt" / (id + ".pgm");
    if (std::filesystem::exists(gt)) s.gt = read_pgm_labels(gt);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace sgseg

#endif  // SGSEG_DATASET_IO_HPP
