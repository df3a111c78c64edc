// Writes the bundled test firmware and malware to a directory.
#include <filesystem>
#include <fstream>
#include <iostream>

#include "avrrop/firmware.hpp"
#include "avrrop/fixture.hpp"

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + p.string());
}

void write_image(const std::filesystem::path& dir, const std::string& stem, const avrrop::FirmwareImage& image) {
  write_text(dir / (stem + ".hex"), avrrop::to_intel_hex(image));
  write_text(dir / (stem + ".json"), avrrop::metadata_json(image));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: avrrop-fixtures <output-dir>\n";
    return 2;
  }
  try {
    const std::filesystem::path dir = argv[1];
    std::filesystem::create_directories(dir);
    write_image(dir, "demo", avrrop::fixture::demo_firmware());
    write_image(dir, "null", avrrop::fixture::null_firmware());
    const auto mal = avrrop::fixture::sentinel_malware();
    std::ofstream f(dir / "mal.bin", std::ios::binary);
    f.write(reinterpret_cast<const char*>(mal.data()), static_cast<std::streamsize>(mal.size()));
    if (!f) throw std::runtime_error("cannot write mal.bin");
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  return 0;
}
