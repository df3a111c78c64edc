#include "avrrop/firmware.hpp"

#include <fmt/format.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "avrrop/error.hpp"

namespace avrrop {

namespace {

int hex_nibble(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

[[noreturn]] void malformed(std::size_t line, std::string_view why) {
  throw Error(ErrorCode::MalformedRecord, fmt::format("line {}: {}", line, why));
}

std::uint32_t json_address(const nlohmann::json& v, std::string_view key) {
  if (v.is_number_unsigned() || v.is_number_integer()) {
    const auto n = v.get<long long>();
    if (n < 0) throw Error(ErrorCode::MalformedMetadata, fmt::format("{} is negative", key));
    return static_cast<std::uint32_t>(n);
  }
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    try {
      std::size_t used = 0;
      const auto n = std::stoul(s, &used, 0);
      if (used != s.size()) throw std::invalid_argument(s);
      return static_cast<std::uint32_t>(n);
    } catch (const std::exception&) {
      throw Error(ErrorCode::MalformedMetadata, fmt::format("{}: bad address '{}'", key, s));
    }
  }
  throw Error(ErrorCode::MalformedMetadata, fmt::format("{}: expected number or hex string", key));
}

ByteRange json_range(const nlohmann::json& v, std::string_view key) {
  if (!v.is_array() || v.size() != 2) {
    throw Error(ErrorCode::MalformedMetadata, fmt::format("{}: expected [start, end]", key));
  }
  const auto lo = json_address(v[0], key);
  const auto hi = json_address(v[1], key);
  if (lo > hi || hi > kRamEnd) {
    throw Error(ErrorCode::MalformedMetadata, fmt::format("{}: bad range", key));
  }
  return {static_cast<std::uint16_t>(lo), static_cast<std::uint16_t>(hi)};
}

std::string hex_addr(std::uint32_t v) { return fmt::format("0x{:04x}", v); }

}  // namespace

void MemoryLayout::validate() const {
  const bool ok = register_file_end == kRegisterFileEnd && register_file_end <= io_end &&
                  io_end <= data_section.start && data_section.start <= data_section.end &&
                  data_section.end <= bss_section.start && bss_section.start <= bss_section.end &&
                  bss_section.end <= stack_limit && stack_limit <= ram_end && ram_end == kRamEnd;
  if (!ok) {
    throw Error(ErrorCode::MalformedMetadata,
                fmt::format("layout out of order: io_end={:#x} data=[{:#x},{:#x}) "
                            "bss=[{:#x},{:#x}) stack_limit={:#x}",
                            io_end, data_section.start, data_section.end, bss_section.start,
                            bss_section.end, stack_limit));
  }
}

FirmwareImage::FirmwareImage(std::vector<std::uint16_t> program, std::uint32_t bootloader_start)
    : program_(std::move(program)) {
  if (program_.size() > kFlashWords) {
    throw Error(ErrorCode::AddressOverflow,
                fmt::format("{} words exceed the 64 K-word flash", program_.size()));
  }
  set_bootloader_start(bootloader_start);
}

void FirmwareImage::set_bootloader_start(std::uint32_t start) {
  if (start > kFlashWords || start % kPageWords != 0) {
    throw Error(ErrorCode::MalformedMetadata,
                fmt::format("bootloader start 0x{:x} must be page aligned and <= 0x10000", start));
  }
  bootloader_start_ = start;
}

std::uint16_t FirmwareImage::read_program_word(std::uint32_t addr) const {
  if (addr >= kFlashWords) {
    throw Error(ErrorCode::AddressOverflow, fmt::format("word address 0x{:x}", addr));
  }
  return word(addr);
}

std::optional<std::uint32_t> FirmwareImage::symbol(std::string_view name) const {
  if (auto it = symbols.find(std::string(name)); it != symbols.end()) return it->second;
  return std::nullopt;
}

std::optional<std::uint16_t> FirmwareImage::data_symbol(std::string_view name) const {
  if (auto it = data_symbols.find(std::string(name)); it != data_symbols.end()) return it->second;
  return std::nullopt;
}

std::uint32_t FirmwareImage::application_code_bytes() const {
  std::uint32_t count = 0;
  const auto limit = std::min<std::size_t>(program_.size(), bootloader_start_);
  for (std::size_t a = 0; a < limit; ++a) {
    if (program_[a] != kErasedWord) count += 2;
  }
  return count;
}

std::uint64_t FirmwareImage::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto w : program_) {
    for (int shift : {0, 8}) {
      h ^= static_cast<std::uint8_t>(w >> shift);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

FirmwareImage load_intel_hex(std::istream& in) {
  std::vector<std::uint16_t> words;
  std::uint32_t base = 0;
  std::string line;
  std::size_t lineno = 0;
  bool eof = false;

  while (!eof && std::getline(in, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) {
      line.pop_back();
    }
    if (line.empty()) continue;
    if (line[0] != ':') malformed(lineno, "record does not start with ':'");
    if ((line.size() - 1) % 2 != 0 || line.size() < 11) malformed(lineno, "bad record length");

    std::vector<std::uint8_t> bytes;
    for (std::size_t i = 1; i < line.size(); i += 2) {
      const int hi = hex_nibble(line[i]);
      const int lo = hex_nibble(line[i + 1]);
      if (hi < 0 || lo < 0) malformed(lineno, "non-hex character");
      bytes.push_back(static_cast<std::uint8_t>(hi * 16 + lo));
    }
    const std::size_t count = bytes[0];
    if (bytes.size() != count + 5) malformed(lineno, "byte count does not match record");

    std::uint8_t sum = 0;
    for (auto b : bytes) sum = static_cast<std::uint8_t>(sum + b);
    if (sum != 0) {
      throw Error(ErrorCode::ChecksumMismatch,
                  fmt::format("line {}: checksum 0x{:02x} invalid", lineno, bytes.back()));
    }

    const std::uint32_t offset = (static_cast<std::uint32_t>(bytes[1]) << 8) | bytes[2];
    const std::uint8_t type = bytes[3];
    const std::uint8_t* data = bytes.data() + 4;

    switch (type) {
      case 0x00:
        for (std::size_t i = 0; i < count; ++i) {
          const std::uint32_t byte_addr = base + offset + static_cast<std::uint32_t>(i);
          if (byte_addr >= kFlashWords * 2) {
            throw Error(ErrorCode::AddressOverflow,
                        fmt::format("line {}: byte address 0x{:x} beyond 128 KB", lineno, byte_addr));
          }
          const std::uint32_t w = byte_addr / 2;
          if (words.size() <= w) words.resize(w + 1, kErasedWord);
          if (byte_addr % 2 == 0) {
            words[w] = static_cast<std::uint16_t>((words[w] & 0xFF00) | data[i]);
          } else {
            words[w] = static_cast<std::uint16_t>((words[w] & 0x00FF) | (data[i] << 8));
          }
        }
        break;
      case 0x01:
        if (count != 0) malformed(lineno, "EOF record with data");
        eof = true;
        break;
      case 0x02:
        if (count != 2) malformed(lineno, "extended segment record needs 2 bytes");
        base = ((static_cast<std::uint32_t>(data[0]) << 8) | data[1]) << 4;
        break;
      case 0x04:
        if (count != 2) malformed(lineno, "extended linear record needs 2 bytes");
        base = ((static_cast<std::uint32_t>(data[0]) << 8) | data[1]) << 16;
        break;
      case 0x03:
      case 0x05:
        // Start-address records carry no program data.
        break;
      default:
        malformed(lineno, fmt::format("unsupported record type {:02x}", type));
    }
  }
  if (!eof) malformed(lineno, "missing EOF record");
  return FirmwareImage(std::move(words));
}

FirmwareImage load_intel_hex(std::string_view text) {
  std::istringstream in{std::string(text)};
  return load_intel_hex(in);
}

FirmwareImage load_intel_hex_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, fmt::format("cannot open {}", path));
  auto image = load_intel_hex(in);
  image.source = path;
  return image;
}

std::string to_intel_hex(const FirmwareImage& image) {
  std::string out;
  const auto record = [&](std::uint8_t type, std::uint16_t offset,
                          const std::vector<std::uint8_t>& data) {
    std::uint8_t sum = static_cast<std::uint8_t>(data.size() + (offset >> 8) + (offset & 0xFF) + type);
    out += fmt::format(":{:02X}{:04X}{:02X}", data.size(), offset, type);
    for (auto b : data) {
      out += fmt::format("{:02X}", b);
      sum = static_cast<std::uint8_t>(sum + b);
    }
    out += fmt::format("{:02X}\n", static_cast<std::uint8_t>(0x100 - sum));
  };

  const auto& words = image.program();
  const std::uint32_t total_bytes = static_cast<std::uint32_t>(words.size()) * 2;
  std::uint32_t segment = 0;
  for (std::uint32_t addr = 0; addr < total_bytes;) {
    if ((addr >> 16) != segment) {
      segment = addr >> 16;
      record(0x04, 0, {static_cast<std::uint8_t>(segment >> 8), static_cast<std::uint8_t>(segment)});
    }
    const std::uint32_t chunk_end = std::min({addr + 16, total_bytes, (segment + 1) << 16});
    std::vector<std::uint8_t> data;
    for (std::uint32_t b = addr; b < chunk_end; ++b) {
      const std::uint16_t w = words[b / 2];
      data.push_back(static_cast<std::uint8_t>(b % 2 ? w >> 8 : w & 0xFF));
    }
    record(0x00, static_cast<std::uint16_t>(addr & 0xFFFF), data);
    addr = chunk_end;
  }
  record(0x01, 0, {});
  return out;
}

void apply_metadata(FirmwareImage& image, std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedMetadata, e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::MalformedMetadata, "expected a JSON object");

  if (j.contains("bootloader_start")) {
    image.set_bootloader_start(json_address(j["bootloader_start"], "bootloader_start"));
  }
  if (j.contains("data")) image.layout.data_section = json_range(j["data"], "data");
  if (j.contains("bss")) image.layout.bss_section = json_range(j["bss"], "bss");
  if (j.contains("stack_limit")) {
    image.layout.stack_limit = static_cast<std::uint16_t>(json_address(j["stack_limit"], "stack_limit"));
  }
  if (j.contains("data_load")) image.data_load = json_address(j["data_load"], "data_load");
  if (j.contains("application")) image.application = j["application"].get<std::string>();
  if (j.contains("symbols")) {
    for (const auto& [name, v] : j["symbols"].items()) {
      const auto addr = json_address(v, name);
      if (addr >= kFlashWords) throw Error(ErrorCode::MalformedMetadata, name + ": beyond flash");
      image.symbols[name] = addr;
    }
  }
  if (j.contains("data_symbols")) {
    for (const auto& [name, v] : j["data_symbols"].items()) {
      const auto addr = json_address(v, name);
      if (addr >= kRamEnd) throw Error(ErrorCode::MalformedMetadata, name + ": beyond SRAM");
      image.data_symbols[name] = static_cast<std::uint16_t>(addr);
    }
  }
  image.layout.validate();
}

std::string metadata_json(const FirmwareImage& image) {
  nlohmann::ordered_json j;
  j["application"] = image.application;
  j["bootloader_start"] = hex_addr(image.bootloader_start());
  j["data"] = {hex_addr(image.layout.data_section.start), hex_addr(image.layout.data_section.end)};
  j["bss"] = {hex_addr(image.layout.bss_section.start), hex_addr(image.layout.bss_section.end)};
  j["stack_limit"] = hex_addr(image.layout.stack_limit);
  if (image.data_load) j["data_load"] = hex_addr(*image.data_load);
  j["symbols"] = nlohmann::ordered_json::object();
  for (const auto& [name, addr] : image.symbols) j["symbols"][name] = hex_addr(addr);
  j["data_symbols"] = nlohmann::ordered_json::object();
  for (const auto& [name, addr] : image.data_symbols) j["data_symbols"][name] = hex_addr(addr);
  return j.dump(2) + "\n";
}

FirmwareImage load_image(const std::string& hex_path, const std::optional<std::string>& metadata_path) {
  auto image = load_intel_hex_file(hex_path);
  std::filesystem::path meta = metadata_path ? std::filesystem::path(*metadata_path)
                                             : std::filesystem::path(hex_path).replace_extension(".json");
  if (metadata_path || std::filesystem::exists(meta)) {
    std::ifstream in(meta);
    if (!in) throw Error(ErrorCode::IoError, fmt::format("cannot open {}", meta.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    apply_metadata(image, ss.str());
  }
  if (image.application.empty()) image.application = std::filesystem::path(hex_path).stem().string();
  return image;
}

}  // namespace avrrop
