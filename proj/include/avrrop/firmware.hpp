#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace avrrop {

inline constexpr std::uint32_t kFlashWords = 0x10000;       // 128 KB
inline constexpr std::uint32_t kPageWords = 128;            // 256-byte SPM page
inline constexpr std::uint32_t kPageBytes = kPageWords * 2;
inline constexpr std::uint32_t kDefaultBootloaderStart = 0xF800;
inline constexpr std::uint16_t kErasedWord = 0xFFFF;

inline constexpr std::uint16_t kRegisterFileEnd = 0x0020;
inline constexpr std::uint16_t kIoEnd = 0x0100;
inline constexpr std::uint16_t kRamEnd = 0x1100;  // one past the last SRAM byte (0x10FF)

/// Half-open byte range in the data address space.
struct ByteRange {
  std::uint16_t start = 0;
  std::uint16_t end = 0;

  std::uint16_t size() const { return static_cast<std::uint16_t>(end - start); }
  bool contains(std::uint32_t addr) const { return addr >= start && addr < end; }
  bool overlaps(std::uint32_t lo, std::uint32_t hi) const { return lo < end && start < hi; }
  bool operator==(const ByteRange&) const = default;
};

/// Data address space layout of one application. The .data/.bss ranges come
/// from the linker, so they are carried in the image's sidecar metadata.
struct MemoryLayout {
  std::uint16_t register_file_end = kRegisterFileEnd;
  std::uint16_t io_end = kIoEnd;
  ByteRange data_section{0x0100, 0x0200};
  ByteRange bss_section{0x0200, 0x0300};
  // Lowest address the live stack is allowed to reach.
  std::uint16_t stack_limit = 0x1000;
  std::uint16_t ram_end = kRamEnd;

  /// Throws MalformedMetadata when the ordering constraints do not hold.
  void validate() const;
  bool operator==(const MemoryLayout&) const = default;
};

/// Word-addressed program memory plus the metadata the rest of the toolkit
/// needs. Immutable once loaded.
class FirmwareImage {
 public:
  FirmwareImage() = default;
  explicit FirmwareImage(std::vector<std::uint16_t> program,
                         std::uint32_t bootloader_start = kDefaultBootloaderStart);

  const std::vector<std::uint16_t>& program() const { return program_; }
  std::uint32_t size_words() const { return static_cast<std::uint32_t>(program_.size()); }

  /// Stored word, or 0xFFFF past the written length. Throws AddressOverflow
  /// for addresses outside the 64 K-word flash.
  std::uint16_t read_program_word(std::uint32_t addr) const;
  // Same as read_program_word for in-range addresses.
  std::uint16_t word(std::uint32_t addr) const {
    return addr < program_.size() ? program_[addr] : kErasedWord;
  }

  std::uint32_t bootloader_start() const { return bootloader_start_; }
  void set_bootloader_start(std::uint32_t start);

  bool in_bootloader(std::uint32_t word_addr) const { return word_addr >= bootloader_start_; }

  // Program symbols are word addresses, data symbols byte addresses.
  std::map<std::string, std::uint32_t> symbols;
  std::map<std::string, std::uint16_t> data_symbols;
  MemoryLayout layout;
  // Flash byte address of the .data initialisers copied at reset.
  std::optional<std::uint32_t> data_load;
  std::string application;
  std::string source;

  std::optional<std::uint32_t> symbol(std::string_view name) const;
  std::optional<std::uint16_t> data_symbol(std::string_view name) const;

  /// Bytes of non-erased code in the application section (below the bootloader).
  std::uint32_t application_code_bytes() const;

  /// FNV-1a over the program words; stable across platforms.
  std::uint64_t digest() const;

  bool operator==(const FirmwareImage&) const = default;

 private:
  std::vector<std::uint16_t> program_;
  std::uint32_t bootloader_start_ = kDefaultBootloaderStart;
};

FirmwareImage load_intel_hex(std::istream& in);
FirmwareImage load_intel_hex(std::string_view text);
FirmwareImage load_intel_hex_file(const std::string& path);

/// Emits every word of the program (16 data bytes per record, with type-04
/// records at 64 KB boundaries) followed by the EOF record.
std::string to_intel_hex(const FirmwareImage& image);

/// Applies sidecar metadata (JSON) to an image: bootloader_start, data/bss,
/// stack_limit, data_load, symbols, data_symbols, application.
void apply_metadata(FirmwareImage& image, std::string_view json_text);
std::string metadata_json(const FirmwareImage& image);

/// Loads `<path>` and, if present, the sidecar `<path without .hex>.json`
/// (or an explicit metadata path).
FirmwareImage load_image(const std::string& hex_path,
                         const std::optional<std::string>& metadata_path = std::nullopt);

}  // namespace avrrop
