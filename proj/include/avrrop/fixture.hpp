#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "avrrop/firmware.hpp"

namespace avrrop::fixture {

/// Two-pass assembler with labels. Operands of the form `@name` resolve to a
/// word address (jmp/call) or a byte displacement (rjmp/rcall/brne/breq);
/// `lo8(@name)`/`hi8(@name)` and `lo8(sym)`/`hi8(sym)` give address bytes.
class ProgramBuilder {
 public:
  void org(std::uint32_t word_addr);
  void label(const std::string& name);
  void emit(std::string_view line);
  void emit(std::initializer_list<std::string_view> lines);
  void data_symbol(const std::string& name, std::uint16_t addr);

  std::uint32_t here() const { return cursor_; }
  std::uint32_t address_of(const std::string& name) const;

  /// Resolves labels and returns the program (gaps stay 0xFFFF).
  std::vector<std::uint16_t> build() const;
  const std::map<std::string, std::uint32_t>& labels() const { return labels_; }

 private:
  struct Item {
    std::uint32_t address;
    std::string text;
  };
  std::vector<Item> items_;
  std::map<std::string, std::uint32_t> labels_;
  std::map<std::string, std::uint16_t> data_symbols_;
  std::uint32_t cursor_ = 0;
};

// Demo application placement.
inline constexpr std::uint32_t kInjectLoad = 0x2b58;
inline constexpr std::uint32_t kInjectMove = 0x0185;
inline constexpr std::uint32_t kInjectStore = 0x073a;
inline constexpr std::uint32_t kAltLoad = 0x1a40;
inline constexpr std::uint32_t kRxDispatch = 0x05c0;
inline constexpr std::uint32_t kReceive = 0x05c8;
inline constexpr std::uint16_t kRxMsg = 0x0220;

// Demo bootloader placement.
inline constexpr std::uint32_t kBlLoadFp = 0xf93d;
inline constexpr std::uint32_t kBlSpmPage = 0xfb4d;
inline constexpr std::uint32_t kBlEpilogue = 0xfba7;
inline constexpr std::uint32_t kBlPivot = 0xfba9;

/// Vulnerable sensor-node application plus a self-programming bootloader,
/// with sidecar metadata filled in.
FirmwareImage demo_firmware();

/// Application with no usable gadgets and no bootloader.
FirmwareImage null_firmware();

/// 64-byte payload: sets bits 2 and 1 of IO 0x1a, then jumps to address 0.
std::vector<std::uint8_t> sentinel_malware();

inline constexpr std::uint8_t kSentinelIo = 0x1a;

}  // namespace avrrop::fixture
