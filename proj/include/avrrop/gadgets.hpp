#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "avrrop/firmware.hpp"
#include "avrrop/isa.hpp"

namespace avrrop {

inline constexpr std::uint8_t kIoSpl = 0x3d;
inline constexpr std::uint8_t kIoSph = 0x3e;
inline constexpr std::uint8_t kIoSreg = 0x3f;
inline constexpr std::uint16_t kSpmcsrAddr = 0x0068;
inline constexpr std::uint16_t kRampzAddr = 0x005b;

/// Bitmask of registers (bit n = rn) the instruction writes, excluding the
/// stack pointer and SREG.
std::uint32_t written_registers(const isa::Instruction& insn);

struct PopEffect {
  std::uint8_t reg = 0;
  std::uint16_t offset = 0;  // payload byte offset relative to the gadget's first pop

  bool operator==(const PopEffect&) const = default;
};

struct StoreEffect {
  enum class Source : std::uint8_t { Z, Absolute };
  Source source = Source::Z;
  std::uint8_t displacement = 0;  // q for std Z+q
  bool post_increment = false;
  std::uint16_t address = 0;      // Absolute only
  std::uint8_t data_reg = 0;

  bool operator==(const StoreEffect&) const = default;
};

struct EffectSummary {
  std::vector<PopEffect> pops;
  std::vector<StoreEffect> stores;
  // Registers feeding OUT 0x3d / 0x3e, in the order the writes happen.
  std::optional<std::uint8_t> sp_low_source;
  std::optional<std::uint8_t> sp_high_source;
  bool sreg_write = false;
  bool spm_present = false;
  std::uint32_t clobbers = 0;  // registers written by non-pop instructions

  bool sp_low_write() const { return sp_low_source.has_value(); }
  bool sp_high_write() const { return sp_high_source.has_value(); }
  bool writes_sp() const { return sp_low_write() || sp_high_write(); }
  bool operator==(const EffectSummary&) const = default;
};

struct Gadget {
  std::uint32_t entry = 0;
  std::vector<isa::Instruction> body;  // terminator included
  isa::Op terminator = isa::Op::Ret;
  std::uint16_t stack_consumed = 2;
  std::optional<EffectSummary> effects;  // empty when unmodeled
  std::string unmodeled_reason;

  std::size_t length() const { return body.size(); }
  bool operator==(const Gadget&) const = default;
};

/// Throws Error(UnmodeledInstruction) for bodies outside the effect algebra.
EffectSummary summarize_effects(const Gadget& g);

enum class SectionFilter : std::uint8_t { All, Application, Bootloader };

struct ScanConfig {
  std::uint32_t max_length = 32;
  SectionFilter sections = SectionFilter::All;

  bool operator==(const ScanConfig&) const = default;
};

/// A bootloader routine that erases, fills and writes one flash page. Found by
/// bounded control-flow exploration; loops are allowed, calls are not.
struct SpmRoutine {
  std::uint32_t entry = 0;
  std::uint8_t dest_reg = 0;  // low register of the pair moved into Z
  std::optional<std::uint8_t> rampz_reg;
  std::uint32_t spm_count = 0;  // SPM instructions reachable from entry

  bool operator==(const SpmRoutine&) const = default;
};

struct GadgetCatalog {
  std::vector<Gadget> gadgets;  // sorted by entry
  std::vector<SpmRoutine> spm_routines;
  std::uint64_t image_digest = 0;
  std::uint32_t bootloader_start = kDefaultBootloaderStart;
  ScanConfig config;

  const Gadget* find(std::uint32_t entry) const;
};

GadgetCatalog scan_gadgets(const FirmwareImage& image, const ScanConfig& config = {});

std::vector<SpmRoutine> scan_spm_routines(const FirmwareImage& image);

std::string catalog_json(const GadgetCatalog& catalog);
std::string catalog_text(const GadgetCatalog& catalog);

}  // namespace avrrop
