#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "avrrop/firmware.hpp"
#include "avrrop/isa.hpp"

namespace avrrop {

inline constexpr std::uint16_t kSramSize = kRamEnd;  // 0x0000..0x10FF
inline constexpr std::uint16_t kResetSp = 0x10FF;
inline constexpr std::uint16_t kAddrRampz = 0x005B;
inline constexpr std::uint16_t kAddrSpl = 0x005D;
inline constexpr std::uint16_t kAddrSph = 0x005E;
inline constexpr std::uint16_t kAddrSreg = 0x005F;
inline constexpr std::uint16_t kAddrSpmcsr = 0x0068;

namespace sreg {
inline constexpr std::uint8_t C = 0x01;
inline constexpr std::uint8_t Z = 0x02;
inline constexpr std::uint8_t N = 0x04;
inline constexpr std::uint8_t V = 0x08;
inline constexpr std::uint8_t S = 0x10;
inline constexpr std::uint8_t H = 0x20;
inline constexpr std::uint8_t I = 0x80;
}  // namespace sreg

struct SpmModes {
  std::uint8_t erase = 0x03;
  std::uint8_t fill = 0x01;
  std::uint8_t write = 0x05;
};

enum class SpmMode : std::uint8_t { Idle, Erase, Fill, Write };

struct BootOptions {
  // Falls back to the image's layout when unset.
  std::optional<MemoryLayout> layout;
  bool cleanup_enabled = false;
  std::uint64_t fuel = 1'000'000;
  SpmModes spm_modes;
};

enum class StopKind : std::uint8_t { SoftReboot, Halted, FuelExhausted, Fault };
enum class FaultReason : std::uint8_t { UnknownInstruction, SpmOutsideBootloader };

std::string_view to_string(StopKind kind);
std::string_view to_string(FaultReason reason);

struct RunOutcome {
  StopKind kind = StopKind::Halted;
  std::optional<FaultReason> fault;
  std::uint64_t instructions = 0;
  std::uint32_t pc = 0;

  std::string describe() const;
  bool operator==(const RunOutcome&) const = default;
};

struct TraceRecord {
  std::uint64_t cycle = 0;
  std::uint32_t pc = 0;
  isa::Instruction insn;
  std::uint16_t sp = 0;
};

/// "<cycle> <pc hex> <disasm> sp=<hex>"
std::string format_trace(const TraceRecord& rec);

struct MachineState {
  std::shared_ptr<const FirmwareImage> image;
  MemoryLayout layout;
  BootOptions options;

  // Registers, IO and SRAM share one array, as in the data address space.
  std::array<std::uint8_t, kSramSize> sram{};
  std::vector<std::uint16_t> flash;  // 0x10000 words
  std::array<std::uint8_t, kPageBytes> spm_page_buffer{};
  std::uint32_t pc = 0;
  std::uint64_t reboot_count = 0;
  std::uint64_t cycle_count = 0;
  bool halted = false;

  std::function<void(const TraceRecord&)> tracer;
  std::function<void(std::uint16_t addr, std::uint8_t value)> write_hook;

  std::uint8_t reg(unsigned r) const { return sram[r & 31]; }
  void set_reg(unsigned r, std::uint8_t v) { sram[r & 31] = v; }
  std::uint16_t pair(unsigned r) const {
    return static_cast<std::uint16_t>(reg(r) | (reg(r + 1) << 8));
  }
  std::uint16_t sp() const {
    return static_cast<std::uint16_t>(sram[kAddrSpl] | (sram[kAddrSph] << 8));
  }
  void set_sp(std::uint16_t v);
  std::uint8_t sreg() const { return sram[kAddrSreg]; }
  SpmMode spmcsr_mode() const;

  std::uint8_t read_data(std::uint32_t addr) const { return sram[addr % kSramSize]; }
  void write_data(std::uint32_t addr, std::uint8_t value);
};

MachineState boot(const FirmwareImage& image, const BootOptions& opts = {});
MachineState boot(std::shared_ptr<const FirmwareImage> image, const BootOptions& opts = {});

struct StepEvent {
  enum class Kind : std::uint8_t { Continue, SoftReboot, Halted, Fault };
  Kind kind = Kind::Continue;
  std::optional<FaultReason> fault;
};

/// Executes one instruction.
StepEvent step(MachineState& state);

/// Steps until a stop condition or `fuel` instructions (default: options.fuel).
RunOutcome run(MachineState& state, std::optional<std::uint64_t> fuel = std::nullopt);

/// Re-runs reset initialisation: .data from flash, .bss zeroed, optional
/// cleanup of [bss_end, sp), SP/SREG reset, pc = 0. Other SRAM is retained.
void soft_reboot(MachineState& state);

struct DeliveryOptions {
  std::size_t max_payload = 28;
  // Harness-only: value stored in the length byte instead of the payload size.
  std::optional<std::uint8_t> copy_length;
  std::uint16_t stack_top = 0x1060;
  std::optional<std::uint64_t> fuel;
};

/// Writes [len, payload...] into the packet buffer (data symbol rx_msg) and
/// runs the receive path from program symbol rx_dispatch.
RunOutcome deliver_packet(MachineState& state, const std::vector<std::uint8_t>& payload,
                          const DeliveryOptions& opts = {});

enum class Space : std::uint8_t { Flash, Sram, Regs };

/// Flash: `start` and `count` are in words, result is little-endian bytes.
/// Sram/Regs: byte ranges. Throws RangeOutOfBounds.
std::vector<std::uint8_t> inspect(const MachineState& state, Space space, std::uint32_t start,
                                  std::uint32_t count);

std::string snapshot_json(const MachineState& state);

}  // namespace avrrop
