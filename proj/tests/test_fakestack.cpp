#include <doctest.h>

#include <numeric>
#include <random>

#include "avrrop/error.hpp"
#include "avrrop/fakestack.hpp"
#include "avrrop/fixture.hpp"

using namespace avrrop;

namespace {

std::vector<std::uint8_t> malware_of(std::size_t n, std::uint8_t seed = 1) {
  std::vector<std::uint8_t> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = static_cast<std::uint8_t>(seed + 7 * i);
  return m;
}

ErrorCode build_error(std::size_t size, std::uint32_t dest) {
  try {
    build_fake_stack(malware_of(size), dest, fixture::kBlSpmPage, PostAction::ExecuteMalware);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoError;
}

MemoryLayout demo_layout() { return fixture::demo_firmware().layout; }

}  // namespace

TEST_CASE("fakestack: field table covers 306 contiguous bytes") {
  const auto& fields = FakeStack::fields();
  std::uint16_t at = 0;
  for (const auto& f : fields) {
    CHECK(f.offset == at);
    at = static_cast<std::uint16_t>(at + f.width);
  }
  CHECK(at == FakeStack::kSize);
  CHECK(at == 2 + 4 + 4 + 4 + 4 + 2 + 8 + 256 + 2 + 18 + 2);
}

TEST_CASE("fakestack: 64-byte malware at 0x8000") {
  const auto mal = malware_of(64);
  const auto fs = build_fake_stack(mal, 0x8000, fixture::kBlSpmPage, PostAction::ExecuteMalware);
  CHECK(fs.final_return() == 0x8000);
  for (std::size_t i = 0; i < kPageBytes; ++i) CHECK(fs.malware_page[i] == (i < 64 ? mal[i] : 0));
  const auto bytes = fs.serialize(0x0400);
  REQUIRE(bytes.size() == FakeStack::kSize);
  // Frame pointer, high byte first.
  CHECK(bytes[0] == 0x04);
  CHECK(bytes[1] == 0x14);
  // Destination as a flash byte address, most significant first.
  CHECK(bytes[2] == 0x00);
  CHECK(bytes[3] == 0x01);
  CHECK(bytes[4] == 0x00);
  CHECK(bytes[5] == 0x00);
  CHECK(bytes[18] == (fixture::kBlSpmPage & 0xFF));
  CHECK(bytes[19] == (fixture::kBlSpmPage >> 8));
  CHECK(std::equal(mal.begin(), mal.end(), bytes.begin() + FakeStack::kMalwareOffset));
  CHECK(bytes[FakeStack::kBuffPOffset] == 0x1c);
  CHECK(bytes[FakeStack::kBuffPOffset + 1] == 0x04);
  CHECK(bytes[FakeStack::kRetAddrOffset] == 0x00);
  CHECK(bytes[FakeStack::kRetAddrOffset + 1] == 0x80);
}

TEST_CASE("fakestack: post action reboot") {
  const auto fs = build_fake_stack(malware_of(8), 0x8000, fixture::kBlSpmPage, PostAction::Reboot);
  CHECK(fs.final_return() == 0x0000);
  const auto bytes = fs.serialize(0x0400);
  CHECK(bytes[FakeStack::kRetAddrOffset] == 0);
  CHECK(bytes[FakeStack::kRetAddrOffset + 1] == 0);
}

TEST_CASE("fakestack: build errors") {
  CHECK(build_error(257, 0x8000) == ErrorCode::MalwareTooLarge);
  CHECK(build_error(0, 0x8000) == ErrorCode::InvalidArgument);
  CHECK(build_error(16, 0x8001) == ErrorCode::UnalignedDestination);
  CHECK(build_error(16, 0x10000) == ErrorCode::UnalignedDestination);
  CHECK(build_error(256, 0x8080) == ErrorCode::IoError);
}

TEST_CASE("fakestack: schedule count law") {
  const auto layout = demo_layout();
  for (std::size_t n = 1; n <= 256; ++n) {
    const auto fs = build_fake_stack(malware_of(n), 0x8000, fixture::kBlSpmPage, PostAction::ExecuteMalware);
    CHECK(injection_schedule(fs, 0x0400, layout).writes.size() == 16 + n);
  }
}

TEST_CASE("fakestack: schedule reproduces the structure") {
  std::mt19937_64 rng(3);
  const auto layout = demo_layout();
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 256;
    const auto fsp = static_cast<std::uint16_t>(layout.bss_section.end +
                                                rng() % (layout.stack_limit - layout.bss_section.end - FakeStack::kSize));
    const auto post = rng() % 2 ? PostAction::ExecuteMalware : PostAction::Reboot;
    const auto fs = build_fake_stack(malware_of(n, static_cast<std::uint8_t>(rng())), 0x0080 * (1 + rng() % 400),
                                     fixture::kBlSpmPage, post);
    const auto schedule = injection_schedule(fs, fsp, layout);
    CHECK(schedule.base == fsp);
    std::vector<std::uint8_t> region(FakeStack::kSize, 0);
    std::uint16_t prev = 0;
    for (const auto& [addr, value] : schedule.writes) {
      CHECK(addr >= fsp);
      CHECK(addr < fsp + FakeStack::kSize);
      CHECK(addr > prev);
      prev = addr;
      region[addr - fsp] = value;
    }
    CHECK(region == fs.serialize(fsp));
  }
}

TEST_CASE("fakestack: region collisions") {
  const auto layout = demo_layout();
  const auto fs = build_fake_stack(malware_of(64), 0x8000, fixture::kBlSpmPage, PostAction::ExecuteMalware);
  const auto code = [&](std::uint16_t fsp) {
    try {
      injection_schedule(fs, fsp, layout);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::IoError;
  };
  CHECK(code(0x0200) == ErrorCode::RegionCollision);
  CHECK(code(static_cast<std::uint16_t>(layout.bss_section.end - 1)) == ErrorCode::RegionCollision);
  CHECK(code(static_cast<std::uint16_t>(layout.stack_limit - FakeStack::kSize + 1)) == ErrorCode::RegionCollision);
  CHECK(code(static_cast<std::uint16_t>(layout.stack_limit - FakeStack::kSize)) == ErrorCode::IoError);
}

TEST_CASE("fakestack: dump lists every field") {
  const auto fs = build_fake_stack(malware_of(4), 0x8000, fixture::kBlSpmPage, PostAction::ExecuteMalware);
  const auto dump = fakestack_dump(fs, 0x0400);
  for (const auto& f : FakeStack::fields()) CHECK(dump.find(f.name) != std::string::npos);
}
