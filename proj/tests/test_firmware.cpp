#include <doctest.h>

#include <fmt/format.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "avrrop/error.hpp"
#include "avrrop/firmware.hpp"
#include "avrrop/fixture.hpp"
#include "avrrop/isa.hpp"

using namespace avrrop;

namespace {

// Intel HEX record with its checksum computed from the two's-complement rule.
std::string record(std::uint16_t addr, std::uint8_t type, const std::vector<std::uint8_t>& data) {
  unsigned sum = static_cast<unsigned>(data.size()) + (addr >> 8) + (addr & 0xFF) + type;
  std::string s = fmt::format(":{:02X}{:04X}{:02X}", data.size(), addr, type);
  for (auto b : data) {
    s += fmt::format("{:02X}", b);
    sum += b;
  }
  return s + fmt::format("{:02X}\n", (0x100 - (sum & 0xFF)) & 0xFF);
}

ErrorCode load_error(std::string_view text) {
  try {
    load_intel_hex(text);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoError;
}

}  // namespace

TEST_CASE("firmware: EOF-only file is an empty image") {
  const auto image = load_intel_hex(":00000001FF\n");
  CHECK(image.size_words() == 0);
  CHECK(image.read_program_word(0) == 0xFFFF);
  CHECK(image.read_program_word(0xFFFF) == 0xFFFF);
}

TEST_CASE("firmware: little-endian word from a data record") {
  const std::string rec = record(0, 0, {0x08, 0x95});
  CHECK(rec == ":02000000089561\n");
  const auto image = load_intel_hex(rec + ":00000001FF\n");
  CHECK(image.read_program_word(0) == 0x9508);
  CHECK(isa::decode_instruction(image.read_program_word(0)).op == isa::Op::Ret);
}

TEST_CASE("firmware: malformed input") {
  CHECK(load_error(":02000000089562\n:00000001FF\n") == ErrorCode::ChecksumMismatch);
  CHECK(load_error("02000000089561\n") == ErrorCode::MalformedRecord);
  CHECK(load_error(":0200000008\n") == ErrorCode::MalformedRecord);
  CHECK(load_error(":02000000zz9561\n") == ErrorCode::MalformedRecord);
  // Extended linear address past 128 KB.
  CHECK(load_error(record(0, 4, {0x00, 0x02}) + record(0, 0, {0x00, 0x00}) + ":00000001FF\n") ==
        ErrorCode::AddressOverflow);
}

TEST_CASE("firmware: read_program_word bounds") {
  FirmwareImage empty;
  CHECK(empty.read_program_word(0) == 0xFFFF);
  FirmwareImage ret(isa::assemble({"ret"}));
  CHECK(ret.read_program_word(0) == 0x9508);
  try {
    ret.read_program_word(0x10000);
    FAIL("expected AddressOverflow");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::AddressOverflow);
  }
}

TEST_CASE("firmware: HEX round trip") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::uint16_t> words(1 + rng() % 40000);
    for (auto& w : words) w = static_cast<std::uint16_t>(rng());
    FirmwareImage image(words);
    const auto again = load_intel_hex(to_intel_hex(image));
    CHECK(again.program() == words);
  }
  const auto demo = fixture::demo_firmware();
  CHECK(load_intel_hex(to_intel_hex(demo)).program() == demo.program());
}

TEST_CASE("firmware: sections partition the flash") {
  const auto demo = fixture::demo_firmware();
  std::uint32_t app = 0, boot = 0;
  for (std::uint32_t a = 0; a < kFlashWords; ++a) (demo.in_bootloader(a) ? boot : app)++;
  CHECK(app == demo.bootloader_start());
  CHECK(app + boot == kFlashWords);
  FirmwareImage img;
  CHECK_THROWS_AS(img.set_bootloader_start(0xF801), Error);
}

TEST_CASE("firmware: metadata sidecar round trip") {
  const auto demo = fixture::demo_firmware();
  FirmwareImage plain(demo.program());
  apply_metadata(plain, metadata_json(demo));
  plain.source = demo.source;
  CHECK(plain == demo);

  try {
    apply_metadata(plain, R"({"data": ["0x0300", "0x0200"]})");
    FAIL("expected MalformedMetadata");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MalformedMetadata);
  }
  CHECK_THROWS_AS(apply_metadata(plain, "{not json"), Error);

  const auto dir = std::filesystem::temp_directory_path() / "avrrop_fw_test";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "demo.hex") << to_intel_hex(demo);
  std::ofstream(dir / "demo.json") << metadata_json(demo);
  auto loaded = load_image((dir / "demo.hex").string());
  CHECK(loaded.source == (dir / "demo.hex").string());
  loaded.source = demo.source;
  CHECK(loaded == demo);
  try {
    load_image((dir / "missing.hex").string());
    FAIL("expected IoError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IoError);
  }
}

TEST_CASE("firmware: memory layout validation") {
  MemoryLayout ok;
  CHECK_NOTHROW(ok.validate());
  MemoryLayout overlap;
  overlap.bss_section = {0x01F0, 0x0300};
  CHECK_THROWS_AS(overlap.validate(), Error);
  MemoryLayout high;
  high.stack_limit = 0x0250;
  CHECK_THROWS_AS(high.validate(), Error);
}

TEST_CASE("firmware: digest depends on content") {
  FirmwareImage a(isa::assemble({"ret"}));
  FirmwareImage b(isa::assemble({"reti"}));
  CHECK(a.digest() == FirmwareImage(isa::assemble({"ret"})).digest());
  CHECK(a.digest() != b.digest());
}
