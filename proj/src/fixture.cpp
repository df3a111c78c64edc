#include "avrrop/fixture.hpp"

#include <fmt/format.h>

#include <regex>

#include "avrrop/error.hpp"
#include "avrrop/isa.hpp"

namespace avrrop::fixture {

namespace {

std::uint32_t mnemonic_width(std::string_view line) {
  const auto start = line.find_first_not_of(" \t");
  if (start == std::string_view::npos) return 0;
  const auto end = line.find_first_of(" \t", start);
  const std::string m(line.substr(start, end == std::string_view::npos ? line.npos : end - start));
  return (m == "jmp" || m == "call" || m == "lds" || m == "sts") ? 2 : 1;
}

std::string first_word(const std::string& line) {
  const auto start = line.find_first_not_of(" \t");
  const auto end = line.find_first_of(" \t", start);
  return line.substr(start, end == std::string::npos ? std::string::npos : end - start);
}

}  // namespace

void ProgramBuilder::org(std::uint32_t word_addr) { cursor_ = word_addr; }

void ProgramBuilder::label(const std::string& name) {
  if (!labels_.emplace(name, cursor_).second) {
    throw Error(ErrorCode::SyntaxError, fmt::format("duplicate label {}", name));
  }
}

void ProgramBuilder::data_symbol(const std::string& name, std::uint16_t addr) {
  data_symbols_[name] = addr;
}

void ProgramBuilder::emit(std::string_view line) {
  items_.push_back({cursor_, std::string(line)});
  cursor_ += mnemonic_width(line);
}

void ProgramBuilder::emit(std::initializer_list<std::string_view> lines) {
  for (auto l : lines) emit(l);
}

std::uint32_t ProgramBuilder::address_of(const std::string& name) const {
  auto it = labels_.find(name);
  if (it == labels_.end()) throw Error(ErrorCode::MissingSymbol, name);
  return it->second;
}

std::vector<std::uint16_t> ProgramBuilder::build() const {
  static const std::regex byte_ref(R"((lo8|hi8)\(([@$])(\w+)(?:\+(\d+))?\))");
  static const std::regex label_ref(R"(@(\w+))");
  static const std::regex data_ref(R"(\$(\w+)(?:\+(\d+))?)");

  const auto resolve = [&](char sigil, const std::string& name) -> std::uint32_t {
    if (sigil == '@') return address_of(name);
    auto it = data_symbols_.find(name);
    if (it == data_symbols_.end()) throw Error(ErrorCode::MissingSymbol, name);
    return it->second;
  };

  std::vector<std::uint16_t> program;
  for (const auto& item : items_) {
    std::string text = item.text;
    std::smatch m;
    while (std::regex_search(text, m, byte_ref)) {
      std::uint32_t v = resolve(m[2].str()[0], m[3].str());
      if (m[4].matched) v += static_cast<std::uint32_t>(std::stoul(m[4].str()));
      const std::uint32_t b = m[1].str() == "lo8" ? (v & 0xFF) : ((v >> 8) & 0xFF);
      text = m.prefix().str() + fmt::format("0x{:02x}", b) + m.suffix().str();
    }
    while (std::regex_search(text, m, label_ref)) {
      const std::uint32_t target = address_of(m[1].str());
      const std::string op = first_word(text);
      std::string repl;
      if (op == "rjmp" || op == "rcall" || op == "brne" || op == "breq") {
        const long long bytes = (static_cast<long long>(target) - (item.address + 1)) * 2;
        repl = bytes >= 0 ? fmt::format(".+{}", bytes) : fmt::format(".-{}", -bytes);
      } else {
        repl = fmt::format("0x{:x}", target);
      }
      text = m.prefix().str() + repl + m.suffix().str();
    }
    while (std::regex_search(text, m, data_ref)) {
      std::uint32_t v = resolve('$', m[1].str());
      if (m[2].matched) v += static_cast<std::uint32_t>(std::stoul(m[2].str()));
      text = m.prefix().str() + fmt::format("0x{:04x}", v) + m.suffix().str();
    }
    const auto words = isa::encode(isa::parse_instruction(text));
    if (words.size() != mnemonic_width(item.text)) {
      throw Error(ErrorCode::SyntaxError, fmt::format("width mismatch for '{}'", item.text));
    }
    if (program.size() < item.address + words.size()) {
      program.resize(item.address + words.size(), kErasedWord);
    }
    for (std::size_t n = 0; n < words.size(); ++n) {
      if (program[item.address + n] != kErasedWord) {
        throw Error(ErrorCode::SyntaxError, fmt::format("overlap at 0x{:x}", item.address + n));
      }
      program[item.address + n] = words[n];
    }
  }
  return program;
}

FirmwareImage demo_firmware() {
  ProgramBuilder b;
  b.data_symbol("rx_msg", kRxMsg);

  b.org(0x0000);
  b.label("reset");
  b.emit("jmp @init");
  b.label("init");
  b.emit("rjmp .-2");

  // Bridge: copy the popped address into Z.
  b.org(kInjectMove);
  b.label("inject_move");
  b.emit({"movw r30, r24", "ret"});

  b.org(kRxDispatch);
  b.label("rx_dispatch");
  b.emit({"call @receive", "rjmp .-2"});

  // Copies rx_msg[1..len] into a 4-byte stack buffer without a bounds check.
  b.org(kReceive);
  b.label("receive");
  b.emit({"in r28, 0x3d", "in r29, 0x3e", "sbiw r28, 4", "out 0x3e, r29", "out 0x3d, r28",
          "lds r18, $rx_msg", "movw r22, r28", "subi r22, 0xff", "sbci r23, 0xff",
          "ldi r20, lo8($rx_msg+1)", "ldi r21, hi8($rx_msg+1)", "cpi r18, 0", "breq @copy_done"});
  b.label("copy_loop");
  b.emit({"movw r30, r20", "ld r0, Z+", "movw r20, r30", "movw r30, r22", "st Z+, r0",
          "movw r22, r30", "subi r18, 1", "brne @copy_loop"});
  b.label("copy_done");
  b.emit({"adiw r28, 4", "out 0x3e, r29", "out 0x3d, r28", "ret"});

  b.org(kInjectStore);
  b.label("inject_store");
  b.emit({"st Z, r18", "ret"});

  // Longer loader that also reaches r24:r25 and r18.
  b.org(kAltLoad);
  b.label("alt_load");
  b.emit({"pop r24", "pop r25", "pop r18", "pop r17", "pop r16", "pop r15", "pop r14", "pop r13",
          "pop r12", "ret"});

  // Interrupt-handler epilogue restoring r24, r25, r19, r18, SREG, r0, r1.
  b.org(kInjectLoad);
  b.label("inject_load");
  b.emit({"pop r24", "pop r25", "pop r19", "pop r18", "pop r0", "out 0x3f, r0", "pop r0", "pop r1",
          "reti"});

  // Bootloader.
  b.org(kDefaultBootloaderStart);
  b.label("bl_main");
  b.emit({"cli", "rjmp .-2"});

  b.org(kBlLoadFp);
  b.label("bl_load_fp");
  b.emit({"pop r29", "pop r28", "pop r17", "pop r15", "pop r14", "ret"});

  // Erase, fill and write the page at RAMPZ:Z = r16:r15:r14 from the buffer
  // pointed to by the word at FP+264, then leave through the frame epilogue.
  b.org(kBlSpmPage);
  b.label("bl_spm_page");
  b.emit({"ldi r24, 0x03", "movw r30, r14", "sts 0x005b, r16", "sts 0x0068, r24", "spm",
          "movw r30, r28", "subi r30, 0xf8", "sbci r31, 0xfe", "ld r20, Z+", "ld r21, Z",
          "movw r22, r14"});
  b.label("bl_fill");
  b.emit({"movw r30, r20", "ld r0, Z+", "ld r1, Z+", "movw r20, r30", "movw r30, r22",
          "ldi r24, 0x01", "sts 0x0068, r24", "spm", "adiw r30, 2", "movw r22, r30", "cpi r22, 0",
          "brne @bl_fill"});
  b.emit({"movw r30, r14", "ldi r24, 0x05", "sts 0x0068, r24", "spm"});
  for (int r : {6, 7, 8, 9}) {
    b.emit(fmt::format("mov r24, r{}", r));
    b.emit({"cpi r24, 0", "brne @bl_stuck"});
  }
  b.emit("rjmp @bl_epilogue");
  b.label("bl_stuck");
  b.emit("rjmp .-2");

  b.org(kBlEpilogue);
  b.label("bl_epilogue");
  b.emit({"subi r28, 0xf7", "sbci r29, 0xfe"});
  b.label("bl_pivot");
  b.emit({"in r0, 0x3f", "cli", "out 0x3e, r29", "out 0x3f, r0", "out 0x3d, r28", "pop r29",
          "pop r28"});
  for (int r = 17; r >= 2; --r) b.emit(fmt::format("pop r{}", r));
  b.emit("ret");

  auto program = b.build();

  // .data initialisers live in the application section.
  constexpr std::uint32_t kDataLoadWord = 0x3000;
  const MemoryLayout layout{kRegisterFileEnd, kIoEnd, {0x0100, 0x0210}, {0x0210, 0x0380}, 0x1000,
                            kRamEnd};
  const std::string banner = "sensor-node v1.0 ready";
  std::vector<std::uint8_t> init(layout.data_section.size(), 0);
  std::copy(banner.begin(), banner.end(), init.begin());
  if (program.size() < kDataLoadWord + init.size() / 2) {
    program.resize(kDataLoadWord + init.size() / 2, kErasedWord);
  }
  for (std::size_t n = 0; n < init.size() / 2; ++n) {
    program[kDataLoadWord + n] = static_cast<std::uint16_t>(init[2 * n] | (init[2 * n + 1] << 8));
  }

  FirmwareImage image(std::move(program));
  image.layout = layout;
  image.data_load = kDataLoadWord * 2;
  image.application = "demo";
  image.source = "fixture:demo";
  for (const auto& [name, addr] : b.labels()) image.symbols[name] = addr;
  image.data_symbols["rx_msg"] = kRxMsg;
  image.layout.validate();
  return image;
}

FirmwareImage null_firmware() {
  ProgramBuilder b;
  b.label("reset");
  b.emit("jmp @init");
  b.label("init");
  b.emit("rjmp .-2");
  b.label("noop");
  b.emit("ret");
  FirmwareImage image(b.build());
  image.layout = MemoryLayout{kRegisterFileEnd, kIoEnd, {0x0100, 0x0110}, {0x0110, 0x0200}, 0x1000,
                              kRamEnd};
  image.application = "null";
  image.source = "fixture:null";
  for (const auto& [name, addr] : b.labels()) image.symbols[name] = addr;
  return image;
}

std::vector<std::uint8_t> sentinel_malware() {
  std::vector<std::string> lines = {fmt::format("sbi 0x{:02x}, 2", kSentinelIo),
                                    fmt::format("sbi 0x{:02x}, 1", kSentinelIo)};
  for (int n = 0; n < 27; ++n) lines.emplace_back("nop");
  lines.insert(lines.end(), {"ldi r30, 0", "ldi r31, 0", "ijmp"});
  std::vector<std::uint8_t> bytes;
  for (auto w : isa::assemble(lines)) {
    bytes.push_back(static_cast<std::uint8_t>(w));
    bytes.push_back(static_cast<std::uint8_t>(w >> 8));
  }
  return bytes;
}

}  // namespace avrrop::fixture
