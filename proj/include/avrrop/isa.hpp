#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace avrrop {

class FirmwareImage;

namespace isa {

// Closed opcode subset. Anything else decodes to Unknown.
enum class Op : std::uint8_t {
  Unknown,
  Nop,
  Pop,
  Push,
  Ret,
  Reti,
  Movw,
  Mov,
  Ldi,
  In,
  Out,
  StZ,     // st Z, Rr
  StZInc,  // st Z+, Rr
  StdZ,    // std Z+q, Rr (q >= 1)
  LdZ,     // ld Rd, Z
  LdZInc,  // ld Rd, Z+
  LddZ,    // ldd Rd, Z+q (q >= 1)
  Sts,
  Lds,
  Spm,
  Lpm,     // lpm (implied r0, Z)
  LpmZ,    // lpm Rd, Z
  LpmZInc, // lpm Rd, Z+
  Cli,
  Sei,
  Sbi,
  Cbi,
  Call,
  Rcall,
  Icall,
  Jmp,
  Rjmp,
  Ijmp,
  Cpi,
  Brne,
  Breq,
  Add,
  Adiw,
  Sbiw,
  Subi,
  Sbci,
  Eor,
};

std::string_view mnemonic(Op op);

/// A decoded instruction. Only the fields meaningful for `op` are set; the
/// rest stay zero so that defaulted equality works for round-trip checks.
struct Instruction {
  Op op = Op::Unknown;
  std::uint8_t rd = 0;    // destination register
  std::uint8_t rr = 0;    // source register
  std::uint8_t io = 0;    // IO address (0..63)
  std::uint8_t bit = 0;   // bit number for sbi/cbi
  std::uint8_t q = 0;     // displacement for ldd/std
  std::uint32_t k = 0;    // immediate, data address, or absolute program word address
  std::int32_t rel = 0;   // relative displacement in words (rjmp, rcall, brxx)
  std::uint16_t raw = 0;  // first encoding word; only meaningful for Unknown
  std::uint8_t width = 1; // size in 16-bit words

  bool operator==(const Instruction&) const = default;
};

bool is_two_word_opcode(std::uint16_t low_word);

/// Decodes one instruction. A two-word opcode without its trailing word
/// throws Error(MissingTrailingWord); unrecognised encodings yield Op::Unknown.
Instruction decode_instruction(std::uint16_t low_word,
                               std::optional<std::uint16_t> trailing_word = std::nullopt);

bool is_control_flow(Op op);
bool is_return(Op op);

/// Encodes a validated instruction. Throws OperandOutOfRange.
std::vector<std::uint16_t> encode(const Instruction& insn);

/// Parses one line of assembly ("pop r18", "st Z, r18", "std Z+10, r22").
Instruction parse_instruction(std::string_view text);

std::vector<std::uint16_t> assemble(std::span<const std::string> program);
std::vector<std::uint16_t> assemble(std::initializer_list<std::string_view> program);

/// Text form, e.g. "movw r30, r24", "out 0x3f, r0", "rjmp .-2".
/// Program addresses (jmp/call) are word addresses.
std::string format_instruction(const Instruction& insn);

struct Listed {
  std::uint32_t address = 0;  // word address
  Instruction insn;

  bool operator==(const Listed&) const = default;
};

/// Linear sweep over [start, end). A two-word instruction whose trailing word
/// lies outside the range is listed as Unknown with width 1.
std::vector<Listed> disassemble_range(const FirmwareImage& image, std::uint32_t start,
                                      std::uint32_t end);

/// "<addr>: <text>" lines, lower-case hex word addresses.
std::string format_listing(std::span<const Listed> listing);

}  // namespace isa
}  // namespace avrrop
