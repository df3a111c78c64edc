#include "avrrop/isa.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <charconv>

#include "avrrop/error.hpp"
#include "avrrop/firmware.hpp"

namespace avrrop::isa {

namespace {

struct OpName {
  Op op;
  std::string_view name;
};

constexpr OpName kNames[] = {
    {Op::Unknown, ".word"}, {Op::Nop, "nop"},     {Op::Pop, "pop"},     {Op::Push, "push"},
    {Op::Ret, "ret"},       {Op::Reti, "reti"},   {Op::Movw, "movw"},   {Op::Mov, "mov"},
    {Op::Ldi, "ldi"},       {Op::In, "in"},       {Op::Out, "out"},     {Op::StZ, "st"},
    {Op::StZInc, "st"},     {Op::StdZ, "std"},    {Op::LdZ, "ld"},      {Op::LdZInc, "ld"},
    {Op::LddZ, "ldd"},      {Op::Sts, "sts"},     {Op::Lds, "lds"},     {Op::Spm, "spm"},
    {Op::Lpm, "lpm"},       {Op::LpmZ, "lpm"},    {Op::LpmZInc, "lpm"}, {Op::Cli, "cli"},
    {Op::Sei, "sei"},       {Op::Sbi, "sbi"},     {Op::Cbi, "cbi"},     {Op::Call, "call"},
    {Op::Rcall, "rcall"},   {Op::Icall, "icall"}, {Op::Jmp, "jmp"},     {Op::Rjmp, "rjmp"},
    {Op::Ijmp, "ijmp"},     {Op::Cpi, "cpi"},     {Op::Brne, "brne"},   {Op::Breq, "breq"},
    {Op::Add, "add"},       {Op::Adiw, "adiw"},   {Op::Sbiw, "sbiw"},   {Op::Subi, "subi"},
    {Op::Sbci, "sbci"},     {Op::Eor, "eor"},
};

Instruction make(Op op) {
  Instruction i;
  i.op = op;
  return i;
}

Instruction with_rd(Op op, unsigned rd) {
  auto i = make(op);
  i.rd = static_cast<std::uint8_t>(rd);
  return i;
}

Instruction with_rr(Op op, unsigned rr) {
  auto i = make(op);
  i.rr = static_cast<std::uint8_t>(rr);
  return i;
}

std::int32_t sign_extend(std::uint32_t value, unsigned bits) {
  const std::uint32_t sign = 1u << (bits - 1);
  return static_cast<std::int32_t>((value ^ sign)) - static_cast<std::int32_t>(sign);
}

Instruction decode_one(std::uint16_t w) {
  switch (w) {
    case 0x0000: return make(Op::Nop);
    case 0x9508: return make(Op::Ret);
    case 0x9518: return make(Op::Reti);
    case 0x9509: return make(Op::Icall);
    case 0x9409: return make(Op::Ijmp);
    case 0x95E8: return make(Op::Spm);
    case 0x95C8: return make(Op::Lpm);
    case 0x94F8: return make(Op::Cli);
    case 0x9478: return make(Op::Sei);
    default: break;
  }

  const unsigned d5 = (w >> 4) & 0x1F;
  const unsigned r5 = ((w >> 5) & 0x10) | (w & 0x0F);
  const unsigned k8 = ((w >> 4) & 0xF0) | (w & 0x0F);

  if ((w & 0xFF00) == 0x0100) {
    auto i = make(Op::Movw);
    i.rd = static_cast<std::uint8_t>(((w >> 4) & 0xF) * 2);
    i.rr = static_cast<std::uint8_t>((w & 0xF) * 2);
    return i;
  }
  if ((w & 0xFC00) == 0x0C00 || (w & 0xFC00) == 0x2400 || (w & 0xFC00) == 0x2C00) {
    const Op op = (w & 0xFC00) == 0x0C00 ? Op::Add : (w & 0xFC00) == 0x2400 ? Op::Eor : Op::Mov;
    auto i = with_rd(op, d5);
    i.rr = static_cast<std::uint8_t>(r5);
    return i;
  }
  if ((w & 0xF000) == 0x3000 || (w & 0xF000) == 0x4000 || (w & 0xF000) == 0x5000 ||
      (w & 0xF000) == 0xE000) {
    Op op = Op::Ldi;
    switch (w & 0xF000) {
      case 0x3000: op = Op::Cpi; break;
      case 0x4000: op = Op::Sbci; break;
      case 0x5000: op = Op::Subi; break;
      default: break;
    }
    auto i = with_rd(op, 16 + ((w >> 4) & 0xF));
    i.k = k8;
    return i;
  }
  if ((w & 0xD000) == 0x8000) {
    if (w & 0x0008) {  // Y-based ldd/std
      auto u = make(Op::Unknown);
      u.raw = w;
      return u;
    }
    const unsigned q = ((w >> 8) & 0x20) | ((w >> 7) & 0x18) | (w & 0x07);
    const bool store = (w & 0x0200) != 0;
    Instruction i;
    if (store) {
      i = with_rr(q == 0 ? Op::StZ : Op::StdZ, d5);
    } else {
      i = with_rd(q == 0 ? Op::LdZ : Op::LddZ, d5);
    }
    i.q = static_cast<std::uint8_t>(q);
    return i;
  }
  switch (w & 0xFE0F) {
    case 0x900F: return with_rd(Op::Pop, d5);
    case 0x920F: return with_rr(Op::Push, d5);
    case 0x9001: return with_rd(Op::LdZInc, d5);
    case 0x9201: return with_rr(Op::StZInc, d5);
    case 0x9004: return with_rd(Op::LpmZ, d5);
    case 0x9005: return with_rd(Op::LpmZInc, d5);
    default: break;
  }
  if ((w & 0xFF00) == 0x9600 || (w & 0xFF00) == 0x9700) {
    auto i = with_rd((w & 0xFF00) == 0x9600 ? Op::Adiw : Op::Sbiw, 24 + ((w >> 4) & 0x3) * 2);
    i.k = ((w >> 2) & 0x30) | (w & 0x0F);
    return i;
  }
  if ((w & 0xFF00) == 0x9A00 || (w & 0xFF00) == 0x9800) {
    auto i = make((w & 0xFF00) == 0x9A00 ? Op::Sbi : Op::Cbi);
    i.io = static_cast<std::uint8_t>((w >> 3) & 0x1F);
    i.bit = static_cast<std::uint8_t>(w & 0x7);
    return i;
  }
  if ((w & 0xF000) == 0xB000) {
    const unsigned io = ((w >> 5) & 0x30) | (w & 0x0F);
    Instruction i = (w & 0x0800) ? with_rr(Op::Out, d5) : with_rd(Op::In, d5);
    i.io = static_cast<std::uint8_t>(io);
    return i;
  }
  if ((w & 0xE000) == 0xC000) {
    auto i = make((w & 0xF000) == 0xC000 ? Op::Rjmp : Op::Rcall);
    i.rel = sign_extend(w & 0x0FFF, 12);
    return i;
  }
  if ((w & 0xFC07) == 0xF401 || (w & 0xFC07) == 0xF001) {
    auto i = make((w & 0xFC07) == 0xF401 ? Op::Brne : Op::Breq);
    i.rel = sign_extend((w >> 3) & 0x7F, 7);
    return i;
  }
  auto i = make(Op::Unknown);
  i.raw = w;
  return i;
}

[[noreturn]] void out_of_range(std::string_view what, long long value) {
  throw Error(ErrorCode::OperandOutOfRange, fmt::format("{} {} out of range", what, value));
}

void check_reg(unsigned r) {
  if (r > 31) out_of_range("register", r);
}

void check_upper(unsigned r) {
  if (r < 16 || r > 31) out_of_range("register (needs r16..r31)", r);
}

void check_u(std::string_view what, long long v, long long max) {
  if (v < 0 || v > max) out_of_range(what, v);
}

void check_s(std::string_view what, long long v, long long lo, long long hi) {
  if (v < lo || v > hi) out_of_range(what, v);
}

// --- text parsing -----------------------------------------------------------

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

[[noreturn]] void syntax(std::string_view text, std::string_view why) {
  throw Error(ErrorCode::SyntaxError, fmt::format("'{}': {}", text, why));
}

long long parse_number(std::string_view s, std::string_view context) {
  s = trim(s);
  bool negative = false;
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
    negative = s.front() == '-';
    s.remove_prefix(1);
  }
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    base = 16;
    s.remove_prefix(2);
  }
  long long value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value, base);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    syntax(context, "expected a number");
  }
  return negative ? -value : value;
}

unsigned parse_reg(std::string_view s, std::string_view context) {
  s = trim(s);
  if (s.size() < 2 || (s[0] != 'r' && s[0] != 'R')) syntax(context, "expected a register");
  const long long r = parse_number(s.substr(1), context);
  check_u("register", r, 31);
  return static_cast<unsigned>(r);
}

// Pointer operand: "Z", "Z+", "Z+q". Returns {post_increment, displacement}.
struct ZOperand {
  bool post_inc = false;
  long long q = 0;
  bool has_q = false;
};

ZOperand parse_z(std::string_view s, std::string_view context) {
  s = trim(s);
  if (s.empty() || (s[0] != 'Z' && s[0] != 'z')) syntax(context, "expected Z pointer operand");
  s.remove_prefix(1);
  ZOperand z;
  if (s.empty()) return z;
  if (s[0] != '+') syntax(context, "unsupported pointer form");
  s.remove_prefix(1);
  if (trim(s).empty()) {
    z.post_inc = true;
    return z;
  }
  z.q = parse_number(s, context);
  z.has_q = true;
  return z;
}

long long parse_relative(std::string_view s, std::string_view context) {
  s = trim(s);
  if (s.size() < 3 || s[0] != '.' || (s[1] != '+' && s[1] != '-')) {
    syntax(context, "expected relative target .+N or .-N (bytes)");
  }
  const long long bytes = parse_number(s.substr(1), context);
  if (bytes % 2 != 0) syntax(context, "relative offset must be even");
  return bytes / 2;
}

std::vector<std::string_view> split_operands(std::string_view s) {
  std::vector<std::string_view> out;
  s = trim(s);
  if (s.empty()) return out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == ',') {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

}  // namespace

std::string_view mnemonic(Op op) {
  for (const auto& n : kNames) {
    if (n.op == op) return n.name;
  }
  return "?";
}

bool is_two_word_opcode(std::uint16_t w) {
  return (w & 0xFC0F) == 0x9000 ||  // lds / sts
         (w & 0xFE0C) == 0x940C;    // jmp / call
}

Instruction decode_instruction(std::uint16_t low_word, std::optional<std::uint16_t> trailing) {
  if (is_two_word_opcode(low_word)) {
    if (!trailing) {
      throw Error(ErrorCode::MissingTrailingWord,
                  fmt::format("opcode 0x{:04x} needs a second word", low_word));
    }
    Instruction i;
    i.width = 2;
    if ((low_word & 0xFC0F) == 0x9000) {
      const unsigned reg = (low_word >> 4) & 0x1F;
      if (low_word & 0x0200) {
        i.op = Op::Sts;
        i.rr = static_cast<std::uint8_t>(reg);
      } else {
        i.op = Op::Lds;
        i.rd = static_cast<std::uint8_t>(reg);
      }
      i.k = *trailing;
    } else {
      i.op = (low_word & 0x0002) ? Op::Call : Op::Jmp;
      i.k = ((((low_word >> 4) & 0x1Fu) << 17) | ((low_word & 1u) << 16)) | *trailing;
    }
    return i;
  }
  return decode_one(low_word);
}

bool is_control_flow(Op op) {
  switch (op) {
    case Op::Ret:
    case Op::Reti:
    case Op::Call:
    case Op::Rcall:
    case Op::Icall:
    case Op::Jmp:
    case Op::Rjmp:
    case Op::Ijmp:
    case Op::Brne:
    case Op::Breq:
      return true;
    default:
      return false;
  }
}

bool is_return(Op op) { return op == Op::Ret || op == Op::Reti; }

std::vector<std::uint16_t> encode(const Instruction& i) {
  const auto one = [](unsigned w) { return std::vector<std::uint16_t>{static_cast<std::uint16_t>(w)}; };
  const unsigned rd = i.rd;
  const unsigned rr = i.rr;
  switch (i.op) {
    case Op::Unknown: return one(i.raw);
    case Op::Nop: return one(0x0000);
    case Op::Ret: return one(0x9508);
    case Op::Reti: return one(0x9518);
    case Op::Icall: return one(0x9509);
    case Op::Ijmp: return one(0x9409);
    case Op::Spm: return one(0x95E8);
    case Op::Lpm: return one(0x95C8);
    case Op::Cli: return one(0x94F8);
    case Op::Sei: return one(0x9478);
    case Op::Pop: check_reg(rd); return one(0x900F | (rd << 4));
    case Op::Push: check_reg(rr); return one(0x920F | (rr << 4));
    case Op::LdZInc: check_reg(rd); return one(0x9001 | (rd << 4));
    case Op::StZInc: check_reg(rr); return one(0x9201 | (rr << 4));
    case Op::LpmZ: check_reg(rd); return one(0x9004 | (rd << 4));
    case Op::LpmZInc: check_reg(rd); return one(0x9005 | (rd << 4));
    case Op::Movw:
      check_reg(rd);
      check_reg(rr);
      if (rd % 2 || rr % 2) out_of_range("movw register (must be even)", rd % 2 ? rd : rr);
      return one(0x0100 | ((rd / 2) << 4) | (rr / 2));
    case Op::Add:
    case Op::Eor:
    case Op::Mov: {
      check_reg(rd);
      check_reg(rr);
      const unsigned base = i.op == Op::Add ? 0x0C00 : i.op == Op::Eor ? 0x2400 : 0x2C00;
      return one(base | ((rr & 0x10) << 5) | (rd << 4) | (rr & 0x0F));
    }
    case Op::Ldi:
    case Op::Cpi:
    case Op::Subi:
    case Op::Sbci: {
      check_upper(rd);
      check_u("immediate", i.k, 0xFF);
      const unsigned base = i.op == Op::Ldi    ? 0xE000
                            : i.op == Op::Cpi  ? 0x3000
                            : i.op == Op::Subi ? 0x5000
                                               : 0x4000;
      return one(base | ((i.k & 0xF0) << 4) | ((rd - 16) << 4) | (i.k & 0x0F));
    }
    case Op::StZ:
    case Op::StdZ:
    case Op::LdZ:
    case Op::LddZ: {
      const bool store = i.op == Op::StZ || i.op == Op::StdZ;
      const unsigned reg = store ? rr : rd;
      check_reg(reg);
      const unsigned q = (i.op == Op::StZ || i.op == Op::LdZ) ? 0 : i.q;
      if (i.op == Op::StdZ || i.op == Op::LddZ) check_s("displacement", q, 1, 63);
      return one(0x8000 | ((q & 0x20) << 8) | ((q & 0x18) << 7) | (q & 0x07) |
                 (store ? 0x0200 : 0) | (reg << 4));
    }
    case Op::Lds:
    case Op::Sts: {
      const unsigned reg = i.op == Op::Sts ? rr : rd;
      check_reg(reg);
      check_u("data address", i.k, 0xFFFF);
      return {static_cast<std::uint16_t>((i.op == Op::Sts ? 0x9200 : 0x9000) | (reg << 4)),
              static_cast<std::uint16_t>(i.k)};
    }
    case Op::Jmp:
    case Op::Call:
      check_u("program address", i.k, 0x3FFFFF);
      return {static_cast<std::uint16_t>((i.op == Op::Call ? 0x940E : 0x940C) |
                                         (((i.k >> 17) & 0x1F) << 4) | ((i.k >> 16) & 1)),
              static_cast<std::uint16_t>(i.k & 0xFFFF)};
    case Op::Adiw:
    case Op::Sbiw:
      if (rd < 24 || rd > 30 || rd % 2) out_of_range("adiw/sbiw register", rd);
      check_u("immediate", i.k, 63);
      return one((i.op == Op::Adiw ? 0x9600 : 0x9700) | ((i.k & 0x30) << 2) |
                 (((rd - 24) / 2) << 4) | (i.k & 0x0F));
    case Op::Sbi:
    case Op::Cbi:
      check_u("io address", i.io, 31);
      check_u("bit", i.bit, 7);
      return one((i.op == Op::Sbi ? 0x9A00 : 0x9800) | (i.io << 3) | i.bit);
    case Op::In:
    case Op::Out: {
      const unsigned reg = i.op == Op::In ? rd : rr;
      check_reg(reg);
      check_u("io address", i.io, 63);
      return one((i.op == Op::In ? 0xB000 : 0xB800) | ((i.io & 0x30) << 5) | (reg << 4) |
                 (i.io & 0x0F));
    }
    case Op::Rjmp:
    case Op::Rcall:
      check_s("relative offset", i.rel, -2048, 2047);
      return one((i.op == Op::Rjmp ? 0xC000 : 0xD000) | (static_cast<unsigned>(i.rel) & 0x0FFF));
    case Op::Brne:
    case Op::Breq:
      check_s("branch offset", i.rel, -64, 63);
      return one((i.op == Op::Brne ? 0xF401 : 0xF001) | ((static_cast<unsigned>(i.rel) & 0x7F) << 3));
  }
  throw Error(ErrorCode::UnsupportedMnemonic, "cannot encode");
}

Instruction parse_instruction(std::string_view text) {
  const std::string_view line = trim(text);
  const auto space = line.find_first_of(" \t");
  const std::string mn = lower(line.substr(0, space));
  const auto ops = split_operands(space == std::string_view::npos ? std::string_view{}
                                                                  : line.substr(space + 1));
  const auto want = [&](std::size_t n) {
    if (ops.size() != n) syntax(text, fmt::format("expected {} operand(s)", n));
  };

  Instruction i;
  const auto bare = [&](Op op) {
    want(0);
    i.op = op;
    return i;
  };

  if (mn == "nop") return bare(Op::Nop);
  if (mn == "ret") return bare(Op::Ret);
  if (mn == "reti") return bare(Op::Reti);
  if (mn == "icall") return bare(Op::Icall);
  if (mn == "ijmp") return bare(Op::Ijmp);
  if (mn == "spm") return bare(Op::Spm);
  if (mn == "cli") return bare(Op::Cli);
  if (mn == "sei") return bare(Op::Sei);
  if (mn == "lpm" && ops.empty()) return bare(Op::Lpm);

  if (mn == "pop" || mn == "push") {
    want(1);
    i.op = mn == "pop" ? Op::Pop : Op::Push;
    (mn == "pop" ? i.rd : i.rr) = static_cast<std::uint8_t>(parse_reg(ops[0], text));
  } else if (mn == "movw" || mn == "mov" || mn == "add" || mn == "eor") {
    want(2);
    i.op = mn == "movw" ? Op::Movw : mn == "mov" ? Op::Mov : mn == "add" ? Op::Add : Op::Eor;
    i.rd = static_cast<std::uint8_t>(parse_reg(ops[0], text));
    i.rr = static_cast<std::uint8_t>(parse_reg(ops[1], text));
  } else if (mn == "ldi" || mn == "cpi" || mn == "subi" || mn == "sbci" || mn == "adiw" ||
             mn == "sbiw") {
    want(2);
    i.op = mn == "ldi"    ? Op::Ldi
           : mn == "cpi"  ? Op::Cpi
           : mn == "subi" ? Op::Subi
           : mn == "sbci" ? Op::Sbci
           : mn == "adiw" ? Op::Adiw
                          : Op::Sbiw;
    i.rd = static_cast<std::uint8_t>(parse_reg(ops[0], text));
    const long long k = parse_number(ops[1], text);
    check_u("immediate", k, 0xFF);
    i.k = static_cast<std::uint32_t>(k);
  } else if (mn == "in") {
    want(2);
    i.op = Op::In;
    i.rd = static_cast<std::uint8_t>(parse_reg(ops[0], text));
    const long long io = parse_number(ops[1], text);
    check_u("io address", io, 63);
    i.io = static_cast<std::uint8_t>(io);
  } else if (mn == "out") {
    want(2);
    i.op = Op::Out;
    const long long io = parse_number(ops[0], text);
    check_u("io address", io, 63);
    i.io = static_cast<std::uint8_t>(io);
    i.rr = static_cast<std::uint8_t>(parse_reg(ops[1], text));
  } else if (mn == "st" || mn == "std") {
    want(2);
    const ZOperand z = parse_z(ops[0], text);
    i.rr = static_cast<std::uint8_t>(parse_reg(ops[1], text));
    if (mn == "st" && z.has_q) syntax(text, "use std for displacement");
    if (mn == "std" && !z.has_q) syntax(text, "std needs Z+q");
    if (z.post_inc) {
      i.op = Op::StZInc;
    } else if (z.has_q && z.q != 0) {
      check_s("displacement", z.q, 1, 63);
      i.op = Op::StdZ;
      i.q = static_cast<std::uint8_t>(z.q);
    } else {
      i.op = Op::StZ;
    }
  } else if (mn == "ld" || mn == "ldd" || mn == "lpm") {
    want(2);
    i.rd = static_cast<std::uint8_t>(parse_reg(ops[0], text));
    const ZOperand z = parse_z(ops[1], text);
    if (mn == "lpm") {
      if (z.has_q) syntax(text, "lpm takes Z or Z+");
      i.op = z.post_inc ? Op::LpmZInc : Op::LpmZ;
    } else {
      if (mn == "ld" && z.has_q) syntax(text, "use ldd for displacement");
      if (mn == "ldd" && !z.has_q) syntax(text, "ldd needs Z+q");
      if (z.post_inc) {
        i.op = Op::LdZInc;
      } else if (z.has_q && z.q != 0) {
        check_s("displacement", z.q, 1, 63);
        i.op = Op::LddZ;
        i.q = static_cast<std::uint8_t>(z.q);
      } else {
        i.op = Op::LdZ;
      }
    }
  } else if (mn == "sts") {
    want(2);
    i.op = Op::Sts;
    i.width = 2;
    const long long k = parse_number(ops[0], text);
    check_u("data address", k, 0xFFFF);
    i.k = static_cast<std::uint32_t>(k);
    i.rr = static_cast<std::uint8_t>(parse_reg(ops[1], text));
  } else if (mn == "lds") {
    want(2);
    i.op = Op::Lds;
    i.width = 2;
    i.rd = static_cast<std::uint8_t>(parse_reg(ops[0], text));
    const long long k = parse_number(ops[1], text);
    check_u("data address", k, 0xFFFF);
    i.k = static_cast<std::uint32_t>(k);
  } else if (mn == "sbi" || mn == "cbi") {
    want(2);
    i.op = mn == "sbi" ? Op::Sbi : Op::Cbi;
    const long long io = parse_number(ops[0], text);
    const long long bit = parse_number(ops[1], text);
    check_u("io address", io, 31);
    check_u("bit", bit, 7);
    i.io = static_cast<std::uint8_t>(io);
    i.bit = static_cast<std::uint8_t>(bit);
  } else if (mn == "jmp" || mn == "call") {
    want(1);
    i.op = mn == "jmp" ? Op::Jmp : Op::Call;
    i.width = 2;
    const long long k = parse_number(ops[0], text);
    check_u("program address", k, 0x3FFFFF);
    i.k = static_cast<std::uint32_t>(k);
  } else if (mn == "rjmp" || mn == "rcall" || mn == "brne" || mn == "breq") {
    want(1);
    i.op = mn == "rjmp" ? Op::Rjmp : mn == "rcall" ? Op::Rcall : mn == "brne" ? Op::Brne : Op::Breq;
    i.rel = static_cast<std::int32_t>(parse_relative(ops[0], text));
  } else {
    throw Error(ErrorCode::UnsupportedMnemonic, fmt::format("'{}'", mn));
  }

  // Range checks that depend on the opcode live in encode().
  encode(i);
  return i;
}

std::vector<std::uint16_t> assemble(std::span<const std::string> program) {
  std::vector<std::uint16_t> words;
  for (const auto& line : program) {
    const auto enc = encode(parse_instruction(line));
    words.insert(words.end(), enc.begin(), enc.end());
  }
  return words;
}

std::vector<std::uint16_t> assemble(std::initializer_list<std::string_view> program) {
  std::vector<std::string> lines(program.begin(), program.end());
  return assemble(std::span<const std::string>(lines));
}

std::string format_instruction(const Instruction& i) {
  const auto mn = mnemonic(i.op);
  const auto rel = [&] {
    const int bytes = i.rel * 2;
    return bytes < 0 ? fmt::format(".-{}", -bytes) : fmt::format(".+{}", bytes);
  };
  switch (i.op) {
    case Op::Unknown: return fmt::format(".word 0x{:04x}", i.raw);
    case Op::Nop:
    case Op::Ret:
    case Op::Reti:
    case Op::Icall:
    case Op::Ijmp:
    case Op::Spm:
    case Op::Lpm:
    case Op::Cli:
    case Op::Sei:
      return std::string(mn);
    case Op::Pop: return fmt::format("pop r{}", i.rd);
    case Op::Push: return fmt::format("push r{}", i.rr);
    case Op::Movw:
    case Op::Mov:
    case Op::Add:
    case Op::Eor:
      return fmt::format("{} r{}, r{}", mn, i.rd, i.rr);
    case Op::Ldi:
    case Op::Cpi:
    case Op::Subi:
    case Op::Sbci:
    case Op::Adiw:
    case Op::Sbiw:
      return fmt::format("{} r{}, 0x{:02x}", mn, i.rd, i.k);
    case Op::In: return fmt::format("in r{}, 0x{:02x}", i.rd, i.io);
    case Op::Out: return fmt::format("out 0x{:02x}, r{}", i.io, i.rr);
    case Op::StZ: return fmt::format("st Z, r{}", i.rr);
    case Op::StZInc: return fmt::format("st Z+, r{}", i.rr);
    case Op::StdZ: return fmt::format("std Z+{}, r{}", i.q, i.rr);
    case Op::LdZ: return fmt::format("ld r{}, Z", i.rd);
    case Op::LdZInc: return fmt::format("ld r{}, Z+", i.rd);
    case Op::LddZ: return fmt::format("ldd r{}, Z+{}", i.rd, i.q);
    case Op::LpmZ: return fmt::format("lpm r{}, Z", i.rd);
    case Op::LpmZInc: return fmt::format("lpm r{}, Z+", i.rd);
    case Op::Sts: return fmt::format("sts 0x{:04x}, r{}", i.k, i.rr);
    case Op::Lds: return fmt::format("lds r{}, 0x{:04x}", i.rd, i.k);
    case Op::Sbi:
    case Op::Cbi:
      return fmt::format("{} 0x{:02x}, {}", mn, i.io, i.bit);
    case Op::Jmp:
    case Op::Call:
      return fmt::format("{} 0x{:04x}", mn, i.k);
    case Op::Rjmp:
    case Op::Rcall:
    case Op::Brne:
    case Op::Breq:
      return fmt::format("{} {}", mn, rel());
  }
  return "?";
}

std::vector<Listed> disassemble_range(const FirmwareImage& image, std::uint32_t start,
                                      std::uint32_t end) {
  if (start > end || end > image.size_words()) {
    throw Error(ErrorCode::RangeOutOfBounds,
                fmt::format("[0x{:x}, 0x{:x}) outside image of {} words", start, end,
                            image.size_words()));
  }
  std::vector<Listed> out;
  std::uint32_t addr = start;
  while (addr < end) {
    const std::uint16_t w = image.word(addr);
    Instruction insn;
    if (is_two_word_opcode(w) && addr + 1 >= end) {
      insn.op = Op::Unknown;
      insn.raw = w;
    } else {
      insn = decode_instruction(w, is_two_word_opcode(w) ? std::optional(image.word(addr + 1))
                                                         : std::nullopt);
    }
    out.push_back({addr, insn});
    addr += insn.width;
  }
  return out;
}

std::string format_listing(std::span<const Listed> listing) {
  std::string out;
  for (const auto& l : listing) {
    out += fmt::format("{:x}: {}\n", l.address, format_instruction(l.insn));
  }
  return out;
}

}  // namespace avrrop::isa
