#include "avrrop/emulator.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <nlohmann/json.hpp>

#include "avrrop/error.hpp"

namespace avrrop {

using isa::Op;

namespace {

constexpr bool b7(unsigned v) { return (v & 0x80) != 0; }
constexpr bool b3(unsigned v) { return (v & 0x08) != 0; }

void set_flag(MachineState& s, std::uint8_t mask, bool on) {
  auto& f = s.sram[kAddrSreg];
  f = static_cast<std::uint8_t>(on ? (f | mask) : (f & ~mask));
}

bool flag(const MachineState& s, std::uint8_t mask) { return (s.sram[kAddrSreg] & mask) != 0; }

void set_nzs(MachineState& s, unsigned result, bool v) {
  const bool n = b7(result);
  set_flag(s, sreg::N, n);
  set_flag(s, sreg::V, v);
  set_flag(s, sreg::S, n != v);
}

// Rd - K - carry_in; `keep_z` gives the SBC/SBCI rule of Z staying clear.
std::uint8_t subtract(MachineState& s, std::uint8_t rd, std::uint8_t k, bool carry_in, bool keep_z) {
  const std::uint8_t r = static_cast<std::uint8_t>(rd - k - (carry_in ? 1 : 0));
  const bool h = (!b3(rd) && b3(k)) || (b3(k) && b3(r)) || (b3(r) && !b3(rd));
  const bool v = (b7(rd) && !b7(k) && !b7(r)) || (!b7(rd) && b7(k) && b7(r));
  const bool c = (!b7(rd) && b7(k)) || (b7(k) && b7(r)) || (b7(r) && !b7(rd));
  set_flag(s, sreg::H, h);
  set_flag(s, sreg::C, c);
  set_flag(s, sreg::Z, keep_z ? (r == 0 && flag(s, sreg::Z)) : r == 0);
  set_nzs(s, r, v);
  return r;
}

void push_byte(MachineState& s, std::uint8_t v) {
  const std::uint16_t sp = s.sp();
  s.write_data(sp, v);
  s.set_sp(static_cast<std::uint16_t>(sp - 1));
}

std::uint8_t pop_byte(MachineState& s) {
  const std::uint16_t sp = static_cast<std::uint16_t>(s.sp() + 1);
  s.set_sp(sp);
  return s.read_data(sp);
}

// Return addresses sit low byte first at the lower address.
void push_return(MachineState& s, std::uint32_t addr) {
  push_byte(s, static_cast<std::uint8_t>(addr >> 8));
  push_byte(s, static_cast<std::uint8_t>(addr));
}

std::uint32_t pop_return(MachineState& s) {
  const std::uint8_t lo = pop_byte(s);
  const std::uint8_t hi = pop_byte(s);
  return static_cast<std::uint32_t>(lo | (hi << 8));
}

void set_pair(MachineState& s, unsigned r, std::uint16_t v) {
  s.set_reg(r, static_cast<std::uint8_t>(v));
  s.set_reg(r + 1, static_cast<std::uint8_t>(v >> 8));
}

void execute_spm(MachineState& s) {
  const SpmModes& modes = s.options.spm_modes;
  const std::uint8_t mode = s.sram[kAddrSpmcsr];
  const std::uint32_t z = s.pair(30);
  const std::uint32_t byte_addr = ((static_cast<std::uint32_t>(s.sram[kAddrRampz]) << 16) | z) %
                                  (kFlashWords * 2);
  const std::uint32_t page_word = (byte_addr & ~(kPageBytes - 1)) / 2;
  const bool protected_target = page_word >= s.image->bootloader_start();

  if (mode == modes.erase) {
    if (!protected_target) std::fill_n(s.flash.begin() + page_word, kPageWords, kErasedWord);
  } else if (mode == modes.fill) {
    const std::uint32_t off = z & (kPageBytes - 2);
    s.spm_page_buffer[off] = s.reg(0);
    s.spm_page_buffer[off + 1] = s.reg(1);
  } else if (mode == modes.write) {
    if (!protected_target) {
      for (std::uint32_t w = 0; w < kPageWords; ++w) {
        s.flash[page_word + w] = static_cast<std::uint16_t>(s.spm_page_buffer[2 * w] |
                                                            (s.spm_page_buffer[2 * w + 1] << 8));
      }
    }
    s.spm_page_buffer.fill(0xFF);
  }
  s.sram[kAddrSpmcsr] = 0;
}

std::uint8_t flash_byte(const MachineState& s, std::uint32_t byte_addr) {
  const std::uint16_t w = s.flash[(byte_addr / 2) % kFlashWords];
  return static_cast<std::uint8_t>(byte_addr & 1 ? w >> 8 : w);
}

void initialise_sections(MachineState& s) {
  const auto& lay = s.layout;
  const auto& img = *s.image;
  if (img.data_load) {
    for (std::uint32_t i = 0; i < lay.data_section.size(); ++i) {
      s.sram[lay.data_section.start + i] = flash_byte(s, *img.data_load + i);
    }
  }
  std::fill(s.sram.begin() + lay.bss_section.start, s.sram.begin() + lay.bss_section.end, 0);
  s.set_reg(1, 0);
  s.sram[kAddrSreg] = 0;
  s.sram[kAddrSpmcsr] = 0;
  s.set_sp(kResetSp);
  if (s.options.cleanup_enabled) {
    // Zero everything between the end of .bss and the stack pointer.
    std::fill(s.sram.begin() + lay.bss_section.end, s.sram.begin() + s.sp(), 0);
  }
  s.pc = 0;
  s.halted = false;
}

}  // namespace

std::string_view to_string(StopKind kind) {
  switch (kind) {
    case StopKind::SoftReboot: return "SoftReboot";
    case StopKind::Halted: return "Halted";
    case StopKind::FuelExhausted: return "FuelExhausted";
    case StopKind::Fault: return "Fault";
  }
  return "?";
}

std::string_view to_string(FaultReason reason) {
  switch (reason) {
    case FaultReason::UnknownInstruction: return "UnknownInstruction";
    case FaultReason::SpmOutsideBootloader: return "SpmOutsideBootloader";
  }
  return "?";
}

std::string RunOutcome::describe() const {
  std::string k(to_string(kind));
  if (fault) k += fmt::format("({})", to_string(*fault));
  return fmt::format("{} after {} instructions at pc=0x{:04x}", k, instructions, pc);
}

std::string format_trace(const TraceRecord& rec) {
  return fmt::format("{} {:04x} {} sp={:04x}", rec.cycle, rec.pc, isa::format_instruction(rec.insn),
                     rec.sp);
}

void MachineState::set_sp(std::uint16_t v) {
  v = static_cast<std::uint16_t>(v % kSramSize);
  sram[kAddrSpl] = static_cast<std::uint8_t>(v);
  sram[kAddrSph] = static_cast<std::uint8_t>(v >> 8);
}

SpmMode MachineState::spmcsr_mode() const {
  const std::uint8_t m = sram[kAddrSpmcsr];
  if (m == options.spm_modes.erase) return SpmMode::Erase;
  if (m == options.spm_modes.fill) return SpmMode::Fill;
  if (m == options.spm_modes.write) return SpmMode::Write;
  return SpmMode::Idle;
}

void MachineState::write_data(std::uint32_t addr, std::uint8_t value) {
  addr %= kSramSize;
  sram[addr] = value;
  // The stack pointer register wraps within the data space like any address.
  if ((addr == kAddrSpl || addr == kAddrSph) && sp() >= kSramSize) set_sp(sp());
  if (write_hook) write_hook(static_cast<std::uint16_t>(addr), value);
}

MachineState boot(std::shared_ptr<const FirmwareImage> image, const BootOptions& opts) {
  if (opts.fuel == 0) throw Error(ErrorCode::InvalidArgument, "fuel must be > 0");
  MachineState s;
  s.image = std::move(image);
  s.options = opts;
  s.layout = opts.layout.value_or(s.image->layout);
  s.layout.validate();
  s.flash.assign(kFlashWords, kErasedWord);
  std::copy(s.image->program().begin(), s.image->program().end(), s.flash.begin());
  s.sram.fill(0x00);
  s.spm_page_buffer.fill(0xFF);
  initialise_sections(s);
  return s;
}

MachineState boot(const FirmwareImage& image, const BootOptions& opts) {
  return boot(std::make_shared<const FirmwareImage>(image), opts);
}

void soft_reboot(MachineState& state) {
  initialise_sections(state);
  state.reboot_count += 1;
}

StepEvent step(MachineState& s) {
  using Kind = StepEvent::Kind;
  const std::uint32_t pc = s.pc % kFlashWords;
  const std::uint16_t w = s.flash[pc];
  isa::Instruction i;
  if (isa::is_two_word_opcode(w)) {
    if (pc + 1 >= kFlashWords) return {Kind::Fault, FaultReason::UnknownInstruction};
    i = isa::decode_instruction(w, s.flash[pc + 1]);
  } else {
    i = isa::decode_instruction(w);
  }
  if (s.tracer) s.tracer({s.cycle_count, pc, i, s.sp()});
  if (i.op == Op::Unknown) return {Kind::Fault, FaultReason::UnknownInstruction};

  std::uint32_t next = pc + i.width;
  bool returned = false;
  const auto z = [&] { return s.pair(30); };

  switch (i.op) {
    case Op::Nop:
      break;
    case Op::Pop:
      s.set_reg(i.rd, pop_byte(s));
      break;
    case Op::Push:
      push_byte(s, s.reg(i.rr));
      break;
    case Op::Reti:
      set_flag(s, sreg::I, true);
      [[fallthrough]];
    case Op::Ret:
      next = pop_return(s);
      returned = true;
      break;
    case Op::Movw:
      s.set_reg(i.rd, s.reg(i.rr));
      s.set_reg(i.rd + 1, s.reg(i.rr + 1));
      break;
    case Op::Mov:
      s.set_reg(i.rd, s.reg(i.rr));
      break;
    case Op::Ldi:
      s.set_reg(i.rd, static_cast<std::uint8_t>(i.k));
      break;
    case Op::In:
      s.set_reg(i.rd, s.read_data(0x20u + i.io));
      break;
    case Op::Out:
      s.write_data(0x20u + i.io, s.reg(i.rr));
      break;
    case Op::StZ:
      s.write_data(z(), s.reg(i.rr));
      break;
    case Op::StZInc: {
      const std::uint16_t a = z();
      s.write_data(a, s.reg(i.rr));
      set_pair(s, 30, static_cast<std::uint16_t>(a + 1));
      break;
    }
    case Op::StdZ:
      s.write_data(static_cast<std::uint16_t>(z() + i.q), s.reg(i.rr));
      break;
    case Op::LdZ:
      s.set_reg(i.rd, s.read_data(z()));
      break;
    case Op::LdZInc: {
      const std::uint16_t a = z();
      s.set_reg(i.rd, s.read_data(a));
      set_pair(s, 30, static_cast<std::uint16_t>(a + 1));
      break;
    }
    case Op::LddZ:
      s.set_reg(i.rd, s.read_data(static_cast<std::uint16_t>(z() + i.q)));
      break;
    case Op::Sts:
      s.write_data(i.k, s.reg(i.rr));
      break;
    case Op::Lds:
      s.set_reg(i.rd, s.read_data(i.k));
      break;
    case Op::Spm:
      if (pc < s.image->bootloader_start()) return {Kind::Fault, FaultReason::SpmOutsideBootloader};
      execute_spm(s);
      break;
    case Op::Lpm:
      s.set_reg(0, flash_byte(s, z()));
      break;
    case Op::LpmZ:
      s.set_reg(i.rd, flash_byte(s, z()));
      break;
    case Op::LpmZInc: {
      const std::uint16_t a = z();
      s.set_reg(i.rd, flash_byte(s, a));
      set_pair(s, 30, static_cast<std::uint16_t>(a + 1));
      break;
    }
    case Op::Cli:
      set_flag(s, sreg::I, false);
      break;
    case Op::Sei:
      set_flag(s, sreg::I, true);
      break;
    case Op::Sbi:
    case Op::Cbi: {
      const std::uint32_t a = 0x20u + i.io;
      const std::uint8_t m = static_cast<std::uint8_t>(1u << i.bit);
      const std::uint8_t v = s.read_data(a);
      s.write_data(a, static_cast<std::uint8_t>(i.op == Op::Sbi ? (v | m) : (v & ~m)));
      break;
    }
    case Op::Call:
      push_return(s, next);
      next = i.k;
      break;
    case Op::Rcall:
      push_return(s, next);
      next = static_cast<std::uint32_t>(static_cast<std::int64_t>(next) + i.rel);
      break;
    case Op::Icall:
      push_return(s, next);
      next = z();
      break;
    case Op::Jmp:
      next = i.k;
      break;
    case Op::Rjmp:
      if (i.rel == -1) {
        s.halted = true;
        s.cycle_count += 1;
        return {Kind::Halted, std::nullopt};
      }
      next = static_cast<std::uint32_t>(static_cast<std::int64_t>(next) + i.rel);
      break;
    case Op::Ijmp:
      next = z();
      returned = true;
      break;
    case Op::Cpi:
      subtract(s, s.reg(i.rd), static_cast<std::uint8_t>(i.k), false, false);
      break;
    case Op::Brne:
      if (!flag(s, sreg::Z)) next = static_cast<std::uint32_t>(static_cast<std::int64_t>(next) + i.rel);
      break;
    case Op::Breq:
      if (flag(s, sreg::Z)) next = static_cast<std::uint32_t>(static_cast<std::int64_t>(next) + i.rel);
      break;
    case Op::Add: {
      const std::uint8_t a = s.reg(i.rd);
      const std::uint8_t b = s.reg(i.rr);
      const std::uint8_t r = static_cast<std::uint8_t>(a + b);
      set_flag(s, sreg::H, (b3(a) && b3(b)) || (b3(b) && !b3(r)) || (!b3(r) && b3(a)));
      set_flag(s, sreg::C, (b7(a) && b7(b)) || (b7(b) && !b7(r)) || (!b7(r) && b7(a)));
      set_flag(s, sreg::Z, r == 0);
      set_nzs(s, r, (b7(a) && b7(b) && !b7(r)) || (!b7(a) && !b7(b) && b7(r)));
      s.set_reg(i.rd, r);
      break;
    }
    case Op::Adiw:
    case Op::Sbiw: {
      const std::uint16_t a = s.pair(i.rd);
      const bool add = i.op == Op::Adiw;
      const std::uint16_t r = static_cast<std::uint16_t>(add ? a + i.k : a - i.k);
      const bool ah = (a & 0x8000) != 0;
      const bool rh = (r & 0x8000) != 0;
      set_flag(s, sreg::C, add ? (!rh && ah) : (rh && !ah));
      set_flag(s, sreg::Z, r == 0);
      const bool v = add ? (!ah && rh) : (ah && !rh);
      set_flag(s, sreg::N, rh);
      set_flag(s, sreg::V, v);
      set_flag(s, sreg::S, rh != v);
      set_pair(s, i.rd, r);
      break;
    }
    case Op::Subi:
      s.set_reg(i.rd, subtract(s, s.reg(i.rd), static_cast<std::uint8_t>(i.k), false, false));
      break;
    case Op::Sbci:
      s.set_reg(i.rd, subtract(s, s.reg(i.rd), static_cast<std::uint8_t>(i.k), flag(s, sreg::C), true));
      break;
    case Op::Eor: {
      const std::uint8_t r = static_cast<std::uint8_t>(s.reg(i.rd) ^ s.reg(i.rr));
      set_flag(s, sreg::Z, r == 0);
      set_nzs(s, r, false);
      s.set_reg(i.rd, r);
      break;
    }
    case Op::Unknown:
      break;
  }

  s.pc = next % kFlashWords;
  s.cycle_count += 1;
  if (returned && s.pc == 0) return {Kind::SoftReboot, std::nullopt};
  return {};
}

RunOutcome run(MachineState& state, std::optional<std::uint64_t> fuel) {
  const std::uint64_t budget = fuel.value_or(state.options.fuel);
  RunOutcome out;
  state.halted = false;
  for (std::uint64_t n = 0; n < budget; ++n) {
    const StepEvent ev = step(state);
    if (ev.kind != StepEvent::Kind::Fault) out.instructions += 1;
    switch (ev.kind) {
      case StepEvent::Kind::Continue:
        continue;
      case StepEvent::Kind::SoftReboot:
        out.kind = StopKind::SoftReboot;
        break;
      case StepEvent::Kind::Halted:
        out.kind = StopKind::Halted;
        break;
      case StepEvent::Kind::Fault:
        out.kind = StopKind::Fault;
        out.fault = ev.fault;
        state.halted = true;
        break;
    }
    out.pc = state.pc;
    return out;
  }
  out.kind = StopKind::FuelExhausted;
  out.pc = state.pc;
  return out;
}

RunOutcome deliver_packet(MachineState& state, const std::vector<std::uint8_t>& payload,
                          const DeliveryOptions& opts) {
  if (payload.size() > opts.max_payload) {
    throw Error(ErrorCode::PacketTooLarge,
                fmt::format("{} bytes exceed the {}-byte packet payload", payload.size(),
                            opts.max_payload));
  }
  const auto buffer = state.image->data_symbol("rx_msg");
  const auto entry = state.image->symbol("rx_dispatch");
  if (!buffer) throw Error(ErrorCode::MissingSymbol, "data symbol rx_msg");
  if (!entry) throw Error(ErrorCode::MissingSymbol, "program symbol rx_dispatch");

  state.write_data(*buffer, opts.copy_length.value_or(static_cast<std::uint8_t>(payload.size())));
  for (std::size_t n = 0; n < payload.size(); ++n) {
    state.write_data(static_cast<std::uint32_t>(*buffer + 1 + n), payload[n]);
  }
  state.set_sp(opts.stack_top);
  state.pc = *entry;
  return run(state, opts.fuel);
}

std::vector<std::uint8_t> inspect(const MachineState& state, Space space, std::uint32_t start,
                                  std::uint32_t count) {
  const std::uint64_t end = static_cast<std::uint64_t>(start) + count;
  std::vector<std::uint8_t> out;
  switch (space) {
    case Space::Flash:
      if (end > kFlashWords) {
        throw Error(ErrorCode::RangeOutOfBounds, fmt::format("flash words [0x{:x}, 0x{:x})", start, end));
      }
      for (std::uint32_t a = start; a < end; ++a) {
        out.push_back(static_cast<std::uint8_t>(state.flash[a]));
        out.push_back(static_cast<std::uint8_t>(state.flash[a] >> 8));
      }
      break;
    case Space::Sram:
    case Space::Regs: {
      const std::uint32_t limit = space == Space::Regs ? 32u : kSramSize;
      if (end > limit) {
        throw Error(ErrorCode::RangeOutOfBounds, fmt::format("bytes [0x{:x}, 0x{:x})", start, end));
      }
      out.assign(state.sram.begin() + start, state.sram.begin() + static_cast<std::ptrdiff_t>(end));
      break;
    }
  }
  return out;
}

std::string snapshot_json(const MachineState& s) {
  nlohmann::ordered_json j;
  j["pc"] = fmt::format("0x{:04x}", s.pc);
  j["sp"] = fmt::format("0x{:04x}", s.sp());
  j["sreg"] = fmt::format("0x{:02x}", s.sreg());
  j["regs"] = nlohmann::ordered_json::array();
  for (unsigned r = 0; r < 32; ++r) j["regs"].push_back(s.reg(r));
  j["reboot_count"] = s.reboot_count;
  j["cycle_count"] = s.cycle_count;
  j["halted"] = s.halted;
  const char* modes[] = {"idle", "erase", "fill", "write"};
  j["spmcsr_mode"] = modes[static_cast<int>(s.spmcsr_mode())];
  FirmwareImage flash_copy(s.flash, s.image->bootloader_start());
  j["flash_digest"] = fmt::format("{:016x}", flash_copy.digest());
  return j.dump(2) + "\n";
}

}  // namespace avrrop
