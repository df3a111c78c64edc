#include "avrrop/gadgets.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <deque>
#include <nlohmann/json.hpp>
#include <set>

#include "avrrop/error.hpp"

namespace avrrop {

using isa::Instruction;
using isa::Op;

namespace {

constexpr std::uint32_t bit(unsigned r) { return r < 32 ? (1u << r) : 0u; }
constexpr std::uint32_t kZMask = bit(30) | bit(31);

struct Range {
  std::uint32_t lo = 0;
  std::uint32_t hi = 0;
};

Range section_range(const FirmwareImage& image, SectionFilter filter) {
  const std::uint32_t size = image.size_words();
  const std::uint32_t bl = std::min(size, image.bootloader_start());
  switch (filter) {
    case SectionFilter::Application: return {0, bl};
    case SectionFilter::Bootloader: return {bl, size};
    case SectionFilter::All: break;
  }
  return {0, size};
}

// Decodes at `a` without reading past `hi`; nullopt when a two-word opcode is cut off.
std::optional<Instruction> decode_within(const FirmwareImage& image, std::uint32_t a,
                                         std::uint32_t hi) {
  const std::uint16_t w = image.word(a);
  if (isa::is_two_word_opcode(w)) {
    if (a + 1 >= hi) return std::nullopt;
    return isa::decode_instruction(w, image.word(a + 1));
  }
  return isa::decode_instruction(w);
}

std::string reg_list(std::uint32_t mask) {
  std::string out;
  for (unsigned r = 0; r < 32; ++r) {
    if (mask & bit(r)) out += fmt::format("{}r{}", out.empty() ? "" : ",", r);
  }
  return out;
}

nlohmann::ordered_json effects_json(const EffectSummary& e) {
  nlohmann::ordered_json j;
  j["pops"] = nlohmann::ordered_json::array();
  for (const auto& p : e.pops) j["pops"].push_back({{"reg", p.reg}, {"offset", p.offset}});
  j["stores"] = nlohmann::ordered_json::array();
  for (const auto& s : e.stores) {
    nlohmann::ordered_json sj;
    if (s.source == StoreEffect::Source::Z) {
      sj["address"] = "Z";
      sj["displacement"] = s.displacement;
      sj["post_increment"] = s.post_increment;
    } else {
      sj["address"] = fmt::format("0x{:04x}", s.address);
    }
    sj["data_reg"] = s.data_reg;
    j["stores"].push_back(sj);
  }
  j["sp_low_write"] = e.sp_low_write();
  j["sp_high_write"] = e.sp_high_write();
  j["sreg_write"] = e.sreg_write;
  j["spm_present"] = e.spm_present;
  j["clobbers"] = nlohmann::ordered_json::array();
  for (unsigned r = 0; r < 32; ++r) {
    if (e.clobbers & bit(r)) j["clobbers"].push_back(r);
  }
  return j;
}

}  // namespace

std::uint32_t written_registers(const Instruction& i) {
  switch (i.op) {
    case Op::Pop:
    case Op::Mov:
    case Op::Ldi:
    case Op::In:
    case Op::LdZ:
    case Op::LddZ:
    case Op::Lds:
    case Op::LpmZ:
    case Op::Add:
    case Op::Subi:
    case Op::Sbci:
    case Op::Eor:
      return bit(i.rd);
    case Op::LdZInc:
    case Op::LpmZInc:
      return bit(i.rd) | kZMask;
    case Op::Lpm:
      return bit(0);
    case Op::Movw:
    case Op::Adiw:
    case Op::Sbiw:
      return bit(i.rd) | bit(i.rd + 1u);
    case Op::StZInc:
      return kZMask;
    case Op::Sts:
      return i.k < 32 ? bit(i.k) : 0;
    default:
      return 0;
  }
}

EffectSummary summarize_effects(const Gadget& g) {
  if (g.body.empty() || !isa::is_return(g.body.back().op)) {
    throw Error(ErrorCode::UnmodeledInstruction,
                fmt::format("gadget 0x{:x} does not end in ret/reti", g.entry));
  }
  EffectSummary e;
  std::uint16_t offset = 0;
  for (std::size_t n = 0; n + 1 < g.body.size(); ++n) {
    const Instruction& i = g.body[n];
    if (i.op == Op::Unknown || i.op == Op::Push || isa::is_control_flow(i.op)) {
      throw Error(ErrorCode::UnmodeledInstruction,
                  fmt::format("gadget 0x{:x}: {}", g.entry, isa::format_instruction(i)));
    }
    switch (i.op) {
      case Op::Pop:
        e.pops.push_back({i.rd, offset++});
        break;
      case Op::Out:
        if (i.io == kIoSpl) e.sp_low_source = i.rr;
        if (i.io == kIoSph) e.sp_high_source = i.rr;
        if (i.io == kIoSreg) e.sreg_write = true;
        break;
      case Op::StZ:
        e.stores.push_back({StoreEffect::Source::Z, 0, false, 0, i.rr});
        break;
      case Op::StZInc:
        e.stores.push_back({StoreEffect::Source::Z, 0, true, 0, i.rr});
        break;
      case Op::StdZ:
        e.stores.push_back({StoreEffect::Source::Z, i.q, false, 0, i.rr});
        break;
      case Op::Sts:
        e.stores.push_back({StoreEffect::Source::Absolute, 0, false,
                            static_cast<std::uint16_t>(i.k), i.rr});
        if (i.k == 0x20u + kIoSpl) e.sp_low_source = i.rr;
        if (i.k == 0x20u + kIoSph) e.sp_high_source = i.rr;
        if (i.k == 0x20u + kIoSreg) e.sreg_write = true;
        break;
      case Op::Spm:
        e.spm_present = true;
        break;
      default:
        break;
    }
    if (i.op != Op::Pop) e.clobbers |= written_registers(i);
  }
  return e;
}

const Gadget* GadgetCatalog::find(std::uint32_t entry) const {
  auto it = std::lower_bound(gadgets.begin(), gadgets.end(), entry,
                             [](const Gadget& g, std::uint32_t a) { return g.entry < a; });
  return it != gadgets.end() && it->entry == entry ? &*it : nullptr;
}

GadgetCatalog scan_gadgets(const FirmwareImage& image, const ScanConfig& config) {
  if (config.max_length < 1) throw Error(ErrorCode::InvalidArgument, "max_length must be >= 1");
  const Range r = section_range(image, config.sections);

  // chain_len[a - lo]: instruction count of the ret-terminated run starting at a, 0 if none.
  std::vector<std::uint32_t> chain_len(r.hi - r.lo, 0);
  std::vector<std::optional<Instruction>> decoded(r.hi - r.lo);
  for (std::uint32_t a = r.hi; a-- > r.lo;) {
    auto insn = decode_within(image, a, r.hi);
    decoded[a - r.lo] = insn;
    if (!insn || insn->op == Op::Unknown) continue;
    if (isa::is_return(insn->op)) {
      chain_len[a - r.lo] = 1;
      continue;
    }
    if (isa::is_control_flow(insn->op)) continue;
    const std::uint32_t next = a + insn->width;
    if (next >= r.hi) continue;
    const std::uint32_t tail = chain_len[next - r.lo];
    if (tail > 0 && tail + 1 <= config.max_length) chain_len[a - r.lo] = tail + 1;
  }

  GadgetCatalog catalog;
  catalog.image_digest = image.digest();
  catalog.bootloader_start = image.bootloader_start();
  catalog.config = config;
  for (std::uint32_t a = r.lo; a < r.hi; ++a) {
    const std::uint32_t n = chain_len[a - r.lo];
    if (n == 0) continue;
    Gadget g;
    g.entry = a;
    std::uint32_t pc = a;
    for (std::uint32_t k = 0; k < n; ++k) {
      const Instruction& insn = *decoded[pc - r.lo];
      g.body.push_back(insn);
      pc += insn.width;
    }
    g.terminator = g.body.back().op;
    const auto pops = std::count_if(g.body.begin(), g.body.end(),
                                    [](const Instruction& i) { return i.op == Op::Pop; });
    g.stack_consumed = static_cast<std::uint16_t>(pops + 2);
    try {
      g.effects = summarize_effects(g);
    } catch (const Error& err) {
      g.unmodeled_reason = err.what();
    }
    catalog.gadgets.push_back(std::move(g));
  }
  if (config.sections != SectionFilter::Application) catalog.spm_routines = scan_spm_routines(image);
  return catalog;
}

std::vector<SpmRoutine> scan_spm_routines(const FirmwareImage& image) {
  constexpr std::uint32_t kPrefixLimit = 32;
  constexpr std::size_t kNodeLimit = 512;
  const Range r = section_range(image, SectionFilter::Bootloader);
  std::vector<SpmRoutine> found;

  for (std::uint32_t entry = r.lo; entry < r.hi; ++entry) {
    // Straight-line prefix up to the first SPM: page erase setup and Z <- dest pair.
    std::optional<std::uint8_t> dest_reg;
    std::optional<std::uint8_t> rampz_reg;
    std::uint32_t ldi_erase = 0;  // registers last loaded with 0x03
    bool erase_armed = false;
    bool reached_spm = false;
    std::uint32_t pc = entry;
    for (std::uint32_t n = 0; n < kPrefixLimit && pc < r.hi; ++n) {
      const auto insn = decode_within(image, pc, r.hi);
      if (!insn || insn->op == Op::Unknown || isa::is_control_flow(insn->op)) break;
      if (insn->op == Op::Spm) {
        reached_spm = true;
        break;
      }
      const std::uint32_t writes = written_registers(*insn);
      ldi_erase &= ~writes;
      if (insn->op == Op::Ldi && insn->k == 0x03) ldi_erase |= bit(insn->rd);
      if (insn->op == Op::Movw && insn->rd == 30) dest_reg = insn->rr;
      else if (writes & kZMask) dest_reg.reset();
      if (insn->op == Op::Sts && insn->k == kSpmcsrAddr) erase_armed = (ldi_erase & bit(insn->rr)) != 0;
      if (insn->op == Op::Sts && insn->k == kRampzAddr) rampz_reg = insn->rr;
      pc += insn->width;
    }
    if (!reached_spm || !erase_armed || !dest_reg) continue;

    // Bounded exploration of the routine body: must stay in the bootloader,
    // avoid calls and indirect jumps, and reach a return.
    std::set<std::uint32_t> seen;
    std::deque<std::uint32_t> work{entry};
    bool ok = true;
    bool returns = false;
    std::uint32_t spm_count = 0;
    while (!work.empty() && ok) {
      const std::uint32_t a = work.front();
      work.pop_front();
      if (!seen.insert(a).second) continue;
      if (seen.size() > kNodeLimit || a < r.lo || a >= r.hi) {
        ok = false;
        break;
      }
      const auto insn = decode_within(image, a, r.hi);
      if (!insn) {
        ok = false;
        break;
      }
      switch (insn->op) {
        case Op::Unknown:
        case Op::Call:
        case Op::Rcall:
        case Op::Icall:
        case Op::Ijmp:
        case Op::Jmp:
          ok = false;
          break;
        case Op::Ret:
        case Op::Reti:
          returns = true;
          break;
        case Op::Rjmp:
          work.push_back(static_cast<std::uint32_t>(static_cast<std::int64_t>(a) + 1 + insn->rel));
          break;
        case Op::Brne:
        case Op::Breq:
          work.push_back(a + 1);
          work.push_back(static_cast<std::uint32_t>(static_cast<std::int64_t>(a) + 1 + insn->rel));
          break;
        case Op::Spm:
          ++spm_count;
          work.push_back(a + insn->width);
          break;
        default:
          work.push_back(a + insn->width);
          break;
      }
    }
    if (!ok || !returns) continue;
    found.push_back({entry, *dest_reg, rampz_reg, spm_count});
  }
  return found;
}

std::string catalog_json(const GadgetCatalog& catalog) {
  nlohmann::ordered_json j;
  j["image_digest"] = fmt::format("{:016x}", catalog.image_digest);
  j["bootloader_start"] = fmt::format("0x{:04x}", catalog.bootloader_start);
  j["config"] = {{"max_length", catalog.config.max_length},
                 {"sections", catalog.config.sections == SectionFilter::All           ? "all"
                              : catalog.config.sections == SectionFilter::Application ? "application"
                                                                                      : "bootloader"}};
  j["gadgets"] = nlohmann::ordered_json::array();
  for (const auto& g : catalog.gadgets) {
    nlohmann::ordered_json gj;
    gj["entry"] = fmt::format("0x{:04x}", g.entry);
    gj["length"] = g.body.size();
    gj["terminator"] = isa::mnemonic(g.terminator);
    gj["stack_consumed"] = g.stack_consumed;
    gj["disassembly"] = nlohmann::ordered_json::array();
    for (const auto& i : g.body) gj["disassembly"].push_back(isa::format_instruction(i));
    if (g.effects) {
      gj["effects"] = effects_json(*g.effects);
    } else {
      gj["effects"] = nullptr;
      gj["unmodeled"] = g.unmodeled_reason;
    }
    j["gadgets"].push_back(gj);
  }
  j["spm_routines"] = nlohmann::ordered_json::array();
  for (const auto& s : catalog.spm_routines) {
    nlohmann::ordered_json sj;
    sj["entry"] = fmt::format("0x{:04x}", s.entry);
    sj["dest_reg"] = s.dest_reg;
    sj["rampz_reg"] = s.rampz_reg ? nlohmann::ordered_json(*s.rampz_reg) : nlohmann::ordered_json(nullptr);
    sj["spm_count"] = s.spm_count;
    j["spm_routines"].push_back(sj);
  }
  return j.dump(2) + "\n";
}

std::string catalog_text(const GadgetCatalog& catalog) {
  std::string out;
  for (const auto& g : catalog.gadgets) {
    out += fmt::format("{:x}:", g.entry);
    for (std::size_t n = 0; n < g.body.size(); ++n) {
      out += fmt::format("{}{}", n == 0 ? " " : "; ", isa::format_instruction(g.body[n]));
    }
    if (g.effects) {
      out += fmt::format("  [pops {}", g.effects->pops.size());
      if (g.effects->clobbers) out += fmt::format(" clobbers {}", reg_list(g.effects->clobbers));
      if (!g.effects->stores.empty()) out += fmt::format(" stores {}", g.effects->stores.size());
      if (g.effects->writes_sp()) out += " sp";
      if (g.effects->spm_present) out += " spm";
      out += "]";
    } else {
      out += "  [unmodeled]";
    }
    out += "\n";
  }
  for (const auto& s : catalog.spm_routines) {
    out += fmt::format("spm routine {:x}: dest r{}:r{}", s.entry, s.dest_reg + 1, s.dest_reg);
    if (s.rampz_reg) out += fmt::format(" rampz r{}", *s.rampz_reg);
    out += "\n";
  }
  return out;
}

}  // namespace avrrop
