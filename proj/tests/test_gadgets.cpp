#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "avrrop/emulator.hpp"
#include "avrrop/error.hpp"
#include "avrrop/fixture.hpp"
#include "avrrop/gadgets.hpp"
#include "oracle.hpp"

using namespace avrrop;
using isa::Op;

namespace {

Gadget gadget_of(std::initializer_list<std::string_view> lines) {
  Gadget g;
  for (auto l : lines) g.body.push_back(isa::parse_instruction(l));
  g.terminator = g.body.back().op;
  g.stack_consumed = static_cast<std::uint16_t>(
      2 + std::count_if(g.body.begin(), g.body.end(), [](const isa::Instruction& i) { return i.op == Op::Pop; }));
  return g;
}

std::vector<oracle::RawGadget> as_raw(const GadgetCatalog& catalog) {
  std::vector<oracle::RawGadget> out;
  for (const auto& g : catalog.gadgets) {
    oracle::RawGadget r{g.entry, {}};
    for (const auto& i : g.body) {
      const auto w = isa::encode(i);
      r.words.insert(r.words.end(), w.begin(), w.end());
    }
    out.push_back(r);
  }
  return out;
}

FirmwareImage epilogue_image() {
  fixture::ProgramBuilder b;
  b.org(0x2b58);
  b.emit({"pop r25", "pop r24", "pop r19", "pop r18", "pop r0", "out 0x3f, r0", "pop r0", "pop r1", "reti"});
  b.org(0x0185);
  b.emit({"movw r30, r24", "std Z+10, r22", "ret"});
  b.org(0x073a);
  b.emit({"st Z, r18", "ret"});
  return FirmwareImage(b.build());
}

}  // namespace

TEST_CASE("gadgets: suffix enumeration of a single gadget") {
  std::vector<std::uint16_t> words(0x0100, 0xFFFF);
  for (auto w : isa::assemble({"pop r18", "ret"})) words.push_back(w);
  const auto catalog = scan_gadgets(FirmwareImage(words), {8, SectionFilter::All});
  REQUIRE(catalog.gadgets.size() == 2);
  CHECK(catalog.gadgets[0].entry == 0x0100);
  CHECK(catalog.gadgets[0].length() == 2);
  CHECK(catalog.gadgets[0].stack_consumed == 3);
  CHECK(catalog.gadgets[1].entry == 0x0101);
  CHECK(catalog.gadgets[1].length() == 1);
  CHECK(catalog.gadgets[1].stack_consumed == 2);
}

TEST_CASE("gadgets: erased flash has no gadgets") {
  const auto catalog = scan_gadgets(FirmwareImage(std::vector<std::uint16_t>(4096, 0xFFFF)));
  CHECK(catalog.gadgets.empty());
  CHECK(catalog.spm_routines.empty());
  CHECK_THROWS_AS(scan_gadgets(FirmwareImage(), {0, SectionFilter::All}), Error);
}

TEST_CASE("gadgets: effect summaries of the injection gadgets") {
  const auto catalog = scan_gadgets(epilogue_image());
  const Gadget* g1 = catalog.find(0x2b58);
  const Gadget* g2 = catalog.find(0x0185);
  const Gadget* g3 = catalog.find(0x073a);
  REQUIRE(g1);
  REQUIRE(g2);
  REQUIRE(g3);
  REQUIRE(g1->effects);
  std::vector<std::uint8_t> regs;
  for (const auto& p : g1->effects->pops) regs.push_back(p.reg);
  CHECK(regs == std::vector<std::uint8_t>{25, 24, 19, 18, 0, 0, 1});
  CHECK(g1->effects->sreg_write);
  CHECK(g1->terminator == Op::Reti);
  CHECK(g1->stack_consumed == 9);

  REQUIRE(g2->effects);
  CHECK(g2->effects->pops.empty());
  CHECK(g2->effects->clobbers == ((1u << 30) | (1u << 31)));
  REQUIRE(g2->effects->stores.size() == 1);
  CHECK(g2->effects->stores[0].displacement == 10);
  CHECK(g2->effects->stores[0].data_reg == 22);

  REQUIRE(g3->effects);
  REQUIRE(g3->effects->stores.size() == 1);
  CHECK(g3->effects->stores[0] == StoreEffect{StoreEffect::Source::Z, 0, false, 0, 18});
  CHECK(g3->terminator == Op::Ret);
}

TEST_CASE("gadgets: summarize_effects examples") {
  const auto ideal = summarize_effects(gadget_of({"pop r30", "pop r31", "pop r18", "st Z, r18", "ret"}));
  CHECK(ideal.pops == std::vector<PopEffect>{{30, 0}, {31, 1}, {18, 2}});
  CHECK(ideal.stores == std::vector<StoreEffect>{{StoreEffect::Source::Z, 0, false, 0, 18}});

  const auto bare = gadget_of({"ret"});
  CHECK(bare.stack_consumed == 2);
  const auto e = summarize_effects(bare);
  CHECK(e.pops.empty());
  CHECK(e.stores.empty());

  const auto pivot = summarize_effects(gadget_of(
      {"in r0, 0x3f", "cli", "out 0x3e, r29", "out 0x3f, r0", "out 0x3d, r28", "pop r29", "pop r28", "ret"}));
  CHECK(pivot.sp_high_write());
  CHECK(pivot.sp_low_write());
  CHECK(pivot.sp_high_source == 29);
  CHECK(pivot.sp_low_source == 28);
  CHECK(pivot.sreg_write);

  const auto abs = summarize_effects(gadget_of({"sts 0x0068, r24", "spm", "ret"}));
  REQUIRE(abs.stores.size() == 1);
  CHECK(abs.stores[0].source == StoreEffect::Source::Absolute);
  CHECK(abs.stores[0].address == 0x0068);
  CHECK(abs.spm_present);

  try {
    summarize_effects(gadget_of({"push r1", "ret"}));
    FAIL("expected UnmodeledInstruction");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::UnmodeledInstruction);
  }
}

TEST_CASE("gadgets: scanner equals brute-force enumeration") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const auto image = oracle::random_image(rng, 4096);
    for (std::uint32_t len : {1u, 4u, 8u, 32u}) {
      const auto catalog = scan_gadgets(image, {len, SectionFilter::All});
      const auto expected = oracle::brute_force_gadgets(image, len);
      INFO("trial " << trial << " L=" << len);
      CHECK(as_raw(catalog) == expected);
    }
  }
}

TEST_CASE("gadgets: suffix closure") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const auto catalog = scan_gadgets(oracle::random_image(rng, 2048), {8, SectionFilter::All});
    for (const auto& g : catalog.gadgets) {
      if (g.length() < 2) continue;
      const Gadget* suffix = catalog.find(g.entry + g.body.front().width);
      REQUIRE(suffix);
      CHECK(suffix->length() == g.length() - 1);
    }
  }
}

TEST_CASE("gadgets: section filter") {
  const auto demo = fixture::demo_firmware();
  const auto app = scan_gadgets(demo, {32, SectionFilter::Application});
  const auto boot = scan_gadgets(demo, {32, SectionFilter::Bootloader});
  const auto all = scan_gadgets(demo);
  for (const auto& g : app.gadgets) CHECK(g.entry < demo.bootloader_start());
  for (const auto& g : boot.gadgets) CHECK(g.entry >= demo.bootloader_start());
  CHECK(app.gadgets.size() + boot.gadgets.size() == all.gadgets.size());
  CHECK(app.spm_routines.empty());
}

TEST_CASE("gadgets: SPM routine detection in the demo bootloader") {
  const auto demo = fixture::demo_firmware();
  const auto routines = scan_spm_routines(demo);
  REQUIRE(routines.size() == 1);
  CHECK(routines[0].entry == fixture::kBlSpmPage);
  CHECK(routines[0].dest_reg == 14);
  CHECK(routines[0].rampz_reg == 16);
  CHECK(routines[0].spm_count >= 3);
  CHECK(scan_spm_routines(fixture::null_firmware()).empty());
}

TEST_CASE("gadgets: effect soundness against the emulator") {
  std::mt19937_64 rng(5);
  std::vector<FirmwareImage> images{fixture::demo_firmware()};
  for (int i = 0; i < 10; ++i) images.push_back(oracle::random_image(rng, 2048));
  std::size_t checked = 0;
  for (const auto& image : images) {
    auto base = boot(image);
    const auto catalog = scan_gadgets(image, {16, SectionFilter::All});
    for (const auto& g : catalog.gadgets) {
      if (!g.effects || g.effects->writes_sp() || g.effects->spm_present) continue;
      MachineState m = base;
      constexpr std::uint16_t kSp = 0x0F00;
      for (unsigned r = 0; r < 32; ++r) m.set_reg(r, static_cast<std::uint8_t>(0x40 + r));
      for (unsigned j = 0; j < g.stack_consumed; ++j) m.sram[kSp + 1 + j] = static_cast<std::uint8_t>(0xA0 + j);
      m.set_sp(kSp);
      m.pc = g.entry;
      const auto before = m.sram;
      bool disturbed = false;
      m.write_hook = [&](std::uint16_t addr, std::uint8_t) {
        if (addr < 32 || addr == kAddrSpl || addr == kAddrSph ||
            (addr > kSp && addr <= kSp + g.stack_consumed)) {
          disturbed = true;
        }
      };
      for (std::size_t n = 0; n < g.length(); ++n) {
        const auto ev = step(m);
        REQUIRE(ev.kind == StepEvent::Kind::Continue);
      }
      if (disturbed) continue;
      ++checked;
      INFO("gadget 0x" << std::hex << g.entry);
      CHECK(m.sp() == kSp + g.stack_consumed);
      const unsigned ret_at = g.stack_consumed - 2;
      CHECK(m.pc == static_cast<std::uint32_t>((0xA0 + ret_at) | ((0xA0 + ret_at + 1) << 8)));
      std::uint32_t popped = 0;
      std::array<int, 32> last_pop{};
      last_pop.fill(-1);
      for (const auto& p : g.effects->pops) {
        popped |= 1u << p.reg;
        last_pop[p.reg] = p.offset;
      }
      for (unsigned r = 0; r < 32; ++r) {
        const bool changed = m.reg(r) != before[r];
        if (changed) CHECK((((popped | g.effects->clobbers) >> r) & 1u) == 1u);
        if (last_pop[r] >= 0 && !((g.effects->clobbers >> r) & 1u)) {
          CHECK(m.reg(r) == 0xA0 + last_pop[r]);
        }
      }
    }
  }
  CHECK(checked > 200);
}

TEST_CASE("gadgets: catalog export") {
  const auto catalog = scan_gadgets(epilogue_image());
  const auto text = catalog_text(catalog);
  CHECK(text.find("185: movw r30, r24; std Z+10, r22; ret") != std::string::npos);
  const auto json = catalog_json(catalog);
  CHECK(json.find("\"entry\": \"0x2b58\"") != std::string::npos);
}
