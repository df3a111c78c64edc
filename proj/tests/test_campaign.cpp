#include <doctest.h>

#include "avrrop/campaign.hpp"
#include "avrrop/error.hpp"
#include "avrrop/fixture.hpp"

using namespace avrrop;

namespace {

struct Setup {
  FirmwareImage image = fixture::demo_firmware();
  AttackKit kit = prepare_attack(image);
  std::vector<std::uint8_t> malware = fixture::sentinel_malware();
};

const Setup& setup() {
  static const Setup s;
  return s;
}

}  // namespace

TEST_CASE("campaign: full attack on the demo node") {
  const auto& s = setup();
  auto m = boot(s.image);
  const auto r = run_full_attack(m, s.kit, s.malware, 0x8000, 0x0400);
  CHECK(r.success());
  CHECK(r.schedule_verified);
  CHECK(r.flash_verified);
  CHECK(r.malware_executed);
  CHECK(r.packets_sent == 16 + 64 + 1);
  CHECK(inspect(m, Space::Flash, 0x8000, 32) == s.malware);
}

TEST_CASE("campaign: byte injection alone") {
  const auto& s = setup();
  auto m = boot(s.image);
  const auto fs = build_fake_stack(s.malware, 0x8000, fixture::kBlSpmPage, PostAction::ExecuteMalware);
  const auto schedule = injection_schedule(fs, 0x0400, s.image.layout);
  const auto r = run_byte_injection(m, s.kit.injection, schedule);
  CHECK(r.success());
  CHECK(r.packets_sent == 80);
  CHECK(r.schedule_verified);
  for (const auto& [addr, value] : schedule.writes) CHECK(m.read_data(addr) == value);
}

TEST_CASE("campaign: a lost packet aborts the attempt") {
  const auto& s = setup();
  auto m = boot(s.image);
  int n = 0;
  AttackOptions opts;
  opts.drop_packet = [&] { return ++n == 5; };
  const auto r = run_full_attack(m, s.kit, s.malware, 0x8000, 0x0400, opts);
  REQUIRE(r.failure_stage.has_value());
  CHECK(r.failure_stage->describe() == "InjectionByte(4)");
  CHECK(r.packets_sent == 5);

  // A later attempt on the same node completes.
  opts.drop_packet = {};
  CHECK(run_full_attack(m, s.kit, s.malware, 0x8000, 0x0400, opts).success());
}

TEST_CASE("campaign: cleanup countermeasure") {
  const auto& s = setup();
  BootOptions b;
  b.cleanup_enabled = true;
  auto m = boot(s.image, b);
  const auto r = evaluate_countermeasure(m, s.kit, s.malware, 0x8000, 0x0400);
  REQUIRE(r.failure_stage.has_value());
  CHECK(r.failure_stage->describe() == "InjectionByte(1)");
  CHECK_FALSE(r.schedule_verified);
  CHECK_FALSE(r.flash_verified);
  CHECK_FALSE(r.malware_executed);

  auto m2 = boot(s.image, b);
  AttackOptions opts;
  opts.single_packet = true;
  CHECK(evaluate_countermeasure(m2, s.kit, s.malware, 0x8000, 0x0400, opts).success());
}

TEST_CASE("campaign: reboot post action") {
  const auto& s = setup();
  auto m = boot(s.image);
  AttackOptions opts;
  opts.post_action = PostAction::Reboot;
  const auto r = run_full_attack(m, s.kit, s.malware, 0x8000, 0x0400, opts);
  CHECK(r.success());
  CHECK(r.flash_verified);
  CHECK_FALSE(r.malware_executed);
}

TEST_CASE("campaign: destination inside the bootloader") {
  const auto& s = setup();
  auto m = boot(s.image);
  const auto r = run_full_attack(m, s.kit, s.malware, 0xF800, 0x0400);
  REQUIRE(r.failure_stage.has_value());
  CHECK(r.failure_stage->stage == FailureStage::Flash);
}

TEST_CASE("campaign: repeated attack is idempotent") {
  const auto& s = setup();
  auto m = boot(s.image);
  const auto first = run_full_attack(m, s.kit, s.malware, 0x8000, 0x0400);
  const auto flash = m.flash;
  const auto second = run_full_attack(m, s.kit, s.malware, 0x8000, 0x0400);
  CHECK(first.success());
  CHECK(second.success());
  CHECK(first.packets_sent == second.packets_sent);
  CHECK(m.flash == flash);
}

TEST_CASE("campaign: adjacency") {
  CHECK(adjacency(4, Topology::Line) == std::vector<std::vector<std::uint32_t>>{{1}, {0, 2}, {1, 3}, {2}});
  CHECK(adjacency(4, Topology::Ring) ==
        std::vector<std::vector<std::uint32_t>>{{1, 3}, {0, 2}, {1, 3}, {0, 2}});
  const auto full = adjacency(5, Topology::Complete);
  for (std::uint32_t i = 0; i < 5; ++i) CHECK(full[i].size() == 4);
}

TEST_CASE("campaign: worm on a line") {
  const auto& s = setup();
  WormConfig c;
  c.node_count = 10;
  const auto r = simulate_worm(s.image, s.malware, c);
  REQUIRE(r.rounds_to_full_infection.has_value());
  CHECK(*r.rounds_to_full_infection == 9);
  CHECK(r.infected_per_round == std::vector<std::uint32_t>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  CHECK(r.incomplete_image_events == 0);
  CHECK(r.packets_transmitted == 9u * 81u);
  const auto csv = propagation_csv(r);
  CHECK(csv.rfind("round,infected_count\n0,1\n", 0) == 0);
}

TEST_CASE("campaign: single node") {
  WormConfig c;
  c.node_count = 1;
  const auto r = simulate_worm(setup().image, setup().malware, c);
  CHECK(r.rounds_to_full_infection == 0u);
  CHECK(r.infected_per_round == std::vector<std::uint32_t>{1});
}

TEST_CASE("campaign: lossy worm is seeded and monotone") {
  const auto& s = setup();
  WormConfig c;
  c.node_count = 6;
  c.topology = Topology::Complete;
  c.loss_probability = 0.1;
  c.rng_seed = 42;
  c.max_rounds = 8;
  const auto a = simulate_worm(s.image, s.malware, c);
  const auto b = simulate_worm(s.image, s.malware, c);
  CHECK(a == b);
  CHECK(a.incomplete_image_events > 0);
  for (std::size_t i = 1; i < a.infected_per_round.size(); ++i) {
    CHECK(a.infected_per_round[i] >= a.infected_per_round[i - 1]);
  }

  c.loss_probability = 0.005;
  c.max_rounds = 64;
  const auto light = simulate_worm(s.image, s.malware, c);
  CHECK(light.rounds_to_full_infection.has_value());
  for (std::size_t i = 1; i < light.infected_per_round.size(); ++i) {
    CHECK(light.infected_per_round[i] >= light.infected_per_round[i - 1]);
  }
}

TEST_CASE("campaign: worm configuration errors") {
  const auto code = [](WormConfig c) {
    try {
      c.validate();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::IoError;
  };
  WormConfig c;
  c.loss_probability = 1.0;
  CHECK(code(c) == ErrorCode::InvalidArgument);
  c = {};
  c.node_count = 0;
  CHECK(code(c) == ErrorCode::InvalidArgument);
  c = {};
  c.initial_infected = 10;
  CHECK(code(c) == ErrorCode::InvalidArgument);
  CHECK(code(WormConfig{}) == ErrorCode::IoError);
}
