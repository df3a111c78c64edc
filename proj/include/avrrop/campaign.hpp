#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "avrrop/chains.hpp"
#include "avrrop/emulator.hpp"
#include "avrrop/fakestack.hpp"

namespace avrrop {

enum class FailureStage : std::uint8_t { InjectionByte, Pivot, Flash, Execute };

struct Failure {
  FailureStage stage = FailureStage::InjectionByte;
  std::uint32_t index = 0;  // InjectionByte only

  std::string describe() const;
  bool operator==(const Failure&) const = default;
};

struct AttackReport {
  std::uint32_t packets_sent = 0;
  std::uint32_t reboots_observed = 0;
  bool schedule_verified = false;
  bool flash_verified = false;
  bool malware_executed = false;
  std::optional<Failure> failure_stage;
  std::string detail;

  bool success() const { return !failure_stage.has_value(); }
  bool operator==(const AttackReport&) const = default;
};

std::string report_json(const AttackReport& report);

/// Chains synthesized once per firmware image.
struct AttackKit {
  GadgetChain injection;
  GadgetChain reprogram;
  SynthesisConstraints constraints;
};

AttackKit prepare_attack(const FirmwareImage& image, const SynthesisConstraints& constraints = {});

struct AttackOptions {
  PostAction post_action = PostAction::ExecuteMalware;
  // Harness-only mode: the fake stack rides in one oversized packet behind the
  // reprogramming payload, so no reboot happens between injection and pivot.
  bool single_packet = false;
  // IO register the malware sets as proof of execution (bit 2).
  std::uint8_t sentinel_io = 0x1a;
  // Returns true when the next packet is lost in transit.
  std::function<bool()> drop_packet;
};

/// Sends one injection packet per schedule entry. After each, the run must end
/// in a soft reboot with every byte so far in place; then the node reboots.
AttackReport run_byte_injection(MachineState& machine, const GadgetChain& chain,
                                const InjectionSchedule& schedule,
                                const SynthesisConstraints& constraints = {},
                                const std::function<bool()>& drop_packet = {});

AttackReport run_full_attack(MachineState& machine, const AttackKit& kit,
                             const std::vector<std::uint8_t>& malware, std::uint32_t dest_m,
                             std::uint16_t fsp, const AttackOptions& opts = {});

/// Same as run_full_attack; the machine is expected to have cleanup enabled.
AttackReport evaluate_countermeasure(MachineState& machine, const AttackKit& kit,
                                     const std::vector<std::uint8_t>& malware, std::uint32_t dest_m,
                                     std::uint16_t fsp, const AttackOptions& opts = {});

enum class Topology : std::uint8_t { Line, Ring, Complete };

struct WormConfig {
  std::uint32_t node_count = 10;
  Topology topology = Topology::Line;
  double loss_probability = 0.0;
  std::uint64_t rng_seed = 1;
  std::uint32_t initial_infected = 0;
  std::uint32_t max_rounds = 64;
  std::uint32_t dest_m = 0x8000;
  std::uint16_t fsp = 0x0400;

  void validate() const;  // InvalidArgument
};

struct PropagationReport {
  std::vector<std::uint32_t> infected_per_round;  // index 0 = before the first round
  std::optional<std::uint32_t> rounds_to_full_infection;
  std::uint64_t packets_transmitted = 0;
  std::uint64_t incomplete_image_events = 0;

  bool operator==(const PropagationReport&) const = default;
};

std::vector<std::vector<std::uint32_t>> adjacency(std::uint32_t nodes, Topology topology);

/// Every node runs the given firmware; infected nodes attack susceptible
/// neighbours once per round in ascending id order.
PropagationReport simulate_worm(const FirmwareImage& image, const std::vector<std::uint8_t>& malware,
                                const WormConfig& config);

std::string propagation_json(const PropagationReport& report, const WormConfig& config);
std::string propagation_csv(const PropagationReport& report);

}  // namespace avrrop
