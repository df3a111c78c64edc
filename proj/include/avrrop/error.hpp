#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace avrrop {

enum class ErrorCode {
  // isa
  MissingTrailingWord,
  OperandOutOfRange,
  UnsupportedMnemonic,
  SyntaxError,
  RangeOutOfBounds,
  // firmware
  ChecksumMismatch,
  MalformedRecord,
  AddressOverflow,
  MalformedMetadata,
  // gadgets
  UnmodeledInstruction,
  // chains
  NoChainFound,
  ConstraintUnsatisfiable,
  PayloadTooLong,
  InvalidArgument,
  // fakestack
  MalwareTooLarge,
  UnalignedDestination,
  RegionCollision,
  // emulator
  PacketTooLarge,
  MissingSymbol,
  // io
  IoError,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the toolkit carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace avrrop
