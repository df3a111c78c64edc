#include "avrrop/error.hpp"

namespace avrrop {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingTrailingWord: return "MissingTrailingWord";
    case ErrorCode::OperandOutOfRange: return "OperandOutOfRange";
    case ErrorCode::UnsupportedMnemonic: return "UnsupportedMnemonic";
    case ErrorCode::SyntaxError: return "SyntaxError";
    case ErrorCode::RangeOutOfBounds: return "RangeOutOfBounds";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::AddressOverflow: return "AddressOverflow";
    case ErrorCode::MalformedMetadata: return "MalformedMetadata";
    case ErrorCode::UnmodeledInstruction: return "UnmodeledInstruction";
    case ErrorCode::NoChainFound: return "NoChainFound";
    case ErrorCode::ConstraintUnsatisfiable: return "ConstraintUnsatisfiable";
    case ErrorCode::PayloadTooLong: return "PayloadTooLong";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::MalwareTooLarge: return "MalwareTooLarge";
    case ErrorCode::UnalignedDestination: return "UnalignedDestination";
    case ErrorCode::RegionCollision: return "RegionCollision";
    case ErrorCode::PacketTooLarge: return "PacketTooLarge";
    case ErrorCode::MissingSymbol: return "MissingSymbol";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

}  // namespace avrrop
