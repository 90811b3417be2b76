#include "eamser/error.hpp"

namespace eamser {

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::malformed_wav: return "MalformedWav";
    case Errc::unsupported_encoding: return "UnsupportedEncoding";
    case Errc::io_error: return "IoError";
    case Errc::out_of_bounds: return "OutOfBounds";
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::sample_rate_mismatch: return "SampleRateMismatch";
    case Errc::silent_segment: return "SilentSegment";
    case Errc::segment_too_short: return "SegmentTooShort";
    case Errc::invalid_class: return "InvalidClass";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::domain_error: return "DomainError";
    case Errc::degenerate_batch: return "DegenerateBatch";
    case Errc::empty_dataset: return "EmptyDataset";
    case Errc::parse_error: return "ParseError";
    case Errc::unknown_label: return "UnknownLabel";
    case Errc::bad_magic: return "BadMagic";
    case Errc::version_mismatch: return "VersionMismatch";
    case Errc::truncated_file: return "TruncatedFile";
    case Errc::too_few_groups: return "TooFewGroups";
    case Errc::dimension_mismatch: return "DimensionMismatch";
  }
  return "Unknown";
}

}  // namespace eamser
