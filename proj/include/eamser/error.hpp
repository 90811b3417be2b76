#pragma once

#include <stdexcept>
#include <string>

namespace eamser {

enum class Errc {
  malformed_wav,
  unsupported_encoding,
  io_error,
  out_of_bounds,
  invalid_argument,
  sample_rate_mismatch,
  silent_segment,
  segment_too_short,
  invalid_class,
  shape_mismatch,
  domain_error,
  degenerate_batch,
  empty_dataset,
  parse_error,
  unknown_label,
  bad_magic,
  version_mismatch,
  truncated_file,
  too_few_groups,
  dimension_mismatch,
};

const char* errc_name(Errc code) noexcept;

// Every failure raised by the library carries one of the codes above so the
// CLI can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace eamser
