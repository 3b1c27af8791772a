#pragma once

#include <stdexcept>
#include <string>

namespace cirm {

// All library errors carry a stable machine-readable kind next to the
// human-readable message, so callers (and the CLI) can act on the category
// without parsing prose.
class Error : public std::runtime_error {
public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

private:
  std::string kind_;
};

}  // namespace cirm
