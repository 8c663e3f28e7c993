#include "cunet/rng.hpp"

#include <sstream>

#include "cunet/error.hpp"

namespace cunet {

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

Rng Rng::deserialize(const std::string& state) {
  Rng r;
  std::istringstream is(state);
  is >> r.engine_;
  if (is.fail()) throw FormatError("malformed RNG state");
  return r;
}

}  // namespace cunet
