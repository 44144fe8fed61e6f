#include "dcrl/rng.hpp"

#include <sstream>

namespace dcrl {

std::string Rng::serialize_state() const {
  std::ostringstream os;
  os << gen_;
  return os.str();
}

void Rng::restore_state(const std::string& s) {
  std::istringstream is(s);
  is >> gen_;
}

}  // namespace dcrl
