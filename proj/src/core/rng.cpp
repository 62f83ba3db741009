// SPDX-License-Identifier: Apache-2.0
#include "stn/rng.hpp"

#include <sstream>

#include "stn/error.hpp"

namespace stn {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::string_view name) {
  const std::uint64_t tag = fnv1a(name);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  engine_.seed(seq);
}

std::string RngStream::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void RngStream::deserialize(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  require(!is.fail(), ErrorCode::kIo, "corrupt random stream state");
}

}  // namespace stn
