#pragma once

#include <string>

namespace wscloc::util {

// SHA-256 hex digest of a byte string. Used for config canonicalization
// hashes in run manifests.
std::string sha256_hex(const std::string& data);

}  // namespace wscloc::util
