#pragma once

#include <string>

#include "cbd/network.hpp"

namespace cbd {

// Binary model file, magic "CBDL": little-endian header with a config text
// block, then every named tensor in fixed order. Round trips are
// bit-identical on every float.
void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);

}  // namespace cbd
