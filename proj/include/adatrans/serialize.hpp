#pragma once

#include <string>

#include "adatrans/effect.hpp"

namespace adatrans {

// Self-describing JSON archive for the three fitted levels. Doubles use the
// shortest round-trip representation, so a load on the writing machine
// reproduces every prediction bit-identically.
void save_bundle(const ModelBundle& bundle, const std::string& path,
                 const std::string& config_echo = "", std::uint64_t seed = 0);

ModelBundle load_bundle(const std::string& path);

}  // namespace adatrans
