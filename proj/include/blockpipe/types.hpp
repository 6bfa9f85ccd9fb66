#pragma once

#include <cstdint>
#include <vector>

namespace blockpipe {

using Token = std::int32_t;
using Position = std::int32_t;
using TokenSeq = std::vector<Token>;
using PositionList = std::vector<Position>;

} // namespace blockpipe
