#pragma once

#include "blockpipe/diffusion.hpp"

namespace blockpipe {

struct AttentionPattern {
    enum class Kind { Bidirectional, BlockCausal };

    Kind kind = Kind::Bidirectional;
    BlockLayout layout; // meaningful for BlockCausal only

    static AttentionPattern bidirectional() { return {Kind::Bidirectional, {}}; }
    static AttentionPattern block_causal(const BlockLayout& layout) { return {Kind::BlockCausal, layout}; }
    bool is_block_causal() const noexcept { return kind == Kind::BlockCausal; }
};

} // namespace blockpipe
