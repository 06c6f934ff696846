#pragma once

#include "gapelab/gape.hpp"
#include "gapelab/numerics.hpp"
#include "gapelab/posenc.hpp"

#include <array>
#include <cstddef>
#include <optional>

namespace gapelab {

struct GapeSpec {
    GateParams params;
    double T = 1.0;
};

/// One head of causal attention. q and k carry the semantic part only; with
/// GAPE the effective head dimension is q.cols() + 2.
struct AttentionInputs {
    Matrix q;
    Matrix k;
    Matrix v;
    Positions positions;  // empty means 0..L-1
    EncodingKind kind;
    std::size_t head = 0;  // selects the ALiBi slope
    std::optional<GapeSpec> gape;
};

struct AttentionOutput {
    Matrix context;
    Matrix weights;  // L x L, zero above the diagonal
    Matrix logits;   // L x L, zero above the diagonal
};

/// How the GAPE bias reaches the logits.
enum class MaskPath {
    ExplicitM,       // s + M, materialized
    ExplicitMHat,    // s + M^, materialized
    FusedAugmented,  // rank-2 augmented q/k, plain scaled dot product
};

AttentionOutput attend(const AttentionInputs& inputs, MaskPath path = MaskPath::ExplicitM);

struct KvCacheShape {
    std::array<std::size_t, 4> k{};  // batch, heads, length, head_dim
    std::array<std::size_t, 4> v{};
    std::size_t elements() const;
    bool operator==(const KvCacheShape&) const = default;
};

/// Cached K/V tensors for incremental decoding. GAPE's routing coordinates
/// live inside the head dimension, so the shape does not depend on it.
KvCacheShape kv_cache_shapes(const EncodingKind& kind, bool with_gape, std::size_t context_len,
                             std::size_t n_heads, std::size_t head_dim, std::size_t batch = 1);

} // namespace gapelab
