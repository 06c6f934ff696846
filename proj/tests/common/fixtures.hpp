#pragma once

// Helpers shared by the unit and acceptance tests.

#include "gapelab/model.hpp"

#include <string>

namespace gapelab::testing {

/// Base-model parameters that reproduce a GAPE model with its gates switched
/// off: every head's q/k columns are copied and padded with two zero columns,
/// so the base head (width d) sees the same dot products, scaled by the same
/// 1/sqrt(d), as the GAPE head's semantic part (width d - 2).
template <class T>
BasicParamStore<T> base_equivalent(const BasicParamStore<T>& gape, const ModelConfig& gcfg, ModelConfig& base_cfg) {
    base_cfg = gcfg;
    base_cfg.gape_enabled = false;
    const std::size_t H = gcfg.n_head, C = gcfg.d_model, ds = gcfg.semantic_dim(), d = gcfg.head_dim();
    BasicParamStore<T> out;
    for (const auto& e : gape.entries()) {
        if (e.name.find(".gape.") != std::string::npos) continue;
        const bool is_w = e.name.ends_with("attn.wq") || e.name.ends_with("attn.wk");
        const bool is_b = e.name.ends_with("attn.bq") || e.name.ends_with("attn.bk");
        if (is_w) {
            auto& w = out.add(e.name, {C, H * d});
            for (std::size_t r = 0; r < C; ++r)
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t c = 0; c < ds; ++c) w.data[r * H * d + h * d + c] = e.data[r * H * ds + h * ds + c];
        } else if (is_b) {
            auto& b = out.add(e.name, {H * d});
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t c = 0; c < ds; ++c) b.data[h * d + c] = e.data[h * ds + c];
        } else {
            out.add(e.name, e.shape).data = e.data;
        }
    }
    return out;
}

/// Drives every query gate to zero: w_g = 0 and b_g = -1e6, so g = softplus(-1e6) = 0.
template <class T>
void switch_off_gates(BasicParamStore<T>& p, const ModelConfig& cfg) {
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
        const std::string pre = "h" + std::to_string(l) + ".gape.";
        std::fill(p.get(pre + "wg").data.begin(), p.get(pre + "wg").data.end(), T(0));
        std::fill(p.get(pre + "bg").data.begin(), p.get(pre + "bg").data.end(), T(-1e6));
    }
}

} // namespace gapelab::testing
