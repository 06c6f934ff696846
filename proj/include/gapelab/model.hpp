#pragma once

#include "gapelab/niah.hpp"
#include "gapelab/numerics.hpp"
#include "gapelab/params.hpp"
#include "gapelab/posenc.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gapelab {

/// Decoder-only transformer: token embedding, pre-norm blocks (attention +
/// 4x GELU MLP), final layer norm, untied output head. No learned position
/// embedding; position enters only through `kind` and GAPE.
struct ModelConfig {
    std::size_t n_layer = 2;
    std::size_t n_head = 2;
    std::size_t d_model = 64;
    std::size_t vocab_size = niah::NiahVocab::kSize;
    EncodingKind kind;
    bool gape_enabled = false;
    std::size_t T_train = 256;
    double dropout = 0.0;
    /// Gates read the rotated q/k instead of the raw projections.
    bool gates_on_rotated = false;

    std::size_t head_dim() const { return d_model / n_head; }
    /// q/k width per head: head_dim - 2 under GAPE (two routing coordinates).
    std::size_t semantic_dim() const { return gape_enabled ? head_dim() - 2 : head_dim(); }
    void validate() const;

    /// key=value lines, one per field, in a fixed order.
    std::string to_text() const;
    static ModelConfig from_text(const std::string& text);
    bool operator==(const ModelConfig& o) const { return to_text() == o.to_text(); }
};

/// Fresh parameters: N(0, 0.02) projections and embeddings, zero biases, unit
/// layer-norm gains; gate projections zero with b_g = -3, b_l = 0, gamma = 0.5413.
template <class T>
BasicParamStore<T> init_params(const ModelConfig& cfg, Rng& rng);

/// Whether AdamW should decay this entry (2-D weights outside the gates).
bool decays(const std::string& param_name, std::size_t rank);

/// Per-head record of one attention layer.
struct HeadTrace {
    Matrix weights;                 // rows = queries captured, cols = L
    std::size_t first_row = 0;      // query position of weights row 0
    std::vector<double> landmark;   // l_j, empty without GAPE
    std::vector<double> query_gate; // g_i for captured rows
    double amplitude = 0.0;         // Gamma_h
    Matrix q;                       // semantic q (unrotated) for captured rows
    Matrix k;                       // semantic k (unrotated), all positions
};

struct ForwardTrace {
    std::vector<std::vector<HeadTrace>> layers;  // [layer][head]
};

struct CaptureFlags {
    bool attention = false;
};

struct ForwardResult {
    Matrix logits;  // L x V
    std::optional<ForwardTrace> trace;
};

/// Full causal forward over every position.
template <class T>
ForwardResult forward(const BasicParamStore<T>& params, std::span<const niah::Token> tokens,
                      const ModelConfig& cfg, CaptureFlags capture = {});

/// Logits at the final position only; the last layer evaluates one query row.
template <class T>
std::vector<double> final_logits(const BasicParamStore<T>& params, std::span<const niah::Token> tokens,
                                 const ModelConfig& cfg, ForwardTrace* trace = nullptr);

template <class T>
struct LossAndGrad {
    double loss = 0.0;  // mean cross-entropy over the digit logits
    std::size_t correct = 0;
    BasicParamStore<T> grads;
};

/// Mean cross-entropy over the batch, restricted to the 10 digit logits at
/// the query position, with exact reverse-mode gradients.
template <class T>
LossAndGrad<T> loss_and_grad(const BasicParamStore<T>& params, std::span<const niah::NiahSample> batch,
                             const ModelConfig& cfg);

/// Same loss without gradients, through the full-sequence forward.
template <class T>
double loss_only(const BasicParamStore<T>& params, std::span<const niah::NiahSample> batch, const ModelConfig& cfg);

/// Digit logits (first 10 vocabulary entries) from a logits row.
std::vector<double> digit_logits(std::span<const double> vocab_logits);

/// Checkpoint: magic, version, config block, one record per entry, trailing
/// FNV-1a 64 checksum over all preceding bytes. Raw data is little-endian.
template <class T>
void checkpoint_save(const BasicParamStore<T>& params, const ModelConfig& cfg, const std::string& path);

struct LoadedCheckpoint {
    ModelConfig config;
    ParamStore params;  // data converted to float
    ParamStore64 params64;
    std::string dtype;  // "f32" or "f64" as stored
};

LoadedCheckpoint checkpoint_load(const std::string& path);
/// Loads and checks every entry against the layout `expected` implies.
LoadedCheckpoint checkpoint_load(const std::string& path, const ModelConfig& expected);

/// Throws naming the first entry whose name or shape differs from the layout of `cfg`.
template <class T>
void check_layout(const BasicParamStore<T>& params, const ModelConfig& cfg);

} // namespace gapelab
