#pragma once

// A small decoder-only transformer built for instrumented inference rather
// than quality: pre-norm RMSNorm blocks, causal multi-head attention, a
// SiLU-gated MLP, learned absolute positions, and a byte-level tokenizer
// (256 byte values plus BOS). The unembedding is tied to the token
// embedding. All activations are computed in double precision; weights are
// stored as f32 in the container format.
//
// The residual stream is captured per layer: layer 0 is the embedding plus
// position output and layer l is the stream after block l, so a model with
// n_layers blocks exposes n_layers + 1 states. Edit plans transform the
// stream in place right after the tap they name, and captured states reflect
// the edits.

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "repe/numerics.hpp"

namespace repe {

constexpr int kBosToken = 256;
constexpr std::size_t kSpanOpenEnd = std::numeric_limits<std::size_t>::max();

using TokenIds = std::vector<int>;

struct ModelConfig {
    std::size_t vocab_size = 257;
    std::size_t d_model = 32;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    std::size_t max_context = 256;
    double norm_epsilon = 1e-5;

    void validate() const;
};

struct LayerWeights {
    Vec attn_norm_gain;
    Matrix wq, wk, wv, wo;  // each d_model x d_model
    Vec mlp_norm_gain;
    Matrix mlp_up;    // 2*d_ff x d_model, rows [0,d_ff) gate / [d_ff,2*d_ff) up
    Matrix mlp_down;  // d_model x d_ff
};

struct ModelBundle {
    ModelConfig config;
    Matrix tok_embedding;  // vocab x d_model, also the unembedding
    Matrix pos_embedding;  // max_context x d_model
    std::vector<LayerWeights> layers;
    Vec final_norm_gain;
};

struct HiddenStates {
    std::vector<Matrix> layers;  // n_layers + 1 entries of T x d_model

    HiddenStates zeros_like() const;
};

struct ForwardResult {
    HiddenStates hidden;
    Matrix logits;  // T x vocab
};

// --- activation edits ---------------------------------------------------

enum class SpanKind {
    All,        // every position, including ones appended during generation
    Range,      // [begin, end), end may be kSpanOpenEnd
    LastToken,  // final position of the current sequence
};

struct TokenSpan {
    SpanKind kind = SpanKind::All;
    std::size_t begin = 0;
    std::size_t end = kSpanOpenEnd;
};

enum class OpType { LinearCombination, Piecewise, Projection };

struct Operator {
    OpType type = OpType::LinearCombination;
    int sign = 1;              // LinearCombination only
    double coefficient = 1.0;  // ignored by Projection
};

struct EditStep {
    std::size_t layer = 0;  // residual tap index, 0..n_layers
    Operator op;
    // One controller broadcasts across the span; otherwise one vector per
    // span position (contrast plans are position dependent).
    std::vector<Vec> controllers;
    TokenSpan span;
};

struct EditPlan {
    std::vector<EditStep> steps;
};

void validate_plan(const ModelConfig& config, const EditPlan& plan);
void apply_operator(Vec& state, const Operator& op, const Vec& controller);

// --- low-rank adapters ----------------------------------------------------

enum class AdapterTarget { Query, Value };

struct Adapter {
    std::size_t layer = 0;  // block index, 1..n_layers
    AdapterTarget target = AdapterTarget::Query;
    Matrix a;  // rank x d_model
    Matrix b;  // d_model x rank
};

struct AdapterSet {
    std::vector<Adapter> items;

    static AdapterSet zeros(const ModelConfig& config, const std::vector<std::size_t>& layers,
                            std::size_t rank);
    // Random gaussian A, zero B: the adapted model starts exactly at the base.
    static AdapterSet lora_init(const ModelConfig& config,
                                const std::vector<std::size_t>& layers, std::size_t rank,
                                std::uint64_t seed);

    const Adapter* find(std::size_t layer, AdapterTarget target) const;
    Adapter* find(std::size_t layer, AdapterTarget target);
    AdapterSet zeros_like() const;
};

// --- core operations ------------------------------------------------------

TokenIds tokenize(const std::string& text);
std::string detokenize(const TokenIds& tokens);

ModelBundle init_model(const ModelConfig& config, std::uint64_t seed);

void save_model(const ModelBundle& model, const std::string& path);
ModelBundle load_model(const std::string& path);
void save_adapters(const AdapterSet& adapters, const std::string& path);
AdapterSet load_adapters(const std::string& path);

ForwardResult forward_capture(const ModelBundle& model, const TokenIds& tokens,
                              const AdapterSet* adapters = nullptr);
ForwardResult forward_with_edits(const ModelBundle& model, const TokenIds& tokens,
                                 const EditPlan& plan, const AdapterSet* adapters = nullptr);

// Greedy decoding; ties resolve to the lowest token id. Returns only the
// newly generated ids.
TokenIds generate(const ModelBundle& model, const TokenIds& prompt, std::size_t n_new,
                  const EditPlan* plan = nullptr, const AdapterSet* adapters = nullptr);

double logprob_continuation(const ModelBundle& model, const std::string& prompt,
                            const std::string& continuation,
                            const AdapterSet* adapters = nullptr);

// Reverse-mode gradients of a hidden-state loss with respect to adapter
// parameters only. The closure receives the captured states and accumulates
// d(loss)/d(state) into a zeroed gradient buffer of the same shape.
using HiddenLossFn = std::function<double(const HiddenStates&, HiddenStates&)>;

double grad_adapters(const ModelBundle& model, const AdapterSet& adapters,
                     const TokenIds& tokens, const HiddenLossFn& loss, AdapterSet& grads);

ModelBundle merge_adapters(const ModelBundle& model, const AdapterSet& adapters);

}  // namespace repe
