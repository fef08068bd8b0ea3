#pragma once

// Behavior control. Steering plans built from prompt differences, the
// iterative contrast-vector procedure, controlled decoding, and low-rank
// adapter training that pulls a model's hidden states toward contrast
// targets.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "repe/reading.hpp"
#include "repe/stimulus.hpp"

namespace repe {

// Template triple: neutral wrapper plus the two contrasting wrappers.
struct ContrastTemplates {
    std::string base;
    std::string experimental;
    std::string reference;

    void validate() const;  // each text carries exactly one <output>
};

ContrastTemplates default_contrast_templates();

struct ContrastSpec {
    ContrastTemplates templates;
    std::vector<std::size_t> layers;  // target taps, ascending
    double coefficient = 0.25;
    // Restricts which base-sequence positions receive controllers. Positions
    // outside the aligned response region are never edited; All means the
    // whole response (or the final prompt token when the response is empty).
    TokenSpan span{SpanKind::All, 0, kSpanOpenEnd};
};

// Controller per layer = last-token states of the task prompt minus the
// reference prompt, added over every position including generated ones.
EditPlan make_actadd_plan(const ModelBundle& model, const std::string& task_prompt,
                          const std::string& reference_prompt,
                          const std::vector<std::size_t>& layers, double coefficient);

// Iterative contrast plan: walk the target layers in ascending order, run the
// experimental and reference renders with all previously committed steps
// applied (spans shifted into each render's frame), difference the states at
// the current layer, and commit that position-dependent controller.
EditPlan make_contrast_plan(const ModelBundle& model, const std::string& q,
                            const std::string& a_prefix, const ContrastSpec& spec);

// Greedy decoding under a fixed plan; returns the generated text.
std::string controlled_generate(const ModelBundle& model, const std::string& prompt,
                                const EditPlan& plan, std::size_t n_new,
                                const AdapterSet* adapters = nullptr);

// Contrast control recomputes the plan at every decode step, since each new
// token extends the response the controllers are computed over.
std::string controlled_generate_contrast(const ModelBundle& model, const std::string& q,
                                         const ContrastSpec& spec, std::size_t n_new,
                                         const AdapterSet* adapters = nullptr);

struct LorraConfig {
    std::vector<std::size_t> edit_layers;    // adapter blocks, 1-based
    std::vector<std::size_t> target_layers;  // taps the loss reads
    double alpha = 5.0;
    double beta = 0.0;
    double lr = 3e-4;
    std::size_t steps = 60;   // useful range roughly 40..80
    std::size_t batch = 4;    // full-scale runs use 16
    std::size_t rank = 4;     // full-scale runs use 8
    std::vector<ContrastTemplates> templates;
    std::uint64_t seed = 0;

    void validate(const ModelConfig& config) const;
};

// Mean over the batch of the per-record sum, over target layers, of the
// Euclidean norm of the response-masked difference between adapted states
// and frozen targets  frozen(x) + alpha * (frozen(x+) - frozen(x-)) + beta * v_r.
double lorra_loss(const ModelBundle& model, const AdapterSet& adapters,
                  const std::vector<StimulusRecord>& batch, const ContrastTemplates& tpl,
                  const std::vector<std::size_t>& target_layers, double alpha, double beta,
                  const ReadingVector* rv = nullptr);

struct LorraResult {
    AdapterSet adapters;
    std::vector<std::pair<std::size_t, double>> curve;  // (step, batch loss)
};

LorraResult lorra_train(const ModelBundle& model, const std::vector<StimulusRecord>& data,
                        const LorraConfig& config, const ReadingVector* rv = nullptr);

}  // namespace repe
