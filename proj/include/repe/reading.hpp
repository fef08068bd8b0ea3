#pragma once

// Linear reading of concepts and functions from hidden states: collect
// per-layer activity at designated token positions, reduce stimulus pairs to
// normalized differences, fit one direction per layer, orient it with a
// handful of labels, pick a working layer, and score or scan new text.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "repe/numerics.hpp"
#include "repe/stimulus.hpp"

namespace repe {

enum class TokenPolicy { LastToken, ConceptToken };

enum class FitMethod { PCA, KMeans, MeanDiff, LogReg, PromptDiff };

std::string to_string(TokenPolicy policy);
std::string to_string(FitMethod method);
TokenPolicy token_policy_from_string(const std::string& s);
FitMethod fit_method_from_string(const std::string& s);

struct ActivitySet {
    std::vector<Matrix> layers;  // n_layers + 1 matrices with aligned rows
    TokenPolicy policy = TokenPolicy::LastToken;
    std::string provenance;
    std::vector<std::size_t> row_record;  // source record index per row
    std::size_t skipped = 0;              // records dropped for context overflow
};

// Per-layer normalized difference rows ready for an unsupervised fitter.
struct DifferenceSet {
    std::vector<Matrix> layers;
    std::size_t dropped = 0;  // zero-difference rows removed, all layers
};

struct LayerReading {
    Vec direction;  // unit norm when usable
    int sign = 1;
    StandardizationStats stats;
    bool usable = false;
    std::string error;                   // fitter failure note when unusable
    Vec explained_variance_ratio;        // PCA only
};

struct ReadingVector {
    std::vector<LayerReading> layers;  // one per residual tap
    FitMethod method = FitMethod::PCA;
    TokenPolicy policy = TokenPolicy::LastToken;
    std::string provenance;
    std::optional<std::size_t> selected_layer;
    bool low_confidence = false;  // best validation accuracy under 0.6
};

struct ScanResult {
    std::vector<std::size_t> layer_set;
    Matrix scores;  // layer_set.size() rows, one column per token position
    Vec aggregate;  // exact sum over the layer rows
    bool negated = false;
};

// --- collection -----------------------------------------------------------

// Records carrying a plant get it injected during the forward pass.
ActivitySet collect_concept_activity(const ModelBundle& model, const ConceptTemplate& tpl,
                                     const std::vector<StimulusRecord>& records,
                                     TokenPolicy policy);

// One aligned row per (record, truncation k), k = 1..min(|output|, max_trunc),
// reading the last token of each side's render. Optional side plans model a
// prompt that steers activity (applied on top of any per-record plant).
std::pair<ActivitySet, ActivitySet> collect_function_activity(
    const ModelBundle& model, const FunctionTemplate& tpl,
    const std::vector<StimulusRecord>& records, std::size_t max_trunc = 40,
    const EditPlan* plus_plan = nullptr, const EditPlan* minus_plan = nullptr);

// --- difference construction ----------------------------------------------

DifferenceSet build_differences(const ActivitySet& a,
                                const std::vector<std::pair<std::size_t, std::size_t>>& pairs);
// Alternating-sign rows (-1)^i * (plus[i] - minus[i]), i the aligned row index.
DifferenceSet build_function_differences(const ActivitySet& plus, const ActivitySet& minus);

// --- fitting ---------------------------------------------------------------

// Unsupervised fit (PCA or KMeans) on difference rows; stats come from the
// raw activity rows so test-time states standardize against training moments.
ReadingVector fit_reading_vector(const DifferenceSet& diffs, const ActivitySet& raw,
                                 FitMethod method, std::uint64_t seed = 0);
// Supervised fit (MeanDiff or LogReg) directly on labeled activity rows.
ReadingVector fit_reading_vector_labeled(const ActivitySet& raw, const std::vector<int>& labels,
                                         FitMethod method);
// PromptDiff: difference of mean experimental and mean reference activity.
ReadingVector fit_reading_vector_prompt(const ActivitySet& plus, const ActivitySet& minus);

void determine_sign(ReadingVector& rv, const ModelBundle& model, const ConceptTemplate& tpl,
                    const std::vector<StimulusRecord>& labeled);

// --- scoring ----------------------------------------------------------------

// sign * <standardized state, direction> at one layer.
double score_state(const ReadingVector& rv, std::size_t layer, const Vec& state);
// Raw text is read at its last token.
double score(const ReadingVector& rv, const ModelBundle& model, const std::string& text,
             std::size_t layer);
// Policy-aware: renders the record through the template and honors its plant.
// Extra steps run after the plant, in order.
double score_record(const ReadingVector& rv, const ModelBundle& model,
                    const ConceptTemplate& tpl, const StimulusRecord& record, std::size_t layer,
                    const EditPlan* extra = nullptr);

int predict_binary(const ReadingVector& rv, const ModelBundle& model, const std::string& text,
                   std::size_t layer, double threshold = 0.0);
int predict_binary_record(const ReadingVector& rv, const ModelBundle& model,
                          const ConceptTemplate& tpl, const StimulusRecord& record,
                          std::size_t layer, double threshold = 0.0);
// 0 picks a, 1 picks b; ties go to a.
int predict_pairwise(const ReadingVector& rv, const ModelBundle& model, const std::string& a,
                     const std::string& b, std::size_t layer);
int predict_pairwise_record(const ReadingVector& rv, const ModelBundle& model,
                            const ConceptTemplate& tpl, const StimulusRecord& a,
                            const StimulusRecord& b, std::size_t layer);

struct LayerSelection {
    std::size_t layer = 0;
    double accuracy = 0.0;
    bool low_confidence = false;
    std::vector<double> per_layer_accuracy;  // -1 marks unusable layers
};

// Picks the usable layer with the best validation accuracy (ties go deepest)
// and stores it on the reading vector.
LayerSelection select_layer(ReadingVector& rv, const ModelBundle& model,
                            const ConceptTemplate& tpl,
                            const std::vector<StimulusRecord>& validation);

ScanResult scan_tokens(const ReadingVector& rv, const ModelBundle& model, const std::string& text,
                       const std::vector<std::size_t>& layer_set, bool negate,
                       const EditPlan* plan = nullptr);

// Central half of the block taps, matching the middle-layer convention used
// for deep hosts (a 40-layer model scans layers 11..30).
std::vector<std::size_t> middle_band(std::size_t n_layers);

// --- persistence -------------------------------------------------------------

nlohmann::json reading_to_json(const ReadingVector& rv);
ReadingVector reading_from_json(const nlohmann::json& j);
void save_reading(const ReadingVector& rv, const std::string& path);
ReadingVector load_reading(const std::string& path);

}  // namespace repe
