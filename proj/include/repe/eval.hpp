#pragma once

// Evidence harness. Held-out correlation, generation-side manipulation,
// projection-based termination with add-back recovery, the verbalized
// heuristic baseline, risk composition over consequences, and threshold
// reports over token scans.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "repe/control.hpp"
#include "repe/reading.hpp"

namespace repe {

struct EvalReport {
    std::string category;  // correlation | manipulation | termination | recovery
    std::string metric;
    double value = 0.0;
    std::map<std::size_t, double> per_layer;
    nlohmann::json config;  // enough settings to re-run the measurement
    std::string notes;
};

nlohmann::json eval_report_to_json(const EvalReport& report);

// Held-out accuracy at one layer. Pairwise when every record carries a pair
// id and each pair holds one record per class, binary otherwise.
EvalReport correlation_eval(const ReadingVector& rv, const ModelBundle& model,
                            const std::vector<StimulusRecord>& records,
                            const ConceptTemplate& tpl, std::size_t layer);

using TextScorer = std::function<double(const std::string&)>;

// Counts occurrences of one byte in the generated text.
TextScorer marker_count_scorer(char marker);

// Fraction of prompts whose +coefficient generation outscores the
// -coefficient one at the selected layer; ties count half.
EvalReport manipulation_eval(const ModelBundle& model, const ReadingVector& rv,
                             const std::vector<std::string>& prompts, const TextScorer& scorer,
                             double coefficient, std::size_t n_new = 40);

// Accuracy drop when per-layer directions are projected out of the stream
// while scoring at the selected layer. Directions default to rv's own;
// project_rv substitutes a different set.
EvalReport termination_eval(const ModelBundle& model, const ReadingVector& rv,
                            const std::vector<StimulusRecord>& records,
                            const ConceptTemplate& tpl, const std::vector<std::size_t>& layers,
                            const ReadingVector* project_rv = nullptr);

// Project out, then add the signed direction back: +coefficient for label-1
// records, -coefficient for label-0. Reports the recovered fraction of the
// termination drop, clipped to [0, 1]. A drop under 0.1 is not a usable
// baseline and raises NotApplicable.
EvalReport recovery_eval(const ModelBundle& model, const ReadingVector& rv,
                         const std::vector<StimulusRecord>& records, const ConceptTemplate& tpl,
                         const std::vector<std::size_t>& layers, double add_back_coefficient,
                         const ReadingVector* project_rv = nullptr);

struct HeuristicScale {
    std::vector<std::string> expressions;
    std::vector<double> values;  // strictly increasing, endpoints -1 and 1

    void validate() const;
};

// Evenly spaced values over [-1, 1] for the given expressions.
HeuristicScale make_heuristic_scale(std::vector<std::string> expressions);
HeuristicScale heuristic_scale_7();   // Very low .. Very high
HeuristicScale heuristic_scale_13();  // almost no chance .. almost certain

// "Please answer using EXACTLY one of the following" prompt around a scenario.
std::string heuristic_prompt(const std::string& concept_name, const std::string& scenario,
                             const HeuristicScale& scale);

// Scale values weighted by the softmax of each expression's mean per-token
// continuation log probability. Length normalization keeps an
// equal-probability model at exactly zero.
double heuristic_score(const ModelBundle& model, const std::string& prompt,
                       const HeuristicScale& scale);

// Expected downside over consequences: probability scores act as softmax
// logits and each consequence contributes max(0, -utility score).
double compose_risk(const ReadingVector& utility_rv, const ReadingVector& probability_rv,
                    const ModelBundle& model, const std::string& state_action,
                    const std::vector<std::string>& consequences);

struct MonitorSpan {
    std::size_t begin = 0;
    std::size_t end = 0;  // exclusive
    double peak = 0.0;
    std::size_t peak_pos = 0;
};

// Maximal runs of aggregate positions strictly above the threshold.
std::vector<MonitorSpan> monitor_report(const ScanResult& scan, double threshold);

// Mean + 2 std of the aggregate row, the default flagging bar.
double default_monitor_threshold(const ScanResult& scan);

}  // namespace repe
