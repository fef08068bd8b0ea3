#pragma once

// Task templates and datasets. Concept templates wrap a stimulus in a scan
// prompt; function templates wrap an (instruction, output) pair in a role-
// tagged dialogue under an experimental or reference prompt. Records travel
// as JSONL. Planted fixtures supply a random model plus a labeled dataset
// whose residual stream receives a known direction during collection, giving
// downstream stages a ground truth to recover.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "repe/model.hpp"

namespace repe {

struct ConceptTemplate {
    std::string concept_name;
    std::string prefix;  // rendered before the stimulus; <concept> substituted
    std::string suffix;  // rendered after the stimulus; <concept> substituted

    // Splits full template text at its single <stimulus> placeholder.
    static ConceptTemplate from_text(const std::string& concept_name, const std::string& text);
};

ConceptTemplate default_concept_template(const std::string& concept_name);

struct FunctionTemplate {
    // Each side holds full dialogue text with <instruction> and <output>
    // placeholders; rendering cuts the text at the output slot.
    std::string experimental;
    std::string reference;

    void validate() const;
};

FunctionTemplate default_honesty_template();

enum class PromptSide { Experimental, Reference };

struct StimulusRecord {
    std::optional<std::string> text;         // concept use
    std::optional<std::string> instruction;  // function use
    std::optional<std::string> output;
    std::optional<int> label;  // 0 or 1
    std::optional<std::int64_t> pair_id;

    // Residual-stream injection honored during activity collection; carried
    // with the record so synthetic datasets stay self-contained on disk.
    struct Plant {
        std::size_t layer = 0;
        Vec vector;
        TokenSpan span{SpanKind::LastToken, 0, 0};
    };
    std::optional<Plant> plant;

    nlohmann::json extra = nlohmann::json::object();  // unknown fields, kept

    void validate() const;
};

std::string render_concept(const ConceptTemplate& tpl, const StimulusRecord& s);

struct ConceptRender {
    std::string text;
    std::size_t concept_begin = 0;  // byte span of the trailing concept slot
    std::size_t concept_end = 0;
};
ConceptRender render_concept_ex(const ConceptTemplate& tpl, const StimulusRecord& s);

struct FunctionRender {
    std::string text;
    std::size_t response_begin = 0;  // byte offset where a_prefix starts
};
// Shared by function templates and the control-template triples.
FunctionRender render_template_text(const std::string& tpl_text, const std::string& q,
                                    const std::string& a_prefix);
std::string render_function(const FunctionTemplate& tpl, const std::string& q,
                            const std::string& a_prefix, PromptSide which);
FunctionRender render_function_ex(const FunctionTemplate& tpl, const std::string& q,
                                  const std::string& a_prefix, PromptSide which);

// Token-truncated prefixes a^k of an output, k = 1..|a| (byte tokens).
std::vector<std::string> truncations(const std::string& a);

enum class PairMode { Random, Labeled };

// Disjoint index pairs from a seeded shuffle. Random mode ignores labels and
// leaves the post-shuffle tail element unpaired for odd n; Labeled mode pairs
// each label-1 record with a label-0 record (pair order: high first).
std::vector<std::pair<std::size_t, std::size_t>> pair_random(
    const std::vector<StimulusRecord>& records, std::uint64_t seed,
    PairMode mode = PairMode::Random);

// Matched pairs recovered from pair_id metadata (exactly two records per id).
// Orientation flips on every other pair so the resulting difference set is
// mean-free, which centered fitters need. Never consults labels.
std::vector<std::pair<std::size_t, std::size_t>> pairs_from_ids(
    const std::vector<StimulusRecord>& records);

struct PlantedFixture {
    ModelBundle model;
    std::vector<StimulusRecord> records;
    Vec direction;  // unit ground truth d
    std::size_t layer = 0;
    double coefficient = 0.0;
    double sigma = 0.0;
    std::uint64_t seed = 0;

    std::vector<EditPlan> plans() const;
};

PlantedFixture make_planted_fixture(std::uint64_t seed, const ModelConfig& config,
                                    std::size_t n_records, double coefficient, double sigma,
                                    std::size_t layer);

// Plan carried by a single record (empty when it has no plant).
EditPlan plan_for_record(const StimulusRecord& record);
std::vector<EditPlan> plans_for_records(const std::vector<StimulusRecord>& records);

// A model whose unembedding row for `marker` is gain * d: pushing the
// residual stream along +d makes the marker token win the argmax, so
// steering effects are visible in generated text.
struct SteeringFixture {
    ModelBundle model;
    Vec direction;
    int marker = 0;
    double gain = 0.0;
    std::uint64_t seed = 0;
};

SteeringFixture make_steering_fixture(std::uint64_t seed, const ModelConfig& config, int marker,
                                      double gain);

std::vector<StimulusRecord> load_jsonl(const std::string& path);
void save_jsonl(const std::vector<StimulusRecord>& records, const std::string& path);
nlohmann::json record_to_json(const StimulusRecord& record);
StimulusRecord record_from_json(const nlohmann::json& j, std::size_t line_no);

}  // namespace repe
