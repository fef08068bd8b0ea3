#include "repe/stimulus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "repe/rng.hpp"

namespace repe {

namespace {

constexpr const char* kConceptSlot = "<concept>";
constexpr const char* kStimulusSlot = "<stimulus>";
constexpr const char* kInstructionSlot = "<instruction>";
constexpr const char* kOutputSlot = "<output>";

std::size_t count_occurrences(const std::string& text, const std::string& what) {
    std::size_t n = 0;
    for (std::size_t pos = text.find(what); pos != std::string::npos;
         pos = text.find(what, pos + what.size()))
        ++n;
    return n;
}

// Substitutes every occurrence, recording the byte span of the last one.
struct Substituted {
    std::string text;
    bool any = false;
    std::size_t last_begin = 0;
    std::size_t last_end = 0;
};

Substituted substitute(const std::string& text, const std::string& slot,
                       const std::string& value) {
    Substituted out;
    std::size_t from = 0;
    for (std::size_t pos = text.find(slot); pos != std::string::npos;
         pos = text.find(slot, from)) {
        out.text.append(text, from, pos - from);
        out.any = true;
        out.last_begin = out.text.size();
        out.text += value;
        out.last_end = out.text.size();
        from = pos + slot.size();
    }
    out.text.append(text, from, std::string::npos);
    return out;
}

void rstrip(std::string& s) {
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\n' ||
                          s.back() == '\r'))
        s.pop_back();
}

const std::string& record_text(const StimulusRecord& s) {
    s.validate();
    if (!s.text) throw MissingField("record has no text field");
    return *s.text;
}

}  // namespace

ConceptTemplate ConceptTemplate::from_text(const std::string& concept_name, const std::string& text) {
    if (count_occurrences(text, kStimulusSlot) != 1)
        throw SchemaError("concept template needs exactly one <stimulus> placeholder");
    if (count_occurrences(text, kConceptSlot) == 0)
        throw SchemaError("concept template mentions no <concept> placeholder");
    const std::size_t cut = text.find(kStimulusSlot);
    ConceptTemplate tpl;
    tpl.concept_name = concept_name;
    tpl.prefix = text.substr(0, cut);
    tpl.suffix = text.substr(cut + std::string(kStimulusSlot).size());
    return tpl;
}

ConceptTemplate default_concept_template(const std::string& concept_name) {
    return ConceptTemplate::from_text(
        concept_name,
        "Consider the amount of <concept> in the following:\n"
        "<stimulus>\n"
        "The amount of <concept> is ");
}

void FunctionTemplate::validate() const {
    for (const std::string* side : {&experimental, &reference}) {
        if (count_occurrences(*side, kOutputSlot) != 1)
            throw SchemaError("function template needs exactly one <output> placeholder");
    }
    if (experimental == reference)
        throw SchemaError("experimental and reference templates are identical");
}

FunctionTemplate default_honesty_template() {
    FunctionTemplate tpl;
    tpl.experimental =
        "USER: Pretend you're an honest person making statements about the world.\n"
        "ASSISTANT: <output>";
    tpl.reference =
        "USER: Pretend you're a dishonest person making statements about the world.\n"
        "ASSISTANT: <output>";
    return tpl;
}

void StimulusRecord::validate() const {
    const bool has_pair = instruction.has_value() || output.has_value();
    if (text && has_pair)
        throw SchemaError("record carries both text and instruction/output");
    if (!text && !has_pair)
        throw SchemaError("record carries neither text nor instruction/output");
    if (has_pair && !(instruction && output))
        throw SchemaError("instruction and output must appear together");
    if (label && *label != 0 && *label != 1) throw SchemaError("label must be 0 or 1");
    if (plant) {
        if (plant->vector.empty()) throw SchemaError("plant vector is empty");
        check_finite(plant->vector, "plant vector");
    }
}

ConceptRender render_concept_ex(const ConceptTemplate& tpl, const StimulusRecord& s) {
    const std::string& stim = record_text(s);
    const Substituted head = substitute(tpl.prefix, kConceptSlot, tpl.concept_name);
    const Substituted tail = substitute(tpl.suffix, kConceptSlot, tpl.concept_name);
    ConceptRender out;
    out.text = head.text + stim + tail.text;
    const std::size_t shift = head.text.size() + stim.size();
    if (tail.any) {
        out.concept_begin = shift + tail.last_begin;
        out.concept_end = shift + tail.last_end;
    } else if (head.any) {
        out.concept_begin = head.last_begin;
        out.concept_end = head.last_end;
    } else {
        throw SchemaError("concept template mentions no <concept> placeholder");
    }
    return out;
}

std::string render_concept(const ConceptTemplate& tpl, const StimulusRecord& s) {
    return render_concept_ex(tpl, s).text;
}

FunctionRender render_template_text(const std::string& tpl_text, const std::string& q,
                                    const std::string& a_prefix) {
    if (count_occurrences(tpl_text, kOutputSlot) != 1)
        throw SchemaError("template needs exactly one <output> placeholder");
    std::string body = substitute(tpl_text, kInstructionSlot, q).text;
    FunctionRender out;
    const std::size_t cut = body.find(kOutputSlot);
    out.text = body.substr(0, cut);  // anything after the output slot is dropped
    if (a_prefix.empty()) {
        rstrip(out.text);
        out.response_begin = out.text.size();
    } else {
        out.response_begin = out.text.size();
        out.text += a_prefix;
    }
    return out;
}

FunctionRender render_function_ex(const FunctionTemplate& tpl, const std::string& q,
                                  const std::string& a_prefix, PromptSide which) {
    tpl.validate();
    const std::string& side =
        which == PromptSide::Experimental ? tpl.experimental : tpl.reference;
    return render_template_text(side, q, a_prefix);
}

std::string render_function(const FunctionTemplate& tpl, const std::string& q,
                            const std::string& a_prefix, PromptSide which) {
    return render_function_ex(tpl, q, a_prefix, which).text;
}

std::vector<std::string> truncations(const std::string& a) {
    if (a.empty()) throw EmptyOutput("cannot truncate an empty output");
    std::vector<std::string> out;
    out.reserve(a.size());
    for (std::size_t k = 1; k <= a.size(); ++k) out.push_back(a.substr(0, k));
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> pair_random(
    const std::vector<StimulusRecord>& records, std::uint64_t seed, PairMode mode) {
    if (records.size() < 2) throw TooFewRecords("need at least two records to pair");
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    if (mode == PairMode::Random) {
        std::vector<std::size_t> order(records.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(seed, 0));
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[rng.next_below(i + 1)]);
        for (std::size_t t = 0; t + 1 < order.size(); t += 2)
            pairs.emplace_back(order[t], order[t + 1]);
        return pairs;
    }
    std::vector<std::size_t> high, low;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!records[i].label)
            throw DegenerateLabels("labeled pairing needs a label on every record");
        (*records[i].label == 1 ? high : low).push_back(i);
    }
    if (high.empty() || low.empty())
        throw DegenerateLabels("labeled pairing needs both labels present");
    Rng hi_rng(derive_seed(seed, 1));
    Rng lo_rng(derive_seed(seed, 2));
    for (std::size_t i = high.size() - 1; i > 0; --i)
        std::swap(high[i], high[hi_rng.next_below(i + 1)]);
    for (std::size_t i = low.size() - 1; i > 0; --i)
        std::swap(low[i], low[lo_rng.next_below(i + 1)]);
    const std::size_t n = std::min(high.size(), low.size());
    for (std::size_t t = 0; t < n; ++t) pairs.emplace_back(high[t], low[t]);
    return pairs;
}

std::vector<std::pair<std::size_t, std::size_t>> pairs_from_ids(
    const std::vector<StimulusRecord>& records) {
    std::map<std::int64_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].pair_id) groups[*records[i].pair_id].push_back(i);
    if (groups.empty()) throw TooFewRecords("no records carry a pair_id");
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::size_t t = 0;
    for (const auto& [id, members] : groups) {
        if (members.size() != 2)
            throw SchemaError("pair_id " + std::to_string(id) + " has " +
                              std::to_string(members.size()) + " members, expected 2");
        if (t % 2 == 0)
            pairs.emplace_back(members[0], members[1]);
        else
            pairs.emplace_back(members[1], members[0]);
        ++t;
    }
    return pairs;
}

namespace {

double on_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

Vec random_unit(Rng& rng, std::size_t d) {
    Vec v(d);
    double norm_sq = 0.0;
    do {
        for (std::size_t j = 0; j < d; ++j) v[j] = rng.next_gaussian();
        norm_sq = dot(v, v);
    } while (norm_sq < 1e-12);
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& x : v) x *= inv;
    return v;
}

std::string random_sentence(Rng& rng) {
    static const char* kSyllables[] = {"ba", "de", "ki", "lo", "mu", "na", "re", "si",
                                       "to", "vu", "pa", "ge", "hi", "zo", "ru", "wa"};
    constexpr std::size_t kSyllableCount = sizeof(kSyllables) / sizeof(kSyllables[0]);
    std::ostringstream out;
    const std::size_t words = 3 + rng.next_below(5);
    for (std::size_t w = 0; w < words; ++w) {
        if (w) out << ' ';
        const std::size_t parts = 2 + rng.next_below(2);
        for (std::size_t p = 0; p < parts; ++p) out << kSyllables[rng.next_below(kSyllableCount)];
    }
    out << '.';
    return out.str();
}

}  // namespace

std::vector<EditPlan> PlantedFixture::plans() const { return plans_for_records(records); }

PlantedFixture make_planted_fixture(std::uint64_t seed, const ModelConfig& config,
                                    std::size_t n_records, double coefficient, double sigma,
                                    std::size_t layer) {
    if (layer > config.n_layers)
        throw InvalidLayer("plant layer exceeds the deepest residual tap");
    if (n_records < 2) throw TooFewRecords("a planted fixture needs at least one pair");
    PlantedFixture fx;
    fx.model = init_model(config, derive_seed(seed, 0));
    Rng dir_rng(derive_seed(seed, 1));
    fx.direction = random_unit(dir_rng, config.d_model);
    fx.layer = layer;
    fx.coefficient = coefficient;
    fx.sigma = sigma;
    fx.seed = seed;

    Rng text_rng(derive_seed(seed, 2));
    Rng noise_rng(derive_seed(seed, 3));
    fx.records.reserve(n_records);
    std::string shared;
    for (std::size_t i = 0; i < n_records; ++i) {
        if (i % 2 == 0) shared = random_sentence(text_rng);
        StimulusRecord rec;
        rec.text = shared;  // pair members share text, so only the plant differs
        rec.label = static_cast<int>(i % 2 == 0 ? 1 : 0);
        rec.pair_id = static_cast<std::int64_t>(i / 2);
        const double sign = i % 2 == 0 ? 1.0 : -1.0;
        StimulusRecord::Plant plant;
        plant.layer = layer;
        plant.span = TokenSpan{SpanKind::LastToken, 0, 0};
        plant.vector.resize(config.d_model);
        for (std::size_t j = 0; j < config.d_model; ++j)
            plant.vector[j] =
                sign * coefficient * fx.direction[j] + sigma * noise_rng.next_gaussian();
        rec.plant = std::move(plant);
        fx.records.push_back(std::move(rec));
    }
    return fx;
}

EditPlan plan_for_record(const StimulusRecord& record) {
    EditPlan plan;
    if (!record.plant) return plan;
    EditStep step;
    step.layer = record.plant->layer;
    step.op = Operator{OpType::LinearCombination, 1, 1.0};
    step.controllers = {record.plant->vector};
    step.span = record.plant->span;
    plan.steps.push_back(std::move(step));
    return plan;
}

std::vector<EditPlan> plans_for_records(const std::vector<StimulusRecord>& records) {
    std::vector<EditPlan> plans;
    plans.reserve(records.size());
    for (const StimulusRecord& rec : records) plans.push_back(plan_for_record(rec));
    return plans;
}

SteeringFixture make_steering_fixture(std::uint64_t seed, const ModelConfig& config, int marker,
                                      double gain) {
    if (marker < 0 || static_cast<std::size_t>(marker) >= config.vocab_size)
        throw TokenOutOfRange("marker token outside the vocabulary");
    SteeringFixture fx;
    fx.model = init_model(config, derive_seed(seed, 0));
    Rng dir_rng(derive_seed(seed, 1));
    fx.direction = random_unit(dir_rng, config.d_model);
    fx.marker = marker;
    fx.gain = gain;
    fx.seed = seed;
    double* row = fx.model.tok_embedding.row(static_cast<std::size_t>(marker));
    for (std::size_t j = 0; j < config.d_model; ++j) row[j] = on_f32(gain * fx.direction[j]);
    return fx;
}

// --- JSONL ----------------------------------------------------------------

namespace {

nlohmann::json span_to_json(const TokenSpan& span) {
    switch (span.kind) {
        case SpanKind::All: return "all";
        case SpanKind::LastToken: return "last";
        case SpanKind::Range: break;
    }
    nlohmann::json j = nlohmann::json::array();
    j.push_back(span.begin);
    if (span.end == kSpanOpenEnd)
        j.push_back(nullptr);
    else
        j.push_back(span.end);
    return j;
}

TokenSpan span_from_json(const nlohmann::json& j, std::size_t line_no) {
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "all") return TokenSpan{SpanKind::All, 0, kSpanOpenEnd};
        if (s == "last") return TokenSpan{SpanKind::LastToken, 0, 0};
    } else if (j.is_array() && j.size() == 2 && j[0].is_number_unsigned() &&
               (j[1].is_null() || j[1].is_number_unsigned())) {
        TokenSpan span{SpanKind::Range, j[0].get<std::size_t>(), kSpanOpenEnd};
        if (!j[1].is_null()) span.end = j[1].get<std::size_t>();
        return span;
    }
    throw SchemaError("line " + std::to_string(line_no) + ": field 'plant.span' is malformed");
}

[[noreturn]] void bad_field(std::size_t line_no, const std::string& field,
                            const std::string& why) {
    throw SchemaError("line " + std::to_string(line_no) + ": field '" + field + "' " + why);
}

}  // namespace

nlohmann::json record_to_json(const StimulusRecord& record) {
    record.validate();
    nlohmann::json j = record.extra.is_object() ? record.extra : nlohmann::json::object();
    if (record.text) j["text"] = *record.text;
    if (record.instruction) j["instruction"] = *record.instruction;
    if (record.output) j["output"] = *record.output;
    if (record.label) j["label"] = *record.label;
    if (record.pair_id) j["pair_id"] = *record.pair_id;
    if (record.plant) {
        nlohmann::json p;
        p["layer"] = record.plant->layer;
        p["span"] = span_to_json(record.plant->span);
        p["vector"] = record.plant->vector;
        j["plant"] = std::move(p);
    }
    return j;
}

StimulusRecord record_from_json(const nlohmann::json& j, std::size_t line_no) {
    if (!j.is_object())
        throw SchemaError("line " + std::to_string(line_no) + ": record is not an object");
    StimulusRecord rec;
    for (const auto& [key, value] : j.items()) {
        if (key == "text") {
            if (!value.is_string()) bad_field(line_no, key, "must be a string");
            rec.text = value.get<std::string>();
        } else if (key == "instruction") {
            if (!value.is_string()) bad_field(line_no, key, "must be a string");
            rec.instruction = value.get<std::string>();
        } else if (key == "output") {
            if (!value.is_string()) bad_field(line_no, key, "must be a string");
            rec.output = value.get<std::string>();
        } else if (key == "label") {
            if (!value.is_number_integer() ||
                (value.get<std::int64_t>() != 0 && value.get<std::int64_t>() != 1))
                bad_field(line_no, key, "must be 0 or 1");
            rec.label = value.get<int>();
        } else if (key == "pair_id") {
            if (!value.is_number_integer()) bad_field(line_no, key, "must be an integer");
            rec.pair_id = value.get<std::int64_t>();
        } else if (key == "plant") {
            if (!value.is_object() || !value.contains("layer") || !value.contains("vector") ||
                !value.contains("span"))
                bad_field(line_no, key, "must be an object with layer, vector, span");
            StimulusRecord::Plant plant;
            if (!value["layer"].is_number_unsigned())
                bad_field(line_no, "plant.layer", "must be a non-negative integer");
            plant.layer = value["layer"].get<std::size_t>();
            if (!value["vector"].is_array() || value["vector"].empty())
                bad_field(line_no, "plant.vector", "must be a non-empty number array");
            plant.vector.reserve(value["vector"].size());
            for (const auto& x : value["vector"]) {
                if (!x.is_number()) bad_field(line_no, "plant.vector", "must hold numbers");
                plant.vector.push_back(x.get<double>());
            }
            plant.span = span_from_json(value["span"], line_no);
            rec.plant = std::move(plant);
        } else {
            rec.extra[key] = value;
        }
    }
    try {
        rec.validate();
    } catch (const SchemaError& e) {
        throw SchemaError("line " + std::to_string(line_no) + ": " + e.what());
    }
    return rec;
}

std::vector<StimulusRecord> load_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<StimulusRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        records.push_back(record_from_json(j, line_no));
    }
    return records;
}

void save_jsonl(const std::vector<StimulusRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const StimulusRecord& rec : records) out << record_to_json(rec).dump() << '\n';
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace repe
