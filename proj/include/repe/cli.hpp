#pragma once

// Command-line surface. cli_main parses one subcommand (synth, fit, scan,
// control, lorra, eval), runs the matching pipeline stage, and writes its
// artifacts under --out. Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric
// failure. The scan artifact builders are exposed for direct testing.

#include <cstddef>
#include <string>
#include <vector>

#include "repe/reading.hpp"

namespace repe {

// Inclusive "a..b[:step]" or a single "n". Throws InvalidLayer on anything
// else (empty, non-numeric, reversed bounds, zero step).
std::vector<std::size_t> parse_layer_range(const std::string& text);

// One row per scanned layer plus the aggregate row; `tokens` labels the
// columns and is quoted so byte tokens like commas stay parseable. Numbers
// use %.17g so re-runs are byte-stable.
std::string scan_csv(const ScanResult& scan, const std::vector<std::string>& tokens);

// Diverging heatmap with the aggregate row on top, colors clipped at three
// aggregate-row standard deviations.
std::string scan_svg(const ScanResult& scan);

int cli_main(int argc, char** argv);

}  // namespace repe
